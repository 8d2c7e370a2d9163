"""Desk-scale networks with hand-written backward passes.

Every network is a weight-shared per-patch two-layer perceptron, so a feature
column only ever sees its own image patch. Parameters live in float64 arrays
but are rounded to float32 after each optimizer step, which is also what the
checkpoint stores; a reload is therefore lossless.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (ArgumentError, MissingFileError, ShapeMismatchError, StateError,
                   check_finite, decode_tensor, encode_tensor, Rng)


def patchify(images: np.ndarray, grid) -> np.ndarray:
    """(B, C, H, W) -> (B, gh*gw, C*ph*pw), patches in row-major grid order."""
    B, C, H, W = images.shape
    gh, gw = grid
    if H % gh or W % gw:
        raise ArgumentError(f"image {H}x{W} not divisible by grid {gh}x{gw}")
    ph, pw = H // gh, W // gw
    x = images.reshape(B, C, gh, ph, gw, pw).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, gh * gw, C * ph * pw)


def unpatchify(patches: np.ndarray, grid, shape) -> np.ndarray:
    C, H, W = shape
    gh, gw = grid
    B = patches.shape[0]
    ph, pw = H // gh, W // gw
    x = patches.reshape(B, gh, gw, C, ph, pw).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(B, C, H, W)


def _outer_sum(a, b):
    """``sum_{batch, position} a^T b`` for (..., m) and (..., n) arrays."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _init(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    w = rng.normal((fan_in, fan_out), scale=math.sqrt(2.0 / fan_in))
    return w.astype(np.float32).astype(np.float64)


class _Module:
    params: dict
    _hinge_slot = None   # cache slot of the pre-ReLU activations, if any

    def __init__(self):
        self._cache = None

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a retained forward")
        cache, self._cache = self._cache, None
        return cache


class PatchBackbone(_Module):
    """Per-patch ``Linear -> ReLU -> Linear`` producing a ``c x gh x gw`` feature map."""

    _hinge_slot = 1

    def __init__(self, in_channels: int, image_hw, grid, hidden: int, out_dim: int, rng: Rng):
        super().__init__()
        H, W = image_hw
        gh, gw = grid
        if H % gh or W % gw:
            raise ArgumentError(f"image {H}x{W} not divisible by grid {gh}x{gw}")
        self.in_channels, self.image_hw, self.grid = in_channels, (H, W), (gh, gw)
        self.hidden, self.out_dim = hidden, out_dim
        d = in_channels * (H // gh) * (W // gw)
        self.params = {
            "W1": _init(rng, d, hidden),
            "b1": np.zeros(hidden),
            "W2": _init(rng, hidden, out_dim),
            "b2": np.zeros(out_dim),
        }

    def forward(self, images, keep: bool = False) -> np.ndarray:
        images = np.asarray(images)
        single = images.ndim == 3
        if single:
            images = images[None]
        if images.shape[1:] != (self.in_channels, *self.image_hw):
            raise ArgumentError(f"backbone expects {(self.in_channels, *self.image_hw)}, got {images.shape[1:]}")
        p = self.params
        x = patchify(images.astype(np.float64), self.grid)
        z = x @ p["W1"] + p["b1"]
        a = np.maximum(z, 0.0)
        f = a @ p["W2"] + p["b2"]
        if keep:
            self._cache = (x, z, a)
        B = images.shape[0]
        out = f.reshape(B, *self.grid, self.out_dim).transpose(0, 3, 1, 2)
        return out[0] if single else out

    __call__ = forward

    def backward(self, dfeats) -> dict:
        x, z, a = self._take_cache()
        dfeats = np.asarray(dfeats)
        if dfeats.ndim == 3:
            dfeats = dfeats[None]
        B = dfeats.shape[0]
        df = dfeats.transpose(0, 2, 3, 1).reshape(B, -1, self.out_dim)
        p = self.params
        g = {"W2": _outer_sum(a, df), "b2": df.sum(axis=(0, 1))}
        dz = (df @ p["W2"].T) * (z > 0)
        g["W1"] = _outer_sum(x, dz)
        g["b1"] = dz.sum(axis=(0, 1))
        return g


class GlobalClassifier(_Module):
    """Per-position linear map ``c -> n_base`` (a 1x1 convolution)."""

    def __init__(self, in_dim: int, n_classes: int, rng: Rng):
        super().__init__()
        self.in_dim, self.n_classes = in_dim, n_classes
        self.params = {"W": _init(rng, in_dim, n_classes) * 0.5, "b": np.zeros(n_classes)}

    def forward(self, feats, keep: bool = False) -> np.ndarray:
        """(B, c, gh, gw) -> per-position logits (B, gh, gw, n_classes)."""
        f = np.asarray(feats, dtype=np.float64)
        single = f.ndim == 3
        f = (f[None] if single else f).transpose(0, 2, 3, 1)
        if keep:
            self._cache = f
        out = f @ self.params["W"] + self.params["b"]
        return out[0] if single else out

    __call__ = forward

    def logits(self, feats) -> np.ndarray:
        """Image-level logits: per-position logits averaged over the grid."""
        return self.forward(feats).mean(axis=(1, 2))

    def backward(self, dlogits) -> tuple[dict, np.ndarray]:
        f = self._take_cache()
        g = {"W": _outer_sum(f, dlogits), "b": dlogits.sum(axis=(0, 1, 2))}
        dfeats = (dlogits @ self.params["W"].T).transpose(0, 3, 1, 2)
        return g, dfeats


class PatchDecoder(_Module):
    """Mirror of :class:`PatchBackbone`: per-cell ``c -> hidden -> patch pixels``."""

    _hinge_slot = 1

    def __init__(self, in_dim: int, hidden: int, out_channels: int, image_hw, grid, rng: Rng):
        super().__init__()
        H, W = image_hw
        gh, gw = grid
        self.in_dim, self.out_channels = in_dim, out_channels
        self.image_hw, self.grid = (H, W), (gh, gw)
        d = out_channels * (H // gh) * (W // gw)
        self.params = {
            "W1": _init(rng, in_dim, hidden),
            "b1": np.zeros(hidden),
            "W2": _init(rng, hidden, d) * 0.5,
            "b2": np.zeros(d),
        }

    def forward(self, feats, keep: bool = False) -> np.ndarray:
        feats = np.asarray(feats, dtype=np.float64)
        B = feats.shape[0]
        f = feats.transpose(0, 2, 3, 1).reshape(B, -1, self.in_dim)
        p = self.params
        z = f @ p["W1"] + p["b1"]
        a = np.maximum(z, 0.0)
        out = a @ p["W2"] + p["b2"]
        if keep:
            self._cache = (f, z, a)
        return unpatchify(out, self.grid, (self.out_channels, *self.image_hw))

    __call__ = forward

    def backward(self, dimages) -> tuple[dict, np.ndarray]:
        f, z, a = self._take_cache()
        dout = patchify(np.asarray(dimages, dtype=np.float64), self.grid)
        p = self.params
        g = {"W2": _outer_sum(a, dout), "b2": dout.sum(axis=(0, 1))}
        dz = (dout @ p["W2"].T) * (z > 0)
        g["W1"] = _outer_sum(f, dz)
        g["b1"] = dz.sum(axis=(0, 1))
        df = dz @ p["W1"].T
        B = df.shape[0]
        dfeats = df.reshape(B, *self.grid, self.in_dim).transpose(0, 3, 1, 2)
        return g, dfeats


@dataclass
class FewShotModel:
    backbone: PatchBackbone
    classifier: GlobalClassifier
    decoder: PatchDecoder

    def modules(self):
        return {"backbone": self.backbone, "classifier": self.classifier, "decoder": self.decoder}

    def named_params(self) -> dict:
        return {f"{m}.{k}": v for m, mod in self.modules().items() for k, v in mod.params.items()}

    def features(self, images) -> np.ndarray:
        return self.backbone.forward(images)

    def load_params(self, params: dict) -> None:
        mine = self.named_params()
        missing = set(mine) - set(params)
        if missing:
            raise ShapeMismatchError(f"checkpoint lacks {sorted(missing)}")
        for name, arr in mine.items():
            src = np.asarray(params[name])
            if src.shape != arr.shape:
                raise ShapeMismatchError(f"{name}: checkpoint shape {src.shape} != model {arr.shape}")
            arr[...] = src.astype(np.float64)

    def copy(self) -> "FewShotModel":
        import copy
        clone = copy.deepcopy(self)
        for mod in clone.modules().values():
            mod._cache = None
        return clone


def build_model(in_channels, image_hw, grid, hidden, feat_dim, n_base, rng: Rng) -> FewShotModel:
    r_bb, r_gc, r_dec = rng.split(3)
    return FewShotModel(
        PatchBackbone(in_channels, image_hw, grid, hidden, feat_dim, r_bb),
        GlobalClassifier(feat_dim, n_base, r_gc),
        PatchDecoder(feat_dim, hidden, in_channels, image_hw, grid, r_dec),
    )


# ------------------------------------------------------------------ optimizer

def cosine_lr(lr0: float, t: int, total: int) -> float:
    if total <= 0:
        return lr0
    t = min(max(t, 0), total)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


class SGD:
    """Momentum SGD; weight decay is added to the gradient as an L2 term."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf: dict = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            check_finite(g, f"gradient of {name}")
            d = g + self.weight_decay * p
            if self.momentum:
                v = self.buf.get(name)
                v = d.copy() if v is None else self.momentum * v + d
                self.buf[name] = v
                d = v
            p -= lr * d
            p[...] = p.astype(np.float32)


def clip_grads(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the norm before clipping.
    ``max_norm <= 0`` disables clipping.
    """
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        grads = {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads, norm


def sgd_step(params: dict, grads: dict, lr: float, weight_decay: float = 0.0,
             momentum: float = 0.0, state: dict | None = None) -> dict:
    """Functional form of :class:`SGD` returning new arrays; ``state`` holds velocities."""
    opt = SGD(momentum, weight_decay)
    if state is not None:
        opt.buf = state
    new = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    opt.step(new, grads, lr)
    return new


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: dict) -> None:
    """Write ``path`` (PMX1 tensors back to back) and ``path.idx`` (name, offset, bytes)."""
    path = Path(path)
    blobs, lines, offset = [], [], 0
    for name in sorted(params):
        blob = encode_tensor(params[name])
        lines.append(f"{name}\t{offset}\t{len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    path.write_bytes(b"".join(blobs))
    Path(str(path) + ".idx").write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict:
    path = Path(path)
    idx = Path(str(path) + ".idx")
    for p in (path, idx):
        if not p.exists():
            raise MissingFileError(str(p))
    buf = path.read_bytes()
    out = {}
    for line in idx.read_text().splitlines():
        if not line.strip():
            continue
        name, off, size = line.split("\t")
        arr, end = decode_tensor(buf, int(off))
        if end - int(off) != int(size):
            raise ShapeMismatchError(f"{name}: index size {size} disagrees with tensor")
        out[name] = arr
    return out


def file_digest(path) -> str:
    h = hashlib.sha256()
    for p in (Path(path), Path(str(path) + ".idx")):
        if p.exists():
            h.update(p.read_bytes())
    return h.hexdigest()


def _hinges(module, inp):
    if module._hinge_slot is None:
        return None
    module.forward(inp, keep=True)
    cache, module._cache = module._cache, None
    return cache[module._hinge_slot] > 0


def gradcheck(module, inputs, rng: Rng, eps: float = 1e-3, samples: int = 24,
              max_draws: int = 2000) -> dict:
    """Central finite differences against ``module.backward`` under a squared loss.

    The loss is ``0.5 * mean((module(inputs) - target)**2)`` for a random
    target. For each parameter tensor, ``samples`` random coordinates are
    perturbed by ``+-eps`` and the relative error
    ``|g - fd| / max(|g|, |fd|)`` (norms over the sampled coordinates) is
    reported. The ``"input"`` entry checks the gradient passed downstream,
    when the module returns one.

    A coordinate whose stencil flips any ReLU between ``-eps`` and ``+eps``
    straddles a hinge, where the derivative being checked does not exist; such
    coordinates are redrawn and counted under ``"skipped"``.
    """
    x = np.asarray(inputs, dtype=np.float64)
    target = rng.normal(module.forward(x).shape)

    def loss(inp):
        d = module.forward(inp) - target
        return 0.5 * float((d * d).mean())

    out = module.forward(x, keep=True)
    res = module.backward((out - target) / out.size)
    grads, dinput = res if isinstance(res, tuple) else (res, None)

    def rel(a, b):
        a, b = np.asarray(a), np.asarray(b)
        scale = max(np.linalg.norm(a), np.linalg.norm(b))
        return float(np.linalg.norm(a - b) / scale) if scale > 0 else 0.0

    skipped = 0

    def probe(arr, grad, setter):
        nonlocal skipped
        an, fd = [], []
        order = rng.permutation(arr.size)[:max_draws]
        for f in order:
            if len(an) == samples:
                break
            idx = np.unravel_index(int(f), arr.shape)
            plus, minus = setter(idx, +eps), setter(idx, -eps)
            hp, hm = _hinges(module, plus()), _hinges(module, minus())
            kinked = hp is not None and not np.array_equal(hp, hm)
            if not kinked:
                lp, lm = loss(plus()), loss(minus())
            setter(idx, 0.0)()
            if kinked:
                skipped += 1
                continue
            an.append(grad[idx])
            fd.append((lp - lm) / (2 * eps))
        if len(an) < min(samples, arr.size):
            raise StateError("too few hinge-free coordinates for a finite-difference check")
        return rel(an, fd)

    report = {}
    for name, p in module.params.items():
        def set_param(idx, d, p=p, base=p.copy()):
            def apply():
                p[idx] = base[idx] + d
                return x
            return apply
        report[name] = probe(p, grads[name], set_param)
    if dinput is not None:
        def set_input(idx, d):
            def apply():
                xx = x.copy()
                xx[idx] += d
                return xx
            return apply
        report["input"] = probe(x, dinput, set_input)
    report["skipped"] = skipped
    return report
