"""Unsupervised pretraining: contrastive losses, momentum key encoder, k-means pseudo-labels.

All contrastive losses are InfoNCE over cosine similarities and are *summed*
over queries (and positions). Negatives are the other in-batch keys plus an
optional bank of earlier keys.
"""
from __future__ import annotations

import csv
import logging
from collections import deque

import numpy as np

from . import augment as aug
from .core import ArgumentError, DegenerateInputError, NumericalError, Rng, log_softmax
from .datasets import LabeledDataset
from .nets import SGD, FewShotModel, clip_grads, cosine_lr

log = logging.getLogger(__name__)

MAX_KMEANS_ITERS = 100


def _unit(x, axis):
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if np.any(n == 0):
        raise DegenerateInputError("zero-norm vector in contrastive loss")
    return x / n, n


def _keys(kbar, bank):
    k = np.asarray(kbar, dtype=np.float64)
    if bank is not None and len(bank):
        k = np.concatenate([k, np.asarray(bank, dtype=np.float64)])
    return _unit(k, 1)[0]


def patchmoco_loss_grad(q_maps, kbar, switch_masks, T: float, bank=None):
    """Masked dense InfoNCE and its gradient w.r.t. ``q_maps`` (B, c, h, w).

    Position (s, t) of query i is positive with key i; every other key, and
    every bank entry, is a negative. Terms are weighted by ``switch_masks``
    (B, h, w), so switched positions contribute exactly zero.
    """
    if not T > 0:
        raise ArgumentError(f"temperature must be positive, got {T}")
    q = np.asarray(q_maps, dtype=np.float64)
    B = q.shape[0]
    if len(kbar) != B:
        raise ArgumentError(f"{B} queries but {len(kbar)} keys")
    mask = np.asarray(switch_masks, dtype=np.float64)
    if mask.shape != (B, *q.shape[2:]):
        raise ArgumentError(f"mask shape {mask.shape} does not match maps {q.shape}")
    k = _keys(kbar, bank)
    n = np.sqrt((q * q).sum(axis=1, keepdims=True))
    # a cell whose ReLU units are all dead has no direction: drop it like a switched cell
    dead = n == 0
    mask = np.where(dead[:, 0], 0.0, mask)
    n = np.where(dead, 1.0, n)
    u = q / n
    logits = np.einsum("bcst,jc->bjst", u, k) / T
    lp = log_softmax(logits, axis=1)
    pos = lp[np.arange(B), np.arange(B)]              # (B, h, w)
    loss = float((-pos * mask).sum())
    # d/dlogits of -log p_pos = softmax - onehot, weighted by the mask
    dlog = np.exp(lp)
    dlog[np.arange(B), np.arange(B)] -= 1.0
    dlog *= mask[:, None]
    du = np.einsum("bjst,jc->bcst", dlog, k) / T
    dq = (du - (du * u).sum(axis=1, keepdims=True) * u) / n
    return loss, dq


def patchmoco_loss(q_maps, kbar, switch_masks, T: float, bank=None) -> float:
    return patchmoco_loss_grad(q_maps, kbar, switch_masks, T, bank)[0]


def dense_loss(q_maps, kbar, T: float, bank=None) -> float:
    q = np.asarray(q_maps)
    return patchmoco_loss(q, kbar, np.ones((q.shape[0], *q.shape[2:])), T, bank)


def moco_loss(qbar, kbar, T: float, bank=None) -> float:
    q = np.asarray(qbar, dtype=np.float64)
    return dense_loss(q[:, :, None, None], kbar, T, bank)


class MomentumEncoder:
    """Key-side copy of the backbone updated as ``key = m*key + (1-m)*query``."""

    def __init__(self, backbone, momentum: float = 0.99):
        if not 0.0 <= momentum < 1.0:
            raise ArgumentError("momentum must lie in [0, 1)")
        import copy
        self.net = copy.deepcopy(backbone)
        self.net._cache = None
        self.momentum = momentum

    def update(self, query_params: dict) -> None:
        m = self.momentum
        for name, p in self.net.params.items():
            p *= m
            p += (1.0 - m) * query_params[name]

    def encode(self, images) -> np.ndarray:
        return self.net.forward(images).mean(axis=(-2, -1))


class KeyBank:
    """Fixed-size FIFO of unit key vectors."""

    def __init__(self, size: int):
        self.items = deque(maxlen=max(size, 0))

    def __len__(self):
        return len(self.items)

    def push(self, keys) -> None:
        if self.items.maxlen == 0:
            return
        for k in _unit(np.asarray(keys, dtype=np.float64), 1)[0]:
            self.items.append(k)

    def array(self):
        return np.stack(self.items) if self.items else None


def _lloyd(x, k, rng: Rng):
    n = len(x)
    centers = x[rng.choice(n, k, replace=False)].copy()
    inertias = []
    labels = None
    for _ in range(MAX_KMEANS_ITERS):
        d = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new = d.argmin(axis=1)
        inertias.append(float(d[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
            else:
                far = int(d[np.arange(n), labels].argmax())
                centers[c] = x[far]
                labels[far] = c
                d[far] = 0.0
    return labels, inertias


def kmeans_pseudolabels(features, k: int, n_partitions: int, rng: Rng, return_inertia: bool = False):
    """``n_partitions`` independent Lloyd clusterings of ``features`` (n, d).

    Each partition draws its own initial centers. Empty clusters are reseeded
    from the point farthest from its assigned center.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ArgumentError("features must be (n, d)")
    if k < 1 or k > len(x):
        raise ArgumentError(f"need 1 <= k <= n, got k={k}, n={len(x)}")
    out, traces = [], []
    for child in rng.split(n_partitions):
        labels, inertia = _lloyd(x, k, child)
        out.append(labels)
        traces.append(inertia)
    return (out, traces) if return_inertia else out


def write_pseudolabels(path, partitions) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_index", "partition", "cluster"])
        for p, labels in enumerate(partitions):
            for i, c in enumerate(labels):
                w.writerow([i, p, int(c)])


def _view(images, rng: Rng):
    """Cheap photometric view: random per-image gain and offset plus pixel noise."""
    B = len(images)
    gain = 1.0 + 0.2 * rng.normal((B, 1, 1, 1))
    offset = 0.1 * rng.normal((B, 1, 1, 1))
    return gain * images + offset + 0.05 * rng.normal(images.shape)


def pretrain(model: FewShotModel, ds: LabeledDataset, cfg, rng: Rng) -> list:
    """PatchMoCo pretraining of ``model.backbone`` on unlabeled images.

    Each query view has a box pasted from another image of the batch; the
    cells it covers are dropped from the dense loss. Returns per-epoch losses.
    """
    bb = model.backbone
    enc = MomentumEncoder(bb, cfg.key_momentum)
    bank = KeyBank(cfg.key_bank)
    opt = SGD(cfg.momentum, cfg.weight_decay)
    params = {f"backbone.{k}": v for k, v in bb.params.items()}
    n = len(ds.images)
    bs = min(cfg.pretrain_batch, n)
    steps_per_epoch = max(n // bs, 1)
    total = cfg.pretrain_epochs * steps_per_epoch
    grid = bb.grid
    history, step = [], 0
    for epoch in range(cfg.pretrain_epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * bs:(s + 1) * bs]
            imgs = ds.images[idx].astype(np.float64)
            qv, kv = _view(imgs, rng), _view(imgs, rng)
            partner = np.roll(np.arange(len(idx)), 1)
            mixed, masks = [], []
            for i in range(len(idx)):
                m, spec = aug.patchmix(qv[i], kv[partner[i]], 0, 1, grid, rng)
                mixed.append(m)
                masks.append(~spec.cells)
            kbar = enc.encode(kv)
            qmaps = bb.forward(np.stack(mixed), keep=True)
            loss, dq = patchmoco_loss_grad(qmaps, kbar, np.stack(masks), cfg.moco_temperature,
                                           bank.array())
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite contrastive loss at epoch {epoch + 1}")
            grads = {f"backbone.{k}": v for k, v in bb.backward(dq / len(idx)).items()}
            grads, _ = clip_grads(grads, cfg.clip_norm)
            opt.step(params, grads, cosine_lr(cfg.lr, step, total))
            enc.update(bb.params)
            bank.push(kbar)
            losses.append(loss / len(idx))
            step += 1
        history.append(float(np.mean(losses)))
        log.info("pretrain epoch %d loss %.4f", epoch + 1, history[-1])
    return history
