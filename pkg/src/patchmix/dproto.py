"""Prototype head: class prototypes, per-position cosine maps, losses, inference.

Value functions come paired with ``*_backward`` helpers used by the training
objective. Feature maps are ``(c, h, w)`` for one image or ``(B, c, h, w)``.
"""
from __future__ import annotations

import numpy as np

from .core import ArgumentError, DegenerateInputError, log_softmax, softmax

DEFAULT_SCALE = 10.0


def spatial_mean(feats) -> np.ndarray:
    return np.asarray(feats, dtype=np.float64).mean(axis=(-2, -1))


def prototypes(support_features, labels, way: int, shot: int) -> np.ndarray:
    """Mean over the ``shot`` supports of each class of their spatially averaged features."""
    f = np.asarray(support_features, dtype=np.float64)
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=way)
    if len(counts) != way or np.any(counts != shot):
        raise ArgumentError(f"expected {shot} supports for each of {way} classes, got {counts.tolist()}")
    bar = spatial_mean(f)
    protos = np.zeros((way, bar.shape[1]))
    np.add.at(protos, labels, bar)
    return protos / shot


def prototypes_backward(dprotos, labels, shot: int, fmap_shape) -> np.ndarray:
    c, h, w = fmap_shape
    d = np.asarray(dprotos)[np.asarray(labels)] / (shot * h * w)
    return np.broadcast_to(d[:, :, None, None], (len(labels), c, h, w)).copy()


def _norms(x, axis, what):
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if np.any(n == 0):
        raise DegenerateInputError(f"zero-norm {what}")
    return n


def confidence_map(query_features, protos) -> np.ndarray:
    """Cosine between every query column and every prototype: ``(..., N, h, w)``."""
    q = np.asarray(query_features, dtype=np.float64)
    p = np.asarray(protos, dtype=np.float64)
    if q.shape[-3] != p.shape[1]:
        raise ArgumentError(f"feature dim {q.shape[-3]} != prototype dim {p.shape[1]}")
    u = q / _norms(q, -3, "query feature column")
    v = p / _norms(p, 1, "prototype")
    conf = np.moveaxis(np.moveaxis(u, -3, -1) @ v.T, -1, -3)
    return np.clip(conf, -1.0, 1.0)


def confidence_map_backward(query_features, protos, dconf):
    """Gradients of a scalar w.r.t. the query features and prototypes."""
    q = np.asarray(query_features, dtype=np.float64)
    p = np.asarray(protos, dtype=np.float64)
    nq = _norms(q, -3, "query feature column")
    npr = _norms(p, 1, "prototype")
    u, v = q / nq, p / npr
    du = np.moveaxis(np.moveaxis(dconf, -3, -1) @ v, -1, -3)
    dq = (du - (du * u).sum(axis=-3, keepdims=True) * u) / nq
    n, c = dconf.shape[-3], u.shape[-3]
    dv = np.moveaxis(dconf, -3, -1).reshape(-1, n).T @ np.moveaxis(u, -3, -1).reshape(-1, c)
    dp = (dv - (dv * v).sum(axis=1, keepdims=True) * v) / npr
    return dq, dp


def as_targets(y, n: int, hw) -> np.ndarray:
    """Turn an int, an ``h x w`` label map, an ``n`` soft label or an ``n x h x w`` map
    into per-position target distributions of shape ``(n, h, w)``."""
    h, w = hw
    y = np.asarray(y)
    if y.dtype.kind in "iu":
        if np.any(y < 0) or np.any(y >= n):
            raise ArgumentError(f"label out of range 0..{n - 1}")
        y = np.broadcast_to(y, (h, w))
        return (np.arange(n)[:, None, None] == y[None]).astype(np.float64)
    y = y.astype(np.float64)
    if y.shape == (n,):
        return np.broadcast_to(y[:, None, None], (n, h, w)).astype(np.float64)
    if y.shape == (n, h, w):
        return y
    raise ArgumentError(f"cannot interpret target of shape {y.shape} for {n} classes on {h}x{w}")


def _batch_targets(targets, n, hw, batch):
    if batch is None:
        return as_targets(targets, n, hw)
    if not isinstance(targets, np.ndarray) and all(np.ndim(t) == 2 for t in targets):
        targets = np.stack(targets)         # all hard label maps: one-hot in one go
    if isinstance(targets, np.ndarray) and targets.dtype.kind in "iu" and targets.ndim == 3:
        if np.any(targets < 0) or np.any(targets >= n):
            raise ArgumentError(f"label out of range 0..{n - 1}")
        return np.moveaxis(np.eye(n)[targets], -1, 1)
    return np.stack([as_targets(t, n, hw) for t in targets])


def position_ce(logits, targets) -> tuple[float, np.ndarray]:
    """Mean over positions (and batch) of cross-entropy; class axis is ``-3``.

    Returns the loss and its gradient w.r.t. ``logits``.
    """
    lp = log_softmax(logits, axis=-3)
    count = lp.size // lp.shape[-3]
    loss = -(targets * lp).sum() / count
    grad = (np.exp(lp) * targets.sum(axis=-3, keepdims=True) - targets) / count
    return float(loss), grad


def fewshot_loss(conf, label_map, scale: float = DEFAULT_SCALE) -> float:
    conf = np.asarray(conf, dtype=np.float64)
    batch = conf.shape[0] if conf.ndim == 4 else None
    t = _batch_targets(label_map, conf.shape[-3], conf.shape[-2:], batch)
    return position_ce(scale * conf, t)[0]


def fewshot_loss_grad(conf, label_map, scale: float = DEFAULT_SCALE):
    conf = np.asarray(conf, dtype=np.float64)
    batch = conf.shape[0] if conf.ndim == 4 else None
    t = _batch_targets(label_map, conf.shape[-3], conf.shape[-2:], batch)
    loss, g = position_ce(scale * conf, t)
    return loss, scale * g


def global_loss(query_features, classifier, base_label) -> float:
    """Cross-entropy of the global classifier.

    An integer label (or a soft vector over base classes) supervises the
    spatially averaged logits; an ``h x w`` label map supervises every position.
    """
    return global_loss_grad(query_features, classifier, base_label, keep=False)[0]


def global_loss_grad(query_features, classifier, base_label, keep: bool = True):
    f = np.asarray(query_features, dtype=np.float64)
    single = f.ndim == 3
    if single:
        f = f[None]
        base_label = [base_label]
    n = classifier.n_classes
    logits = classifier.forward(f, keep=keep)  # (B, h, w, n)
    h, w = logits.shape[1:3]
    per_position = [np.ndim(y) >= 2 for y in base_label]
    if all(per_position):
        t = _batch_targets(base_label, n, (h, w), len(base_label))
        loss, g = position_ce(logits.transpose(0, 3, 1, 2), t)
        return loss, g.transpose(0, 2, 3, 1)
    if any(per_position):
        raise ArgumentError("mixed image-level and per-position global labels in one batch")
    img = logits.mean(axis=(1, 2))  # (B, n)
    t = np.stack([as_targets(y, n, (1, 1))[:, 0, 0] for y in base_label])
    loss, g = position_ce(img[:, :, None, None], t[:, :, None, None])
    g = g[:, :, 0, 0] / (h * w)
    return loss, np.broadcast_to(g[:, None, None, :], logits.shape).copy()


def total_loss(lf: float, lg: float) -> float:
    return lf + 0.5 * lg


def predict(conf) -> tuple[int, np.ndarray]:
    """Class with the highest spatially averaged confidence; ties go to the lowest id."""
    scores = np.asarray(conf, dtype=np.float64).mean(axis=(-2, -1))
    return int(np.argmax(scores)), scores


def predict_batch(conf) -> np.ndarray:
    return np.argmax(np.asarray(conf, dtype=np.float64).mean(axis=(-2, -1)), axis=-1)


def class_probs(conf, scale: float = DEFAULT_SCALE) -> np.ndarray:
    return softmax(scale * np.asarray(conf).mean(axis=(-2, -1)), axis=-1)
