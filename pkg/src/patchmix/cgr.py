"""Correlation-guided reconstruction.

For a mixed query ``x_q`` (query outside the box, gallery inside) and its
counterpart ``x_g`` (gallery outside, query inside), every cell of ``x_q`` is
scored against the known query content of ``x_q`` and against the known
gallery content of ``x_g``. ``known`` marks cells of ``x_q`` that carry query
content, i.e. the complement of the PatchMix box cells. A per-cell two-way
gumbel-softmax turns the scores into selection weights, and the selected cells
rebuild both source images::

    merged_q = ahat_q * x_q + ahat_g * x_g
    merged_g = ahat_g * x_q + ahat_q * x_g

All functions accept a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ArgumentError, Rng


@dataclass
class MixedPair:
    x_q: np.ndarray
    x_g: np.ndarray
    known: np.ndarray

    def __post_init__(self):
        if self.x_q.shape != self.x_g.shape:
            raise ArgumentError(f"pair shape mismatch {self.x_q.shape} vs {self.x_g.shape}")
        if self.known.shape != self.x_q.shape[:-3] + self.x_q.shape[-2:]:
            raise ArgumentError(f"mask shape {self.known.shape} does not match features {self.x_q.shape}")


@dataclass
class SelectionWeights:
    alpha_q: np.ndarray
    alpha_g: np.ndarray
    ahat_q: np.ndarray    # weights actually used by merge (one-hot in hard mode)
    ahat_g: np.ndarray
    soft_q: np.ndarray    # relaxed probability of picking x_q
    logit: np.ndarray     # (alpha_q - alpha_g) / T + gumbel difference
    temperature: float
    hard: bool


def _dot(a, b):
    return np.einsum("...cst,...cst->...st", a, b)


def patch_confidence(pair: MixedPair) -> tuple[np.ndarray, np.ndarray]:
    xq = np.asarray(pair.x_q, dtype=np.float64)
    xg = np.asarray(pair.x_g, dtype=np.float64)
    K = np.asarray(pair.known, dtype=np.float64)
    ref_q = np.einsum("...st,...cst->...c", K, xq)
    ref_g = np.einsum("...st,...cst->...c", K, xg)
    alpha_q = np.einsum("...cst,...c->...st", xq, ref_q) - K * _dot(xq, xq)
    alpha_g = np.einsum("...cst,...c->...st", xq, ref_g) - K * _dot(xq, xg)
    return alpha_q, alpha_g


def patch_confidence_backward(pair: MixedPair, dalpha_q, dalpha_g):
    xq = np.asarray(pair.x_q, dtype=np.float64)
    xg = np.asarray(pair.x_g, dtype=np.float64)
    K = np.asarray(pair.known, dtype=np.float64)
    ref_q = np.einsum("...st,...cst->...c", K, xq)
    ref_g = np.einsum("...st,...cst->...c", K, xg)
    dq = np.einsum("...st,...c->...cst", dalpha_q, ref_q) - 2 * (dalpha_q * K)[..., None, :, :] * xq
    dq += np.einsum("...st,...c->...cst", dalpha_g, ref_g) - (dalpha_g * K)[..., None, :, :] * xg
    dref_q = np.einsum("...st,...cst->...c", dalpha_q, xq)
    dref_g = np.einsum("...st,...cst->...c", dalpha_g, xq)
    dq += K[..., None, :, :] * dref_q[..., :, None, None]
    dg = K[..., None, :, :] * dref_g[..., :, None, None] - (dalpha_g * K)[..., None, :, :] * xq
    return dq, dg


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def normalize_select(alpha_q, alpha_g, T: float, rng: Rng | None, hard: bool = False,
                     noise=None) -> SelectionWeights:
    """Per-cell gumbel-softmax over ``(alpha_q, alpha_g) / T``.

    Hard mode returns straight-through one-hot weights: ``ahat`` is the argmax
    sample, gradients flow through ``soft_q``. ``noise`` (shape ``(2, ...)``)
    overrides the gumbel draw so that a selection can be replayed exactly.
    """
    if not T > 0:
        raise ArgumentError(f"temperature must be positive, got {T}")
    alpha_q = np.asarray(alpha_q, dtype=np.float64)
    alpha_g = np.asarray(alpha_g, dtype=np.float64)
    if noise is None:
        if rng is None:
            raise ArgumentError("need an rng or explicit gumbel noise")
        noise = rng.gumbel((2, *alpha_q.shape))
    u = (alpha_q - alpha_g) / T + (noise[0] - noise[1])
    soft = _sigmoid(u)
    if hard:
        wq = (u >= 0).astype(np.float64)
    else:
        wq = soft
    return SelectionWeights(alpha_q, alpha_g, wq, 1.0 - wq, soft, u, T, hard)


def merge(pair: MixedPair, w: SelectionWeights) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild the query and gallery feature maps from the selected cells."""
    xq, xg = pair.x_q, pair.x_g
    if w.hard:
        pick = (w.ahat_q > 0)[..., None, :, :]
        return np.where(pick, xq, xg), np.where(pick, xg, xq)
    a = w.ahat_q[..., None, :, :]
    b = w.ahat_g[..., None, :, :]
    return a * xq + b * xg, b * xq + a * xg


def merge_backward(pair: MixedPair, w: SelectionWeights, dmerged_q, dmerged_g):
    """Gradients w.r.t. ``x_q``, ``x_g`` and the selection logit (straight-through in hard mode)."""
    a = w.ahat_q[..., None, :, :]
    b = w.ahat_g[..., None, :, :]
    dxq = a * dmerged_q + b * dmerged_g
    dxg = b * dmerged_q + a * dmerged_g
    dwq = np.einsum("...cst,...cst->...st", dmerged_q - dmerged_g, pair.x_q - pair.x_g)
    dlogit = dwq * w.soft_q * (1.0 - w.soft_q)
    return dxq, dxg, dlogit


def _softplus(u):
    return np.logaddexp(0.0, u)


def selection_loss(w: SelectionWeights, known) -> tuple[float, np.ndarray]:
    """``CE(ahat_q, known) + CE(ahat_g, 1 - known)`` on the relaxed weights, cell-averaged.

    Computed from the logit, so saturated selections never hit ``log 0``.
    Returns the loss and its gradient w.r.t. the logit.
    """
    K = np.asarray(known, dtype=np.float64)
    u = w.logit
    ce_q = _softplus(u) - K * u          # -[K log s + (1-K) log(1-s)]
    ce_g = _softplus(-u) + (1.0 - K) * u  # same with s_g = 1 - s and target 1 - K
    n = u.size
    loss = float((ce_q + ce_g).sum() / n)
    grad = 2.0 * (_sigmoid(u) - K) / n
    return loss, grad


def reconstruction_loss(recon, orig) -> tuple[float, np.ndarray]:
    """Mean absolute error and its gradient w.r.t. ``recon``."""
    diff = np.asarray(recon, dtype=np.float64) - np.asarray(orig, dtype=np.float64)
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def cgr_loss(weights: SelectionWeights, known, recon_q, recon_g, orig_q, orig_g,
             lambda_rec: float) -> tuple[float, float, float]:
    """Return ``(L_CR, L_sel, L_rec)`` with ``L_CR = L_sel + lambda_rec * L_rec``."""
    l_sel = selection_loss(weights, known)[0]
    l_rec = reconstruction_loss(recon_q, orig_q)[0] + reconstruction_loss(recon_g, orig_g)[0]
    return l_sel + lambda_rec * l_rec, l_sel, l_rec


def oracle_weights(known) -> SelectionWeights:
    """Selection that picks exactly the true source of every cell."""
    K = np.asarray(known, dtype=np.float64)
    u = np.where(K > 0, 60.0, -60.0)
    return SelectionWeights(K, 1 - K, K, 1 - K, K, u, 1.0, True)
