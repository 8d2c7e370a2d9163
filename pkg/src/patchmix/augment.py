"""Patch-level mixing augmentations.

Arrays are indexed ``[channel, row, col]``; the box's ``w1..w2`` bounds are
columns and ``h1..h2`` rows, both inclusive. An empty box has ``w2 == w1 - 1``
(and likewise for rows).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ArgumentError, Rng


@dataclass(frozen=True)
class MixBox:
    cw: float
    ch: float
    w_hat: float
    h_hat: float
    w1: int
    w2: int
    h1: int
    h2: int

    @property
    def width(self) -> int:
        return self.w2 - self.w1 + 1

    @property
    def height(self) -> int:
        return self.h2 - self.h1 + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def empty(self) -> bool:
        return self.width == 0 or self.height == 0


@dataclass
class MixSpec:
    box: MixBox
    mask: np.ndarray        # H x W, 1 inside the box
    label_map: np.ndarray   # gh x gw integer class ids
    cells: np.ndarray       # gh x gw bool, True where the cell is gallery-labelled
    lam: float
    query_label: int
    gallery_label: int


def _axis(extent: int, size_hat: float, rng: Rng) -> tuple[float, int, int]:
    n = min(max(int(math.floor(size_hat + 0.5)), 0), extent)
    half = math.ceil(size_hat / 2)
    lo, hi = half, extent - half
    if hi > lo:
        c = rng.uniform(lo, hi)
    else:
        # lambda -> 0: the box spans the axis and the centre interval collapses
        c = extent / 2
    start = int(math.floor(c - n / 2 + 0.5))
    start = min(max(start, 0), extent - n)
    return c, start, start + n - 1


def sample_box(W: int, H: int, rng: Rng, lam: float | None = None) -> tuple[float, MixBox]:
    """Draw the mixing ratio and a box covering about ``(1 - lam) * W * H`` pixels."""
    if W < 2 or H < 2:
        raise ArgumentError(f"image too small for box sampling: {W}x{H}")
    if lam is None:
        lam = rng.uniform(0.0, 1.0)
    elif not 0.0 <= lam <= 1.0:
        raise ArgumentError(f"lambda outside [0, 1]: {lam}")
    r = math.sqrt(1.0 - lam)
    w_hat, h_hat = W * r, H * r
    cw, w1, w2 = _axis(W, w_hat, rng)
    ch, h1, h2 = _axis(H, h_hat, rng)
    return lam, MixBox(cw, ch, w_hat, h_hat, w1, w2, h1, h2)


def box_mask(box: MixBox, W: int, H: int) -> np.ndarray:
    m = np.zeros((H, W), dtype=np.float32)
    if not box.empty:
        m[box.h1:box.h2 + 1, box.w1:box.w2 + 1] = 1.0
    return m


def box_cells(box: MixBox, W: int, H: int, grid: tuple[int, int]) -> np.ndarray:
    """Feature cells whose centre falls inside the box rescaled to the grid.

    The pixel interval ``[w1, w2 + 1)`` maps to ``[w1 * gw / W, (w2 + 1) * gw / W)``
    in cell units and column ``j`` is covered iff ``j + 0.5`` lies in it.
    """
    gh, gw = grid
    cols = np.arange(gw) + 0.5
    rows = np.arange(gh) + 0.5
    in_c = (cols >= box.w1 * gw / W) & (cols < (box.w2 + 1) * gw / W)
    in_r = (rows >= box.h1 * gh / H) & (rows < (box.h2 + 1) * gh / H)
    return in_r[:, None] & in_c[None, :]


def _check_pair(query, gallery):
    if query.shape != gallery.shape:
        raise ArgumentError(f"query/gallery shape mismatch {query.shape} vs {gallery.shape}")
    if query.ndim != 3:
        raise ArgumentError("images must be C x H x W")


def patchmix(query, gallery, q_label: int, g_label: int, feat_grid, rng: Rng,
             lam: float | None = None):
    """Paste a random box of ``gallery`` into ``query`` and relabel the covered cells."""
    _check_pair(query, gallery)
    _, H, W = query.shape
    lam, box = sample_box(W, H, rng, lam)
    mask = box_mask(box, W, H)
    mixed = np.where(mask[None] > 0, gallery, query).astype(np.float32)
    cells = box_cells(box, W, H, tuple(feat_grid))
    label_map = np.where(cells, g_label, q_label).astype(np.int64)
    return mixed, MixSpec(box, mask, label_map, cells, lam, int(q_label), int(g_label))


def counterpart(query, gallery, spec: MixSpec) -> np.ndarray:
    """The gallery image with the query's pixels pasted into the same box."""
    return np.where(spec.mask[None] > 0, query, gallery).astype(np.float32)


def _soft(lam, q_label, g_label, n_classes):
    y = np.zeros(n_classes)
    y[q_label] += lam
    y[g_label] += 1.0 - lam
    return y


def cutmix(query, gallery, q_label: int, g_label: int, n_classes: int, rng: Rng,
           lam: float | None = None):
    _check_pair(query, gallery)
    _, H, W = query.shape
    lam, box = sample_box(W, H, rng, lam)
    mask = box_mask(box, W, H)
    mixed = np.where(mask[None] > 0, gallery, query).astype(np.float32)
    return mixed, _soft(lam, q_label, g_label, n_classes)


def mixup(query, gallery, q_label: int, g_label: int, n_classes: int, rng: Rng,
          lam: float | None = None):
    _check_pair(query, gallery)
    if lam is None:
        lam = rng.uniform(0.0, 1.0)
    mixed = (lam * query.astype(np.float64) + (1 - lam) * gallery).astype(np.float32)
    return mixed, _soft(lam, q_label, g_label, n_classes)
