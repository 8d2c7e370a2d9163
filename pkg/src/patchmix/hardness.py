"""Hardness-aware gallery assignment and teacher-student distillation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ArgumentError, CapacityError, log_softmax, softmax

MAX_EXACT_TSP = 12


@dataclass
class SimilarityGraph:
    sim: np.ndarray

    @property
    def n(self) -> int:
        return self.sim.shape[0]


@dataclass
class TspAssignment:
    path: list[int]
    gallery_of: dict[int, int]
    cost: float


def class_similarity(protos) -> SimilarityGraph:
    p = np.asarray(protos, dtype=np.float64)
    norms = np.linalg.norm(p, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ArgumentError("zero-norm prototype")
    u = p / norms
    sim = np.clip(u @ u.T, -1.0, 1.0)
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return SimilarityGraph(sim)


def path_cost(sim, path) -> float:
    """Open-path cost with edge weight ``-sim``, summed left to right."""
    cost = 0.0
    for a, b in zip(path[:-1], path[1:]):
        cost = cost + (-float(sim[a][b]))
    return cost


def tsp_hardest_path(graph: SimilarityGraph, start: int) -> TspAssignment:
    """Exact minimum-cost open path from ``start`` visiting every class (Held-Karp).

    Equal-cost paths resolve to the lexicographically smallest one. Each class
    takes its predecessor on the path as gallery class; the start class, which
    has none, takes its successor.
    """
    sim = np.asarray(graph.sim, dtype=np.float64)
    n = sim.shape[0]
    if n > MAX_EXACT_TSP:
        raise CapacityError(f"exact TSP limited to {MAX_EXACT_TSP} classes, got {n}")
    if not 0 <= start < n:
        raise ArgumentError(f"start {start} outside 0..{n - 1}")
    if n == 1:
        return TspAssignment([start], {start: start}, 0.0)
    cost = (-sim).tolist()
    others = [v for v in range(n) if v != start]
    # best[(mask, last)] = (cost, path)
    best = {(1 << v, v): (0.0 + cost[start][v], (start, v)) for v in others}
    for size in range(2, n):
        nxt = {}
        for (mask, last), (c, path) in best.items():
            for v in others:
                if mask & (1 << v):
                    continue
                key = (mask | (1 << v), v)
                cand = (c + cost[last][v], path + (v,))
                if key not in nxt or cand < nxt[key]:
                    nxt[key] = cand
        best = nxt
    c, path = min(best.values())
    path = list(path)
    gallery = {path[k]: path[k - 1] for k in range(1, n)}
    gallery[path[0]] = path[1]
    return TspAssignment(path, gallery, c)


def brute_force_path(sim, start: int) -> tuple[float, list[int]]:
    """Exhaustive reference for small graphs."""
    import itertools
    n = len(sim)
    rest = [v for v in range(n) if v != start]
    best = None
    for perm in itertools.permutations(rest):
        path = [start, *perm]
        cand = (path_cost(sim, path), path)
        if best is None or cand < best:
            best = cand
    return best


def distill_loss(student_out, teacher_out, kind: str = "mse", T: float = 1.0) -> float:
    return distill_loss_grad(student_out, teacher_out, kind, T)[0]


def distill_loss_grad(student_out, teacher_out, kind: str = "mse", T: float = 1.0):
    """Distillation loss and its gradient w.r.t. the student output.

    ``mse`` is the mean squared difference. ``kl`` is
    ``T^2 * KL(softmax(teacher/T) || softmax(student/T))`` averaged over rows.
    """
    s = np.asarray(student_out, dtype=np.float64)
    t = np.asarray(teacher_out, dtype=np.float64)
    if s.shape != t.shape:
        raise ArgumentError(f"student/teacher shape mismatch {s.shape} vs {t.shape}")
    if kind == "mse":
        d = s - t
        return float((d * d).mean()), 2.0 * d / d.size
    if kind == "kl":
        if not T > 0:
            raise ArgumentError(f"temperature must be positive, got {T}")
        s2 = np.atleast_2d(s)
        t2 = np.atleast_2d(t)
        lt = log_softmax(t2 / T)
        ls = log_softmax(s2 / T)
        rows = s2.shape[0]
        kl = (np.exp(lt) * (lt - ls)).sum() / rows
        grad = T * (softmax(s2 / T) - np.exp(lt)) / rows
        return float(T * T * kl), grad.reshape(s.shape)
    raise ArgumentError(f"unknown distillation kind {kind!r}")


def stage2_loss(base_loss: float, kd_loss: float) -> float:
    return base_loss + kd_loss
