"""Slow loop implementations used as references for the vectorised code.

Nothing here is used in training; every function is written the obvious way,
one scalar at a time, so it can be read against the definitions.
"""
from __future__ import annotations

import math

import numpy as np


def prototypes(feats, labels, way):
    c, h, w = feats.shape[1:]
    out = np.zeros((way, c))
    counts = np.zeros(way)
    for f, y in zip(feats, labels):
        for k in range(c):
            acc = 0.0
            for s in range(h):
                for t in range(w):
                    acc += float(f[k, s, t])
            out[y, k] += acc / (h * w)
        counts[y] += 1
    return out / counts[:, None]


def confidence_map(q, protos):
    c, h, w = q.shape
    out = np.zeros((len(protos), h, w))
    for n, p in enumerate(protos):
        pn = math.sqrt(sum(float(x) * float(x) for x in p))
        for s in range(h):
            for t in range(w):
                col = [float(q[k, s, t]) for k in range(c)]
                qn = math.sqrt(sum(x * x for x in col))
                out[n, s, t] = sum(a * float(b) for a, b in zip(col, p)) / (qn * pn)
    return out


def position_ce(logits, target_map):
    """Mean over cells of ``-log softmax(logits[:, s, t])[target_map[s, t]]``."""
    n, h, w = logits.shape
    total = 0.0
    for s in range(h):
        for t in range(w):
            col = [float(logits[i, s, t]) for i in range(n)]
            m = max(col)
            lse = m + math.log(sum(math.exp(v - m) for v in col))
            total += lse - col[int(target_map[s, t])]
    return total / (h * w)


def soft_ce(logits, probs):
    m = max(float(v) for v in logits)
    lse = m + math.log(sum(math.exp(float(v) - m) for v in logits))
    return sum(float(p) * (lse - float(v)) for v, p in zip(logits, probs))


def intra_variance(feats, labels):
    per = []
    for c in sorted(set(int(y) for y in labels)):
        rows = [f for f, y in zip(feats, labels) if int(y) == c]
        d = len(rows[0])
        mean = [sum(float(r[k]) for r in rows) / len(rows) for k in range(d)]
        per.append(sum(sum((float(r[k]) - mean[k]) ** 2 for k in range(d)) for r in rows) / len(rows))
    return sum(per) / len(per)


def _cos(a, b):
    a = [float(x) for x in a]
    b = [float(x) for x in b]
    return sum(x * y for x, y in zip(a, b)) / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def moco_loss(qbar, kbar, T, bank=()):
    keys = list(kbar) + list(bank)
    total = 0.0
    for i, q in enumerate(qbar):
        sims = [_cos(q, k) / T for k in keys]
        m = max(sims)
        lse = m + math.log(sum(math.exp(v - m) for v in sims))
        total += lse - sims[i]
    return total


def patchmoco_loss(qmaps, kbar, masks, T, bank=()):
    keys = list(kbar) + list(bank)
    total = 0.0
    for i, q in enumerate(qmaps):
        c, h, w = q.shape
        for s in range(h):
            for t in range(w):
                if masks[i][s][t] == 0:
                    continue
                col = [q[k, s, t] for k in range(c)]
                sims = [_cos(col, k) / T for k in keys]
                m = max(sims)
                lse = m + math.log(sum(math.exp(v - m) for v in sims))
                total += float(masks[i][s][t]) * (lse - sims[i])
    return total


def patch_confidence(xq, xg, known):
    c, h, w = xq.shape
    aq = np.zeros((h, w))
    ag = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            for m in range(h):
                for n in range(w):
                    if (m, n) == (i, j):
                        continue
                    aq[i, j] += known[m, n] * sum(float(xq[k, m, n]) * float(xq[k, i, j]) for k in range(c))
                    ag[i, j] += known[m, n] * sum(float(xg[k, m, n]) * float(xq[k, i, j]) for k in range(c))
    return aq, ag


def held_karp_cost(sim, start):
    import itertools
    n = len(sim)
    best = None
    for perm in itertools.permutations([v for v in range(n) if v != start]):
        path = (start, *perm)
        cost = 0.0
        for a, b in zip(path[:-1], path[1:]):
            cost += -float(sim[a][b])
        best = cost if best is None else min(best, cost)
    return best
