"""Evaluation statistics, intra-class variance and the spurious-feature probe."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ArgumentError, Rng
from .datasets import LabeledDataset, sample_episode
from .dproto import confidence_map, predict_batch, prototypes

PROBE_RIDGE = 1e-3


@dataclass
class EvalReport:
    n_episodes: int
    mean_accuracy: float
    ci95: float
    accuracies: np.ndarray

    @classmethod
    def from_accuracies(cls, accs) -> "EvalReport":
        accs = np.asarray(accs, dtype=np.float64)
        return cls(len(accs), float(accs.mean()), ci95(accs), accs)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "accuracy"])
            for i, a in enumerate(self.accuracies):
                w.writerow([i, repr(float(a))])
            w.writerow(["mean", repr(self.mean_accuracy)])
            w.writerow(["ci95", repr(self.ci95)])


def ci95(accs) -> float:
    """Half-width 1.96 * std / sqrt(n), population std."""
    accs = np.asarray(accs, dtype=np.float64)
    if len(accs) == 0:
        raise ArgumentError("no accuracies")
    return float(1.96 * accs.std() / np.sqrt(len(accs)))


def _feature_fn(model):
    if hasattr(model, "features"):
        return model.features
    if callable(model):
        return model
    raise ArgumentError("model must be callable or expose .features")


def episode_accuracy(feature_fn, ep) -> float:
    fs = feature_fn(ep.support_images)
    fq = feature_fn(ep.query_images)
    protos = prototypes(fs, ep.support_labels, ep.way, ep.shot)
    pred = predict_batch(confidence_map(fq, protos))
    return float((pred == ep.query_labels).mean())


def evaluate(model, ds: LabeledDataset, way: int, shot: int, queries: int,
             n_episodes: int, rng: Rng) -> EvalReport:
    """Mean episode accuracy with its 95% CI. Only the feature extractor is used."""
    fn = _feature_fn(model)
    accs = [episode_accuracy(fn, sample_episode(ds, way, shot, queries, rng))
            for _ in range(n_episodes)]
    return EvalReport.from_accuracies(accs)


def intra_variance(features, labels) -> float:
    """Mean over classes of the mean squared distance to the class centroid."""
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if f.ndim != 2 or len(f) != len(labels):
        raise ArgumentError("features must be (n, d) aligned with labels")
    per_class = []
    for c in np.unique(labels):
        x = f[labels == c]
        d = x - x.mean(axis=0)
        per_class.append((d * d).sum(axis=1).mean())
    return float(np.mean(per_class))


def pooled_unit_features(model, images, batch: int = 256) -> np.ndarray:
    """Spatially averaged features scaled to unit length (the cosine head ignores norm)."""
    fn = _feature_fn(model)
    out = []
    for i in range(0, len(images), batch):
        f = np.asarray(fn(images[i:i + batch]), dtype=np.float64).mean(axis=(-2, -1))
        out.append(f)
    f = np.concatenate(out)
    n = np.linalg.norm(f, axis=1, keepdims=True)
    return f / np.where(n == 0, 1.0, n)


def novel_intra_variance(features, labels, rng: Rng, n_classes: int = 5,
                         repeats: int = 20) -> float:
    """Average intra-variance over ``repeats`` random draws of ``n_classes`` classes."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    k = min(n_classes, len(classes))
    vals = []
    for _ in range(repeats):
        pick = rng.choice(classes, k, replace=False)
        sel = np.isin(labels, pick)
        vals.append(intra_variance(features[sel], labels[sel]))
    return float(np.mean(vals))


def spurious_probe(features, z_components, ridge: float = PROBE_RIDGE) -> float:
    """Held-out accuracy of a one-vs-rest ridge probe predicting the Z component.

    Even-indexed rows fit the probe, odd-indexed rows score it. Features are
    standardized with the fitting rows' statistics.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(z_components)
    if x.ndim != 2 or len(x) != len(y) or len(x) < 4:
        raise ArgumentError("probe needs (n, d) features aligned with >= 4 labels")
    tr, te = slice(0, None, 2), slice(1, None, 2)
    mu = x[tr].mean(axis=0)
    sd = x[tr].std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    xs = (x - mu) / sd
    classes = np.unique(y[tr])
    onehot = (y[tr, None] == classes[None]).astype(np.float64)
    a = np.hstack([xs[tr], np.ones((len(onehot), 1))])
    reg = ridge * len(onehot) * np.eye(a.shape[1])
    reg[-1, -1] = 0.0
    w = np.linalg.solve(a.T @ a + reg, a.T @ onehot)
    b = np.hstack([xs[te], np.ones((len(y[te]), 1))])
    pred = classes[np.argmax(b @ w, axis=1)]
    return float((pred == y[te]).mean())


def write_rows(path, header, rows) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
