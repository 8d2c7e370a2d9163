"""Datasets, episode sampling and the synthetic selection-bias generator."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import (ArgumentError, IngestionError, MissingFileError, SamplingError,
                   ShapeMismatchError, Rng, as_f32, load_tensor, save_tensor)

SPLITS = ("base", "val", "novel")


@dataclass
class LabeledDataset:
    images: np.ndarray          # (n, C, H, W) float32
    labels: np.ndarray          # (n,) int64
    split: str = "base"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = as_f32(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ArgumentError(f"images must be (n, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ArgumentError("images and labels differ in length")
        if np.any(self.labels < 0):
            raise ArgumentError("negative class id")
        if self.split not in SPLITS:
            raise ArgumentError(f"unknown split {self.split!r}")

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def by_class(self) -> dict[int, np.ndarray]:
        return {int(c): np.flatnonzero(self.labels == c) for c in self.classes}

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        meta = {k: v[idx] for k, v in self.meta.items()
                if isinstance(v, np.ndarray) and len(v) == len(self)}
        return LabeledDataset(self.images[idx], self.labels[idx], self.split, meta)

    def relabeled(self, labels) -> "LabeledDataset":
        return LabeledDataset(self.images, labels, self.split, dict(self.meta))


def check_disjoint_classes(base: LabeledDataset, novel: LabeledDataset) -> None:
    shared = set(base.classes.tolist()) & set(novel.classes.tolist())
    if shared:
        raise ArgumentError(f"base and novel splits share classes {sorted(shared)}")


@dataclass
class Episode:
    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    way: int
    shot: int
    class_map: dict[int, int]
    support_idx: np.ndarray
    query_idx: np.ndarray

    @property
    def episode_to_class(self) -> np.ndarray:
        inv = np.empty(self.way, dtype=np.int64)
        for orig, ep in self.class_map.items():
            inv[ep] = orig
        return inv


def sample_episode(ds: LabeledDataset, way: int, shot: int, queries_per_class: int,
                   rng: Rng) -> Episode:
    """Draw an N-way K-shot episode; classes come from those with enough images."""
    need = shot + queries_per_class
    groups = ds.by_class()
    eligible = [c for c, idx in groups.items() if len(idx) >= need]
    if len(eligible) < way:
        raise SamplingError(f"{len(eligible)} classes have >= {need} images, need {way}")
    chosen = rng.choice(np.array(eligible), way, replace=False)
    sup, qry, sup_y, qry_y = [], [], [], []
    class_map = {}
    for ep, c in enumerate(chosen.tolist()):
        class_map[int(c)] = ep
        idx = groups[c][rng.permutation(len(groups[c]))[:need]]
        sup.append(idx[:shot])
        qry.append(idx[shot:])
        sup_y += [ep] * shot
        qry_y += [ep] * queries_per_class
    sup = np.concatenate(sup)
    qry = np.concatenate(qry)
    return Episode(ds.images[sup], np.array(sup_y), ds.images[qry], np.array(qry_y),
                   way, shot, class_map, sup, qry)


# ------------------------------------------------------------ SCM generator

@dataclass
class ScmConfig:
    """Knobs of the synthetic selection-bias world.

    ``n_classes`` base classes are observed under selection (C=1) and
    ``n_novel`` further classes are drawn without selection (C=0).
    """
    dim_s: int = 10
    dim_z: int = 5
    rho: float = 0.9
    n_classes: int = 5
    grid: int = 8
    noise_sigma: float = 0.3
    n_novel: int = 5
    n_z_components: int = 5
    image_size: int = 32
    channels: int = 1
    code_scale: float = 1.0
    pixel_sigma: float = 0.05

    def validate(self) -> "ScmConfig":
        if not 0.0 <= self.rho <= 1.0:
            raise ArgumentError(f"rho must lie in [0, 1], got {self.rho}")
        if self.grid * self.grid < 2 or self.grid < 2:
            raise ArgumentError("grid must leave room for both S and Z patches")
        if self.image_size % self.grid:
            raise ArgumentError("image_size must be divisible by grid")
        if self.dim_s < self.n_classes + self.n_novel:
            raise ArgumentError("dim_s must hold a one-hot code for every class")
        if self.dim_z < self.n_z_components:
            raise ArgumentError("dim_z must hold a one-hot mean for every Z component")
        if self.patch_pixels < max(self.dim_s, self.dim_z):
            raise ArgumentError("patches too small for injective rendering")
        if self.noise_sigma < 0 or self.pixel_sigma < 0:
            raise ArgumentError("noise levels must be non-negative")
        return self

    @property
    def patch_pixels(self) -> int:
        p = self.image_size // self.grid
        return self.channels * p * p

    @classmethod
    def parse(cls, text: str, base: "ScmConfig | None" = None) -> "ScmConfig":
        """Parse ``rho=0.9,classes=5,...`` into a config."""
        alias = {"classes": "n_classes", "novel": "n_novel", "sigma": "noise_sigma",
                 "size": "image_size", "z_components": "n_z_components"}
        types = {f.name: f.type for f in fields(cls)}
        kw = {f.name: getattr(base, f.name) for f in fields(cls)} if base else {}
        for item in filter(None, (t.strip() for t in text.split(","))):
            if "=" not in item:
                raise ArgumentError(f"bad SCM setting {item!r}")
            k, v = (s.strip() for s in item.split("=", 1))
            k = alias.get(k, k)
            if k not in types:
                raise ArgumentError(f"unknown SCM setting {k!r}")
            kw[k] = float(v) if types[k] in (float, "float") else int(v)
        return cls(**kw).validate()


@dataclass
class ScmSample:
    s: np.ndarray
    z: np.ndarray
    y: int
    z_component: int
    c: int
    image: np.ndarray


def causal_cells(grid: int) -> np.ndarray:
    """Boolean grid mask of the S patches: the top-left quadrant."""
    m = np.zeros((grid, grid), dtype=bool)
    half = max(grid // 2, 1)
    m[:half, :half] = True
    return m


class ScmWorld:
    """Fixed rendering maps plus the sampling process ``S <- Y -> C <- Z``."""

    def __init__(self, cfg: ScmConfig, rng: Rng):
        self.cfg = cfg.validate()
        g = cfg.grid
        self.s_cells = causal_cells(g)
        pp = cfg.patch_pixels
        # one map per region, shared by all of its patches: the same content
        # renders the same way wherever it appears, like a repeated texture
        self.A = rng.normal((pp, cfg.dim_s)) / np.sqrt(cfg.dim_s)
        self.B = rng.normal((pp, cfg.dim_z)) / np.sqrt(cfg.dim_z)
        if np.linalg.matrix_rank(self.A) < cfg.dim_s or np.linalg.matrix_rank(self.B) < cfg.dim_z:
            raise ArgumentError("rendering map is rank deficient")
        self.z_means = np.eye(cfg.n_z_components, cfg.dim_z) * cfg.code_scale

    def partner(self, y):
        return np.asarray(y) % self.cfg.n_z_components

    def class_code(self, y) -> np.ndarray:
        return np.eye(self.cfg.dim_s)[np.asarray(y)] * self.cfg.code_scale

    def accept_prob(self, y, k):
        rho = self.cfg.rho
        return np.where(np.asarray(k) == self.partner(y), rho, 1.0 - rho)

    def match_rate(self) -> float:
        """Closed form of P(z component == partner(y) | y, C=1)."""
        rho, n = self.cfg.rho, self.cfg.n_z_components
        return rho / (rho + (n - 1) * (1.0 - rho))

    def render(self, s, z, rng: Rng | None = None) -> np.ndarray:
        cfg = self.cfg
        s = np.atleast_2d(s)
        z = np.atleast_2d(z)
        n = len(s)
        g = cfg.grid
        p = cfg.image_size // g
        cells = np.empty((n, g * g, cfg.patch_pixels))
        flat = self.s_cells.ravel()
        cells[:, flat] = (s @ self.A.T)[:, None]
        cells[:, ~flat] = (z @ self.B.T)[:, None]
        if rng is not None and cfg.pixel_sigma > 0:
            cells += rng.normal(cells.shape, scale=cfg.pixel_sigma)
        img = cells.reshape(n, g, g, cfg.channels, p, p).transpose(0, 3, 1, 4, 2, 5)
        return img.reshape(n, cfg.channels, cfg.image_size, cfg.image_size).astype(np.float32)

    def _cells(self, images):
        cfg = self.cfg
        g = cfg.grid
        p = cfg.image_size // g
        n = len(images)
        x = np.asarray(images, dtype=np.float64).reshape(n, cfg.channels, g, p, g, p)
        return x.transpose(0, 2, 4, 1, 3, 5).reshape(n, g * g, -1)

    def invert(self, images) -> tuple[np.ndarray, np.ndarray]:
        """Least-squares recovery of ``(s, z)`` from rendered images."""
        cells = self._cells(images)
        flat = self.s_cells.ravel()
        # patches of a region share one map, so their average is the best single view
        ys = cells[:, flat].mean(axis=1)
        yz = cells[:, ~flat].mean(axis=1)
        s = np.linalg.lstsq(self.A, ys.T, rcond=None)[0].T
        z = np.linalg.lstsq(self.B, yz.T, rcond=None)[0].T
        return s, z

    def draw(self, n: int, classes, selected: bool, rng: Rng):
        """Draw ``n`` samples; with ``selected`` only C=1 draws are kept."""
        cfg = self.cfg
        classes = np.asarray(classes)
        ys, ks = [], []
        got = 0
        while got < n:
            m = max(2 * (n - got), 64)
            y = classes[rng.integers(0, len(classes), m)]
            k = rng.integers(0, cfg.n_z_components, m)
            if selected:
                keep = rng.gen.random(m) < self.accept_prob(y, k)
                y, k = y[keep], k[keep]
            ys.append(y)
            ks.append(k)
            got += len(y)
        y = np.concatenate(ys)[:n]
        k = np.concatenate(ks)[:n]
        s = self.class_code(y) + rng.normal((n, cfg.dim_s), scale=cfg.noise_sigma)
        z = self.z_means[k] + rng.normal((n, cfg.dim_z), scale=cfg.noise_sigma)
        return y, k, s, z, self.render(s, z, rng)


def generate_scm(cfg: ScmConfig, n_train: int, n_test: int, rng: Rng):
    """Biased base split (C=1) and unbiased novel split (C=0) from one world.

    Returns ``(train, test, samples)``. Both datasets carry ``z_component``,
    ``s`` and ``z`` arrays in ``meta``; ``train.meta["world"]`` holds the
    rendering maps.
    """
    world = ScmWorld(cfg, rng)
    base = np.arange(cfg.n_classes)
    novel = np.arange(cfg.n_classes, cfg.n_classes + cfg.n_novel)
    out = []
    samples = []
    for n, classes, sel, split in ((n_train, base, True, "base"), (n_test, novel, False, "novel")):
        y, k, s, z, img = world.draw(n, classes, sel, rng)
        ds = LabeledDataset(img, y, split, {"z_component": k, "s": s, "z": z})
        out.append(ds)
        c = 1 if sel else 0
        samples += [ScmSample(s[i], z[i], int(y[i]), int(k[i]), c, img[i]) for i in range(n)]
    out[0].meta["world"] = world
    return out[0], out[1], samples


# ------------------------------------------------------------- manifest I/O

def write_manifest(ds: LabeledDataset, root, name: str) -> Path:
    """Write every image as a PMX1 file under ``root/name/`` plus ``root/name.tsv``."""
    root = Path(root)
    sub = root / name
    sub.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, y) in enumerate(zip(ds.images, ds.labels)):
        rel = f"{name}/{i:06d}.pmx"
        save_tensor(root / rel, img)
        lines.append(f"{rel}\t{int(y)}")
    manifest = root / f"{name}.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(manifest_path, split: str | None = None) -> LabeledDataset:
    """Read a ``<relative tensor path>\\t<label>`` manifest."""
    manifest = Path(manifest_path)
    if not manifest.exists():
        raise MissingFileError(str(manifest))
    images, labels = [], []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise IngestionError(f"{manifest}:{lineno}: expected '<path>\\t<label>'")
        rel, lab = parts
        try:
            label = int(lab)
        except ValueError:
            raise IngestionError(f"{manifest}:{lineno}: bad label {lab!r}") from None
        img = load_tensor(manifest.parent / rel)
        if img.ndim != 3:
            raise ShapeMismatchError(f"{rel}: expected C x H x W, got {img.shape}")
        if images and img.shape != images[0].shape:
            raise ShapeMismatchError(f"{rel}: shape {img.shape} differs from {images[0].shape}")
        images.append(img)
        labels.append(label)
    if not images:
        raise IngestionError(f"{manifest}: empty manifest")
    if split is None:
        split = manifest.stem if manifest.stem in SPLITS else "base"
    return LabeledDataset(np.stack(images), np.array(labels), split)


def write_z_csv(ds: LabeledDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_index", "label", "z_component"])
        for i, (y, k) in enumerate(zip(ds.labels, ds.meta["z_component"])):
            w.writerow([i, int(y), int(k)])
