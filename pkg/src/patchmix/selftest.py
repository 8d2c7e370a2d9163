"""Quick oracle and invariant suite behind ``patchmix selftest``.

Each check returns ``(passed, detail)``; the table printed is a pure function
of the seed, so two runs are byte-identical.
"""
from __future__ import annotations

import io
import tempfile
from pathlib import Path

import numpy as np

from . import augment as aug
from . import cgr, dproto, hardness, metrics, oracles, unsup
from .core import Rng, decode_tensor, encode_tensor
from .datasets import ScmConfig, ScmWorld
from .nets import build_model, gradcheck, load_checkpoint, save_checkpoint


def check_pmx(rng):
    x = rng.normal((3, 4, 5)).astype(np.float32)
    y, end = decode_tensor(encode_tensor(x))
    return bool(np.array_equal(x, y)) and end == len(encode_tensor(x)), "round trip"


def check_box_area(rng):
    worst, inside = 0.0, True
    for _ in range(2000):
        lam, box = aug.sample_box(84, 84, rng)
        inside &= box.empty or (0 <= box.w1 <= box.w2 < 84 and 0 <= box.h1 <= box.h2 < 84)
        worst = max(worst, abs(box.area - (1 - lam) * 84 * 84))
    return worst <= 168 and inside, f"max |area - (1-lam)WH| = {worst:.2f}"


def check_label_map(rng):
    worst = 0.0
    img = np.zeros((1, 84, 84), np.float32)
    for _ in range(300):
        _, spec = aug.patchmix(img, img + 1, 0, 1, (11, 11), rng)
        worst = max(worst, abs(spec.cells.mean() - spec.mask.mean()))
    return worst <= 22 / 121, f"max fraction gap {worst:.4f}"


def check_tsp(rng):
    for n in range(3, 7):
        for _ in range(10):
            a = rng.normal((n, n))
            sim = np.tanh(0.5 * (a + a.T))
            g = hardness.SimilarityGraph(sim)
            if hardness.tsp_hardest_path(g, 0).cost != oracles.held_karp_cost(sim, 0):
                return False, f"mismatch at N={n}"
    return True, "40 graphs exact"


def check_cgr(rng):
    aq, ag = rng.normal((4, 4)), rng.normal((4, 4))
    soft = cgr.normalize_select(aq, ag, 1.0, rng)
    hard = cgr.normalize_select(aq, ag, 1.0, rng, hard=True)
    s = np.abs(soft.ahat_q + soft.ahat_g - 1).max()
    onehot = set(np.unique(hard.ahat_q)) <= {0.0, 1.0} and np.all(hard.ahat_q + hard.ahat_g == 1)
    x = rng.normal((3, 4, 4))
    xg = rng.normal((3, 4, 4))
    known = (rng.normal((4, 4)) > 0).astype(float)
    a1, a2 = cgr.patch_confidence(cgr.MixedPair(x, xg, known))
    o1, o2 = oracles.patch_confidence(x, xg, known)
    err = max(np.abs(a1 - o1).max(), np.abs(a2 - o2).max())
    return s < 1e-6 and onehot and err < 1e-9, f"sum err {s:.1e}, alpha err {err:.1e}"


def check_gradients(rng):
    m = build_model(1, (16, 16), (4, 4), 16, 8, 5, rng)
    x = rng.normal((3, 1, 16, 16))
    f = rng.normal((3, 8, 4, 4))
    worst = 0.0
    for mod, inp in ((m.backbone, x), (m.classifier, f), (m.decoder, f)):
        rep = gradcheck(mod, inp, rng, samples=8)
        worst = max(worst, max(v for k, v in rep.items() if k != "skipped"))
    return worst < 1e-3, f"max rel err {worst:.1e}"


def check_dproto(rng):
    feats = rng.normal((10, 6, 3, 3))
    labels = np.repeat(np.arange(5), 2)
    p = dproto.prototypes(feats, labels, 5, 2)
    err = np.abs(p - oracles.prototypes(feats, labels, 5)).max()
    q = rng.normal((6, 3, 3))
    conf = dproto.confidence_map(q, p)
    err = max(err, np.abs(conf - oracles.confidence_map(q, p)).max())
    ymap = rng.integers(0, 5, (3, 3))
    lf = dproto.fewshot_loss(conf, ymap)
    err = max(err, abs(lf - oracles.position_ce(10 * conf, ymap)))
    return err < 1e-9, f"max err {err:.1e}"


def check_moco(rng):
    q = rng.normal((4, 5, 2, 2))
    k = rng.normal((4, 5))
    masks = (rng.normal((4, 2, 2)) > 0).astype(float)
    err = abs(unsup.patchmoco_loss(q, k, masks, 0.2) - oracles.patchmoco_loss(q, k, masks, 0.2))
    qb = rng.normal((4, 5))
    err = max(err, abs(unsup.moco_loss(qb, k, 0.2) - oracles.moco_loss(qb, k, 0.2)))
    ones = unsup.patchmoco_loss(q, k, np.ones((4, 2, 2)), 0.2) == unsup.dense_loss(q, k, 0.2)
    zeros = unsup.patchmoco_loss(q, k, np.zeros((4, 2, 2)), 0.2) == 0.0
    return err < 1e-9 and ones and zeros, f"max err {err:.1e}"


def check_intra_variance(rng):
    f = rng.normal((30, 4))
    y = rng.integers(0, 3, 30)
    err = abs(metrics.intra_variance(f, y) - oracles.intra_variance(f, y))
    return err < 1e-9, f"err {err:.1e}"


def check_ci95(rng):
    a = 0.5 + 0.1 * rng.normal(200)
    err = abs(metrics.ci95(a) - 1.96 * np.std(a) / np.sqrt(len(a)))
    return err < 1e-9, f"err {err:.1e}"


def check_scm(rng):
    cfg = ScmConfig()
    world = ScmWorld(cfg, rng)
    y, k, s, z, img = world.draw(3000, np.arange(cfg.n_classes), True, rng)
    rate = float(np.mean(k == world.partner(y)))
    s2, z2 = world.invert(img)
    inv = max(np.abs(s2 - s).max(), np.abs(z2 - z).max())
    return abs(rate - world.match_rate()) < 0.03 and inv < 3 * cfg.noise_sigma, \
        f"match rate {rate:.3f} vs {world.match_rate():.3f}"


def check_kmeans(rng):
    a = rng.normal((200, 2))
    b = rng.normal((200, 2)) + 6.0
    labels = unsup.kmeans_pseudolabels(np.concatenate([a, b]), 2, 1, rng)[0]
    truth = np.repeat([0, 1], 200)
    acc = max(np.mean(labels == truth), np.mean(labels != truth))
    return acc == 1.0, f"blob agreement {acc:.3f}"


def check_checkpoint(rng):
    m = build_model(1, (8, 8), (2, 2), 4, 3, 2, rng)
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "m.pmx"
        save_checkpoint(p, m.named_params())
        back = load_checkpoint(p)
    ok = all(np.array_equal(back[k].astype(np.float64), v) for k, v in m.named_params().items())
    return ok, "lossless reload"


CHECKS = [
    ("pmx1 round trip", check_pmx),
    ("box area slack", check_box_area),
    ("label map vs mask", check_label_map),
    ("tsp exactness", check_tsp),
    ("cgr selection", check_cgr),
    ("finite differences", check_gradients),
    ("prototype head oracle", check_dproto),
    ("contrastive oracle", check_moco),
    ("intra-variance oracle", check_intra_variance),
    ("ci95 identity", check_ci95),
    ("scm generator", check_scm),
    ("k-means blobs", check_kmeans),
    ("checkpoint reload", check_checkpoint),
]


def run_selftest(seed: int = 0, out=None) -> bool:
    import sys
    out = out or sys.stdout
    buf = io.StringIO()
    ok_all = True
    rngs = Rng(seed).split(len(CHECKS))
    for (name, fn), rng in zip(CHECKS, rngs):
        try:
            ok, detail = fn(rng)
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        ok_all &= bool(ok)
        buf.write(f"{name:<24} {'PASS' if ok else 'FAIL'}  {detail}\n")
    buf.write(f"{'overall':<24} {'PASS' if ok_all else 'FAIL'}\n")
    out.write(buf.getvalue())
    return ok_all
