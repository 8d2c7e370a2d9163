"""Acceptance suite: one test per criterion, verdicts printed at the end of the run."""
import hashlib
import io
import time
from pathlib import Path

import numpy as np
import pytest

from patchmix import augment as aug
from patchmix import cgr, dproto, hardness, metrics, oracles, unsup
from patchmix.cli import cmd_scm_experiment, cmd_train
from patchmix.config import load_config
from patchmix.core import Rng
from patchmix.datasets import sample_episode
from patchmix.nets import build_model, gradcheck
from patchmix.selftest import run_selftest
from patchmix.training import Trainer, objective, prepare_episode


@pytest.mark.criterion(1)
def test_mask_geometry(criterion):
    rng = Rng(1)
    W = H = 84
    t0 = time.perf_counter()
    draws = [aug.sample_box(W, H, rng) for _ in range(10_000)]
    elapsed = time.perf_counter() - t0
    worst, inside = 0.0, True
    for lam, b in draws:
        worst = max(worst, abs(b.area - (1 - lam) * W * H))
        inside &= b.cw - b.w_hat / 2 >= -1e-9 and b.cw + b.w_hat / 2 <= W + 1e-9
        inside &= b.ch - b.h_hat / 2 >= -1e-9 and b.ch + b.h_hat / 2 <= H + 1e-9
        inside &= b.empty or (0 <= b.w1 <= b.w2 < W and 0 <= b.h1 <= b.h2 < H)
    criterion.update(max_area_gap=f"{worst:.2f}", slack=W + H, seconds=f"{elapsed:.2f}")
    assert worst <= W + H
    assert inside
    assert elapsed < 1.0


@pytest.mark.criterion(2)
def test_label_map_consistency(criterion):
    rng = Rng(2)
    q = np.zeros((3, 84, 84), np.float32)
    g = np.ones((3, 84, 84), np.float32)
    w = h = 11
    worst = 0.0
    for _ in range(1000):
        _, spec = aug.patchmix(q, g, 0, 1, (h, w), rng)
        worst = max(worst, abs(spec.cells.mean() - spec.mask.mean()))
    _, all_gal = aug.patchmix(q, g, 0, 1, (h, w), rng, lam=0.0)
    _, all_q = aug.patchmix(q, g, 0, 1, (h, w), rng, lam=1.0)
    criterion.update(max_gap=f"{worst:.4f}", bound=f"{(w + h) / (w * h):.4f}")
    assert worst <= (w + h) / (w * h)
    assert np.all(all_gal.label_map == 1) and np.all(all_gal.mask == 1)
    assert np.all(all_q.label_map == 0) and np.all(all_q.mask == 0)


@pytest.mark.criterion(3)
def test_gradient_correctness(criterion):
    t0 = time.perf_counter()
    worst, skipped = 0.0, 0
    for seed in range(5):
        r = Rng(seed)
        m = build_model(3, (32, 32), (8, 8), 64, 32, 5, r)
        x = r.normal((2, 3, 32, 32))
        f = r.normal((2, 32, 8, 8))
        for mod, inp in ((m.backbone, x), (m.classifier, f), (m.decoder, f)):
            rep = gradcheck(mod, inp, r)
            for name in mod.params:
                assert name in rep
            skipped += rep.pop("skipped", 0)
            worst = max(worst, max(rep.values()))
    elapsed = time.perf_counter() - t0
    criterion.update(max_rel_err=f"{worst:.2e}", hinge_redraws=skipped, seconds=f"{elapsed:.1f}")
    assert worst < 1e-3
    assert elapsed < 30


@pytest.mark.criterion(4)
def test_tsp_exactness(criterion):
    rng = Rng(4)
    checked = 0
    for n in range(3, 9):
        for _ in range(50):
            a = np.tanh(rng.normal((n, n)))
            sim = 0.5 * (a + a.T)
            np.fill_diagonal(sim, 1.0)
            start = int(rng.integers(0, n))
            got = hardness.tsp_hardest_path(hardness.SimilarityGraph(sim), start)
            assert got.cost == oracles.held_karp_cost(sim, start)
            assert got.cost == hardness.path_cost(sim, got.path)
            checked += 1
    criterion.update(graphs=checked)


@pytest.mark.criterion(5)
def test_cgr_selection(criterion):
    rng = Rng(5)
    aq, ag = rng.normal((4, 4)), rng.normal((4, 4))
    soft = cgr.normalize_select(aq, ag, 0.7, rng)
    sum_err = float(np.abs(soft.ahat_q + soft.ahat_g - 1).max())
    hard = cgr.normalize_select(aq, ag, 0.7, rng, hard=True)
    onehot = set(np.unique(hard.ahat_q)) <= {0.0, 1.0} and np.all(hard.ahat_q + hard.ahat_g == 1)
    n = 10_000
    draws = cgr.normalize_select(np.broadcast_to(aq, (n, 4, 4)), np.broadcast_to(ag, (n, 4, 4)),
                                 0.7, rng, hard=True)
    freq = draws.ahat_q.mean(axis=0)
    closed = np.exp(aq / 0.7) / (np.exp(aq / 0.7) + np.exp(ag / 0.7))
    gap = float(np.abs(freq - closed).max())
    criterion.update(sum_err=f"{sum_err:.1e}", max_freq_gap=f"{gap:.4f}")
    assert sum_err < 1e-6
    assert onehot
    assert gap < 0.02


@pytest.mark.criterion(6)
def test_loss_identities(criterion, tiny_cfg, small_scm):
    tr = Trainer(tiny_cfg, small_scm[0], small_scm[1])
    model = tr.new_model()
    worst = 0.0
    for seed in range(5):
        ep = sample_episode(tr.base, tiny_cfg.way, tiny_cfg.shot, tiny_cfg.queries, Rng(seed))
        mep = prepare_episode(ep, tiny_cfg, Rng(seed + 10), tr.n_base, tr.grid)
        teacher = Rng(seed + 20).normal((len(mep.queries), tiny_cfg.way))
        plain, _ = objective(model, mep, tiny_cfg, want_grad=False)
        worst = max(worst, abs(plain["total"] - (plain["fewshot"] + 0.5 * plain["global"])))
        worst = max(worst, abs(dproto.total_loss(plain["fewshot"], plain["global"]) - plain["total"]))
        for kind in ("mse", "kl"):
            ha, _ = objective(model, mep, tiny_cfg, want_grad=False, teacher_logits=teacher,
                              kd_kind=kind)
            worst = max(worst, abs(ha["total"] - (plain["total"] + ha["kd"])))
            worst = max(worst, abs(hardness.stage2_loss(plain["total"], ha["kd"]) - ha["total"]))
    r = Rng(6)
    bitwise = True
    for _ in range(20):
        q, k = r.normal((4, 5, 3, 3)), r.normal((4, 5))
        bank = r.normal((3, 5))
        bitwise &= unsup.patchmoco_loss(q, k, np.ones((4, 3, 3)), 0.2, bank) == \
            unsup.dense_loss(q, k, 0.2, bank)
        bitwise &= unsup.patchmoco_loss(q, k, np.zeros((4, 3, 3)), 0.2, bank) == 0.0
    criterion.update(max_identity_err=f"{worst:.1e}", pmc_masks_exact=bitwise)
    assert worst < 1e-6
    assert bitwise


@pytest.mark.criterion(7)
def test_oracle_equivalence(criterion):
    r = Rng(7)
    errs = dict.fromkeys(["protos", "conf", "ce", "soft_ce", "iv", "moco", "dense"], 0.0)
    for _ in range(20):
        way, shot = 5, int(r.integers(1, 4))
        f = r.normal((way * shot, 6, 3, 3))
        y = np.tile(np.arange(way), shot)
        p = dproto.prototypes(f, y, way, shot)
        errs["protos"] = max(errs["protos"], np.abs(p - oracles.prototypes(f, y, way)).max())
        q = r.normal((6, 3, 3))
        conf = dproto.confidence_map(q, p)
        errs["conf"] = max(errs["conf"], np.abs(conf - oracles.confidence_map(q, p)).max())
        ymap = r.integers(0, way, (3, 3))
        errs["ce"] = max(errs["ce"], abs(dproto.fewshot_loss(conf, ymap)
                                         - oracles.position_ce(10 * conf, ymap)))
        m = build_model(1, (6, 6), (3, 3), 4, 6, 4, r)
        base = int(r.integers(0, 4))
        img_logits = m.classifier.forward(q).mean(axis=(0, 1))
        errs["soft_ce"] = max(errs["soft_ce"], abs(dproto.global_loss(q, m.classifier, base)
                                                   - oracles.soft_ce(img_logits, np.eye(4)[base])))
        feats, labels = r.normal((30, 4)), r.integers(0, 3, 30)
        errs["iv"] = max(errs["iv"], abs(metrics.intra_variance(feats, labels)
                                         - oracles.intra_variance(feats, labels)))
        qb, kb, bank = r.normal((4, 5)), r.normal((4, 5)), r.normal((3, 5))
        errs["moco"] = max(errs["moco"], abs(unsup.moco_loss(qb, kb, 0.2, bank)
                                             - oracles.moco_loss(qb, kb, 0.2, bank)))
        qm = r.normal((4, 5, 2, 2))
        masks = (r.normal((4, 2, 2)) > 0).astype(float)
        errs["dense"] = max(errs["dense"],
                            abs(unsup.dense_loss(qm, kb, 0.2) - oracles.patchmoco_loss(
                                qm, kb, np.ones((4, 2, 2)), 0.2)),
                            abs(unsup.patchmoco_loss(qm, kb, masks, 0.2)
                                - oracles.patchmoco_loss(qm, kb, masks, 0.2)))
    criterion.update(max_err=f"{max(errs.values()):.1e}")
    for name, e in errs.items():
        assert e < 1e-5, name


@pytest.fixture(scope="module")
def scm_experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("scm")
    cfg = load_config(None, ["scm=rho=0.9", f"out_dir={out}"]).validate()
    t0 = time.perf_counter()
    results = cmd_scm_experiment(cfg)
    return {"results": results, "seconds": time.perf_counter() - t0, "out": Path(out),
            "cfg": cfg}


def _by_seed(results):
    table = {}
    for r in results:
        table.setdefault(r["seed"], {})[r["method"]] = r
    return table


@pytest.mark.criterion(8)
def test_neural_collapse_direction(criterion, scm_experiment):
    table = _by_seed(scm_experiment["results"])
    out, cfg = scm_experiment["out"], scm_experiment["cfg"]
    wins, pairs = 0, []
    for seed, runs in table.items():
        pm, base = runs["patchmix"]["iv_trace"][-1][2], runs["baseline"]["iv_trace"][-1][2]
        wins += pm < base
        pairs.append(f"{pm:.4f}/{base:.4f}")
        for method in ("patchmix", "baseline"):
            rows = (out / f"seed{seed}" / method / "iv_trace.csv").read_text().splitlines()
            assert rows[0] == "epoch,base_iv,novel_iv" and len(rows) == cfg.epochs + 1
    seconds = sum(r["seconds"] for r in scm_experiment["results"]
                  if r["method"] in ("patchmix", "baseline"))
    criterion.update(seeds_lower=f"{wins}/{len(table)}", patchmix_vs_baseline_iv=" ".join(pairs),
                     seconds=f"{seconds:.0f}")
    assert len(table) == 3
    assert seconds < 600
    assert wins >= 2


@pytest.mark.criterion(9)
def test_disentanglement_direction(criterion, scm_experiment):
    table = _by_seed(scm_experiment["results"])
    probe_wins = sum(t["patchmix"]["probe_acc"] < t["baseline"]["probe_acc"] for t in table.values())
    acc_wins = sum(t["patchmix"]["novel_acc"] > t["baseline"]["novel_acc"] for t in table.values())
    cutmix = " ".join(f"{t['cutmix']['probe_acc']:.3f}" for t in table.values())
    criterion.update(probe_lower=f"{probe_wins}/3", acc_higher=f"{acc_wins}/3",
                     cutmix_probe=cutmix, seconds=f"{scm_experiment['seconds']:.0f}")
    assert scm_experiment["seconds"] < 900
    assert probe_wins >= 2
    assert acc_wins >= 2


def _digest_dir(path):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(Path(path).iterdir()) if p.is_file()}


@pytest.mark.criterion(10)
def test_determinism(criterion, tiny_cfg):
    outs = []
    for _ in range(2):
        buf = io.StringIO()
        run_selftest(0, buf)
        outs.append(buf.getvalue())
    digests = []
    for _ in range(2):
        cmd_train(tiny_cfg)
        digests.append(_digest_dir(tiny_cfg.out_dir))
    criterion.update(selftest_identical=outs[0] == outs[1], train_files=len(digests[0]))
    assert outs[0] == outs[1]
    assert digests[0] == digests[1] and "stage2.pmx" in digests[0]


@pytest.mark.criterion(11)
def test_evaluation_statistics(criterion, small_scm):
    accs = 0.6 + 0.1 * Rng(11).normal(1000)
    err = abs(metrics.ci95(accs) - 1.96 * np.std(accs) / np.sqrt(len(accs)))
    noise = Rng(12)
    rep = metrics.evaluate(lambda im: noise.normal((len(im), 8, 2, 2)), small_scm[1], 5, 1, 15,
                           2000, Rng(13))
    criterion.update(ci_err=f"{err:.1e}", chance_acc=f"{rep.mean_accuracy:.4f}",
                     ci95=f"{rep.ci95:.4f}")
    assert err < 1e-9
    assert abs(rep.mean_accuracy - 0.2) <= rep.ci95
