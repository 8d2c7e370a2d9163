import numpy as np
import pytest

from patchmix import dproto
from patchmix.core import NumericalError, Rng
from patchmix.datasets import sample_episode
from patchmix.training import Trainer, objective, prepare_episode, streams, teacher_assignment


@pytest.fixture
def setup(tiny_cfg, small_scm):
    train, test, _ = small_scm
    tr = Trainer(tiny_cfg, train, test)
    return tiny_cfg, tr, train


def _episode(tr, cfg, seed=0):
    return sample_episode(tr.base, cfg.way, cfg.shot, cfg.queries, Rng(seed))


@pytest.mark.parametrize("augment", ["none", "patchmix", "cutmix", "mixup"])
def test_prepare_episode_targets(setup, augment):
    cfg, tr, _ = setup
    ep = _episode(tr, cfg)
    mep = prepare_episode(ep, cfg, Rng(1), tr.n_base, tr.grid, augment=augment)
    assert mep.queries.shape == ep.query_images.shape
    assert np.all(mep.gallery_idx != np.arange(len(mep.gallery_idx)))
    inv = ep.episode_to_class
    for t, b in zip(mep.targets, mep.base_targets):
        if augment in ("none", "patchmix"):
            assert t.shape == tr.grid and np.array_equal(inv[t], b)
        else:
            assert t.sum() == pytest.approx(1) and b.sum() == pytest.approx(1)
    if augment == "none":
        assert np.array_equal(mep.queries, ep.query_images)


def test_prepare_episode_tsp_galleries(setup):
    cfg, tr, _ = setup
    ep = _episode(tr, cfg)
    gal = {0: 3, 1: 0, 2: 1, 3: 2, 4: 3}
    mep = prepare_episode(ep, cfg, Rng(2), tr.n_base, tr.grid, gallery_of=gal)
    for i, j in enumerate(mep.gallery_idx):
        assert ep.query_labels[j] == gal[int(ep.query_labels[i])]


def test_objective_identities(setup):
    cfg, tr, _ = setup
    model = tr.new_model()
    ep = _episode(tr, cfg)
    mep = prepare_episode(ep, cfg, Rng(3), tr.n_base, tr.grid, with_cgr=True)
    noise = Rng(4).gumbel((2, len(mep.queries), *tr.grid))
    losses, _ = objective(model, mep, cfg, noise=noise, want_grad=False)
    assert losses["base"] == losses["fewshot"] + 0.5 * losses["global"]
    assert losses["cgr"] == cfg.lambda_sel * losses["sel"] + cfg.lambda_rec * losses["rec"]
    assert losses["total"] == losses["base"] + losses["cgr"]
    t = Rng(5).normal((len(mep.queries), cfg.way))
    plain = prepare_episode(ep, cfg, Rng(3), tr.n_base, tr.grid)
    l2, _ = objective(model, plain, cfg, teacher_logits=t, kd_kind="mse", want_grad=False)
    assert l2["total"] == pytest.approx(l2["base"] + l2["kd"], abs=1e-12)


@pytest.mark.parametrize("with_cgr,teacher", [(False, False), (True, False), (False, True)])
def test_objective_gradient_smooth_directions(setup, with_cgr, teacher):
    """Directional derivative of the full objective vs finite differences.

    At eps=1e-6 no ReLU or L1 kink is crossed by a random direction with
    overwhelming probability, so the check is sharp.
    """
    cfg, tr, _ = setup
    cfg.cgr_hard = False
    model = tr.new_model()
    ep = _episode(tr, cfg, 6)
    mep = prepare_episode(ep, cfg, Rng(7), tr.n_base, tr.grid, with_cgr=with_cgr)
    noise = Rng(8).gumbel((2, len(mep.queries), *tr.grid))
    t = Rng(9).normal((len(mep.queries), cfg.way)) if teacher else None
    kw = dict(noise=noise, teacher_logits=t, kd_kind="kl")
    _, grads = objective(model, mep, cfg, **kw)
    params = model.named_params()
    r = Rng(10)
    for trial in range(3):
        d = {k: r.normal(v.shape) for k, v in params.items()}
        base = {k: v.copy() for k, v in params.items()}
        vals = []
        for s in (1e-6, -1e-6):
            for k in params:
                params[k][...] = base[k] + s * d[k]
            vals.append(objective(model, mep, cfg, want_grad=False, **kw)[0]["total"])
        for k in params:
            params[k][...] = base[k]
        fd = (vals[0] - vals[1]) / 2e-6
        an = sum(float((grads[k] * d[k]).sum()) for k in grads)
        assert an == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_objective_nan_aborts(setup):
    cfg, tr, _ = setup
    model = tr.new_model()
    model.classifier.params["b"][0] = np.inf
    mep = prepare_episode(_episode(tr, cfg), cfg, Rng(0), tr.n_base, tr.grid)
    with pytest.raises(NumericalError):
        objective(model, mep, cfg)


def test_teacher_assignment_is_a_path(setup):
    cfg, tr, _ = setup
    ep = _episode(tr, cfg)
    protos, tsp = teacher_assignment(tr.new_model(), ep, Rng(0))
    assert protos.shape == (cfg.way, cfg.feat_dim)
    assert sorted(tsp.path) == list(range(cfg.way))


def test_streams_are_independent_and_stable():
    a, b = streams(3), streams(3)
    assert list(a) == ["init", "train", "iv", "stage2", "data", "eval"]
    assert [r.seed for r in a.values()] == [r.seed for r in b.values()]
    assert len({r.seed for r in a.values()}) == 6


def test_two_stage_training_runs_and_keeps_teacher(setup):
    cfg, tr, _ = setup
    model, res = tr.stage1()
    assert [row[0] for row in res.iv_rows] == [1, 2]
    assert all(np.isfinite(v) for row in res.iv_rows for v in row[1:])
    snapshot = {k: v.copy() for k, v in model.named_params().items()}
    student, res2 = tr.stage2(model, iv_rows=list(res.iv_rows))
    assert [row[0] for row in res2.iv_rows] == [1, 2, 3]
    for k, v in model.named_params().items():
        assert np.array_equal(v, snapshot[k])
    assert any(not np.array_equal(v, snapshot[k]) for k, v in student.named_params().items())


def test_training_is_replayable(tiny_cfg, small_scm):
    train, test, _ = small_scm
    a, _ = Trainer(tiny_cfg, train, test).stage1()
    b, _ = Trainer(tiny_cfg, train, test).stage1()
    for k, v in a.named_params().items():
        assert v.tobytes() == b.named_params()[k].tobytes()


def test_inference_never_reads_classifier(setup):
    from patchmix.metrics import evaluate
    cfg, tr, _ = setup
    model = tr.new_model()
    before = evaluate(model, tr.novel, 5, 1, 3, 5, Rng(0)).accuracies
    model.classifier.params["W"][:] = np.nan
    model.decoder.params["W1"][:] = np.nan
    after = evaluate(model, tr.novel, 5, 1, 3, 5, Rng(0)).accuracies
    assert np.array_equal(before, after)
