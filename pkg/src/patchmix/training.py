"""Episode objective with manual backward pass, and the two-stage training loop.

Stage 1 trains on mixed queries with the prototype and global-classifier
losses plus correlation-guided reconstruction. Stage 2 freezes a copy of the
stage-1 model as teacher, picks each class's gallery class along the
maximum-similarity path over the teacher's prototypes, and adds a
distillation term on the spatially averaged confidence logits.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import augment as aug
from . import cgr, dproto, hardness
from .config import RunConfig
from .core import NumericalError, Rng
from .datasets import Episode, LabeledDataset, sample_episode
from .metrics import intra_variance, novel_intra_variance, pooled_unit_features
from .nets import SGD, FewShotModel, build_model, clip_grads, cosine_lr

log = logging.getLogger(__name__)


@dataclass
class MixedEpisode:
    episode: Episode
    queries: np.ndarray              # inputs actually fed to the network
    targets: list                    # per query: episode-class label map or soft vector
    base_targets: list               # same, over base classes
    gallery_idx: np.ndarray          # which episode query served as gallery
    counterparts: np.ndarray | None = None   # gallery with the query's box pasted in
    known: np.ndarray | None = None          # (NQ, gh, gw) cells of the mixed query from the query
    orig_q: np.ndarray | None = None
    orig_g: np.ndarray | None = None


def _to_base(t, inv, n_base):
    t = np.asarray(t)
    if t.dtype.kind in "iu":
        return inv[t]
    out = np.zeros(n_base)
    np.add.at(out, inv, t)
    return out


def prepare_episode(ep: Episode, cfg: RunConfig, rng: Rng, n_base: int, grid,
                    gallery_of: dict | None = None, augment: str | None = None,
                    with_cgr: bool = False) -> MixedEpisode:
    """Mix every query with a gallery query of the same episode.

    Without ``gallery_of`` the gallery is any other query of the episode;
    with it, a random query of class ``gallery_of[query class]``.
    """
    augment = augment or cfg.augment
    imgs, labels = ep.query_images, ep.query_labels
    nq = len(labels)
    inv = ep.episode_to_class
    by_class = {c: np.flatnonzero(labels == c) for c in range(ep.way)}
    mixed, targets, gidx = [], [], []
    counter, known = [], []
    for i in range(nq):
        if gallery_of is None:
            j = int(rng.integers(0, nq - 1))
            j += j >= i
        else:
            pool = by_class[gallery_of[int(labels[i])]]
            j = int(pool[rng.integers(0, len(pool))])
        gidx.append(j)
        q, g, yq, yg = imgs[i], imgs[j], int(labels[i]), int(labels[j])
        if augment == "patchmix":
            m, spec = aug.patchmix(q, g, yq, yg, grid, rng)
            targets.append(spec.label_map)
            if with_cgr:
                counter.append(aug.counterpart(q, g, spec))
                known.append(~spec.cells)
        elif augment == "cutmix":
            m, soft = aug.cutmix(q, g, yq, yg, ep.way, rng)
            targets.append(soft)
        elif augment == "mixup":
            m, soft = aug.mixup(q, g, yq, yg, ep.way, rng)
            targets.append(soft)
        else:
            m = q
            targets.append(np.full(grid, yq, dtype=np.int64))
        mixed.append(m)
    gidx = np.array(gidx)
    out = MixedEpisode(ep, np.stack(mixed), targets,
                       [_to_base(t, inv, n_base) for t in targets], gidx)
    if with_cgr and augment == "patchmix":
        out.counterparts = np.stack(counter)
        out.known = np.stack(known).astype(np.float64)
        out.orig_q = imgs
        out.orig_g = imgs[gidx]
    return out


def objective(model: FewShotModel, mep: MixedEpisode, cfg: RunConfig, rng: Rng | None = None,
              want_grad: bool = True, noise=None, cgr_temperature: float | None = None,
              teacher_logits=None, kd_kind: str | None = None):
    """Forward the full loss and, if asked, its gradient for every parameter.

    Returns ``(losses, grads)``; ``losses["total"]`` is the optimised scalar.
    ``noise`` fixes the gumbel draw of the reconstruction selection.
    """
    ep = mep.episode
    ns, nq = len(ep.support_labels), len(mep.queries)
    use_cgr = mep.counterparts is not None
    parts = [ep.support_images, mep.queries] + ([mep.counterparts] if use_cgr else [])
    F = model.backbone.forward(np.concatenate(parts), keep=want_grad)
    fs, fq = F[:ns], F[ns:ns + nq]
    fmap = F.shape[1:]
    h, w = fmap[1:]

    protos = dproto.prototypes(fs, ep.support_labels, ep.way, ep.shot)
    conf = dproto.confidence_map(fq, protos)
    lf, dconf = dproto.fewshot_loss_grad(conf, mep.targets, cfg.scale)
    lg, dlogits = dproto.global_loss_grad(fq, model.classifier, mep.base_targets, keep=want_grad)
    losses = {"fewshot": lf, "global": lg, "base": dproto.total_loss(lf, lg)}
    total = losses["base"]

    if teacher_logits is not None:
        student = cfg.scale * conf.mean(axis=(2, 3))
        lkd, dstudent = hardness.distill_loss_grad(student, teacher_logits, kd_kind or cfg.kd_kind,
                                                   cfg.kd_temperature)
        losses["kd"] = lkd
        total = hardness.stage2_loss(total, lkd)
        dconf = dconf + cfg.scale * dstudent[:, :, None, None] / (h * w)

    if use_cgr:
        fg = F[ns + nq:]
        T = cgr_temperature or cfg.cgr_temperature
        pair = cgr.MixedPair(fq, fg, mep.known)
        aq, ag = cgr.patch_confidence(pair)
        sel = cgr.normalize_select(aq, ag, T, rng, hard=cfg.cgr_hard, noise=noise)
        mq, mg = cgr.merge(pair, sel)
        recon = model.decoder.forward(np.concatenate([mq, mg]), keep=want_grad)
        l_sel, dlogit_sel = cgr.selection_loss(sel, mep.known)
        l_rq, drq = cgr.reconstruction_loss(recon[:nq], mep.orig_q)
        l_rg, drg = cgr.reconstruction_loss(recon[nq:], mep.orig_g)
        l_rec = l_rq + l_rg
        l_cr = cfg.lambda_sel * l_sel + cfg.lambda_rec * l_rec
        losses.update(sel=l_sel, rec=l_rec, cgr=l_cr)
        total = total + l_cr
    losses["total"] = total
    if not np.isfinite(total):
        raise NumericalError(f"non-finite loss {losses}")
    if not want_grad:
        return losses, None

    grads = {}
    g_cls, dfq_cls = model.classifier.backward(0.5 * dlogits)
    grads.update({f"classifier.{k}": v for k, v in g_cls.items()})
    dfq, dprotos = dproto.confidence_map_backward(fq, protos, dconf)
    dfq = dfq + dfq_cls
    dfs = dproto.prototypes_backward(dprotos, ep.support_labels, ep.shot, fmap)
    dF = [dfs, dfq]
    if use_cgr:
        drecon = cfg.lambda_rec * np.concatenate([drq, drg])
        g_dec, dmerged = model.decoder.backward(drecon)
        grads.update({f"decoder.{k}": v for k, v in g_dec.items()})
        dxq, dxg, dlogit = cgr.merge_backward(pair, sel, dmerged[:nq], dmerged[nq:])
        dlogit = dlogit + cfg.lambda_sel * dlogit_sel
        cq, cg = cgr.patch_confidence_backward(pair, dlogit / T, -dlogit / T)
        dF[1] = dF[1] + dxq + cq
        dF.append(dxg + cg)
    g_bb = model.backbone.backward(np.concatenate(dF))
    grads.update({f"backbone.{k}": v for k, v in g_bb.items()})
    return losses, grads


def teacher_assignment(teacher: FewShotModel, ep: Episode, rng: Rng):
    """Teacher prototypes, and gallery classes along the hardest TSP path."""
    fs = teacher.backbone.forward(ep.support_images)
    protos = dproto.prototypes(fs, ep.support_labels, ep.way, ep.shot)
    graph = hardness.class_similarity(protos)
    start = int(rng.integers(0, ep.way))
    return protos, hardness.tsp_hardest_path(graph, start)


STREAMS = ("init", "train", "iv", "stage2", "data", "eval")


def streams(seed: int) -> dict:
    """Independent named random streams derived from one run seed."""
    return dict(zip(STREAMS, Rng(seed).split(len(STREAMS))))


@dataclass
class StageResult:
    iv_rows: list
    losses: list


class Trainer:
    """Two-stage episodic training on a base split.

    ``novel`` (optional) feeds the per-epoch novel intra-variance trace.
    """

    def __init__(self, cfg: RunConfig, base: LabeledDataset, novel: LabeledDataset | None = None,
                 n_base: int | None = None):
        self.cfg = cfg
        self.base = base
        self.novel = novel
        self.n_base = n_base or int(base.labels.max()) + 1
        C, H, W = base.image_shape
        self.grid = (cfg.grid, cfg.grid)
        self.image_hw = (H, W)
        self.channels = C
        st = streams(cfg.seed)
        self.init_rng, self.train_rng, self.iv_rng, self.stage2_rng = (
            st["init"], st["train"], st["iv"], st["stage2"])
        self._iv_base_idx = self._iv_subset(base, self.iv_rng)
        self._iv_novel_idx = self._iv_subset(novel, self.iv_rng) if novel is not None else None

    def _iv_subset(self, ds, rng):
        idx = []
        for c, members in sorted(ds.by_class().items()):
            take = min(len(members), self.cfg.iv_per_class)
            idx.append(members[rng.permutation(len(members))[:take]])
        return np.sort(np.concatenate(idx))

    def new_model(self) -> FewShotModel:
        cfg = self.cfg
        return build_model(self.channels, self.image_hw, self.grid, cfg.hidden, cfg.feat_dim,
                           self.n_base, self.init_rng)

    def iv_row(self, model: FewShotModel, epoch: int):
        base = self.base.subset(self._iv_base_idx)
        fb = pooled_unit_features(model, base.images)
        base_iv = intra_variance(fb, base.labels)
        novel_iv = float("nan")
        if self.novel is not None:
            nov = self.novel.subset(self._iv_novel_idx)
            fn = pooled_unit_features(model, nov.images)
            novel_iv = novel_intra_variance(fn, nov.labels, Rng(self.cfg.seed + 7919 * (epoch + 1)),
                                            self.cfg.iv_classes, self.cfg.iv_repeats)
        return base_iv, novel_iv

    def _loop(self, model, epochs, step_fn, label, iv_rows, epoch_offset=0):
        cfg = self.cfg
        opt = SGD(cfg.momentum, cfg.weight_decay)
        params = model.named_params()
        total_steps = epochs * cfg.episodes_per_epoch
        step = 0
        history = []
        for epoch in range(epochs):
            acc = []
            for _ in range(cfg.episodes_per_epoch):
                frac = step / max(total_steps - 1, 1)
                losses, grads = step_fn(model, frac)
                grads, _ = clip_grads(grads, cfg.clip_norm)
                opt.step(params, grads, cosine_lr(cfg.lr, step, total_steps))
                acc.append(losses["total"])
                step += 1
            mean_loss = float(np.mean(acc))
            history.append(mean_loss)
            b, n = self.iv_row(model, epoch_offset + epoch)
            iv_rows.append((epoch_offset + epoch + 1, b, n))
            log.info("%s epoch %d loss %.4f base_iv %.4f novel_iv %.4f",
                     label, epoch + 1, mean_loss, b, n)
        return history

    def stage1(self, model: FewShotModel | None = None, augment: str | None = None,
               iv_rows: list | None = None, use_cgr: bool | None = None) -> tuple[FewShotModel, StageResult]:
        cfg = self.cfg
        model = model or self.new_model()
        augment = augment or cfg.augment
        use_cgr = cfg.cgr if use_cgr is None else use_cgr
        use_cgr = use_cgr and augment == "patchmix"
        rng = self.train_rng
        iv_rows = [] if iv_rows is None else iv_rows

        def step(m, frac):
            ep = sample_episode(self.base, cfg.way, cfg.shot, cfg.queries, rng)
            mep = prepare_episode(ep, cfg, rng, self.n_base, self.grid, augment=augment,
                                  with_cgr=use_cgr)
            T = cfg.cgr_temperature + frac * (cfg.cgr_temperature_end - cfg.cgr_temperature)
            return objective(m, mep, cfg, rng, cgr_temperature=T)

        hist = self._loop(model, cfg.epochs, step, "stage1", iv_rows)
        return model, StageResult(iv_rows, hist)

    def stage2(self, teacher: FewShotModel, iv_rows: list | None = None,
               augment: str | None = None) -> tuple[FewShotModel, StageResult]:
        cfg = self.cfg
        student = teacher.copy()
        augment = augment or cfg.augment
        rng = self.stage2_rng
        iv_rows = [] if iv_rows is None else iv_rows
        kind = cfg.kd_kind

        def step(m, frac):
            ep = sample_episode(self.base, cfg.way, cfg.shot, cfg.queries, rng)
            protos, tsp = teacher_assignment(teacher, ep, rng)
            mep = prepare_episode(ep, cfg, rng, self.n_base, self.grid,
                                  gallery_of=tsp.gallery_of, augment=augment)
            t_conf = dproto.confidence_map(teacher.backbone.forward(mep.queries), protos)
            t_logits = cfg.scale * t_conf.mean(axis=(2, 3))
            return objective(m, mep, cfg, rng, teacher_logits=t_logits, kd_kind=kind)

        hist = self._loop(student, cfg.epochs_stage2, step, "stage2", iv_rows,
                          epoch_offset=len(iv_rows))
        return student, StageResult(iv_rows, hist)
