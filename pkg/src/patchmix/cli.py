"""Command-line entry point.

    patchmix train          two-stage training, checkpoints and iv_trace.csv
    patchmix eval           episode accuracy of a checkpoint, eval.csv
    patchmix scm-experiment baseline / mixup / cutmix / patchmix on the SCM data, probe.csv
    patchmix unsup-pretrain PatchMoCo pretraining, k-means pseudo-labels, then train
    patchmix selftest       oracle and invariant checks
    patchmix generate-scm   write the SCM splits as PMX1 manifests

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .core import NumericalError, PatchMixError, Rng, StateError
from .datasets import LabeledDataset, generate_scm, load_dataset, write_manifest, write_z_csv
from .metrics import evaluate, spurious_probe, write_rows
from .nets import build_model, file_digest, load_checkpoint, save_checkpoint
from .training import Trainer, streams

log = logging.getLogger("patchmix")

SCM_METHODS = ("baseline", "mixup", "cutmix", "patchmix")
_AUGMENT_OF = {"baseline": "none", "mixup": "mixup", "cutmix": "cutmix", "patchmix": "patchmix"}


# ----------------------------------------------------------------- data / io

def load_data(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset | None]:
    """Base and (optional) novel splits: manifests if given, else fresh SCM data."""
    if cfg.base:
        base = load_dataset(cfg.base, "base")
        novel = load_dataset(cfg.novel, "novel") if cfg.novel else None
        return base, novel
    train, test, _ = generate_scm(cfg.scm, cfg.n_train, cfg.n_test, streams(cfg.seed)["data"])
    return train, test


def model_from_checkpoint(path, image_shape):
    params = load_checkpoint(path)
    C, H, W = image_shape
    hidden, feat = params["backbone.W2"].shape
    d = params["backbone.W1"].shape[0]
    side = int(round(np.sqrt(d / C)))      # square patches
    grid = (H // side, W // side)
    n_base = params["classifier.W"].shape[1]
    model = build_model(C, (H, W), grid, hidden, feat, n_base, Rng(0))
    model.load_params(params)
    return model


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _iv_rows(rows):
    return [(int(e), float(b), float(n)) for e, b, n in rows]


# ------------------------------------------------------------------ commands

def cmd_train(cfg: RunConfig) -> dict:
    out = _out(cfg)
    base, novel = load_data(cfg)
    (out / "config.txt").write_text(cfg.to_text())
    trainer = Trainer(cfg, base, novel)
    iv = []
    model, _ = trainer.stage1(iv_rows=iv)
    stage1 = out / "stage1.pmx"
    save_checkpoint(stage1, model.named_params())
    result = {"stage1": str(stage1)}
    if cfg.stage2:
        before = file_digest(stage1)
        teacher = model_from_checkpoint(stage1, base.image_shape)
        student, _ = trainer.stage2(teacher, iv_rows=iv)
        if file_digest(stage1) != before:
            raise StateError("stage 2 modified the teacher checkpoint")
        save_checkpoint(out / "stage2.pmx", student.named_params())
        result["stage2"] = str(out / "stage2.pmx")
    write_rows(out / "iv_trace.csv", ["epoch", "base_iv", "novel_iv"], _iv_rows(iv))
    result["iv_trace"] = iv
    return result


def cmd_eval(cfg: RunConfig):
    out = _out(cfg)
    base, novel = load_data(cfg)
    ds = novel if novel is not None else base
    ckpt = cfg.checkpoint or str(out / ("stage2.pmx" if cfg.stage2 else "stage1.pmx"))
    model = model_from_checkpoint(ckpt, ds.image_shape)
    report = evaluate(model, ds, cfg.way, cfg.shot, cfg.eval_queries, cfg.eval_episodes,
                      streams(cfg.seed)["eval"])
    report.write_csv(out / "eval.csv")
    print(f"{cfg.way}-way {cfg.shot}-shot: {100 * report.mean_accuracy:.2f} "
          f"+- {100 * report.ci95:.2f} over {report.n_episodes} episodes")
    return report


def scm_run(cfg: RunConfig, method: str, seed: int, out: Path | None = None) -> dict:
    """One SCM training run for ``method`` and seed; returns probe, accuracy and IV trace."""
    from dataclasses import replace
    t0 = time.perf_counter()
    run = replace(cfg, seed=seed, augment=_AUGMENT_OF[method], stage2=False,
                  cgr=cfg.cgr and method == "patchmix")
    train, test, _ = generate_scm(run.scm, run.n_train, run.n_test, streams(seed)["data"])
    trainer = Trainer(run, train, test)
    model, res = trainer.stage1()
    feats = model.features(test.images).mean(axis=(-2, -1))
    probe = spurious_probe(feats, test.meta["z_component"])
    report = evaluate(model, test, run.way, run.shot, run.eval_queries, run.eval_episodes,
                      streams(seed)["eval"])
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "iv_trace.csv", ["epoch", "base_iv", "novel_iv"], _iv_rows(res.iv_rows))
        report.write_csv(out / "eval.csv")
    return {"method": method, "seed": seed, "probe_acc": probe,
            "novel_acc": report.mean_accuracy, "iv_trace": res.iv_rows,
            "seconds": time.perf_counter() - t0}


def cmd_scm_experiment(cfg: RunConfig, methods=SCM_METHODS) -> list[dict]:
    out = _out(cfg)
    (out / "config.txt").write_text(cfg.to_text())
    results = []
    for k in range(cfg.scm_seeds):
        seed = cfg.seed + k
        rows = []
        for method in methods:
            r = scm_run(cfg, method, seed, out / f"seed{seed}" / method)
            log.info("seed %d %-8s probe %.4f novel acc %.4f final novel iv %.4f", seed, method,
                     r["probe_acc"], r["novel_acc"], r["iv_trace"][-1][2])
            rows.append((method, r["probe_acc"], r["novel_acc"]))
            results.append(r)
        write_rows(out / f"seed{seed}" / "probe.csv", ["method", "probe_acc", "novel_acc"], rows)
    write_rows(out / "probe.csv", ["seed", "method", "probe_acc", "novel_acc"],
               [(r["seed"], r["method"], r["probe_acc"], r["novel_acc"]) for r in results])
    return results


def cmd_unsup(cfg: RunConfig) -> dict:
    from .unsup import kmeans_pseudolabels, pretrain, write_pseudolabels
    out = _out(cfg)
    base, novel = load_data(cfg)
    (out / "config.txt").write_text(cfg.to_text())
    st = streams(cfg.seed)
    trainer = Trainer(cfg, base, novel)
    model = trainer.new_model()
    pretrain(model, base, cfg, st["train"].split(1)[0])
    save_checkpoint(out / "pretrain.pmx", model.named_params())
    k = cfg.clusters or len(base.classes)
    feats = model.features(base.images).mean(axis=(-2, -1))
    parts = kmeans_pseudolabels(feats, k, cfg.partitions, st["data"].split(1)[0])
    write_pseudolabels(out / "pseudo_labels.csv", parts)
    pseudo = base.relabeled(parts[0])
    trainer = Trainer(cfg, pseudo, novel, n_base=k)
    iv = []
    model, _ = trainer.stage1(model=model, iv_rows=iv)
    save_checkpoint(out / "stage1.pmx", model.named_params())
    if cfg.stage2:
        teacher = model.copy()
        model, _ = trainer.stage2(teacher, iv_rows=iv)
        save_checkpoint(out / "stage2.pmx", model.named_params())
    write_rows(out / "iv_trace.csv", ["epoch", "base_iv", "novel_iv"], _iv_rows(iv))
    return {"iv_trace": iv}


def cmd_generate_scm(cfg: RunConfig) -> dict:
    out = _out(cfg)
    train, test, _ = generate_scm(cfg.scm, cfg.n_train, cfg.n_test, streams(cfg.seed)["data"])
    paths = {"base": write_manifest(train, out, "base"), "novel": write_manifest(test, out, "novel")}
    write_z_csv(train, out / "base_z.csv")
    write_z_csv(test, out / "novel_z.csv")
    for name, p in paths.items():
        print(f"{name}: {p}")
    return paths


def cmd_selftest(cfg: RunConfig) -> bool:
    from .selftest import run_selftest
    return run_selftest(cfg.seed)


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "scm-experiment": cmd_scm_experiment,
    "unsup-pretrain": cmd_unsup,
    "selftest": cmd_selftest,
    "generate-scm": cmd_generate_scm,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="patchmix", description="PatchMix few-shot toolkit")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--scm", help="SCM settings, e.g. rho=0.9,classes=5")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint", help="checkpoint for eval")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.scm:
            overrides.append(f"scm={args.scm}")
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.out:
            overrides.append(f"out_dir={args.out}")
        if args.checkpoint:
            overrides.append(f"checkpoint={args.checkpoint}")
        cfg = load_config(args.config, overrides)
        cfg.command = args.command
        cfg.validate()
        result = COMMANDS[args.command](cfg)
    except NumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 2
    except PatchMixError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if args.command == "selftest" and not result:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
