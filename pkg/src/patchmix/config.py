"""Run configuration: a flat dataclass read from ``key = value`` text.

Example file::

    # stage settings
    seed = 3
    way = 5
    augment = patchmix
    scm = rho=0.9,classes=5

Unknown keys and malformed values raise :class:`ArgumentError`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .core import ArgumentError, MissingFileError
from .datasets import ScmConfig

AUGMENTS = ("none", "patchmix", "cutmix", "mixup")


@dataclass
class RunConfig:
    command: str = "train"
    seed: int = 0
    # episodes
    way: int = 5
    shot: int = 1
    queries: int = 15
    # optimisation, shared by both stages
    epochs: int = 30
    epochs_stage2: int = 30
    episodes_per_epoch: int = 50
    lr: float = 0.15
    weight_decay: float = 5e-4
    momentum: float = 0.9
    clip_norm: float = 1.0          # joint gradient-norm cap; 0 disables
    # heads and losses; the global-classifier weight is fixed at 0.5
    scale: float = 10.0
    lambda_sel: float = 0.5
    lambda_rec: float = 0.25
    augment: str = "patchmix"
    cgr: bool = True
    cgr_temperature: float = 1.0
    cgr_temperature_end: float = 1.0
    cgr_hard: bool = True
    stage2: bool = True
    kd: str = "auto"
    kd_temperature: float = 4.0
    # network
    grid: int = 8
    hidden: int = 64
    feat_dim: int = 32
    # evaluation and instrumentation
    eval_episodes: int = 2000
    eval_queries: int = 15
    iv_classes: int = 5
    iv_repeats: int = 20
    iv_per_class: int = 100
    # data
    base: str = ""
    novel: str = ""
    out_dir: str = "runs/default"
    checkpoint: str = ""
    scm: ScmConfig = field(default_factory=ScmConfig)
    n_train: int = 2500
    n_test: int = 1000
    scm_seeds: int = 3
    # unsupervised pretraining
    moco_temperature: float = 0.2
    key_momentum: float = 0.99
    key_bank: int = 1024
    pretrain_epochs: int = 10
    pretrain_batch: int = 64
    clusters: int = 0
    partitions: int = 1

    def validate(self, check_paths: bool = True) -> "RunConfig":
        if self.augment not in AUGMENTS:
            raise ArgumentError(f"augment must be one of {AUGMENTS}, got {self.augment!r}")
        if self.kd not in ("auto", "mse", "kl"):
            raise ArgumentError(f"kd must be auto, mse or kl, got {self.kd!r}")
        for name in ("way", "shot", "queries", "epochs", "episodes_per_epoch", "grid",
                     "hidden", "feat_dim", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be positive")
        if self.way < 2:
            raise ArgumentError("way must be at least 2")
        if not (0.0 <= self.key_momentum < 1.0):
            raise ArgumentError("key_momentum must lie in [0, 1)")
        for t in ("cgr_temperature", "cgr_temperature_end", "kd_temperature", "moco_temperature"):
            if not getattr(self, t) > 0:
                raise ArgumentError(f"{t} must be positive")
        if check_paths:
            for name in ("base", "novel", "checkpoint"):
                p = getattr(self, name)
                if p and not Path(p).exists():
                    raise MissingFileError(f"{name} path does not exist: {p}")
        self.scm.validate()
        return self

    @property
    def kd_kind(self) -> str:
        if self.kd != "auto":
            return self.kd
        return "mse" if self.shot == 1 else "kl"

    def set(self, key: str, value: str) -> None:
        types = {f.name: f.type for f in fields(self)}
        key = key.strip().replace("-", "_")
        value = value.strip()
        if key not in types:
            raise ArgumentError(f"unknown config key {key!r}")
        t = types[key]
        t = t if isinstance(t, str) else t.__name__
        try:
            if t == "bool":
                low = value.lower()
                if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError(value)
                v = low in ("1", "true", "yes", "on")
            elif t == "int":
                v = int(value)
            elif t == "float":
                v = float(value)
            elif t == "ScmConfig":
                v = ScmConfig.parse(value, self.scm)
            else:
                v = value
        except ValueError:
            raise ArgumentError(f"bad value for {key}: {value!r}") from None
        setattr(self, key, v)

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if k == "scm":
                v = ",".join(f"{a}={b}" for a, b in v.items())
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def parse_lines(text: str) -> list[tuple[str, str]]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ArgumentError(f"config line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out.append((k.strip(), v.strip()))
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.exists():
            raise MissingFileError(str(p))
        for k, v in parse_lines(p.read_text()):
            cfg.set(k, v)
    for item in overrides:
        if "=" not in item:
            raise ArgumentError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        cfg.set(k, v)
    return cfg
