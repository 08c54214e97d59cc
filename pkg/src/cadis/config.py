"""Training configuration and the desk/paper run profiles."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigurationError, InputError, ValidationError
from .losses import LossWeights
from .networks import NetConfig, desk_config, paper_config

PHASES = ("pretrain", "finetune", "head")
PRECISIONS = ("float32", "float64")


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-4
    schedule: str = "cosine"
    resize: int = 64
    flip_prob: float = 0.5
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    causal_layer_enabled: bool = True
    precision: str = "float32"
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    grad_clip: float = 5.0
    saturating: bool = False
    save_every: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigurationError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.schedule != "cosine":
            raise ConfigurationError(f"only the cosine schedule is supported, got {self.schedule!r}")
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"precision must be one of {PRECISIONS}")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValidationError("flip_prob must lie in [0, 1]")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        self.betas = tuple(self.betas)

    def check_resolution(self, depth: int) -> None:
        if self.resize % 2**depth:
            raise ValidationError(f"resize {self.resize} is not divisible by 2^{depth}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        lw = d.pop("loss_weights", None)
        if isinstance(lw, dict):
            d["loss_weights"] = LossWeights(**lw)
        elif lw is not None:
            d["loss_weights"] = lw
        return cls(**d)


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(TrainConfig)}
    t = types[name]
    if t == "int":
        return int(raw)
    if t == "float":
        return float(raw)
    if t == "bool":
        if raw.lower() not in _BOOL:
            raise ConfigurationError(f"{name}: expected a boolean, got {raw!r}")
        return _BOOL[raw.lower()]
    if t == "tuple":
        return tuple(float(x) for x in raw.split(","))
    return raw


def read_train_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Read ``[train]`` (keys mirror TrainConfig) and ``[loss_weights]`` from an INI file."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise InputError(f"cannot read config file {path}")
    cfg = base or TrainConfig()
    updates = {}
    if cp.has_section("train"):
        known = {f.name for f in fields(TrainConfig)} - {"loss_weights"}
        for k, v in cp["train"].items():
            if k not in known:
                raise ConfigurationError(f"unknown config key {k!r}")
            updates[k] = _coerce(k, v)
    if cp.has_section("loss_weights"):
        lw = asdict(cfg.loss_weights)
        for k, v in cp["loss_weights"].items():
            if k not in lw:
                raise ConfigurationError(f"unknown loss weight {k!r}")
            lw[k] = float(v)
        updates["loss_weights"] = LossWeights(**lw)
    return replace(cfg, **updates)


def write_train_config(cfg: TrainConfig, path) -> None:
    cp = configparser.ConfigParser()
    d = cfg.to_dict()
    lw = d.pop("loss_weights")
    cp["train"] = {k: ",".join(map(str, v)) if isinstance(v, list) else str(v) for k, v in d.items()}
    cp["loss_weights"] = {k: str(v) for k, v in lw.items()}
    with open(path, "w") as fh:
        cp.write(fh)


@dataclass
class RunProfile:
    name: str
    net: NetConfig
    pretrain: TrainConfig
    finetune: TrainConfig
    head: TrainConfig
    n_neighbors: int = 15
    min_dist: float = 0.1

    def flat(self) -> dict:
        out = {}
        for section in ("pretrain", "finetune", "head"):
            for k, v in getattr(self, section).to_dict().items():
                out[f"{section}.{k}"] = v
        for k, v in self.net.to_dict().items():
            out[f"net.{k}"] = v
        out["embedding.n_neighbors"] = self.n_neighbors
        out["embedding.min_dist"] = self.min_dist
        return out


def get_profile(name: str) -> RunProfile:
    if name == "desk":
        return RunProfile(
            "desk",
            desk_config(),
            TrainConfig("pretrain", epochs=40, batch_size=8, resize=64),
            TrainConfig("finetune", epochs=8, batch_size=8, resize=64),
            TrainConfig("head", epochs=300, batch_size=8, resize=64, lr=1e-3, flip_prob=0.0),
        )
    if name == "paper":
        return RunProfile(
            "paper",
            paper_config(),
            TrainConfig("pretrain", epochs=200, batch_size=24, resize=448),
            TrainConfig("finetune", epochs=20, batch_size=24, resize=448),
            TrainConfig("head", epochs=300, batch_size=24, resize=448, lr=1e-3, flip_prob=0.0),
        )
    raise ConfigurationError(f"unknown profile {name!r}; expected 'desk' or 'paper'")


def profile_diff(a: str = "desk", b: str = "paper") -> dict:
    """Fields whose values differ between two profiles: ``{key: (value_a, value_b)}``."""
    fa, fb = get_profile(a).flat(), get_profile(b).flat()
    return {k: (fa[k], fb[k]) for k in sorted(fa) if fa[k] != fb[k]}
