"""Run configuration: a flat ``key = value`` text file with a canonical form.

Lines are ``key = value``; ``#`` starts a comment.  Lists are comma
separated.  :meth:`RunConfig.dumps` writes every key in sorted order, and
the SHA-256 of that text (first 16 hex digits, with ``out_dir`` and
``workers`` blanked) is the config hash stamped into every output artifact.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from typing import get_type_hints

from .data import CIFAR_MEAN, CIFAR_STD, SyntheticSpec
from .graph import TEMPLATES, NetConfig
from .trainer import TrainConfig

__all__ = ["ConfigError", "RunConfig", "METHODS", "METHOD_MODES", "parse_config", "load_config"]

METHODS = ("original", "ours-cell", "ours-full")
METHOD_MODES = {"original": "off", "ours-cell": "cell", "ours-full": "full"}


class ConfigError(ValueError):
    def __init__(self, key: str | None, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    # model
    model: str = "resnet-mini"
    channels: int = 8
    cells: int = 0  # 0 -> template default
    # data
    dataset: str = "synthetic"
    classes: int = 10
    image_size: int = 16
    in_channels: int = 3
    train_per_class: int = 200
    test_per_class: int = 50
    noise: float = 1.0
    data_seed: int = 0
    cifar_dir: str = ""
    normalize_mean: tuple[float, ...] = CIFAR_MEAN
    normalize_std: tuple[float, ...] = CIFAR_STD
    # training
    total_epochs: int = 8
    arch_epochs: int = -1  # -1 -> 25% of total_epochs
    batch_size: int = 64
    lr_omega: float = 0.025
    momentum: float = 0.9
    lr_theta: float = 3e-4
    parameterization: str = "softmax"
    transform_mode: str = "cell"
    seed: int = 1
    repair_policy: str = "repair-to-identity"
    theta_preset: str = "init"
    cosine: bool = False
    augment: bool = False
    dtype: str = "float64"
    # harness
    methods: tuple[str, ...] = METHODS
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    workers: int = 1
    oracle_epochs: int = 2
    out_dir: str = "out"

    def __post_init__(self):
        if self.model not in TEMPLATES:
            raise ConfigError("model", f"unknown template {self.model!r}")
        if self.dataset not in ("synthetic", "cifar10"):
            raise ConfigError("dataset", f"unknown dataset {self.dataset!r}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError("methods", f"unknown method {m!r}; expected a subset of {METHODS}")
        if not self.methods:
            raise ConfigError("methods", "at least one method is required")
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        for key in ("channels", "classes", "image_size", "in_channels", "train_per_class", "test_per_class",
                    "batch_size", "total_epochs", "workers", "oracle_epochs"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be positive")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(_guess_key(str(exc)), str(exc)) from None

    # -- derived objects -------------------------------------------------

    def train_config(self, **overrides) -> TrainConfig:
        kw = dict(
            total_epochs=self.total_epochs,
            arch_epochs=None if self.arch_epochs < 0 else self.arch_epochs,
            batch_size=self.batch_size,
            lr_omega=self.lr_omega,
            momentum=self.momentum,
            lr_theta=self.lr_theta,
            parameterization=self.parameterization,
            transform_mode=self.transform_mode,
            seed=self.seed,
            repair_policy=self.repair_policy,
            theta_preset=self.theta_preset,
            cosine=self.cosine,
            augment=self.augment,
            dtype=self.dtype,
        )
        kw.update(overrides)
        if kw["repair_policy"] not in ("repair-to-identity", "reject", "allow-with-warning"):
            raise ValueError(f"repair_policy: unknown policy {kw['repair_policy']!r}")
        return TrainConfig(**kw)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(self.classes, self.train_per_class, self.test_per_class, self.image_size,
                             self.in_channels, self.noise, self.data_seed)

    def net_config(self) -> NetConfig:
        size = 32 if self.dataset == "cifar10" else self.image_size
        chans = 3 if self.dataset == "cifar10" else self.in_channels
        classes = 10 if self.dataset == "cifar10" else self.classes
        return NetConfig(self.channels, classes, (chans, size, size), self.cells or None)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    # -- text form ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dumps(self) -> str:
        lines = [f"{k} = {_format(v)}" for k, v in sorted(self.to_dict().items())]
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        """Identity of the experiment; where results go and how many workers run it are excluded."""
        body = self.replace(out_dir="", workers=1).dumps()
        return hashlib.sha256(body.encode()).hexdigest()[:16]


def _guess_key(message: str) -> str | None:
    names = {f.name for f in fields(RunConfig)}
    for token in message.replace(":", " ").split():
        if token in names:
            return token
    return None


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_HINTS = get_type_hints(RunConfig)


def _convert(key: str, raw: str):
    hint = _HINTS[key]
    try:
        if hint is bool:
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        item = hint.__args__[0]
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(item(p) for p in parts)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None


def parse_config(text: str, **overrides) -> RunConfig:
    values = {}
    names = {f.name for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(None, f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in names:
            raise ConfigError(key, f"unknown key (line {lineno})")
        if key in values:
            raise ConfigError(key, f"duplicate key (line {lineno})")
        values[key] = _convert(key, raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def load_config(path, **overrides) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), **overrides)
