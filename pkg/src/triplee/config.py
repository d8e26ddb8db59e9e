"""Run configuration as a flat dataclass, read from and written to ``key=value`` text."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .datakit import ConfigError
from .esaug import CROSS_MODES, AugPolicy
from .nn import ArchConfig


@dataclass
class RunConfig:
    seed: int | None = None
    # data
    data_dir: str = ""
    classes: int = 5
    per_domain: int = 600
    image_size: int = 32
    data_seed: int = 0
    target_domain: int = 0
    val_fraction: float = 0.1
    # method
    b: int = 4
    r: int = 4
    m: int = 3
    ereplay_b: bool = True
    esaug: bool = True
    ereplay_d: bool = True
    ensemble: str = "partition"  # or "traditional": m models on the full pool
    supcon: bool = True
    tau: float = 0.07
    supcon_reduction: str = "mean"
    cross_mode: str = "fourier"
    cross_prob: float | None = None
    cascade: int = 1
    color_jitter: float = 0.4
    phase_source: str = "anchor"
    # optimisation
    epochs: int = 60
    lr: float = 0.01
    lr_decay: float = 0.5
    lr_period: int = 30
    momentum: float = 0.9
    # architecture
    channels: tuple[int, int, int, int] = (16, 32, 64, 64)
    proj_dim: int = 128
    # bookkeeping
    record_trace: bool = True

    def validate(self) -> "RunConfig":
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        for name in ("b", "r", "m", "classes", "per_domain", "image_size", "lr_period", "cascade", "proj_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr < 0 or self.tau <= 0 or not 0 <= self.momentum < 1 or self.lr_decay <= 0:
            raise ConfigError("need lr >= 0, tau > 0, 0 <= momentum < 1, lr_decay > 0")
        if not 0 < self.val_fraction < 0.5:
            raise ConfigError("val_fraction must lie in (0, 0.5)")
        if self.cross_mode not in CROSS_MODES:
            raise ConfigError(f"cross_mode must be one of {CROSS_MODES}")
        if self.ensemble not in ("partition", "traditional"):
            raise ConfigError("ensemble must be 'partition' or 'traditional'")
        if self.cross_prob is not None and not 0 <= self.cross_prob <= 1:
            raise ConfigError("cross_prob must lie in [0, 1]")
        if self.supcon_reduction not in ("sum", "mean"):
            raise ConfigError("supcon_reduction must be 'sum' or 'mean'")
        if self.phase_source not in ("anchor", "partner"):
            raise ConfigError("phase_source must be 'anchor' or 'partner'")
        if len(self.channels) != 4:
            raise ConfigError("channels needs four comma-separated widths")
        return self

    # derived settings -------------------------------------------------------
    @property
    def replays(self) -> int:
        return self.r if self.ereplay_b else 1

    @property
    def base_batch(self) -> int:
        """Distinct images per step: ``b`` with batch replay, otherwise ``b * r``.

        Either way one step sees ``b * r`` images, so switching replay off
        changes only how the batch is filled, not its size.
        """
        return self.b if self.ereplay_b else self.b * self.r

    @property
    def models(self) -> int:
        if self.ensemble == "traditional" or self.ereplay_d:
            return self.m
        return 1

    @property
    def augment_mode(self) -> str:
        return "esaug" if self.esaug else "baseline"

    def policy(self) -> AugPolicy:
        return AugPolicy(self.cross_mode, self.cross_prob, self.cascade, self.phase_source)

    def arch(self, in_channels: int = 3) -> ArchConfig:
        return ArchConfig(in_channels=in_channels, image_size=self.image_size, channels=tuple(self.channels),
                          num_classes=self.classes, proj_dim=self.proj_dim)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # text form ---------------------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{f.name}={format_value(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def valid_keys() -> list[str]:
    return [f.name for f in fields(RunConfig)]


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_value(name: str, text: str, default: Any, annotation: str) -> Any:
    text = text.strip()
    try:
        if annotation.startswith("bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if text.lower() == "none" and "None" in annotation:
            return None
        if annotation.startswith("tuple"):
            return tuple(int(v) for v in text.split(","))
        if annotation.startswith("int"):
            return int(text)
        if annotation.startswith("float"):
            if "/" in text:
                num, den = text.split("/", 1)
                return float(num) / float(den)
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def apply_overrides(config: RunConfig, pairs: dict[str, str]) -> RunConfig:
    known = {f.name: f for f in fields(RunConfig)}
    changes = {}
    for key, raw in pairs.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(known)}")
        f = known[key]
        changes[key] = _parse_value(key, raw, f.default, str(f.type))
    return dataclasses.replace(config, **changes)


def parse_pairs(lines) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    config = RunConfig()
    if path is not None:
        config = apply_overrides(config, parse_pairs(Path(path).read_text().splitlines()))
    if overrides:
        config = apply_overrides(config, overrides)
    return config
