"""Run configuration: one record merging every section, read from key=value text.

Keys carry a section prefix (``synth.``, ``model.``, ``train.``, ``loss.``,
``drop.``, ``eval.``) and must name an existing field; values are parsed by
the type of the field's default. Lists and ranges are comma-separated.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .backbone import BackboneConfig
from .data import SynthConfig
from .errors import ConfigError
from .losses import LossConfig
from .moddrop import DropoutPolicy
from .trainer import TrainConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class EvalConfig:
    subjects: int = 25  # dataset size written by ``gen``
    test_fraction: float = 0.2
    threshold: float = 0.5
    min_overlap: int = 1


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    drop: DropoutPolicy = field(default_factory=lambda: DropoutPolicy(4))
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("synth", "model", "train", "loss", "drop", "eval")

    def copy(self) -> "RunConfig":
        return copy.deepcopy(self)

    def set(self, key: str, value: str) -> None:
        section, _, name = key.partition(".")
        if section not in self.SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}; expected a {'/'.join(self.SECTIONS)} prefix")
        target = getattr(self, section)
        known = {f.name: f for f in fields(target)}
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(target, name)
        setattr(target, name, _parse_value(key, value, current, known[name]))

    def sync(self) -> None:
        """Propagate the modality count and stack depth to the model and dropout policy."""
        self.model.k = self.synth.k
        self.model.slices_per_modality = self.synth.slices
        if self.drop.k != self.synth.k:
            if len(self.drop.p) == self.drop.k and len(set(self.drop.p)) <= 1:
                self.drop.p = [self.drop.p[0] if self.drop.p else 0.5] * self.synth.k
            self.drop.k = self.synth.k

    def validate(self) -> None:
        self.sync()
        self.synth.validate()
        self.model.validate()
        # the code may stay unset here: an independent run then trains every code
        self.train.validate(require_code=False)
        self.loss.validate()
        self.drop.validate()
        if not 0.0 < self.eval.threshold < 1.0:
            raise ConfigError("eval.threshold must lie in (0, 1)")
        if self.eval.subjects < 2:
            raise ConfigError("eval.subjects must be at least 2 (train/test split)")
        if not 0.0 < self.eval.test_fraction < 1.0:
            raise ConfigError("eval.test_fraction must lie in (0, 1)")
        if self.eval.min_overlap < 1:
            raise ConfigError("eval.min_overlap must be >= 1")


def _parse_value(key, text: str, current, fdef):
    text = text.strip()
    optional = current is None or "None" in str(fdef.type)
    if optional and text.lower() in ("", "none"):
        return None
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(text)
            return low in _TRUE
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            value = float(text)
            if not math.isfinite(value):
                raise ValueError(text)
            return value
        if isinstance(current, (tuple, list)):
            items = [t.strip() for t in text.split(",") if t.strip()]
            elem = type(current[0]) if current else float
            parsed = [elem(t) for t in items]
            return tuple(parsed) if isinstance(current, tuple) else parsed
        if current is None:
            if "float" in str(fdef.type):
                return float(text)
            return text
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {key}={text!r} as {type(current).__name__}") from None


def parse_config_text(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    cfg = base.copy() if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        try:
            cfg.set(key.strip(), value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    return parse_config_text(p.read_text(), source=str(p))


def format_config(cfg: RunConfig) -> str:
    """Render every field as key=value lines (parseable by ``parse_config_text``)."""
    lines = []
    for section in RunConfig.SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            elif v is None:
                v = "none"
            lines.append(f"{section}.{f.name}={v}")
    return "\n".join(lines) + "\n"
