"""Run configuration read from a plain ``key = value`` file with sections.

Every matching constant, the transform limits, RANSAC settings, the model
preset and the training schedule can be set; anything missing takes its
default.  Example::

    [model]
    preset = tiny

    [match]
    s_l = 0.3
    s_h = 0.6

    [train]
    lr0 = 1e-4
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .geometry import GeometryError, RansacParams, TransformLimits
from .matcher import DEFAULT_THRESHOLD, MatchError, MatchParams
from .model import ModelConfig, ModelError
from .synthdata import TrainConfig


class ConfigError(ValueError):
    pass


_MATCH_KEYS = ("w1", "w3", "s_l", "s_h", "tau", "min_correspondences", "min_overlap_fraction", "realign")
_MODEL_KEYS = ("preset", "arcface_margin", "arcface_scale")


@dataclass(frozen=True)
class RunConfig:
    model_preset: str = "tiny"
    arcface_margin: float = 0.5
    arcface_scale: float = 64.0
    match: MatchParams = field(default_factory=MatchParams)
    threshold: float = DEFAULT_THRESHOLD
    train: TrainConfig = field(default_factory=TrainConfig)

    def model_config(self, num_classes: int = 2) -> ModelConfig:
        make = {"tiny": ModelConfig.tiny, "paper": ModelConfig.paper}[self.model_preset]
        return make(num_classes, arcface_margin=self.arcface_margin, arcface_scale=self.arcface_scale)

    def to_text(self) -> str:
        """Canonical file form; ``parse(cfg.to_text()) == cfg``."""
        m = self.match
        sections = {
            "model": {"preset": self.model_preset, "arcface_margin": self.arcface_margin,
                      "arcface_scale": self.arcface_scale},
            "match": {**{k: getattr(m, k) for k in _MATCH_KEYS}, "threshold": self.threshold},
            "limits": asdict(m.limits),
            "ransac": asdict(m.ransac),
            "train": asdict(self.train),
        }
        lines = []
        for name, kv in sections.items():
            lines.append(f"[{name}]")
            lines += [f"{k} = {_fmt(v)}" for k, v in kv.items()]
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _convert(section: str, key: str, raw: str, like):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _section(cp, name: str, defaults: dict) -> dict:
    if not cp.has_section(name):
        return dict(defaults)
    out = dict(defaults)
    for k, raw in cp.items(name):
        if k not in defaults:
            raise ConfigError(f"unknown key [{name}] {k}")
        out[k] = _convert(name, k, raw, defaults[k])
    return out


def parse(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    known = {"model", "match", "limits", "ransac", "train"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown section(s): {sorted(extra)}")

    base = RunConfig()
    mp = base.match
    model = _section(cp, "model", {"preset": base.model_preset, "arcface_margin": base.arcface_margin,
                                   "arcface_scale": base.arcface_scale})
    match = _section(cp, "match", {**{k: getattr(mp, k) for k in _MATCH_KEYS}, "threshold": base.threshold})
    limits = _section(cp, "limits", asdict(mp.limits))
    ransac = _section(cp, "ransac", asdict(mp.ransac))
    train = _section(cp, "train", asdict(base.train))
    if model["preset"] not in ("tiny", "paper"):
        raise ConfigError(f"[model] preset must be tiny or paper, got {model['preset']!r}")
    threshold = match.pop("threshold")
    if not (-1 <= threshold <= 1):
        raise ConfigError("[match] threshold must be in [-1, 1]")
    try:
        params = MatchParams.with_weights(limits=TransformLimits(**limits), ransac=RansacParams(**ransac),
                                          **match)
        cfg = RunConfig(model["preset"], model["arcface_margin"], model["arcface_scale"], params,
                        threshold, TrainConfig(**train))
        cfg.model_config()
    except (GeometryError, MatchError, ModelError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return cfg


def load(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse(p.read_text())
