"""JSON run configuration shared by the CLI subcommands.

Every section is optional and falls back to library defaults; unknown
sections or keys are rejected so that typos never pass silently.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError, FormatError
from .layout import LayoutConfig
from .scoring import ScoringConfig
from .synth import SynthSpec
from .train import BatchSpec


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 300
    lr: float = 0.5
    seed: int = 0
    warmup_frac: float = 0.05
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.steps < 0 or not self.lr >= 0 or not 0 <= self.warmup_frac < 1:
            raise ConfigError("train: steps and lr must be non-negative, warmup_frac in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"train: unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class EvalSettings:
    num_speakers: int = 40
    enroll_per_speaker: int = 6
    tests_per_speaker: int = 4
    test_noise: float = 0.5

    def __post_init__(self):
        if min(self.num_speakers, self.enroll_per_speaker, self.tests_per_speaker) < 1:
            raise ConfigError("eval: speaker, enrollment and test counts must be positive")
        if self.num_speakers < 2:
            raise ConfigError("eval: need at least two speakers for nontarget trials")
        if not self.test_noise >= 0:
            raise ConfigError("eval: test_noise must be non-negative")


_DEFAULT_LAYOUT = {"num_pairs": 32, "key_dim": 16, "value_dim": 48, "tied": True}
_SCORING_KEYS = {"norm", "alpha", "enroll_agg", "method"}


@dataclass(frozen=True)
class RunConfig:
    layout: LayoutConfig = field(default_factory=lambda: LayoutConfig(**_DEFAULT_LAYOUT))
    scoring: dict = field(default_factory=dict)  # ScoringConfig fields minus layout
    synth: SynthSpec = field(default_factory=SynthSpec)
    batch: BatchSpec = field(default_factory=BatchSpec)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def scoring_config(self, **overrides) -> ScoringConfig:
        return ScoringConfig(self.layout, **{**self.scoring, **overrides})

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if f.name == "scoring":
                sc = self.scoring_config()
                val = {"norm": sc.norm.value, "alpha": self.scoring.get("alpha"),
                       "enroll_agg": sc.enroll_agg.value, "method": sc.method}
            else:
                val = dataclasses.asdict(val)
            if f.name == "synth":
                val["within_speaker_noise"] = list(val["within_speaker_noise"])
            out[f.name] = val
        return out


_SECTIONS = {"layout": LayoutConfig, "synth": SynthSpec, "batch": BatchSpec,
             "train": TrainSettings, "eval": EvalSettings}


def _build(name, cls, values):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    base = _DEFAULT_LAYOUT if cls is LayoutConfig else {}
    try:
        return cls(**{**base, **values})
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"scoring"})
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    kw = {name: _build(name, cls, raw[name]) for name, cls in _SECTIONS.items() if name in raw}
    scoring = raw.get("scoring", {})
    if not isinstance(scoring, dict):
        raise ConfigError("section 'scoring' must be an object")
    bad = sorted(set(scoring) - _SCORING_KEYS)
    if bad:
        raise ConfigError(f"unknown key(s) in section 'scoring': {', '.join(bad)}")
    scoring = {k: v for k, v in scoring.items() if v is not None}
    cfg = RunConfig(scoring=scoring, **kw)
    try:
        cfg.scoring_config()
    except ValueError as exc:
        raise ConfigError(f"section 'scoring': {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)
