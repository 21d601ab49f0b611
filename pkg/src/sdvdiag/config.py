"""Engine configuration loaded from a YAML file.

Lookup order: explicit path, then ``$SDVDIAG_CONFIG``, then defaults.
Unknown keys are rejected so typos surface early.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import yaml

from .anomaly.detectors import DETECTORS
from .anomaly.selector import BucketThresholds
from .causal import DEFAULT_MAX_GAP, DEFAULT_MAX_LAG, DEFAULT_WEIGHT_THRESHOLD
from .exceptions import ConfigError
from .incident import DEFAULT_TIMEFRAME_MS, MODES, WalkConfig
from .telemetry import DEFAULT_RETENTION_MS

ENV_VAR = "SDVDIAG_CONFIG"
DEFAULT_OUT = "sdvdiag-out"


@dataclass(frozen=True)
class AnomalyConfig:
    detector: str = "rolling_zscore"
    #: path to a trained selector policy; overrides ``detector`` when set
    policy: Optional[str] = None
    params: dict = field(default_factory=dict)
    #: selector cut points: ``{"seasonality": [lo, hi], "trend": ..., "spikiness": ...}``
    buckets: dict = field(default_factory=dict)

    def thresholds(self) -> BucketThresholds:
        try:
            return BucketThresholds(**{k: tuple(v) for k, v in self.buckets.items()})
        except TypeError as exc:
            raise ConfigError(f"invalid anomaly.buckets: {exc}") from None


@dataclass(frozen=True)
class CausalConfig:
    method: str = "lagged_correlation"
    max_lag: int = DEFAULT_MAX_LAG
    weight_threshold: float = DEFAULT_WEIGHT_THRESHOLD
    max_gap: int = DEFAULT_MAX_GAP
    #: discovery uses the trailing window of this length
    window_ms: int = 15 * 60 * 1000


@dataclass(frozen=True)
class IncidentConfig:
    timeframe_ms: int = DEFAULT_TIMEFRAME_MS
    mode: str = "all-anomalies"
    top_k: Optional[int] = None
    auto_trigger_score: float = 6.0


@dataclass(frozen=True)
class SimulationConfig:
    workers: int = 3
    stations_per_worker: int = 2
    vehicles: int = 3
    horizon_s: int = 1800
    request_rate: float = 3.0
    seed: int = 0
    fault: Optional[str] = None
    magnitude: float = 0.35
    onset_s: Optional[int] = None


@dataclass(frozen=True)
class EngineConfig:
    retention_ms: int = DEFAULT_RETENTION_MS
    anomaly: AnomalyConfig = AnomalyConfig()
    causal: CausalConfig = CausalConfig()
    walk: WalkConfig = WalkConfig()
    incident: IncidentConfig = IncidentConfig()
    simulation: SimulationConfig = SimulationConfig()
    out: str = DEFAULT_OUT

    _SECTIONS = {
        "anomaly": AnomalyConfig,
        "causal": CausalConfig,
        "walk": WalkConfig,
        "incident": IncidentConfig,
        "simulation": SimulationConfig,
    }

    def __post_init__(self):
        self.anomaly.thresholds()
        if self.anomaly.detector not in DETECTORS:
            raise ConfigError(f"unknown detector {self.anomaly.detector!r}")
        if self.incident.mode not in MODES:
            raise ConfigError(f"incident.mode must be one of {MODES}, got {self.incident.mode!r}")
        if self.retention_ms <= 0:
            raise ConfigError("retention_ms must be positive")

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "EngineConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw = {}
        for name, value in data.items():
            section = cls._SECTIONS.get(name)
            if section is None:
                kw[name] = value
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"config section {name!r} must be a mapping")
            allowed = {f.name for f in fields(section)}
            bad = sorted(set(value) - allowed)
            if bad:
                raise ConfigError(f"unknown keys in {name}: {', '.join(bad)}")
            try:
                kw[name] = section(**value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name} section: {exc}") from None
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "EngineConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a mapping at the top level")
        return cls.from_dict(data)

    @classmethod
    def resolve(cls, path=None) -> "EngineConfig":
        path = path or os.environ.get(ENV_VAR)
        return cls.load(path) if path else cls()

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def with_overrides(self, **sections) -> "EngineConfig":
        """Replace fields inside sections, e.g. ``walk={"seed": 3}``."""
        kw = {}
        for name, changes in sections.items():
            if name in self._SECTIONS:
                kw[name] = replace(getattr(self, name), **{k: v for k, v in changes.items() if v is not None})
            elif changes is not None:
                kw[name] = changes
        return replace(self, **kw)
