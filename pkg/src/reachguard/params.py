"""Parameter blocks shared across modules (values default to the evaluation setup)."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Any, Mapping, Tuple

from .errors import ScenarioError


def _check(cond: bool, what: str) -> None:
    if not cond:
        raise ScenarioError(f"invariant violated: {what}")


@dataclass(frozen=True)
class EgoParams:
    a_lon_range: Tuple[float, float] = (-6.0, 6.0)
    a_lat_range: Tuple[float, float] = (-4.0, 4.0)
    v_max: float = 30.0
    a_min: float = -6.0
    t_d: float = 0.4
    a_lim: float = 0.2
    v_err: float = 0.1

    def __post_init__(self):
        lo, hi = self.a_lon_range
        _check(lo < 0 < hi, "a_lon_range.min < 0 < a_lon_range.max")
        llo, lhi = self.a_lat_range
        _check(llo < 0 < lhi, "a_lat_range.min < 0 < a_lat_range.max")
        _check(self.v_max > 0, "v_max > 0")
        _check(self.a_min < 0, "a_min < 0")
        _check(self.a_lim >= 0, "a_lim >= 0")
        _check(self.v_err >= 0, "v_err >= 0")
        _check(self.t_d >= 0, "t_d >= 0")


@dataclass(frozen=True)
class RuleConfig:
    """Thresholds of the formalized traffic rules.

    ``a_obs_min`` is the obstacle braking capability used by the safe distance.
    """

    a_abrupt: float = 2.0
    speed_limit_default: float = 30.0
    fov_speed_cap: float = 50.0
    type_speed_cap: float = 50.0
    braking_speed_cap: float = 50.0
    a_obs_min: float = -12.0

    def __post_init__(self):
        _check(self.a_abrupt > 0, "a_abrupt > 0")
        for name in ("speed_limit_default", "fov_speed_cap", "type_speed_cap", "braking_speed_cap"):
            _check(getattr(self, name) > 0, f"{name} > 0")
        _check(self.a_obs_min < 0, "a_obs_min < 0")


@dataclass(frozen=True)
class SetPredictionParams:
    a_max_abs: float = 12.0
    v_max_obs: float = 30.0
    lane_following_only: bool = True

    def __post_init__(self):
        _check(self.a_max_abs > 0, "a_max_abs > 0")
        _check(self.v_max_obs > 0, "v_max_obs > 0")


def from_mapping(cls, data: Mapping[str, Any] | None, path: str = ""):
    """Build a parameter dataclass from a JSON object, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, Mapping):
        raise ScenarioError(f"{path}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ScenarioError(f"{path}: unknown field(s) {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if isinstance(v, list):
            v = tuple(float(x) for x in v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc


def to_mapping(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out
