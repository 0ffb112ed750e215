"""Resolved run configuration: every tunable constant in one JSON document.

``Config()`` holds the defaults.  ``Config.load(path)`` overlays a partial JSON
file on them, so a config file only needs the values it changes.  The hash of
the canonical JSON form identifies a configuration in run manifests.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field

from fpfuse.dead_reckoning import DrConfig, EnvironmentReference, ImuNoiseModel
from fpfuse.fai import FaiConfig
from fpfuse.fusion import FusionConfig, Strategy
from fpfuse.mapping import DEFAULT_VARIANCE, MIN_VARIANCE
from fpfuse.simulation import TraceConfig, WorldConfig


@dataclass(frozen=True)
class CrowdConfig:
    lambda_d: float = 20.0  # max DR end-point error for a segment to be kept, m


@dataclass(frozen=True)
class MappingConfig:
    cell_length: float = 3.0
    lambda_n1: int = 5
    lambda_n2: int = 20
    var_wifi: float = DEFAULT_VARIANCE["wifi"]
    var_mag: float = DEFAULT_VARIANCE["magnetic"]
    min_var_wifi: float = MIN_VARIANCE["wifi"]
    min_var_mag: float = MIN_VARIANCE["magnetic"]
    ap_sigma: float = 4.0  # RSS std assumed by the AP fit, dBm
    ap_min_obs: int = 8

    def default_variance(self, modality: str) -> float:
        return self.var_wifi if modality == "wifi" else self.var_mag

    def min_variance(self, modality: str) -> float:
        return self.min_var_wifi if modality == "wifi" else self.min_var_mag


@dataclass(frozen=True)
class SimulationConfig:
    """Scenario generated by ``fpfuse simulate``."""

    n_survey: int = 24
    survey_length: float = 170.0
    survey_wifi_rate: float = 1.0
    n_test: int = 2
    test_length: float = 170.0
    outlier_rate: float = 0.05
    user_k_range: tuple[float, float] = (0.36, 0.44)  # per-walker Weinberg constant
    world: WorldConfig = field(default_factory=WorldConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)


@dataclass(frozen=True)
class Config:
    dr: DrConfig = field(default_factory=DrConfig)
    imu_noise: ImuNoiseModel = field(default_factory=ImuNoiseModel)
    env: EnvironmentReference = field(default_factory=EnvironmentReference)
    crowd: CrowdConfig = field(default_factory=CrowdConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    fai: FaiConfig = field(default_factory=FaiConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    strategy: Strategy = field(default_factory=Strategy)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)

    def fusion_config(self) -> FusionConfig:
        """Fusion settings with the top-level FAI section substituted in."""
        return dataclasses.replace(self.fusion, fai=self.fai)

    def strategy_for(self, name: str) -> Strategy:
        return dataclasses.replace(self.strategy, name=name)

    def to_dict(self) -> dict:
        d = _to_plain(self)
        d["fusion"].pop("fai", None)  # single source of truth is the top-level section
        d["strategy"].pop("name", None)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def with_rho(self, rho: typing.Sequence[float]) -> "Config":
        r = [float(v) for v in rho]
        return dataclasses.replace(self, fai=dataclasses.replace(self.fai, rho_ss=r[0], rho_sd=r[1], rho_wd=r[2]))

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        return _from_plain(cls, d, "")

    @classmethod
    def loads(cls, text: str) -> "Config":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ValueError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> "Config":
        if path is None:
            return cls()
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _from_plain(cls, d: dict, where: str):
    hints = typing.get_type_hints(cls)
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(names))
    if unknown:
        raise ValueError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kw = {}
    for name, val in d.items():
        f = names[name]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if dataclasses.is_dataclass(default):
            if not isinstance(val, dict):
                raise ValueError(f"config key {where}{name} must be an object")
            kw[name] = _from_plain(type(default), val, f"{where}{name}.")
        elif isinstance(default, tuple) or _is_tuple(hints.get(name)):
            kw[name] = tuple(val) if val is not None else None
        elif isinstance(default, bool):
            if not isinstance(val, bool):
                raise ValueError(f"config key {where}{name} must be true or false")
            kw[name] = val
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(val, bool) or not isinstance(val, int):
                raise ValueError(f"config key {where}{name} must be an integer")
            kw[name] = val
        elif isinstance(default, float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ValueError(f"config key {where}{name} must be a number")
            kw[name] = float(val)
        else:
            kw[name] = val
    return cls(**kw)


def _is_tuple(hint) -> bool:
    if hint is None:
        return False
    if typing.get_origin(hint) is tuple:
        return True
    return any(typing.get_origin(a) is tuple for a in typing.get_args(hint))
