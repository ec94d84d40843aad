"""JSON run configuration with strict key checking."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .dynamics import Grid, ThermalConfig
from .lattice import CESIUM_E_REC_HZ, CESIUM_LAMBDA_NM, LatticeParams
from .optimizer import OptimizerConfig
from .protocols import FeasibilityLimits

SCHEMA_VERSION = "1"
PROTOCOL_KINDS = ("linear", "parabolic", "adiabatic_sine", "classical_ansatz", "optimal")
FORMATS = ("csv", "json")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProtocolSpec:
    kinds: tuple = ("linear",)
    tau_over_tau_ho: tuple = (1.0, 1.5, 2.0)
    d_sites: int = 1
    u0_list: tuple = ()  # empty: the lattice depth alone

    def __post_init__(self):
        bad = [k for k in self.kinds if k not in PROTOCOL_KINDS]
        if bad:
            raise ValueError(f"unknown protocol kinds {bad}; choose from {PROTOCOL_KINDS}")
        if not self.tau_over_tau_ho or min(self.tau_over_tau_ho) <= 0:
            raise ValueError("tau_over_tau_ho must hold positive values")
        if self.d_sites < 1:
            raise ValueError("d_sites must be at least 1")
        if any(u <= 0 for u in self.u0_list):
            raise ValueError("depths must be positive")


@dataclass(frozen=True)
class OutputSpec:
    dir: str = "results"
    format: str = "csv"

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ValueError(f"format must be one of {FORMATS}")


@dataclass(frozen=True)
class ControlSpec:
    kernel_csv: Optional[str] = None
    target_csv: Optional[str] = None
    delay_us: float = 0.4
    cutoff_hz: float = 800e3
    dt_us: float = 0.05
    slew_limit: Optional[float] = 0.84
    noise_rms_nm: float = 0.0
    gain: float = 0.4
    max_iter: int = 10
    reg: float = 1e-3
    pad_us: float = 5.0

    def __post_init__(self):
        if self.dt_us <= 0 or self.cutoff_hz <= 0 or self.delay_us < 0:
            raise ValueError("kernel parameters must be positive")
        if self.gain < 0 or self.max_iter < 1 or self.reg < 0:
            raise ValueError("invalid compensation loop settings")


@dataclass(frozen=True)
class RunConfig:
    lattice: LatticeParams = LatticeParams(150.0, CESIUM_E_REC_HZ, CESIUM_LAMBDA_NM)
    grid: Grid = Grid()
    thermal: Optional[ThermalConfig] = None
    limits: FeasibilityLimits = FeasibilityLimits()
    optimizer: OptimizerConfig = OptimizerConfig()
    protocol: ProtocolSpec = ProtocolSpec()
    output: OutputSpec = OutputSpec()
    control: ControlSpec = ControlSpec()
    seed: int = 0

    @property
    def depths(self) -> tuple:
        return self.protocol.u0_list or (self.lattice.u0,)

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None,
                       fmt: Optional[str] = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed, optimizer=dataclasses.replace(cfg.optimizer, seed=seed))
        if out is not None or fmt is not None:
            cfg = dataclasses.replace(cfg, output=OutputSpec(out or cfg.output.dir, fmt or cfg.output.format))
        return cfg


_SECTIONS = {
    "lattice": LatticeParams,
    "grid": Grid,
    "thermal": ThermalConfig,
    "limits": FeasibilityLimits,
    "optimizer": OptimizerConfig,
    "protocol": ProtocolSpec,
    "output": OutputSpec,
    "control": ControlSpec,
}


def _build(cls, data: Any, name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    if cls is LatticeParams:
        values.setdefault("u0", 150.0)
        values.setdefault("e_rec_hz", CESIUM_E_REC_HZ)
        values.setdefault("lambda_nm", CESIUM_LAMBDA_NM)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    version = doc.get("spec_version")
    if str(version) != SCHEMA_VERSION:
        raise ConfigError(f"spec_version must be {SCHEMA_VERSION!r}, got {version!r}")
    unknown = sorted(set(doc) - set(_SECTIONS) - {"spec_version", "seed"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in doc and doc[name] is not None:
            kwargs[name] = _build(cls, doc[name], name)
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    kwargs["seed"] = seed
    opt_doc = doc.get("optimizer") or {}
    if "seed" not in opt_doc:
        kwargs["optimizer"] = dataclasses.replace(kwargs.get("optimizer", OptimizerConfig()), seed=seed)
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(doc)


def config_to_dict(cfg: RunConfig) -> dict:
    out: dict = {"spec_version": SCHEMA_VERSION, "seed": cfg.seed}
    for name in _SECTIONS:
        value = getattr(cfg, name)
        out[name] = None if value is None else {
            k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(value).items()
        }
    return out
