"""Run configuration: schema, unit parsing and conversion to simulation objects.

Numeric fields accept either plain SI numbers or strings with a unit
suffix ("66 G/cm", "-90 MHz", "7 ms", "30 uK").  Angular-frequency fields
given in Hz are multiplied by 2 pi.
"""
from __future__ import annotations

import json
import math
import re
from pathlib import Path
from typing import Annotated, Literal

import numpy as np
import yaml
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError

from .constants import KB, MU_B, RB87_ISAT_CYCLING, RB87_MASS
from .dynamics import HeatingModel
from .errors import ConfigError
from .optics import CavityParams
from .readout import Detunings, PumpModel
from .sequence import (AnalysisConfig, CloudConfig, IntegrationConfig, MagnetConfig,
                       Schedule, SimConfig)

TWO_PI = 2 * math.pi
MANIFEST_KIND = "cavload-manifest"

_MICRO = ("u", "µ", "μ")


def _prefixed(base: str, scale: float = 1.0, prefixes="GMkmunp"):
    factors = {"G": 1e9, "M": 1e6, "k": 1e3, "": 1.0, "c": 1e-2, "m": 1e-3, "u": 1e-6,
               "n": 1e-9, "p": 1e-12}
    out = {base: scale}
    for p in prefixes:
        keys = _MICRO if p == "u" else (p,)
        for k in keys:
            out[k + base] = factors[p] * scale
    return out


UNITS = {
    "time": {**_prefixed("s", prefixes="mun"), "min": 60.0},
    "length": _prefixed("m", prefixes="kcmun"),
    "field": {**_prefixed("T", prefixes="mun"), "G": 1e-4, "mG": 1e-7},
    "gradient": {"T/m": 1.0, "mT/m": 1e-3, "G/cm": 1e-2, "G/m": 1e-4, "mT/cm": 0.1},
    "power": _prefixed("W", prefixes="munp"),
    "angular_frequency": {"rad/s": 1.0, **{k: v * TWO_PI for k, v in
                                           _prefixed("Hz", prefixes="GMk").items()}},
    "frequency": _prefixed("Hz", prefixes="GMk"),
    "temperature": _prefixed("K", prefixes="mun"),
    "current": _prefixed("A", prefixes="m"),
    "energy_rate": {**_prefixed("W", prefixes="munp"), "J/s": 1.0,
                    **{k + "/s": v * KB for k, v in _prefixed("K", prefixes="mun").items()}},
    "rate": {"1/s": 1.0, "/s": 1.0, "Hz": 1.0, "kHz": 1e3, "MHz": 1e6},
    "intensity": {"W/m^2": 1.0, "W/m2": 1.0, "mW/cm^2": 10.0, "mW/cm2": 10.0},
    "energy": {"J": 1.0, **{k: v * KB for k, v in _prefixed("K", prefixes="mun").items()}},
    "mass": {"kg": 1.0, "amu": 1.66053906660e-27, "u": 1.66053906660e-27},
    "magnetic_moment": {"J/T": 1.0, "muB": MU_B, "mu_B": MU_B},
}

_QTY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(\S*)\s*$")


def parse_quantity(value, kind: str) -> float:
    """Convert a number or a number-with-unit string to SI."""
    if isinstance(value, bool):
        raise ValueError("expected a number")
    if isinstance(value, (int, float)):
        return float(value)
    if not isinstance(value, str):
        raise ValueError(f"expected a number or quantity string, got {type(value).__name__}")
    m = _QTY.match(value)
    if not m:
        raise ValueError(f"cannot parse quantity {value!r}")
    num, unit = float(m.group(1)), m.group(2)
    if unit == "":
        return num
    table = UNITS[kind]
    if unit not in table:
        raise ValueError(f"unknown unit {unit!r} for {kind}; known: {sorted(table)}")
    return num * table[unit]


def _q(kind):
    return Annotated[float, BeforeValidator(lambda v: parse_quantity(v, kind))]


Time = _q("time")
Length = _q("length")
Field_ = _q("field")
Gradient = _q("gradient")
Power = _q("power")
AngFreq = _q("angular_frequency")
Freq = _q("frequency")
Temperature = _q("temperature")
EnergyRate = _q("energy_rate")
Rate = _q("rate")
Intensity = _q("intensity")
Mass = _q("mass")
Moment = _q("magnetic_moment")


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_default=True)


class ConstantsBlock(_Block):
    mass: Mass = RB87_MASS
    saturation_intensity: Intensity = RB87_ISAT_CYCLING


class MagneticsBlock(_Block):
    gradient: Gradient = 0.66
    coil_radius: Length = 0.02
    half_separation: Length = 0.017
    compensation_half_separation: Length = 0.022
    turns: int = 50
    center_height: Length = 11e-3
    backend: Literal["ideal_quadrupole", "biot_savart"] = "ideal_quadrupole"
    mu_eff: Moment = MU_B


class OpticsBlock(_Block):
    kappa: AngFreq = TWO_PI * 3e6
    finesse_over_pi: float = 1060.0
    length: Length = 1.5e-2
    fsr: Freq = 10e9
    w0: Length = 127e-6
    g0: AngFreq = TWO_PI * 0.33e6
    axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    mode_center: tuple[Length, Length, Length] = (0.0, 0.0, 0.0)
    trap_wavelength: Length = 805e-9
    incoupling_efficiency: float = 1.0


class ReadoutBlock(_Block):
    delta_a: AngFreq = -TWO_PI * 90e6
    delta_c: AngFreq = TWO_PI * 2e6
    gamma: AngFreq = TWO_PI * 3e6
    depump_branching: float = 0.5
    repump_rate: Rate = 5e4
    closed_cycle_suppression: float = 0.1
    shutter_rise: Time = 1e-3


class DynamicsBlock(_Block):
    n_atoms: int = Field(ge=0)
    temperature: Temperature = Field(gt=0)
    atom_weight: float = 1.0
    injection: Literal["magnetic", "dipole"] = "magnetic"
    vertical_offset: Length = 0.0
    horizontal_offset: Length = 0.0
    axial_extent: Length = 4e-6
    simulate_transport: bool = False
    transport_height: Length = 11e-3
    transport_duration: Time = 0.2
    D: EnergyRate = 1.5e-26
    recoil_enabled: bool = True
    diffusion_enabled: bool = True
    dt_fine: Time | None = None
    dt_coarse: Time = 1e-6
    stochastic_dt: Time = 1e-6
    max_omega_dt: float = 0.095
    region_radius: Length = 5e-3
    gravity: bool = True


class ScanBlock(_Block):
    kind: Literal["stroboscopic", "position", "power", "axial"] | None = None
    runs: int = Field(10, ge=1)
    delays: list[Time] = [45e-3, 60e-3, 80e-3, 100e-3, 125e-3, 150e-3]
    offsets: list[Length] = [-0.3e-3, -0.2e-3, -0.1e-3, 0.0, 0.1e-3, 0.2e-3, 0.3e-3, 0.4e-3]
    probe_times: list[Time] = [40e-3, 60e-3]
    powers: list[Power] = [0.5e-3, 1e-3, 1.5e-3, 2e-3]
    method: Literal["stroboscopic", "direct"] = "stroboscopic"
    settings: list[Literal["matched", "opposite", "off"]] = ["matched", "opposite", "off"]
    axial_probe_on_at: Time = 15e-3
    rise_window: Time = 10e-3


class SequenceBlock(_Block):
    rampdown_duration: Time = 7e-3
    probe_on_at: Time = 7e-3
    repumper_on_at: Time | None = None
    repumper_off_at: Time | None = None
    axial_state: Literal["off", "matched", "opposite"] = "off"
    axial_field: Field_ = 0.0
    trap_input_power: Power = 1e-3
    probe_input_power: Power = 2e-11
    detector_noise_sigma: float = 0.0
    sample_period: Time = 1e-4
    end_time: Time = 0.1
    dip_window: Time = 2e-3
    dip_search: Time = 30e-3
    fit_cutoff: Time = 40e-3
    scan: ScanBlock = ScanBlock()


class OutputBlock(_Block):
    dir: str = "out"
    trace_name: str = "trace.csv"
    manifest_name: str = "manifest.json"
    summary_name: str = "summary.json"


class RunConfig(_Block):
    seed: int = 0
    constants: ConstantsBlock = ConstantsBlock()
    magnetics: MagneticsBlock = MagneticsBlock()
    optics: OpticsBlock = OpticsBlock()
    readout: ReadoutBlock = ReadoutBlock()
    dynamics: DynamicsBlock
    sequence: SequenceBlock = SequenceBlock()
    output: OutputBlock = OutputBlock()

    def to_sim(self, threads: int = 1) -> SimConfig:
        o, r, d, s, m = self.optics, self.readout, self.dynamics, self.sequence, self.magnetics
        return SimConfig(
            cavity=CavityParams(o.kappa, o.finesse_over_pi, o.length, o.fsr, o.w0, o.g0,
                                tuple(o.axis), tuple(o.mode_center)),
            detunings=Detunings(r.delta_a, r.delta_c, r.gamma),
            pump=PumpModel(r.depump_branching, r.repump_rate, r.closed_cycle_suppression,
                           self.constants.saturation_intensity, r.shutter_rise),
            heating=HeatingModel(d.D, d.recoil_enabled, d.diffusion_enabled),
            cloud=CloudConfig(d.n_atoms, d.atom_weight, d.temperature, d.injection,
                              d.vertical_offset, d.horizontal_offset, d.axial_extent,
                              d.simulate_transport, d.transport_height, d.transport_duration),
            magnets=MagnetConfig(m.gradient, m.coil_radius, m.half_separation,
                                 m.compensation_half_separation, m.turns, m.center_height,
                                 m.backend, m.mu_eff),
            integration=IntegrationConfig(d.dt_fine, d.dt_coarse, d.stochastic_dt,
                                          d.max_omega_dt, d.region_radius, d.gravity, threads),
            schedule=Schedule(s.rampdown_duration, s.probe_on_at, s.repumper_on_at,
                              s.repumper_off_at, s.axial_state, s.axial_field,
                              s.trap_input_power, s.probe_input_power, s.detector_noise_sigma,
                              s.sample_period, s.end_time),
            analysis=AnalysisConfig(s.dip_window, s.dip_search, s.fit_cutoff),
            trap_wavelength=o.trap_wavelength,
            incoupling_efficiency=o.incoupling_efficiency,
            mass=self.constants.mass)


# ------------------------------------------------------------------ loading

def _field_path(loc) -> str:
    return ".".join(str(p) for p in loc)


def read_config_file(path) -> dict:
    """Parse YAML (or a JSON manifest) into a plain dict."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", "") from None
    try:
        data = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}", "") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at top level", "")
    if data.get("kind") == MANIFEST_KIND:
        cfg = dict(data["config"])
        cfg.setdefault("seed", data.get("seed", 0))
        return cfg
    return data


def apply_override(data: dict, item: str) -> dict:
    """Apply ``dotted.key=value`` (value parsed as YAML) to a nested dict."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value", item)
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    node = data
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"override path {key!r} crosses a non-mapping", key)
        node = nxt
    node[parts[-1]] = value
    return data


def build_config(data: dict, overrides=(), seed: int | None = None) -> RunConfig:
    data = json.loads(json.dumps(data))  # deep copy of plain data
    for item in overrides:
        apply_override(data, item)
    if seed is not None:
        data["seed"] = seed
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        path = _field_path(err["loc"])
        raise ConfigError(f"{path}: {err['msg']}", path) from None


def load_config(path, overrides=(), seed: int | None = None) -> RunConfig:
    return build_config(read_config_file(path), overrides, seed)


def manifest_dict(cfg: RunConfig, command: str, **extra) -> dict:
    """Complete, rerunnable record of a run (all values in SI)."""
    return {"kind": MANIFEST_KIND, "command": command, "seed": cfg.seed,
            "config": cfg.model_dump(mode="json"), **extra}


def sim_config_check(cfg: RunConfig) -> SimConfig:
    """Build the simulation config, reporting domain errors as config errors."""
    try:
        return cfg.to_sim()
    except ValueError as exc:
        raise ConfigError(str(exc), "") from None


def finite_or_none(x):
    return None if x is None or not np.isfinite(x) else float(x)
