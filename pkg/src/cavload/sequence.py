"""Complete loading runs and the parameter scans built from them.

A run starts at the end of the magnetic transport (t = 0) with a thermal
cloud in the final quadrupole trap, ramps the quadrupole down, opens the
probe and optionally the repumper, and records the cavity transmittance.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

import numpy as np

from . import rng
from .analysis import FitResult, fit_exponential, fit_linear_weighted
from .constants import C, KB, MU_B, RB87_D2_WAVELENGTH, RB87_MASS
from .dynamics import Ensemble, HeatingModel, Propagator, TrapModel, sample_thermal_cloud
from .errors import FitError, SimulationError
from .magnetics import CoilPair, FieldSystem, PairDrive, RampSegment, plan_transport
from .optics import CavityParams, OpticalSetup, TrapBeam, trap_depth
from .readout import (Detunings, PumpModel, invert_transmittance, n_eff_sensitivity,
                      transmittance)

MIN_RAMPDOWN = 7e-3
TRACE_COLUMNS = ("t_s", "transmittance", "n_eff_true", "n_F1", "n_F2", "n_captured",
                 "n_escaped")


# ------------------------------------------------------------ configuration

@dataclass(frozen=True)
class CloudConfig:
    """Initial ensemble.

    ``injection = "magnetic"`` samples the cloud in the quadrupole trap at
    the end of transport (lattice ignored, i.e. sudden insertion);
    ``"dipole"`` samples a cloud already sitting in the lattice, confined
    to ``axial_extent`` around the mode center along the cavity axis.
    Every simulated atom stands for ``atom_weight`` real atoms in all
    recorded numbers.
    """
    n_atoms: int = 2000
    atom_weight: float = 1.0
    temperature: float = 30e-6
    injection: str = "magnetic"
    vertical_offset: float = 0.0
    horizontal_offset: float = 0.0
    axial_extent: float = 4e-6
    simulate_transport: bool = False
    transport_height: float = 11e-3
    transport_duration: float = 0.2

    def __post_init__(self):
        if self.n_atoms < 0 or self.temperature <= 0:
            raise ValueError("need n_atoms >= 0 and temperature > 0")
        if self.atom_weight <= 0:
            raise ValueError("atom_weight must be positive")
        if self.injection not in ("magnetic", "dipole"):
            raise ValueError("injection must be 'magnetic' or 'dipole'")


@dataclass(frozen=True)
class MagnetConfig:
    """Dual coaxial quadrupole pairs above the cavity; axes vertical."""
    gradient: float = 0.66
    coil_radius: float = 0.02
    half_separation: float = 0.017
    compensation_half_separation: float = 0.022
    turns: int = 50
    center_height: float = 11e-3
    backend: str = "ideal_quadrupole"
    mu_eff: float = MU_B


@dataclass(frozen=True)
class IntegrationConfig:
    dt_fine: float | None = None
    dt_coarse: float = 1e-6
    stochastic_dt: float = 1e-6
    max_omega_dt: float = 0.095
    region_radius: float = 5e-3
    gravity: bool = True
    threads: int = 1


@dataclass(frozen=True)
class Schedule:
    rampdown_duration: float = 7e-3
    probe_on_at: float = 7e-3
    repumper_on_at: float | None = None
    repumper_off_at: float | None = None
    axial_state: str = "off"
    axial_field: float = 0.0
    trap_input_power: float = 1e-3
    probe_input_power: float = 2e-11
    detector_noise_sigma: float = 0.0
    sample_period: float = 1e-4
    end_time: float = 0.1

    def __post_init__(self):
        if self.rampdown_duration < MIN_RAMPDOWN:
            raise ValueError("magnetic rampdown must last at least 7 ms")
        if self.probe_on_at < self.rampdown_duration:
            raise ValueError("probe must open after the magnetic trap is off")
        if self.axial_state not in ("off", "matched", "opposite"):
            raise ValueError("axial_state must be off, matched or opposite")
        if self.sample_period <= 0 or self.end_time <= 0:
            raise ValueError("sample_period and end_time must be positive")
        if self.detector_noise_sigma < 0:
            raise ValueError("detector noise must be non-negative")


@dataclass(frozen=True)
class AnalysisConfig:
    dip_window: float = 2e-3
    dip_search: float = 30e-3
    fit_cutoff: float = 40e-3


@dataclass(frozen=True)
class SimConfig:
    cavity: CavityParams = field(default_factory=CavityParams)
    detunings: Detunings = field(default_factory=Detunings)
    pump: PumpModel = field(default_factory=PumpModel)
    heating: HeatingModel = field(default_factory=lambda: HeatingModel(1.5e-26))
    cloud: CloudConfig = field(default_factory=CloudConfig)
    magnets: MagnetConfig = field(default_factory=MagnetConfig)
    integration: IntegrationConfig = field(default_factory=IntegrationConfig)
    schedule: Schedule = field(default_factory=Schedule)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    trap_wavelength: float = 805e-9
    incoupling_efficiency: float = 1.0
    mass: float = RB87_MASS

    def replace(self, **kw) -> "SimConfig":
        """Nested replace: ``cfg.replace(schedule__end_time=0.2)``."""
        top, nested = {}, {}
        for k, v in kw.items():
            if "__" in k:
                a, b = k.split("__", 1)
                nested.setdefault(a, {})[b] = v
            else:
                top[k] = v
        for a, sub in nested.items():
            top[a] = replace(top.get(a, getattr(self, a)), **sub)
        return replace(self, **top)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------- run assembly

def probe_wavelength(det: Detunings) -> float:
    w_t = 2 * np.pi * C / RB87_D2_WAVELENGTH
    return 2 * np.pi * C / (w_t + det.delta_a)


def optical_setup(cfg: SimConfig, power: float | None = None) -> OpticalSetup:
    sch = cfg.schedule
    p = sch.trap_input_power if power is None else power
    det = cfg.detunings
    lorentz = cfg.cavity.kappa ** 2 / (cfg.cavity.kappa ** 2 + det.delta_c ** 2)
    return OpticalSetup(
        cfg.cavity,
        TrapBeam(cfg.trap_wavelength, p, cfg.incoupling_efficiency),
        TrapBeam(probe_wavelength(det), sch.probe_input_power, cfg.incoupling_efficiency),
        lorentz)


def trap_depth_at(cfg: SimConfig, power: float) -> float:
    return trap_depth(TrapBeam(cfg.trap_wavelength, power, cfg.incoupling_efficiency),
                      cfg.cavity)


def trap_center(cfg: SimConfig) -> np.ndarray:
    c = np.asarray(cfg.cavity.mode_center, float)
    return c + np.array([0.0, cfg.cloud.horizontal_offset, cfg.cloud.vertical_offset])


def _pairs(cfg: SimConfig):
    m = cfg.magnets
    center = (0.0, cfg.cloud.horizontal_offset, m.center_height)
    main = CoilPair(m.coil_radius, m.half_separation, (0, 0, 1), center, m.turns)
    comp = CoilPair(m.coil_radius, m.compensation_half_separation, (0, 0, 1), center, m.turns)
    return main, comp


def field_system(cfg: SimConfig) -> tuple[FieldSystem | None, float]:
    """Quadrupole holding the cloud at the trap center, ramped down from t=0.

    Returns the field system and the time at which transport starts
    (0 without transport).
    """
    if cfg.cloud.injection == "dipole" or cfg.cloud.n_atoms == 0:
        return None, 0.0
    m, sch, cl = cfg.magnets, cfg.schedule, cfg.cloud
    pairs = _pairs(cfg)
    end = trap_center(cfg)
    t0 = -cl.transport_duration if cl.simulate_transport else 0.0
    start = end + np.array([0.0, 0.0, cl.transport_height]) if cl.simulate_transport else end
    plan = plan_transport(pairs, start, end, m.gradient, min(t0, -1e-3), 0.0, m.backend,
                          n_knots=24 if cl.simulate_transport else 2)
    drives = []
    t1 = sch.rampdown_duration
    for d in plan.drives:
        chans = []
        for sched in (d.current, d.current_b):
            last = sched[-1].v_end
            segs = tuple(sched) if cl.simulate_transport else (
                RampSegment(t0 - 1e-3, 0.0, last, last, "constant"),)
            segs = segs + (RampSegment(0.0, t1, last, 0.0, "tanh"),)
            chans.append(segs)
        drives.append(PairDrive(d.pair, chans[0], chans[1]))
    bias = ((), (), ())
    if sch.axial_field != 0.0:
        ax = np.asarray(cfg.cavity.axis, float)
        start_t = drives[0].current[0].t_start
        bias = tuple((RampSegment(start_t, 0.0, 0.0, 0.0, "constant"),
                      RampSegment(0.0, t1, 0.0, sch.axial_field * a, "tanh"),
                      RampSegment(t1, t1 + 1e6, sch.axial_field * a, sch.axial_field * a,
                                  "constant")) for a in ax)
    return FieldSystem(tuple(drives), bias, m.backend), t0


def auto_dt_fine(cfg: SimConfig, model: TrapModel) -> float:
    integ = cfg.integration
    if integ.dt_fine is not None:
        return integ.dt_fine
    w = model.max_frequency()
    n = max(1, math.ceil(w * integ.stochastic_dt / integ.max_omega_dt))
    return integ.stochastic_dt / n


def build_propagator(cfg: SimConfig, power: float | None = None,
                     repumper_on_at: float | None = None,
                     repumper_off_at: float | None = None) -> tuple[Propagator, float]:
    sch, integ = cfg.schedule, cfg.integration
    opt = optical_setup(cfg, power)
    fs, t0 = field_system(cfg)
    model = TrapModel(field_sys=fs, optics=opt, mu_eff=cfg.magnets.mu_eff, mass=cfg.mass,
                      gravity=integ.gravity, probe_depth=opt.probe_depth(cfg.detunings.delta_a),
                      probe_on_at=sch.probe_on_at, shutter_rise=cfg.pump.shutter_rise)
    rep_on = sch.repumper_on_at if repumper_on_at is None else repumper_on_at
    rep_off = sch.repumper_off_at if repumper_off_at is None else repumper_off_at
    prop = Propagator(model, cfg.heating, cfg.detunings, cfg.pump, opt.probe_intensity,
                      sch.axial_state,
                      math.inf if rep_on is None else rep_on,
                      math.inf if rep_off is None else rep_off,
                      dt_fine=auto_dt_fine(cfg, model), dt_coarse=integ.dt_coarse,
                      stochastic_dt=integ.stochastic_dt, region_radius=integ.region_radius,
                      threads=integ.threads)
    return prop, t0


def initial_cloud(cfg: SimConfig, prop: Propagator, t0: float, seed: int) -> Ensemble:
    cl = cfg.cloud
    model = prop.model
    sseed = rng.derive_seed(seed, "cloud")
    if cl.n_atoms == 0:
        ens = Ensemble.empty(sseed, cfg.mass)
    elif cl.injection == "magnetic":
        start = trap_center(cfg)
        if cl.simulate_transport:
            start = start + np.array([0.0, 0.0, cl.transport_height])
        no_light = replace(model, optics=None)
        ens = sample_thermal_cloud(cl.n_atoms, cl.temperature,
                                   lambda p: no_light.potential(p, t0), start, sseed,
                                   cfg.mass, max_extent=5e-3, t=t0)
    else:
        c = np.asarray(cfg.cavity.mode_center, float)
        lim = np.full(3, 3 * cfg.cavity.w0)
        lim[int(np.argmax(np.abs(cfg.cavity.axis)))] = cl.axial_extent
        ens = sample_thermal_cloud(cl.n_atoms, cl.temperature,
                                   lambda p: model.potential(p, t0), c, sseed, cfg.mass,
                                   max_extent=lim, t=t0)
    ens.step_index = prop.step_index(t0)
    ens.t = ens.step_index * prop.stochastic_dt
    return ens


# ------------------------------------------------------------------ traces

@dataclass
class Trace:
    times: np.ndarray
    transmittance: np.ndarray
    n_eff_true: np.ndarray
    n_F1: np.ndarray
    n_F2: np.ndarray
    n_captured: np.ndarray
    n_escaped: np.ndarray
    captured_n_eff: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    def columns(self):
        return (self.times, self.transmittance, self.n_eff_true, self.n_F1, self.n_F2,
                self.n_captured, self.n_escaped)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in zip(*self.columns()):
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else int(v)
                        for v in row])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())

    def slice(self, t_lo=-math.inf, t_hi=math.inf) -> "Trace":
        k = (self.times >= t_lo - 1e-12) & (self.times <= t_hi + 1e-12)
        return Trace(*(a[k] for a in (self.times, self.transmittance, self.n_eff_true,
                                      self.n_F1, self.n_F2, self.n_captured, self.n_escaped,
                                      self.captured_n_eff)), manifest=self.manifest)

    @staticmethod
    def concat(parts) -> "Trace":
        names = ("times", "transmittance", "n_eff_true", "n_F1", "n_F2", "n_captured",
                 "n_escaped", "captured_n_eff")
        return Trace(*(np.concatenate([getattr(p, n) for p in parts]) for n in names),
                     manifest=parts[0].manifest)

    @staticmethod
    def average(traces) -> "Trace":
        names = ("transmittance", "n_eff_true", "n_F1", "n_F2", "n_captured", "n_escaped",
                 "captured_n_eff")
        t = traces[0].times
        for tr in traces:
            if len(tr.times) != len(t) or np.any(tr.times != t):
                raise ValueError("traces must share sample times")
        return Trace(t.copy(), *(np.mean([getattr(tr, n) for tr in traces], axis=0)
                                 for n in names), manifest=traces[0].manifest)


class _Recorder:
    """Samples an evolving ensemble on the trace grid."""

    def __init__(self, cfg: SimConfig, prop: Propagator, seed: int):
        self.cfg = cfg
        self.prop = prop
        self.noise_seed = rng.derive_seed(seed, "detector")
        cav, det = cfg.cavity, cfg.detunings
        self.t_args = (det, cav.g0, cav.kappa)
        per = cfg.schedule.sample_period / prop.stochastic_dt
        if abs(per - round(per)) > 1e-9:
            raise ValueError("sample_period must be a multiple of the stochastic step")
        self.stride = int(round(per))

    def sample_steps(self, s_lo: int, s_hi: int):
        """Sample step indices k*stride with s_lo <= s < s_hi."""
        k0 = -(-s_lo // self.stride)
        return [k * self.stride for k in range(k0, -(-s_hi // self.stride))]

    def run(self, ens: Ensemble, s_hi: int, snapshots=()) -> tuple[Trace, dict]:
        """Advance to s_hi, sampling on the way; copies ensemble at snapshot steps."""
        rows = []
        snaps = {}
        want = sorted(set(snapshots))
        events = sorted(set(self.sample_steps(ens.step_index, s_hi)) | set(want))
        for s in events:
            try:
                self.prop.advance(ens, s)
            except SimulationError as exc:
                raise type(exc)(f"at t={s * self.prop.stochastic_dt:.6g} s: {exc}") from exc
            if s in want:
                snaps[s] = ens.copy()
            if s % self.stride == 0:
                rows.append(self.observe(ens, s))
        cols = list(zip(*rows)) if rows else [()] * 8
        tr = Trace(*(np.array(c, dtype=float) for c in cols))
        return tr, snaps

    def observe(self, ens: Ensemble, s: int):
        t = s * self.prop.stochastic_dt
        w = self.cfg.cloud.atom_weight
        neff, n1, n2, ncap, nesc, ncap_eff = (w * v for v in self.prop.observe(ens))
        sch = self.cfg.schedule
        probe = t >= sch.probe_on_at
        if probe:
            T = float(transmittance(neff, *self.t_args))
        else:
            T, neff = 1.0, 0.0
        sig = sch.detector_noise_sigma
        if sig > 0:
            g, _ = rng.normal2(np.uint64(self.noise_seed), s // self.stride, 0, rng.SLOT_NOISE)
            T = min(max(T + sig * g, 0.0), 1.0 + 3 * sig)
        return (t, T, neff, n1, n2, ncap, nesc, ncap_eff)


def run_seed(master: int, run: int) -> int:
    return rng.derive_seed(master, "run", run)


def manifest(cfg: SimConfig, seed: int, **extra) -> dict:
    d = to_jsonable(cfg)
    d["integration"].pop("threads")  # wall-clock only; results do not depend on it
    return {"config": d, "seed": int(seed), **extra}


def to_jsonable(obj):
    if is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def run_sequence(cfg: SimConfig, seed: int, *, power: float | None = None,
                 repumper_on_at: float | None = None, end_time: float | None = None,
                 return_ensemble: bool = False):
    """One complete run; returns its Trace (and the final ensemble on request)."""
    prop, t0 = build_propagator(cfg, power, repumper_on_at)
    ens = initial_cloud(cfg, prop, t0, seed)
    rec = _Recorder(cfg, prop, seed)
    t_end = cfg.schedule.end_time if end_time is None else end_time
    s_end = prop.step_index(t_end) + 1
    tr, _ = rec.run(ens, s_end)
    tr = tr.slice(0.0)
    tr.manifest = manifest(cfg, seed, power=power, repumper_on_at=repumper_on_at)
    return (tr, ens) if return_ensemble else tr


# ------------------------------------------------------ stroboscopic scans

@dataclass
class DipResult:
    delay: float
    t_dip: float
    transmittance: float
    n_eff: float
    sigma_n_eff: float
    found: bool


def moving_average(y, width: int):
    """Centered moving average; the window shrinks at the edges."""
    y = np.asarray(y, float)
    h = width // 2
    cs = np.concatenate([[0.0], np.cumsum(y)])
    idx = np.arange(len(y))
    lo = np.maximum(idx - h, 0)
    hi = np.minimum(idx + h + 1, len(y))
    return (cs[hi] - cs[lo]) / (hi - lo)


def locate_dip(trace: Trace, cfg: SimConfig, repumper_on_at: float, n_runs: int = 1) -> DipResult:
    an, sch = cfg.analysis, cfg.schedule
    width = max(1, int(round(an.dip_window / sch.sample_period)))
    ma = moving_average(trace.transmittance, width)
    k = (trace.times >= repumper_on_at - 1e-12) & (trace.times <= repumper_on_at + an.dip_search)
    k &= trace.times >= sch.probe_on_at
    sig_T = sch.detector_noise_sigma / math.sqrt(max(1, width * n_runs))
    det, cav = cfg.detunings, cfg.cavity
    if not np.any(k):
        return DipResult(repumper_on_at, math.nan, 1.0, 0.0, 0.0, False)
    i = np.flatnonzero(k)[np.argmin(ma[k])]
    T = float(ma[i])
    depth_needed = max(3 * sig_T, 1e-12)
    if 1.0 - T <= depth_needed:
        return DipResult(repumper_on_at, float(trace.times[i]), T, 0.0, 0.0, False)
    n = invert_transmittance(min(T, 1.0), det, cav.g0, cav.kappa)
    s = float(n_eff_sensitivity(T, det, cav.g0, cav.kappa)) * sig_T
    return DipResult(repumper_on_at, float(trace.times[i]), T, float(n), s, True)


@dataclass
class StroboscopicResult:
    delays: list
    traces: list
    dips: list
    base: Trace
    manifest: dict = field(default_factory=dict)

    def fit_points(self, cutoff: float):
        pts = [(d.delay, d.n_eff, max(1.0, math.sqrt(max(d.n_eff, 0.0))))
               for d in self.dips if d.found and d.delay > cutoff and d.n_eff > 0]
        return pts


def _check_grid(prop: Propagator, times, what):
    for t in times:
        s = t / prop.stochastic_dt
        if abs(s - round(s)) > 1e-6:
            raise ValueError(f"{what} {t} s is not on the stochastic step grid")


def stroboscopic_scan(cfg: SimConfig, delays, runs_per_delay: int = 10, seed: int = 0,
                      power: float | None = None) -> StroboscopicResult:
    """Repumper-delay scan averaged over runs.

    Each run simulates the repumper-free history once, copies the ensemble
    at every delay, and continues each copy with the repumper on for the
    dip search window.  Because all randomness is keyed by atom and step,
    every branch is bit-identical to a separate run with that delay.
    """
    delays = [float(d) for d in delays]
    if delays != sorted(delays):
        raise ValueError("delays must be sorted ascending")
    an, sch = cfg.analysis, cfg.schedule
    per_delay = [[] for _ in delays]
    bases = []
    for r in range(runs_per_delay):
        sd = run_seed(seed, r)
        prop, t0 = build_propagator(cfg, power, repumper_on_at=None)
        _check_grid(prop, delays, "delay")
        ens = initial_cloud(cfg, prop, t0, sd)
        rec = _Recorder(cfg, prop, sd)
        snap_steps = [prop.step_index(d) for d in delays]
        s_base_end = max(snap_steps + [prop.step_index(sch.end_time) + 1])
        base, snaps = rec.run(ens, s_base_end, snap_steps)
        bases.append(base.slice(0.0))
        for j, d in enumerate(delays):
            bprop = prop.with_repumper(d, math.inf if sch.repumper_off_at is None
                                       else sch.repumper_off_at)
            brec = _Recorder(cfg, bprop, sd)
            br = snaps[snap_steps[j]].copy()
            tail, _ = brec.run(br, bprop.step_index(d + an.dip_search) + 1)
            head = base.slice(0.0, d - 0.5 * sch.sample_period)
            tail = tail.slice(d - 0.5 * sch.sample_period)
            per_delay[j].append(Trace.concat([head, tail]))
    traces, dips = [], []
    for j, d in enumerate(delays):
        avg = Trace.average(per_delay[j])
        avg.manifest = manifest(cfg, seed, delay=d, runs=runs_per_delay, power=power)
        traces.append(avg)
        dips.append(locate_dip(avg, cfg, d, runs_per_delay))
    base = Trace.average(bases)
    return StroboscopicResult(delays, traces, dips, base,
                              manifest(cfg, seed, delays=delays, runs=runs_per_delay,
                                       power=power))


def direct_trapping_time(trace: Trace, cutoff: float, column: str = "n_captured") -> FitResult:
    """Exponential fit of a count column for t > cutoff (sqrt(n) weights)."""
    y = getattr(trace, column)
    k = (trace.times > cutoff) & (y > 0)
    t, n = trace.times[k], y[k]
    return fit_exponential(t, n, np.maximum(1.0, np.sqrt(n)))


def decay_fit(result: StroboscopicResult, cfg: SimConfig) -> FitResult:
    pts = result.fit_points(cfg.analysis.fit_cutoff)
    if len(pts) < 2:
        raise FitError("fewer than two usable dips after the fit cutoff")
    t, n, s = map(np.array, zip(*pts))
    return fit_exponential(t, n, s)


# ------------------------------------------------------------ other scans

def position_scan(cfg: SimConfig, vertical_offsets, runs: int = 10, seed: int = 0,
                  probe_times=(40e-3, 60e-3)):
    """Captured, mode-weighted atom number at the probe times per final trap height.

    Every offset reuses the same run seeds, so the clouds differ only by
    their displacement.
    """
    rows = []
    t_end = max(probe_times)
    for off in vertical_offsets:
        c = cfg.replace(cloud__vertical_offset=float(off))
        vals = np.zeros((runs, len(probe_times)))
        for r in range(runs):
            tr = run_sequence(c, run_seed(seed, r), end_time=t_end)
            for j, tp in enumerate(probe_times):
                vals[r, j] = tr.captured_n_eff[np.argmin(np.abs(tr.times - tp))]
        rows.append({"offset": float(off),
                     **{f"n_eff_{tp * 1e3:g}ms": float(vals[:, j].mean())
                        for j, tp in enumerate(probe_times)},
                     **{f"sem_{tp * 1e3:g}ms": float(vals[:, j].std(ddof=1) / math.sqrt(runs))
                        if runs > 1 else 0.0 for j, tp in enumerate(probe_times)}})
    return rows


@dataclass
class PowerRow:
    power: float
    depth: float
    tau: float
    sigma_tau: float
    flagged: bool
    message: str = ""


def power_scan(cfg: SimConfig, powers, delays, runs: int = 10, seed: int = 0,
               method: str = "stroboscopic"):
    """Trapping time per trap input power.

    ``method = "stroboscopic"`` fits the dip-derived atom numbers;
    ``"direct"`` fits the captured-atom count of repumper-free runs.
    """
    powers = [float(p) for p in powers]
    rows = []
    for p in powers:
        depth = trap_depth_at(cfg, p)
        try:
            if method == "stroboscopic":
                res = stroboscopic_scan(cfg, delays, runs, seed, power=p)
                fit = decay_fit(res, cfg)
            elif method == "direct":
                fit = direct_trapping_time(averaged_runs(cfg, runs, seed, power=p),
                                           cfg.analysis.fit_cutoff)
            else:
                raise ValueError(f"unknown method {method!r}")
            if not fit.converged:
                raise FitError("fit did not converge")
            rows.append(PowerRow(p, depth, fit.value("tau"), fit.error("tau"), False))
        except (FitError, SimulationError) as exc:
            rows.append(PowerRow(p, depth, math.nan, math.nan, True, str(exc)))
    return rows


def power_scan_fit(rows) -> FitResult:
    ok = [r for r in rows if not r.flagged]
    return fit_linear_weighted([r.power for r in ok], [r.tau for r in ok],
                               [r.sigma_tau for r in ok])


def averaged_runs(cfg: SimConfig, runs: int, seed: int, **kw) -> Trace:
    return Trace.average([run_sequence(cfg, run_seed(seed, r), **kw) for r in range(runs)])


def rise_time(trace: Trace, t_on: float, window: float = 10e-3) -> float:
    """Normalized area above the transmittance curve after the probe opens.

    Equals the 1/e time for an exponential approach to T = 1; larger means
    a slower rise.
    """
    k = (trace.times >= t_on - 1e-12) & (trace.times <= t_on + window + 1e-12)
    t, T = trace.times[k], trace.transmittance[k]
    if len(t) < 2 or T[0] >= 1.0:
        return math.nan
    return float(np.trapezoid((1.0 - T) / (1.0 - T[0]), t))


def axial_field_scan(cfg: SimConfig, settings=("matched", "opposite", "off"), runs: int = 10,
                     seed: int = 0, probe_on_at: float = 15e-3, window: float = 10e-3):
    """Repumper-free runs per axial-field setting with the probe opening late."""
    out = {}
    for st in settings:
        c = cfg.replace(schedule__axial_state=st, schedule__probe_on_at=probe_on_at,
                        schedule__repumper_on_at=None)
        tr = averaged_runs(c, runs, seed)
        out[st] = {"trace": tr, "rise_time": rise_time(tr, probe_on_at, window)}
    return out


def calibrate_diffusion(cfg: SimConfig, target_tau: float = 0.16, runs: int = 2,
                        seed: int = 0, power: float | None = None, iterations: int = 2,
                        d_start: float | None = None) -> tuple[float, list]:
    """Scale D until the directly measured trapping time matches ``target_tau``.

    Trapping time is close to inversely proportional to D, so each
    iteration rescales D by tau_measured / target_tau.
    """
    p = cfg.schedule.trap_input_power if power is None else power
    if d_start is None:
        d_start = max(trap_depth_at(cfg, p) - KB * cfg.cloud.temperature, 0.1 * trap_depth_at(cfg, p)) / target_tau
    D = d_start
    history = []
    for _ in range(iterations):
        c = cfg.replace(heating=replace(cfg.heating, D=D))
        fit = direct_trapping_time(averaged_runs(c, runs, seed, power=p), cfg.analysis.fit_cutoff)
        tau = fit.value("tau")
        history.append((D, tau, fit.error("tau")))
        D = D * tau / target_tau
    return D, history


# ------------------------------------------------------------------ output

def summary_json(obj) -> str:
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True, default=_default)


def _default(o):
    if is_dataclass(o):
        return to_jsonable(o)
    if isinstance(o, Trace):
        return {"length": len(o)}
    if isinstance(o, FitResult):
        return o.to_dict()
    raise TypeError(type(o))

