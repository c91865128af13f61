"""Command-line entry point: ``cavload run | scan | fit``.

Exit codes: 0 success, 2 bad input or configuration (JSON message on
stderr naming the field or line), 3 simulation or fit failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import analysis, sequence
from .constants import RB87_MASS
from .config import build_config, manifest_dict, read_config_file, sim_config_check
from .errors import ConfigError, InputError, SimulationError

EXIT_OK, EXIT_INPUT, EXIT_SIM = 0, 2, 3


class DataFormatError(InputError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


# ------------------------------------------------------------------ helpers

def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False,
                      default=sequence._default) + "\n"


def _clean(obj):
    """Replace non-finite floats so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(text)


def _load(args):
    data = read_config_file(args.config)
    cfg = build_config(data, args.override or (), args.seed)
    sim = sim_config_check(cfg)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("threads must be >= 1", "threads")
        sim = sim.replace(integration__threads=args.threads)
    out = Path(args.out_dir if args.out_dir is not None else cfg.output.dir)
    return cfg, sim, out


def _dip_dict(d):
    return {"delay": d.delay, "t_dip": d.t_dip, "transmittance": d.transmittance,
            "n_eff": d.n_eff,
            "sigma_n_eff": d.sigma_n_eff, "found": d.found}


# ---------------------------------------------------------------- commands

def cmd_run(args) -> int:
    cfg, sim, out = _load(args)
    tr = sequence.run_sequence(sim, cfg.seed,
                               repumper_on_at=cfg.sequence.repumper_on_at)
    _write(out / cfg.output.trace_name, tr.to_csv())
    _write(out / cfg.output.manifest_name, _dump(manifest_dict(cfg, "run")))
    summary = {"samples": len(tr), "final_transmittance": float(tr.transmittance[-1]),
               "final_captured": float(tr.n_captured[-1])}
    if cfg.sequence.repumper_on_at is not None:
        summary["dip"] = _dip_dict(sequence.locate_dip(tr, sim, cfg.sequence.repumper_on_at))
    _write(out / cfg.output.summary_name, _dump(_clean(summary)))
    return EXIT_OK


def cmd_scan(args) -> int:
    cfg, sim, out = _load(args)
    sc = cfg.sequence.scan
    kind = args.kind or sc.kind
    if kind is None:
        raise ConfigError("no scan kind given (use --kind or sequence.scan.kind)",
                          "sequence.scan.kind")
    summary: dict = {"kind": kind}
    files = {}
    if kind == "stroboscopic":
        res = sequence.stroboscopic_scan(sim, sc.delays, sc.runs, cfg.seed)
        summary["dips"] = [_dip_dict(d) for d in res.dips]
        for j, tr in enumerate(res.traces):
            files[f"trace_delay{j:02d}.csv"] = tr.to_csv()
        try:
            summary["fit"] = sequence.decay_fit(res, sim).to_dict()
        except SimulationError as exc:
            summary["fit_error"] = str(exc)
    elif kind == "position":
        summary["rows"] = sequence.position_scan(sim, sc.offsets, sc.runs, cfg.seed,
                                                 tuple(sc.probe_times))
    elif kind == "power":
        rows = sequence.power_scan(sim, sc.powers, sc.delays, sc.runs, cfg.seed, sc.method)
        summary["rows"] = [vars(r) for r in rows]
        try:
            fit = sequence.power_scan_fit(rows)
            summary["fit"] = fit.to_dict()
            est = analysis.temperature_from_power_intercept(
                fit, sim.cavity, sequence.optical_setup(sim).trap)
            summary["temperature"] = vars(est)
        except (SimulationError, ValueError) as exc:
            summary["fit_error"] = str(exc)
    elif kind == "axial":
        res = sequence.axial_field_scan(sim, sc.settings, sc.runs, cfg.seed,
                                        sc.axial_probe_on_at, sc.rise_window)
        summary["rise_time"] = {k: v["rise_time"] for k, v in res.items()}
        for k, v in res.items():
            files[f"trace_{k}.csv"] = v["trace"].to_csv()
    else:  # pragma: no cover - the CLI choices prevent this
        raise ConfigError(f"unknown scan kind {kind!r}", "sequence.scan.kind")
    for name, text in files.items():
        _write(out / name, text)
    _write(out / cfg.output.manifest_name, _dump(manifest_dict(cfg, "scan", scan_kind=kind)))
    _write(out / cfg.output.summary_name, _dump(_clean(summary)))
    return EXIT_OK


def read_columns(path, arity: tuple[int, ...]) -> np.ndarray:
    """Numeric CSV (optional header line) with a column count from ``arity``."""
    try:
        f = open(path, newline="")
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from None
    rows = []
    header = False
    with f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or all(not c.strip() for c in row) or row[0].lstrip().startswith("#"):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                if not rows and not header:
                    header = True
                    continue
                raise DataFormatError(f"line {lineno}: non-numeric value", lineno) from None
            if len(vals) not in arity:
                raise DataFormatError(f"line {lineno}: expected {' or '.join(map(str, arity))}"
                                      f" columns, got {len(vals)}", lineno)
            if rows and len(vals) != len(rows[0]):
                raise DataFormatError(f"line {lineno}: inconsistent column count", lineno)
            if not all(math.isfinite(v) for v in vals):
                raise DataFormatError(f"line {lineno}: non-finite value", lineno)
            rows.append(vals)
    if not rows:
        raise DataFormatError("no data rows")
    return np.array(rows)


def cmd_fit(args) -> int:
    if args.model == "exponential":
        d = read_columns(args.data, (2, 3))
        res = analysis.fit_exponential(d[:, 0], d[:, 1], d[:, 2] if d.shape[1] == 3 else None)
        out = res.to_dict()
    elif args.model == "linear":
        d = read_columns(args.data, (2, 3))
        out = analysis.fit_linear_weighted(d[:, 0], d[:, 1],
                                           d[:, 2] if d.shape[1] == 3 else None).to_dict()
    else:  # tof: rows of (t, x, y, z), grouped by t
        d = read_columns(args.data, (4,))
        ts = np.unique(d[:, 0])
        try:
            temps, s0 = analysis.tof_temperature(ts, [d[d[:, 0] == t, 1:] for t in ts],
                                                 args.mass)
        except ValueError as exc:
            raise DataFormatError(str(exc)) from None
        out = {"temperature": temps.tolist(), "sigma0_squared": s0.tolist()}
    text = _dump(_clean(out))
    sys.stdout.write(text)
    if args.out_dir is not None:
        _write(Path(args.out_dir) / "fit.json", text)
    return EXIT_OK


# -------------------------------------------------------------------- main

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cavload", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("run", cmd_run), ("scan", cmd_scan)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML config or a manifest.json")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--out-dir", default=None)
        sp.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="set a dotted config key, e.g. sequence.end_time=50ms")
        if name == "scan":
            sp.add_argument("--kind", choices=["stroboscopic", "position", "power", "axial"])
        sp.set_defaults(func=fn)
    sp = sub.add_parser("fit")
    sp.add_argument("--data", required=True, help="CSV: t,n[,sigma] | x,y[,sigma] | t,x,y,z")
    sp.add_argument("--model", choices=["exponential", "linear", "tof"], default="exponential")
    sp.add_argument("--mass", type=float, default=RB87_MASS)
    sp.add_argument("--out-dir", default=None)
    sp.set_defaults(func=cmd_fit)
    return p


def _error(kind: str, exc: Exception, **extra) -> None:
    msg = {"error": kind, "type": type(exc).__name__, "message": str(exc), **extra}
    sys.stderr.write(json.dumps(msg, sort_keys=True) + "\n")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _error("config", exc, field=exc.path)
        return EXIT_INPUT
    except DataFormatError as exc:
        _error("input", exc, line=exc.line)
        return EXIT_INPUT
    except InputError as exc:
        _error("input", exc)
        return EXIT_INPUT
    except SimulationError as exc:
        _error("simulation", exc)
        return EXIT_SIM
    except ValueError as exc:
        _error("input", exc)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
