"""Command-line front end.

Subcommands: ``run``, ``compare``, ``sweep``, ``gen-feeder`` and ``validate``.
Every command writes into ``--out`` (default ``$VOLTPF_OUT`` or ``./out``)
and leaves a ``manifest.json`` there holding the fully resolved
configuration; ``voltpf run --manifest <file>`` replays it.

Exit codes: 0 success, 1 validation or convergence failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .control_curves import ControlMode, CurveSettings, load_preset
from .grid_model import TopologyError, validate_topology
from .ingest_io import (
    FormatError,
    SyntheticFeederParams,
    dumps_json,
    generate_synthetic_feeder,
    load_feeder,
    load_profiles,
    save_feeder,
    save_profiles,
    write_result,
)
from .metrics_report import compare_modes
from .powerflow import SolverOptions
from .sim_engine import (
    ControlOptions,
    DynamicOptions,
    ScenarioConfig,
    ScenarioResult,
    SimulationError,
    run_timeseries,
)

log = logging.getLogger("voltpf")

OUT_ENV = "VOLTPF_OUT"
MANIFEST = "manifest.json"
SWEEP_PARAMS = ("penetration", "v1", "v2", "v4", "v5", "q_lim", "pf_lim")


class UsageError(Exception):
    """Bad flag combination discovered after argparse (exit code 2)."""


class Failure(Exception):
    """Validation or convergence failure (exit code 1)."""


# --- logging -------------------------------------------------------------------------

class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        doc = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        doc.update(getattr(record, "fields", {}))
        return json.dumps(doc, sort_keys=True)


def _setup_logging(json_logs: bool, verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter() if json_logs else logging.Formatter("%(levelname)s: %(message)s"))
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    logging.captureWarnings(True)


def _info(msg: str, **fields) -> None:
    log.info(msg, extra={"fields": fields})


# --- parser --------------------------------------------------------------------------

def _scenario_flags(p: argparse.ArgumentParser) -> None:
    src = p.add_argument_group("feeder source (synthetic unless --feeder is given)")
    src.add_argument("--feeder", help="feeder JSON file")
    src.add_argument("--profiles", help="profile CSV (long format)")
    src.add_argument("--seed", type=int, default=42, help="synthetic feeder seed (default 42)")
    src.add_argument("--buses", type=int, default=60, help="synthetic feeder bus count")
    src.add_argument("--penetration", type=float, default=200.0, help="synthetic DER penetration, %%")

    sc = p.add_argument_group("scenario")
    sc.add_argument("--preset", default="ieee1547", help="curve settings: ieee1547 or file:<path>")
    when = sc.add_mutually_exclusive_group()
    when.add_argument("--static-hour", type=int, help="static snapshot at this profile index")
    when.add_argument("--timeseries", type=int, nargs="?", const=1440, metavar="POINTS",
                      help="quasi-static run, resampled to POINTS steps (default 1440)")
    sc.add_argument("--lambda", dest="relaxation", type=float, default=0.5,
                    help="static control relaxation factor in (0, 1]")
    sc.add_argument("--tau", type=float, default=5.0, help="inverter time constant, s")
    sc.add_argument("--agent-delay", type=float, default=1.0, help="command delay, s")
    sc.add_argument("--dt", type=float, help="dynamic step, s (default: profile spacing)")
    sc.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voltpf", description="Volt-VAr / volt-PF feeder studies.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--json-logs", action="store_true", help="line-delimited JSON diagnostics on stderr")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("run", help="run one scenario")
    _scenario_flags(p)
    p.add_argument("--mode", help="control mode for every DER (default: per-DER modes in the feeder)")
    p.add_argument("--manifest", help="replay a manifest.json; scenario flags are ignored")

    p = sub.add_parser("compare", help="run several modes on one feeder and tabulate")
    _scenario_flags(p)
    p.add_argument("--modes", default="voltvar,voltpf,unitypf",
                   help="comma-separated modes; deltas are relative to the first")

    p = sub.add_parser("sweep", help="compare modes across a parameter sweep")
    _scenario_flags(p)
    p.add_argument("--modes", default="voltvar,voltpf,unitypf")
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("gen-feeder", help="write a synthetic feeder and its profiles")
    p.add_argument("--buses", type=int, default=60)
    p.add_argument("--penetration", type=float, default=200.0)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")

    p = sub.add_parser("validate", help="lint a feeder and optional profiles")
    p.add_argument("--feeder", required=True)
    p.add_argument("--profiles")
    p.add_argument("--out", help="where to write the manifest (default: nothing written)")
    return ap


# --- resolved configuration -------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _file_ref(path: Optional[str]) -> Optional[dict]:
    if path is None:
        return None
    p = Path(path).resolve()
    if not p.is_file():
        raise Failure(f"{path}: no such file")
    return {"path": str(p), "sha256": _sha256(p)}


def _settings(preset: str) -> CurveSettings:
    try:
        return load_preset(preset)
    except FileNotFoundError as exc:
        raise Failure(f"--preset {preset}: {exc.strerror}: {exc.filename}") from exc
    except (ValueError, KeyError) as exc:
        raise UsageError(f"--preset {preset}: {exc}") from exc


def _parse_mode(text: str, flag: str) -> ControlMode:
    try:
        return ControlMode.parse(text)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"{flag}: cannot parse mode {text!r} ({exc})") from exc


def resolve_scenario(args: argparse.Namespace) -> dict:
    """Flags -> a JSON-serialisable scenario description (the manifest body)."""
    if args.profiles and not args.feeder:
        raise UsageError("--profiles needs --feeder")
    for flag, val in (("--tau", args.tau), ("--agent-delay", args.agent_delay)):
        if val < 0:
            raise UsageError(f"{flag} must be >= 0, got {val}")
    if not 0 < args.relaxation <= 1:
        raise UsageError(f"--lambda must lie in (0, 1], got {args.relaxation}")
    if args.timeseries is not None and args.timeseries < 2:
        raise UsageError(f"--timeseries needs at least 2 points, got {args.timeseries}")
    if args.dt is not None and args.dt <= 0:
        raise UsageError(f"--dt must be > 0, got {args.dt}")
    if args.feeder:
        source = {"feeder": _file_ref(args.feeder), "profiles": _file_ref(args.profiles)}
    else:
        params = SyntheticFeederParams(bus_count=args.buses, penetration_pct=args.penetration,
                                       seed=args.seed)
        source = {"synthetic": _params_dict(params)}
    return {
        "source": source,
        "settings": _settings(args.preset).to_dict(),
        "preset": args.preset,
        "static_hour": args.static_hour,
        "interpolate_points": args.timeseries,
        "control": asdict(ControlOptions(relaxation=args.relaxation)),
        "dynamic": asdict(DynamicOptions(dt_s=args.dt, tau_s=args.tau, agent_delay_s=args.agent_delay)),
        "solver": asdict(SolverOptions()),
    }


def _params_dict(params: SyntheticFeederParams) -> dict:
    d = asdict(params)
    d["transformer_z_pu"] = [params.transformer_z_pu.real, params.transformer_z_pu.imag]
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _params_from(d: dict) -> SyntheticFeederParams:
    kw = dict(d)
    z = kw.get("transformer_z_pu")
    if z is not None:
        kw["transformer_z_pu"] = complex(z[0], z[1])
    names = {f.name for f in fields(SyntheticFeederParams)}
    for k, v in kw.items():
        if k not in names:
            raise Failure(f"manifest: unknown synthetic parameter {k!r}")
        if isinstance(v, list):
            kw[k] = tuple(v)
    return SyntheticFeederParams(**kw)


def _load_source(source: dict):
    if "synthetic" in source:
        try:
            return generate_synthetic_feeder(_params_from(source["synthetic"]))
        except ValueError as exc:
            raise Failure(f"synthetic feeder: {exc}") from exc
    refs = [source["feeder"]] + ([source["profiles"]] if source.get("profiles") else [])
    for ref in refs:
        p = Path(ref["path"])
        if not p.is_file():
            raise Failure(f"{p}: no such file")
        if ref.get("sha256") and _sha256(p) != ref["sha256"]:
            raise Failure(f"{p}: contents changed since the manifest was written")
    feeder = load_feeder(source["feeder"]["path"])
    profiles = load_profiles(source["profiles"]["path"]) if source.get("profiles") else None
    return feeder, profiles


def build_config(scn: dict, feeder, profiles, mode: Optional[ControlMode], label: str = "") -> ScenarioConfig:
    return ScenarioConfig(
        feeder=feeder, profiles=profiles, mode=mode,
        settings=CurveSettings.from_dict(scn["settings"]),
        static_hour=scn["static_hour"], interpolate_points=scn["interpolate_points"],
        control=ControlOptions(**scn["control"]), dynamic=DynamicOptions(**scn["dynamic"]),
        solver=SolverOptions(**scn["solver"]), label=label)


def _out_dir(arg: Optional[str]) -> Path:
    out = Path(arg or os.environ.get(OUT_ENV) or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, manifest: dict) -> None:
    doc = {"tool": "voltpf", "version": __version__, **manifest}
    (out / MANIFEST).write_text(dumps_json(doc))


# --- command bodies (all driven by a manifest dict) ----------------------------------------

def _simulate(config: ScenarioConfig) -> ScenarioResult:
    try:
        return run_timeseries(config)
    except SimulationError as exc:
        raise Failure(f"scenario {config.label or config.mode_label()}: {exc}") from exc


def _check_converged(result: ScenarioResult, label: str) -> list[str]:
    bad = np.flatnonzero(~result.converged)
    if not len(bad):
        return []
    return [f"{label}: not converged at timestep(s) {', '.join(str(int(k)) for k in bad[:10])}"
            + (" ..." if len(bad) > 10 else "")]


def exec_run(manifest: dict, out: Path) -> list[str]:
    scn = manifest["scenario"]
    feeder, profiles = _load_source(scn["source"])
    mode = None if manifest["mode"] is None else ControlMode.from_json(manifest["mode"])
    label = mode.label if mode is not None else "feeder"
    result = _simulate(build_config(scn, feeder, profiles, mode, label))
    write_result(result, out / "result")
    if result.steps > 1:
        (out / "total_q_series.csv").write_text(compare_modes([(label, result)]).q_series_csv())
    _info("run finished", mode=label, steps=result.steps, out=str(out))
    return _check_converged(result, label)


def _compare_into(scn: dict, modes: list, out: Path, feeder=None, profiles=None) -> list[str]:
    if feeder is None:
        feeder, profiles = _load_source(scn["source"])
    results, problems = [], []
    for m in modes:
        mode = ControlMode.from_json(m)
        res = _simulate(build_config(scn, feeder, profiles, mode, mode.label))
        sub = out / mode.label
        sub.mkdir(parents=True, exist_ok=True)
        write_result(res, sub / "result")
        results.append((mode.label, res))
        problems += _check_converged(res, mode.label)
    cmp = compare_modes(results)
    (out / "comparison.csv").write_text(cmp.to_csv())
    (out / "comparison.txt").write_text(cmp.to_text())
    (out / "metrics.json").write_text(dumps_json([m.to_dict() for m in cmp.metrics]))
    if cmp.transformer_delta:
        (out / "transformer_delta.csv").write_text(cmp.transformer_delta_csv())
    if cmp.q_series:
        (out / "total_q_series.csv").write_text(cmp.q_series_csv())
    return problems


def exec_compare(manifest: dict, out: Path) -> list[str]:
    problems = _compare_into(manifest["scenario"], manifest["modes"], out)
    _info("compare finished", modes=[ControlMode.from_json(m).label for m in manifest["modes"]],
          out=str(out))
    return problems


def _sweep_scenario(scn: dict, param: str, value: float) -> dict:
    scn = json.loads(json.dumps(scn))
    if param == "penetration":
        if "synthetic" not in scn["source"]:
            raise UsageError("--param penetration needs the synthetic feeder (drop --feeder)")
        scn["source"]["synthetic"]["penetration_pct"] = value
    elif param == "q_lim":
        scn["settings"]["q_lim_inject_pu"] = scn["settings"]["q_lim_absorb_pu"] = value
    elif param == "pf_lim":
        scn["settings"]["pf_lim_inject"] = scn["settings"]["pf_lim_absorb"] = value
    else:
        scn["settings"][param] = value
    try:
        CurveSettings.from_dict(scn["settings"])
    except ValueError as exc:
        raise UsageError(f"--values {value}: {exc}") from exc
    return scn


def _sweep_one(job) -> tuple[str, list[str], list[dict]]:
    scn, modes, sub = job
    sub = Path(sub)
    sub.mkdir(parents=True, exist_ok=True)
    problems = _compare_into(scn, modes, sub)
    metrics = json.loads((sub / "metrics.json").read_text())
    return str(sub), problems, metrics


def exec_sweep(manifest: dict, out: Path) -> list[str]:
    param, values = manifest["param"], manifest["values"]
    jobs = [(_sweep_scenario(manifest["scenario"], param, v), manifest["modes"],
             str(out / f"{param}={v:g}")) for v in values]
    workers = max(1, min(manifest.get("jobs", 1), len(jobs)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_sweep_one, jobs))
    else:
        done = [_sweep_one(j) for j in jobs]

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([param, "mode", "max_v_pu", "min_v_pu", "violation_count", "lowest_der_pf",
                "total_der_abs_q_kvar", "total_loss_kw"])
    problems = []
    for v, (_, probs, metrics) in zip(values, done):
        problems += [f"{param}={v:g}: {p}" for p in probs]
        for m in metrics:
            w.writerow([repr(float(v)), m["label"], repr(m["max_v_pu"]), repr(m["min_v_pu"]),
                        m["violation_count"], repr(m["lowest_der_pf"]),
                        repr(m["total_der_abs_q_kvar"]), repr(m["total_loss_kw"])])
    (out / "sweep_summary.csv").write_text(buf.getvalue())
    _info("sweep finished", param=param, values=values, out=str(out))
    return problems


def exec_gen_feeder(manifest: dict, out: Path) -> list[str]:
    params = _params_from(manifest["synthetic"])
    try:
        feeder, profiles = generate_synthetic_feeder(params)
    except ValueError as exc:
        raise Failure(f"gen-feeder: {exc}") from exc
    save_feeder(feeder, out / "feeder.json")
    save_profiles(profiles, out / "profiles.csv")
    _info("feeder written", buses=len(feeder.buses), ders=len(feeder.ders), out=str(out))
    return []


def exec_validate(manifest: dict, out: Optional[Path]) -> list[str]:
    fpath = manifest["feeder"]["path"]
    try:
        feeder = load_feeder(fpath)
    except (FormatError, TopologyError) as exc:
        return [str(exc)]
    problems = []
    if manifest.get("profiles"):
        ppath = manifest["profiles"]["path"]
        try:
            profiles = load_profiles(ppath)
        except FormatError as exc:
            return [str(exc)]
        known_loads, known_ders = set(feeder.load_ids()), set(feeder.der_ids())
        problems += [f"{ppath}: load {i!r} is not in {fpath}" for i in profiles.load_ids if i not in known_loads]
        problems += [f"{ppath}: DER {i!r} is not in {fpath}" for i in profiles.der_ids if i not in known_ders]
    rep = validate_topology(feeder)
    problems += [f"{fpath}: {v}" for v in rep.violations]
    if not problems:
        _info("valid", feeder=fpath, buses=len(feeder.buses), ders=len(feeder.ders))
    return problems


EXECUTORS = {"run": exec_run, "compare": exec_compare, "sweep": exec_sweep,
             "gen-feeder": exec_gen_feeder, "validate": exec_validate}


def _manifest_from_args(args: argparse.Namespace) -> dict:
    cmd = args.command
    if cmd == "gen-feeder":
        params = SyntheticFeederParams(bus_count=args.buses, penetration_pct=args.penetration, seed=args.seed)
        return {"command": cmd, "synthetic": _params_dict(params)}
    if cmd == "validate":
        return {"command": cmd, "feeder": _file_ref(args.feeder), "profiles": _file_ref(args.profiles)}
    scn = resolve_scenario(args)
    if cmd == "run":
        mode = None if args.mode is None else _parse_mode(args.mode, "--mode").to_json()
        return {"command": cmd, "scenario": scn, "mode": mode}
    modes = [_parse_mode(m, "--modes").to_json() for m in args.modes.split(",") if m.strip()]
    if not modes:
        raise UsageError("--modes is empty")
    if cmd == "compare":
        return {"command": cmd, "scenario": scn, "modes": modes}
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values: {exc}") from exc
    if not values:
        raise UsageError("--values is empty")
    if args.jobs < 1:
        raise UsageError(f"--jobs must be >= 1, got {args.jobs}")
    # jobs only affects scheduling, never results, so it is not recorded
    return {"command": cmd, "scenario": scn, "modes": modes, "param": args.param, "values": values,
            "jobs": args.jobs}


def _read_manifest(path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise Failure(f"--manifest {path}: no such file") from exc
    except json.JSONDecodeError as exc:
        raise Failure(f"--manifest {path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if doc.get("command") not in EXECUTORS:
        raise Failure(f"--manifest {path}: unknown command {doc.get('command')!r}")
    return doc


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    _setup_logging(args.json_logs, args.verbose)
    try:
        if getattr(args, "manifest", None):
            manifest = _read_manifest(args.manifest)
        else:
            manifest = _manifest_from_args(args)
        cmd = manifest["command"]
        if cmd == "validate" and not args.out:
            out = None
        else:
            out = _out_dir(args.out)
        record = {k: v for k, v in manifest.items() if k != "jobs"}
        if out is not None:
            _write_manifest(out, {k: v for k, v in record.items() if k not in ("tool", "version")})
        if manifest.get("version", __version__) != __version__:
            log.warning("manifest was written by version %s, running %s", manifest["version"], __version__)
        problems = EXECUTORS[cmd](manifest, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        log.error(str(exc))
        return 2
    except (Failure, FormatError, TopologyError) as exc:
        log.error(str(exc))
        return 1
    for p in problems:
        log.error(p)
    return 1 if problems else 0


if __name__ == "__main__":
    sys.exit(main())
