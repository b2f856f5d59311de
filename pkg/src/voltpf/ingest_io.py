"""Feeder / profile / settings I/O and the synthetic feeder generator.

Formats are documented in ``docs/formats.md``. Loaders parse, validate and
only then return, so a malformed file never yields a partial object.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import jsonschema
import numpy as np

from .control_curves import ControlMode, CurveSettings, load_preset
from .grid_model import (
    DER_Q_HEADROOM,
    Bus,
    DerUnit,
    Feeder,
    LineSegment,
    Load,
    TopologyError,
    TransformerBank,
    validate_topology,
)
from .sim_engine import ScenarioResult, TimeSeriesProfiles

PathLike = Union[str, Path]

DER_CLASSES_KW = (5.0, 8.0, 12.0, 15.0, 20.0)
PROFILE_KINDS = ("load_p", "load_q", "der_p", "source_v")
SOURCE_ENTITY = "source"


class FormatError(ValueError):
    """Input file does not match its documented format."""


def feeder_schema() -> dict:
    return json.loads(resources.files("voltpf").joinpath("schemas", "feeder.schema.json").read_text())


# --- feeders -------------------------------------------------------------------------

def _pair(z: complex) -> list[float]:
    return [float(z.real), float(z.imag)]


def feeder_to_dict(feeder: Feeder) -> dict:
    def settings(s):
        return None if s is None else s.to_dict()

    return {
        "format_version": 1,
        "base_mva": feeder.base_mva,
        "source_bus": feeder.source_bus,
        "source_v_pu": feeder.source_v_pu,
        "per_unit": feeder.per_unit,
        "buses": [{"id": b.id, "phase_count": b.phase_count, "nominal_kv": b.nominal_kv,
                   "v_limits": list(b.v_limits)} for b in feeder.buses],
        "lines": [{"from_bus": ln.from_bus, "to_bus": ln.to_bus, "impedance": _pair(ln.impedance)}
                  for ln in feeder.lines],
        "transformers": [{"id": t.id, "from_bus": t.from_bus, "to_bus": t.to_bus,
                          "rating_kva": t.rating_kva, "series_impedance": _pair(t.series_impedance),
                          "tap_ratio": t.tap_ratio} for t in feeder.transformers],
        "loads": [{"id": ld.id, "bus": ld.bus, "p_kw": ld.p_kw, "q_kvar": ld.q_kvar, "model": ld.model}
                  for ld in feeder.loads],
        "ders": [{"id": d.id, "bus": d.bus, "s_rated_kva": d.s_rated_kva, "p_rated_kw": d.p_rated_kw,
                  "mode": d.mode.to_json(), "settings": settings(d.settings)} for d in feeder.ders],
    }


def _settings_from(obj) -> Optional[CurveSettings]:
    if obj is None:
        return None
    if isinstance(obj, str):
        return load_preset(obj)
    return CurveSettings.from_dict(obj)


def feeder_from_dict(doc: dict, validate: bool = True) -> Feeder:
    errors = sorted(jsonschema.Draft202012Validator(feeder_schema()).iter_errors(doc),
                    key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{e.json_path}: {e.message}" for e in errors]
        raise FormatError("feeder schema errors:\n  " + "\n  ".join(lines))
    try:
        # a top-level curve_settings block is the default for DERs without their own
        default = _settings_from(doc.get("curve_settings"))
        feeder = Feeder(
            buses=[Bus(b["id"], float(b["nominal_kv"]), int(b.get("phase_count", 1)),
                       tuple(b.get("v_limits", (0.95, 1.05)))) for b in doc["buses"]],
            lines=[LineSegment(ln["from_bus"], ln["to_bus"], complex(*ln["impedance"]))
                   for ln in doc["lines"]],
            transformers=[TransformerBank(t["from_bus"], t["to_bus"], float(t["rating_kva"]),
                                          complex(*t["series_impedance"]),
                                          float(t.get("tap_ratio", 1.0)), t.get("id"))
                          for t in doc.get("transformers", [])],
            loads=[Load(ld["bus"], float(ld["p_kw"]), float(ld["q_kvar"]),
                        ld.get("model", "constant_power"), ld.get("id"))
                   for ld in doc.get("loads", [])],
            ders=[DerUnit(d["bus"], float(d["s_rated_kva"]), float(d["p_rated_kw"]),
                          ControlMode.from_json(d.get("mode", "unitypf")),
                          _settings_from(d.get("settings")) or default, d.get("id"))
                  for d in doc.get("ders", [])],
            source_bus=doc["source_bus"],
            base_mva=float(doc["base_mva"]),
            source_v_pu=float(doc["source_v_pu"]),
            per_unit=bool(doc.get("per_unit", False)),
        )
    except (ValueError, KeyError) as exc:
        raise FormatError(f"invalid feeder field: {exc}") from exc
    if validate:
        rep = validate_topology(feeder)
        if not rep.ok:
            raise TopologyError("feeder topology errors:\n  " + "\n  ".join(rep.violations))
    return feeder


def load_feeder(path: PathLike) -> Feeder:
    """Read, schema-check and topology-validate a feeder JSON file."""
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return feeder_from_dict(doc)
    except (FormatError, TopologyError) as exc:
        raise type(exc)(f"{path}: {exc}") from exc


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def save_feeder(feeder: Feeder, path: PathLike) -> None:
    Path(path).write_text(dumps_json(feeder_to_dict(feeder)))


# --- profiles ------------------------------------------------------------------------

def _parse_time(raw: str, line: int) -> tuple[str, float]:
    raw = raw.strip()
    try:
        return "minute", float(int(raw)) * 60.0
    except ValueError:
        pass
    try:
        stamp = datetime.fromisoformat(raw)
        if stamp.tzinfo is None:
            stamp = stamp.replace(tzinfo=timezone.utc)
        return "iso", stamp.timestamp()
    except ValueError:
        raise FormatError(f"line {line}: timestamp {raw!r} is neither an integer minute "
                          f"nor ISO-8601") from None


def parse_profiles(text: str, source: str = "<profiles>") -> TimeSeriesProfiles:
    reader = csv.reader(io.StringIO(text))
    header = [h.strip() for h in next(reader, [])]
    if header != ["timestamp", "entity_id", "kind", "value"]:
        raise FormatError(f"{source}: header must be 'timestamp,entity_id,kind,value', got {header}")
    data: dict[tuple[str, str], dict[float, float]] = {}
    styles = set()
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise FormatError(f"{source}: line {lineno}: expected 4 fields, got {len(row)}")
        style, t = _parse_time(row[0], lineno)
        styles.add(style)
        ent, kind = row[1].strip(), row[2].strip()
        if kind not in PROFILE_KINDS:
            raise FormatError(f"{source}: line {lineno}: unknown kind {kind!r}")
        try:
            val = float(row[3])
        except ValueError:
            raise FormatError(f"{source}: line {lineno}: value {row[3]!r} is not a number") from None
        if not math.isfinite(val):
            raise FormatError(f"{source}: line {lineno}: non-finite value")
        if kind == "der_p" and val < 0:
            raise FormatError(f"{source}: line {lineno}: negative der_p {val} for {ent}")
        if kind == "source_v" and val <= 0:
            raise FormatError(f"{source}: line {lineno}: source_v must be > 0")
        series = data.setdefault((ent, kind), {})
        if t in series:
            raise FormatError(f"{source}: line {lineno}: duplicate {kind} sample for {ent}")
        series[t] = val
    if len(styles) > 1:
        raise FormatError(f"{source}: mixes integer-minute and ISO-8601 timestamps")

    times = sorted({t for s in data.values() for t in s})
    gaps = []
    for (ent, kind), s in sorted(data.items()):
        missing = [t for t in times if t not in s]
        if missing:
            gaps.append(f"{ent}/{kind}: {len(missing)} missing, first at t={missing[0] - times[0]:g} s")
    loads = sorted({e for e, k in data if k in ("load_p", "load_q")})
    for ent in loads:
        for kind in ("load_p", "load_q"):
            if (ent, kind) not in data:
                gaps.append(f"{ent}/{kind}: series absent")
    if gaps:
        raise FormatError(f"{source}: misaligned series:\n  " + "\n  ".join(gaps))

    t0 = times[0] if times else 0.0
    ts = np.array([t - t0 for t in times])
    ders = sorted({e for e, k in data if k == "der_p"})
    sv = data.get((SOURCE_ENTITY, "source_v"))
    arr = lambda key: [data[key][t] for t in times]  # noqa: E731
    try:
        return TimeSeriesProfiles(
            ts, tuple(loads),
            np.array([arr((e, "load_p")) for e in loads]).reshape(len(loads), len(times)),
            np.array([arr((e, "load_q")) for e in loads]).reshape(len(loads), len(times)),
            tuple(ders), np.array([arr((e, "der_p")) for e in ders]).reshape(len(ders), len(times)),
            None if sv is None else np.array([sv[t] for t in times]))
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from exc


def load_profiles(path: PathLike) -> TimeSeriesProfiles:
    """Read a long-format profile CSV (``timestamp,entity_id,kind,value``)."""
    path = Path(path)
    return parse_profiles(path.read_text(), str(path))


def profiles_to_csv(profiles: TimeSeriesProfiles) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp", "entity_id", "kind", "value"])
    minutes = [int(round(t / 60.0)) for t in profiles.timestamps]
    if not np.allclose(np.array(minutes) * 60.0, profiles.timestamps):
        raise ValueError("profile timestamps must fall on whole minutes to be written")
    for k, m in enumerate(minutes):
        for i, e in enumerate(profiles.load_ids):
            w.writerow([m, e, "load_p", repr(float(profiles.load_p[i, k]))])
            w.writerow([m, e, "load_q", repr(float(profiles.load_q[i, k]))])
        for i, e in enumerate(profiles.der_ids):
            w.writerow([m, e, "der_p", repr(float(profiles.der_p[i, k]))])
        if profiles.source_v is not None:
            w.writerow([m, SOURCE_ENTITY, "source_v", repr(float(profiles.source_v[k]))])
    return buf.getvalue()


def save_profiles(profiles: TimeSeriesProfiles, path: PathLike) -> None:
    Path(path).write_text(profiles_to_csv(profiles))


def load_settings(path: PathLike) -> CurveSettings:
    return CurveSettings.from_dict(json.loads(Path(path).read_text()))


# --- synthetic feeders ---------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticFeederParams:
    """Knobs for :func:`generate_synthetic_feeder`.

    Impedances are p.u. per segment on ``base_mva`` and the primary voltage.
    Penetration is sum(DER rated P) / sum(peak load) * 100; load peaks are
    rescaled so the requested penetration holds exactly.
    """

    bus_count: int = 60
    branching: int = 3
    line_r_pu: tuple[float, float] = (0.015, 0.035)
    line_x_pu: tuple[float, float] = (0.015, 0.035)
    load_count: Optional[int] = None
    load_kw: tuple[float, float] = (2.0, 10.0)
    load_pf: float = 0.95
    der_count: Optional[int] = None
    penetration_pct: float = 200.0
    availability: tuple[float, float] = (0.2, 1.0)
    transformer_density: float = 0.5
    transformer_z_pu: complex = 0.012 + 0.025j
    primary_kv: float = 7.2
    secondary_kv: float = 0.12
    base_mva: float = 1.0
    source_v_pu: float = 1.03
    peak_hour: float = 13.0
    seed: int = 42

    def __post_init__(self):
        if self.bus_count < 2:
            raise ValueError("bus_count must be >= 2")
        if self.branching < 1:
            raise ValueError("branching must be >= 1")
        if not (self.penetration_pct == 0 or 1.0 <= self.penetration_pct <= 1000.0):
            # below 1 % even a single smallest unit forces absurdly large loads
            raise ValueError("penetration must be 0 or within [1, 1000] percent")
        lo, hi = self.availability
        if not 0 <= lo <= hi <= 1:
            raise ValueError("availability range must lie within [0, 1]")
        if self.der_count is not None and self.der_count > self.bus_count - 1:
            raise ValueError(f"infeasible: {self.der_count} DERs for {self.bus_count - 1} non-source buses")
        if self.load_count is not None and self.load_count > self.bus_count - 1:
            raise ValueError(f"infeasible: {self.load_count} loads for {self.bus_count - 1} non-source buses")
        if not 0 <= self.transformer_density <= 1:
            raise ValueError("transformer_density must lie in [0, 1]")


def solar_shape(hours: np.ndarray, peak: float = 13.0, half_width: float = 7.0) -> np.ndarray:
    x = (hours - (peak - half_width)) / (2 * half_width)
    return np.where((x > 0) & (x < 1), np.sin(np.pi * np.clip(x, 0, 1)) ** 1.5, 0.0)


def load_shape(hours: np.ndarray) -> np.ndarray:
    """Residential double peak (morning, evening), normalized to max 1."""
    h = np.asarray(hours, dtype=float)
    y = 0.35 + 0.40 * np.exp(-((h - 8.0) ** 2) / 4.0) + 0.65 * np.exp(-((h - 19.5) ** 2) / 5.0)
    return y / y.max()


def _s_rated_for(p_kw: float) -> float:
    # smallest 0.1 kVA step that keeps rated P alongside 0.44*S of Q
    return math.ceil(p_kw / math.sqrt(1 - DER_Q_HEADROOM**2) * 10.0) / 10.0


def generate_synthetic_feeder(params: SyntheticFeederParams = SyntheticFeederParams()
                              ) -> tuple[Feeder, TimeSeriesProfiles]:
    """Random radial feeder with customer loads, PV DERs and 24 hourly profiles.

    Randomness comes from ``numpy.random.Generator(PCG64(seed))`` drawn in a
    fixed order, so a seed reproduces the same feeder on any platform.
    """
    p = params
    rng = np.random.Generator(np.random.PCG64(p.seed))
    n = p.bus_count
    zbase_primary = p.primary_kv**2 / p.base_mva

    # Tree: each new bus hangs off one of the few most recent buses with spare
    # branching capacity, which gives long laterals.
    parent = [-1]
    children = [0]
    for i in range(1, n):
        window = [j for j in range(max(0, i - 4), i) if children[j] < p.branching]
        if not window:
            window = [j for j in range(i) if children[j] < p.branching]
        j = int(window[rng.integers(len(window))])
        parent.append(j)
        children.append(0)
        children[j] += 1
    leaves = [i for i in range(1, n) if children[i] == 0]

    is_xfmr = np.zeros(n, dtype=bool)
    for i in leaves:
        is_xfmr[i] = rng.random() < p.transformer_density

    name = [f"n{i:03d}" for i in range(n)]
    buses = [Bus(name[i], p.secondary_kv if is_xfmr[i] else p.primary_kv) for i in range(n)]
    r = rng.uniform(*p.line_r_pu, size=n)
    x = rng.uniform(*p.line_x_pu, size=n)

    # Candidate customer buses: leaves first (shuffled), then the others.
    others = [i for i in range(1, n) if children[i] > 0]
    order = list(rng.permutation(leaves)) + list(rng.permutation(others))
    n_loads = p.load_count if p.load_count is not None else max(1, round(0.6 * (n - 1)))
    load_bus = sorted(int(i) for i in order[:n_loads])
    peak = np.round(rng.uniform(*p.load_kw, size=len(load_bus)), 3)

    if p.penetration_pct == 0:
        n_der = 0
    elif p.der_count is not None:
        n_der = p.der_count
    else:
        mean_kw = float(np.mean(DER_CLASSES_KW))
        n_der = int(min(n - 1, max(1, round(p.penetration_pct / 100 * peak.sum() / mean_kw))))
    der_bus = sorted(int(i) for i in order[:n_der])
    ratings = np.array([DER_CLASSES_KW[k] for k in rng.integers(len(DER_CLASSES_KW), size=n_der)])
    avail = np.round(rng.uniform(*p.availability, size=n_der), 4)

    if n_der and len(load_bus):
        target_peak = ratings.sum() / (p.penetration_pct / 100.0)
        peak = np.round(peak * target_peak / peak.sum(), 3)

    qf = math.tan(math.acos(p.load_pf))
    loads = [Load(name[b], float(pk), round(float(pk) * qf, 3), id=f"L{b:03d}")
             for b, pk in zip(load_bus, peak)]
    ders = [DerUnit(name[b], _s_rated_for(rt), float(rt), id=f"PV{b:03d}")
            for b, rt in zip(der_bus, ratings)]

    # Transformers sized to what hangs below them.
    demand = np.zeros(n)
    for b, pk in zip(load_bus, peak):
        demand[b] = max(demand[b], pk)
    for b, d in zip(der_bus, ders):
        demand[b] = max(demand[b], d.s_rated_kva)
    lines, trs = [], []
    for i in range(1, n):
        if is_xfmr[i]:
            rating = next((s for s in (15.0, 25.0, 37.5, 50.0, 75.0, 100.0) if s >= 1.25 * demand[i]), 167.0)
            trs.append(TransformerBank(name[parent[i]], name[i], rating, p.transformer_z_pu, 1.0,
                                       id=f"T{i:03d}"))
        else:
            z = complex(round(r[i] * zbase_primary, 6), round(x[i] * zbase_primary, 6))
            lines.append(LineSegment(name[parent[i]], name[i], z))

    feeder = Feeder(buses=buses, lines=lines, transformers=trs, loads=loads, ders=ders,
                    source_bus=name[0], base_mva=p.base_mva, source_v_pu=p.source_v_pu)

    hours = np.arange(24, dtype=float)
    sol = solar_shape(hours, p.peak_hour)
    lshape = load_shape(hours)
    der_p = np.round(ratings[:, None] * avail[:, None] * sol[None, :], 4)
    load_p = np.round(peak[:, None] * lshape[None, :], 4)
    load_q = np.round(load_p * qf, 4)
    src = np.round(p.source_v_pu + 0.005 * np.cos(2 * np.pi * (hours - 4.0) / 24.0), 5)
    profiles = TimeSeriesProfiles(hours * 3600.0, tuple(ld.id for ld in loads), load_p, load_q,
                                  tuple(d.id for d in ders), der_p, src)
    return feeder, profiles


# --- results -------------------------------------------------------------------------

RESULT_COLUMNS = ("timestep", "entity", "field", "value")


def result_rows(result: ScenarioResult):
    """Long-format rows in a fixed order: feeder, buses, DERs, transformers."""
    pf = result.der_pf
    exc = result.der_excitation
    fmt = lambda v: repr(float(v))  # noqa: E731
    for k in range(result.steps):
        yield k, "feeder", "time_s", fmt(result.timestamps[k])
        yield k, "feeder", "p_kw", fmt(result.feeder_p_kw[k])
        yield k, "feeder", "q_kvar", fmt(result.feeder_q_kvar[k])
        yield k, "feeder", "loss_kw", fmt(result.loss_kw[k])
        yield k, "feeder", "total_der_q_kvar", fmt(result.total_der_q[k])
        yield k, "feeder", "total_der_abs_q_kvar", fmt(result.total_der_abs_q[k])
        yield k, "feeder", "converged", int(result.converged[k])
        for i, b in enumerate(result.bus_ids):
            yield k, b, "v_pu", fmt(result.bus_v[k, i])
        for i, d in enumerate(result.der_ids):
            yield k, d, "v_pu", fmt(result.der_v[k, i])
            yield k, d, "p_kw", fmt(result.der_p[k, i])
            yield k, d, "q_kvar", fmt(result.der_q[k, i])
            yield k, d, "pf", fmt(pf[k, i])
            yield k, d, "excitation", int(exc[k, i])
        for i, t in enumerate(result.transformer_ids):
            yield k, t, "loading_pct", fmt(result.transformer_loading[k, i])


def result_csv(result: ScenarioResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    w.writerows(result_rows(result))
    return buf.getvalue()


def result_summary(result: ScenarioResult) -> dict:
    from .metrics_report import mode_metrics

    summary = {
        "label": result.label,
        "mode": result.mode,
        "static": result.static,
        "steps": result.steps,
        "all_converged": bool(np.all(result.converged)) if result.steps else True,
        "non_converged_steps": [int(k) for k in np.flatnonzero(~result.converged)],
    }
    if result.steps:
        summary["metrics"] = mode_metrics(result).to_dict()
    return summary


def write_result(result: ScenarioResult, path: PathLike, format: str = "both") -> list[Path]:
    """Write ``<path>.csv`` (long format) and/or ``<path>.json`` (summary)."""
    if format not in ("csv", "json", "both"):
        raise ValueError(f"format must be csv, json or both, got {format!r}")
    base = Path(path)
    if base.suffix in (".csv", ".json"):
        base = base.with_suffix("")
    written = []
    if format in ("csv", "both"):
        out = base.with_suffix(".csv")
        out.write_text(result_csv(result))
        written.append(out)
    if format in ("json", "both"):
        out = base.with_suffix(".json")
        out.write_text(dumps_json(result_summary(result)))
        written.append(out)
    return written
