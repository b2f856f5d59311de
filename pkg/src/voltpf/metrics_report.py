"""Comparison metrics between control modes and their tabular renderings."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .grid_model import Feeder
from .powerflow import PowerFlowSolution

TABLE_ROWS = (
    ("max_v_pu", "Max voltage (p.u.)"),
    ("min_v_pu", "Min voltage (p.u.)"),
    ("lowest_der_pf", "Lowest DER power factor"),
    ("feederhead_p_mw", "Total active power at feederhead (MW)"),
    ("feederhead_q_mvar", "Total reactive power at feederhead (MVAr)"),
    ("total_der_q_mvar", "Total DER reactive power (MVAr)"),
    ("total_loss_kw", "Total feeder active power losses (kW)"),
)


def violation_stats(solution: PowerFlowSolution, feeder: Feeder, bus_ids: Optional[Sequence[str]] = None):
    """Buses outside their own limits: ``(count, max_v, min_v, violating ids)``."""
    vm = solution.vmag
    ids = list(bus_ids or solution.bus_ids)
    lim = {b.id: b.v_limits for b in feeder.buses}
    bad = [b for b, v in zip(ids, vm) if not lim[b][0] <= v <= lim[b][1]]
    return len(bad), float(vm.max()), float(vm.min()), bad


def _violations(bus_v: np.ndarray, limits: np.ndarray) -> np.ndarray:
    return (bus_v < limits[:, 0]) | (bus_v > limits[:, 1])


def der_pf_stats(setpoints) -> tuple[float, list[float]]:
    """Lowest PF magnitude and the per-DER list.

    ``setpoints`` is any iterable of (P, Q) pairs or objects with ``p_kw`` and
    ``q_kvar``. DERs at P = 0 count as unity and do not enter the minimum.
    """
    pfs, active = [], []
    for sp in setpoints:
        p, q = (sp.p_kw, sp.q_kvar) if hasattr(sp, "p_kw") else sp
        s = float(np.hypot(p, q))
        if p > 0 and s > 0:
            pfs.append(p / s)
            active.append(p / s)
        else:
            pfs.append(1.0)
    return (min(active) if active else 1.0), pfs


def total_der_q(setpoints) -> tuple[float, float]:
    """(signed sum, absolute sum) of DER reactive power in kvar."""
    qs = [sp.q_kvar if hasattr(sp, "q_kvar") else float(sp) for sp in setpoints]
    return float(sum(qs)), float(sum(abs(q) for q in qs))


@dataclass
class ModeMetrics:
    """Feeder-level figures for one mode.

    For multi-step results the voltage extremes span the whole run,
    ``violation_count`` counts bus-timestep pairs, ``violating_buses`` counts
    distinct buses, and the Q / feederhead / loss figures are taken at the
    step of peak total |Q| (the peak-Q view of a daily comparison).
    """

    label: str
    steps: int
    max_v_pu: float
    min_v_pu: float
    violation_count: int
    violating_buses: int
    lowest_der_pf: float
    total_der_q_kvar: float
    total_der_abs_q_kvar: float
    feederhead_p_kw: float
    feederhead_q_kvar: float
    total_loss_kw: float
    transformer_loading_pct: list[float] = field(default_factory=list)
    peak_step: int = 0

    @property
    def feederhead_p_mw(self) -> float:
        return self.feederhead_p_kw / 1000.0

    @property
    def feederhead_q_mvar(self) -> float:
        return self.feederhead_q_kvar / 1000.0

    @property
    def total_der_q_mvar(self) -> float:
        return self.total_der_q_kvar / 1000.0

    def to_dict(self) -> dict:
        return asdict(self)


def mode_metrics(result, label: Optional[str] = None) -> ModeMetrics:
    if result.steps == 0:
        raise ValueError("result has no timesteps")
    viol = _violations(result.bus_v, result.bus_limits)
    abs_q = result.total_der_abs_q
    k = int(np.argmax(abs_q)) if result.steps > 1 else 0
    pf = result.der_pf
    active = result.der_p > 0
    lowest = float(pf[active].min()) if np.any(active) else 1.0
    return ModeMetrics(
        label=label or result.label or result.mode,
        steps=result.steps,
        max_v_pu=float(result.bus_v.max()),
        min_v_pu=float(result.bus_v.min()),
        violation_count=int(viol.sum()),
        violating_buses=int(viol.any(axis=0).sum()),
        lowest_der_pf=lowest,
        total_der_q_kvar=float(result.total_der_q[k]),
        total_der_abs_q_kvar=float(abs_q[k]),
        feederhead_p_kw=float(result.feeder_p_kw[k]),
        feederhead_q_kvar=float(result.feeder_q_kvar[k]),
        total_loss_kw=float(result.loss_kw[k]),
        transformer_loading_pct=[float(x) for x in result.transformer_loading[k]],
        peak_step=k,
    )


def reduction_pct(a: float, b: float) -> float:
    """100 * (a - b) / a; 0 when both are 0, NaN when only ``a`` is."""
    if a == 0:
        return 0.0 if b == 0 else float("nan")
    return 100.0 * (a - b) / a


def transformer_loading_delta(result_a, result_b, feeder: Optional[Feeder] = None) -> np.ndarray:
    """Per-transformer loading of B minus A in percentage points (negative = B lighter)."""
    ma, mb = mode_metrics(result_a), mode_metrics(result_b)
    a = np.asarray(ma.transformer_loading_pct)
    b = np.asarray(mb.transformer_loading_pct)
    if feeder is not None and len(a) != len(feeder.transformers):
        raise ValueError("result does not match the feeder's transformers")
    return b - a


@dataclass
class ModeComparison:
    metrics: list[ModeMetrics]
    q_reduction_pct: dict[str, float] = field(default_factory=dict)
    loss_reduction_pct: dict[str, float] = field(default_factory=dict)
    transformer_delta: dict[str, list[float]] = field(default_factory=dict)
    transformer_ids: tuple[str, ...] = ()
    q_series: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def reference(self) -> ModeMetrics:
        return self.metrics[0]

    def table(self) -> list[list[str]]:
        head = ["Parameter"] + [m.label for m in self.metrics]
        rows = [head]
        for key, title in TABLE_ROWS:
            rows.append([title] + [_fmt(getattr(m, key)) for m in self.metrics])
        if len(self.metrics) > 1:
            ref = self.reference.label
            rows.append([f"DER |Q| reduction vs {ref} (%)"]
                        + [_fmt(self.q_reduction_pct.get(m.label, 0.0)) for m in self.metrics])
            rows.append([f"Loss reduction vs {ref} (%)"]
                        + [_fmt(self.loss_reduction_pct.get(m.label, 0.0)) for m in self.metrics])
        rows.append(["Violations (bus-steps)"] + [str(m.violation_count) for m in self.metrics])
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.table())
        return buf.getvalue()

    def to_text(self) -> str:
        rows = self.table()
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        out = []
        for j, r in enumerate(rows):
            cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
            out.append("  ".join(cells).rstrip())
            if j == 0:
                out.append("  ".join("-" * w for w in widths))
        return "\n".join(out) + "\n"

    def q_series_csv(self) -> str:
        """Per-timestep total DER Q per mode, long format."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "timestep", "time_s", "total_der_q_kvar", "total_der_abs_q_kvar"])
        for label, (t, q, aq) in self.q_series.items():
            for k in range(len(t)):
                w.writerow([label, k, repr(float(t[k])), repr(float(q[k])), repr(float(aq[k]))])
        return buf.getvalue()

    def transformer_delta_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "transformer", "loading_delta_pct_points"])
        for label, deltas in self.transformer_delta.items():
            for tid, d in zip(self.transformer_ids, deltas):
                w.writerow([label, tid, repr(float(d))])
        return buf.getvalue()


def _fmt(x: float) -> str:
    if isinstance(x, float):
        return "n/a" if np.isnan(x) else f"{x:.6g}"
    return str(x)


def compare_modes(results: Sequence[tuple[str, object]]) -> ModeComparison:
    """Tabulate modes side by side; deltas are relative to the first entry."""
    if not results:
        raise ValueError("nothing to compare")
    metrics = [mode_metrics(r, label) for label, r in results]
    cmp = ModeComparison(metrics, transformer_ids=tuple(results[0][1].transformer_ids))
    ref_label, ref = results[0]
    ref_m = metrics[0]
    for (label, r), m in zip(results, metrics):
        if r.steps > 1:
            cmp.q_series[label] = (r.timestamps, r.total_der_q, r.total_der_abs_q)
        if len(results) == 1:
            continue
        cmp.q_reduction_pct[label] = reduction_pct(ref_m.total_der_abs_q_kvar, m.total_der_abs_q_kvar)
        cmp.loss_reduction_pct[label] = reduction_pct(ref_m.total_loss_kw, m.total_loss_kw)
        cmp.transformer_delta[label] = [float(x) for x in
                                        np.asarray(m.transformer_loading_pct)
                                        - np.asarray(ref_m.transformer_loading_pct)]
    return cmp
