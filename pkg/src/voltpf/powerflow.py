"""Backward/forward sweep power flow for radial per-unit feeders.

The sweep is written in path-matrix form. With ``D[b, k]`` the share of the
current drawn at bus ``k`` that flows through the branch feeding bus ``b``
(a product of ``1/tap`` over transformers between them), one iteration is

    backward:  J = D @ I(V)
    forward:   V = a * V_source - D.T @ (z * J)

where ``I(V) = conj(-S / V)`` is the constant-power current drawn at each bus
and ``a`` carries the tap ratios from the source. This is the classic
branch-current/bus-voltage sweep for a tree, evaluated with one sparse
product per direction.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp

from .grid_model import Feeder, TransformerBank, downstream_order, per_unit_normalize


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = 1e-8
    max_iterations: int = 100
    flat_start: bool = True

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


class RadialNetwork:
    """Compiled, immutable view of a normalized feeder used by the sweep."""

    def __init__(self, feeder: Feeder):
        feeder = per_unit_normalize(feeder)
        order = downstream_order(feeder)
        self.feeder = feeder
        self.bus_ids: tuple[str, ...] = order.buses
        self.index = {b: i for i, b in enumerate(order.buses)}
        n = len(order.buses)
        self.n = n
        self.base_kva = feeder.base_kva
        self.v_source = complex(feeder.source_v_pu)

        parent = np.full(n, -1, dtype=int)
        z = np.zeros(n, dtype=complex)
        tap = np.ones(n)
        self.branch_elements: list = [None] * n
        for br in order.branches:
            c = self.index[br.child]
            parent[c] = self.index[br.parent]
            self.branch_elements[c] = br.element
            if isinstance(br.element, TransformerBank):
                z[c] = br.element.series_impedance
                tap[c] = br.element.tap_ratio
            else:
                z[c] = br.element.impedance
        self.parent = parent
        self.z = z
        self.tap = tap
        # transformer rows in feeder declaration order
        pos = {br.key: self.index[br.child] for br in order.branches}
        self.transformer_rows = [pos[("transformer", i)] for i in range(len(feeder.transformers))]

        # Path matrix over non-source buses (row/col 0 of the full index is the source).
        rows, cols, vals = [], [], []
        a = np.ones(n)
        for k in range(1, n):
            a[k] = a[parent[k]] / tap[k]
            scale = 1.0
            b = k
            while b > 0:
                rows.append(b - 1)
                cols.append(k - 1)
                vals.append(scale)
                scale /= tap[b]
                b = parent[b]
        m = n - 1
        self.D = sp.csr_matrix((vals, (rows, cols)), shape=(m, m))
        self.DT = self.D.T.tocsr()
        self.a = a
        self.child_of_source = np.flatnonzero(parent == 0)

    def injection_vector(self, injections: Union[Mapping, np.ndarray, None]) -> np.ndarray:
        s = np.zeros(self.n, dtype=complex)
        if injections is None:
            return s
        if isinstance(injections, np.ndarray):
            if injections.shape != (self.n,):
                raise ValueError(f"injection vector must have shape ({self.n},)")
            return injections.astype(complex)
        for bus, val in injections.items():
            if bus not in self.index:
                raise KeyError(f"injection at unknown bus {bus!r}")
            s[self.index[bus]] += complex(val)
        return s


@dataclass
class PowerFlowSolution:
    bus_ids: tuple[str, ...]
    voltage: np.ndarray           # complex p.u., network order
    branch_current: np.ndarray    # complex p.u. on the child side, index = child bus
    branch_power_from: np.ndarray
    branch_power_to: np.ndarray
    injections: np.ndarray        # complex p.u., generation positive
    base_kva: float
    converged: bool
    iterations: int
    max_mismatch: float
    loss_pu: complex = 0j
    feederhead_pu: complex = 0j
    transformer_rows: list[int] = field(default_factory=list)
    transformer_ratings_kva: list[float] = field(default_factory=list)

    @property
    def vmag(self) -> np.ndarray:
        return np.abs(self.voltage)

    @property
    def vangle(self) -> np.ndarray:
        return np.angle(self.voltage)

    def voltage_of(self, bus: str) -> complex:
        return complex(self.voltage[self.bus_ids.index(bus)])

    @property
    def total_loss_kw(self) -> float:
        return float(self.loss_pu.real * self.base_kva)

    @property
    def feederhead_p_kw(self) -> float:
        return float(self.feederhead_pu.real * self.base_kva)

    @property
    def feederhead_q_kvar(self) -> float:
        return float(self.feederhead_pu.imag * self.base_kva)

    def power_balance_residual(self) -> float:
        """|feederhead import + injections - losses| in p.u. (active and reactive)."""
        return float(abs(self.feederhead_pu + self.injections.sum() - self.loss_pu))


def _bus_currents(s: np.ndarray, v: np.ndarray) -> np.ndarray:
    # current drawn from the network at each non-source bus
    return np.conj(-s[1:] / v[1:])


def sweep_once(net: RadialNetwork, s: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One backward/forward pass; returns (new voltages, branch currents)."""
    j = net.D @ _bus_currents(s, v)
    v_new = np.empty(net.n, dtype=complex)
    v_new[0] = net.v_source
    v_new[1:] = net.a[1:] * net.v_source - net.DT @ (net.z[1:] * j)
    return v_new, j


def solve_radial(feeder: Union[Feeder, RadialNetwork],
                 injections: Union[Mapping, np.ndarray, None] = None,
                 opts: SolverOptions = SolverOptions(),
                 v_init: Optional[np.ndarray] = None,
                 v_source: Optional[float] = None) -> PowerFlowSolution:
    """Solve a radial feeder with constant-power injections (p.u., generation positive).

    ``v_init`` warm-starts the sweep when ``opts.flat_start`` is False.
    Exhausting ``max_iterations`` returns the last iterate with
    ``converged=False``.
    """
    net = feeder if isinstance(feeder, RadialNetwork) else RadialNetwork(feeder)
    s = net.injection_vector(injections)
    vs = complex(net.v_source if v_source is None else v_source)
    if vs != net.v_source:
        net = _with_source(net, vs)

    if opts.flat_start or v_init is None:
        v = net.a * vs
        v = v.astype(complex)
    else:
        v = np.asarray(v_init, dtype=complex).copy()
        v[0] = vs

    converged = False
    mismatch = np.inf
    it = 0
    for it in range(1, opts.max_iterations + 1):
        v_new, _ = sweep_once(net, s, v)
        if not np.all(np.isfinite(v_new)):
            break
        mismatch = float(np.max(np.abs(v_new - v))) if net.n > 1 else 0.0
        v = v_new
        if mismatch < opts.tolerance:
            converged = True
            break
    return _finish(net, s, v, converged, it, mismatch)


def _with_source(net: RadialNetwork, vs: complex) -> RadialNetwork:
    clone = object.__new__(RadialNetwork)
    clone.__dict__.update(net.__dict__)
    clone.v_source = vs
    return clone


def _finish(net, s, v, converged, iterations, mismatch) -> PowerFlowSolution:
    n = net.n
    i_bus = np.zeros(n, dtype=complex)
    j = np.zeros(n, dtype=complex)
    if n > 1:
        i_bus[1:] = _bus_currents(s, v)
        j[1:] = net.D @ i_bus[1:]
    par = net.parent.copy()
    par[0] = 0
    i_from = j / net.tap
    s_from = v[par] * np.conj(i_from)
    s_to = v * np.conj(j)
    s_from[0] = s_to[0] = 0
    loss = complex(np.sum(np.abs(j) ** 2 * net.z))
    # power entering the source bus from the substation
    i_head = np.sum(i_from[net.child_of_source]) + np.conj(-s[0] / v[0])
    head = complex(v[0] * np.conj(i_head))
    trs = net.feeder.transformers
    return PowerFlowSolution(
        bus_ids=net.bus_ids, voltage=v, branch_current=j,
        branch_power_from=s_from, branch_power_to=s_to, injections=s,
        base_kva=net.base_kva, converged=converged, iterations=iterations,
        max_mismatch=mismatch, loss_pu=loss, feederhead_pu=head,
        transformer_rows=list(net.transformer_rows),
        transformer_ratings_kva=[t.rating_kva for t in trs],
    )


def feeder_losses(solution: PowerFlowSolution) -> float:
    """Total series I^2 R loss in kW."""
    return solution.total_loss_kw


def feederhead_flow(solution: PowerFlowSolution) -> tuple[float, float]:
    """(P kW, Q kvar) imported from the substation; negative P is reverse flow."""
    return solution.feederhead_p_kw, solution.feederhead_q_kvar


def transformer_loading(solution: PowerFlowSolution, feeder: Optional[Feeder] = None) -> np.ndarray:
    """Loading of each transformer bank in percent of its kVA rating.

    Uses the larger of the two terminal apparent powers.
    """
    rows = solution.transformer_rows
    ratings = solution.transformer_ratings_kva
    if feeder is not None:
        ratings = [t.rating_kva for t in feeder.transformers]
    if not rows:
        return np.zeros(0)
    rows_a = np.asarray(rows)
    s_kva = np.maximum(np.abs(solution.branch_power_from[rows_a]),
                       np.abs(solution.branch_power_to[rows_a])) * solution.base_kva
    return s_kva / np.asarray(ratings, dtype=float) * 100.0
