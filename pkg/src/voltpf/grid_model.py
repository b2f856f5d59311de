"""Radial feeder data model, per-unit normalization and topology checks.

Power fields keep their physical names (``p_kw``, ``s_rated_kva`` ...) in both
representations. A feeder with ``per_unit=True`` stores those fields as p.u.
on ``base_mva``, line impedances as p.u. on the bus voltage base and
transformer impedances on the system base.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .control_curves import ControlMode, CurveSettings

# Sizing rule: rated P must leave room for 0.44*S_rated of reactive power.
DER_Q_HEADROOM = 0.44


@dataclass(frozen=True)
class Bus:
    id: str
    nominal_kv: float
    phase_count: int = 1
    v_limits: tuple[float, float] = (0.95, 1.05)


@dataclass(frozen=True)
class LineSegment:
    from_bus: str
    to_bus: str
    impedance: complex  # ohms per phase (p.u. once normalized)

    @property
    def id(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"


@dataclass(frozen=True)
class TransformerBank:
    from_bus: str
    to_bus: str
    rating_kva: float
    series_impedance: complex  # p.u. on own base (system base once normalized)
    tap_ratio: float = 1.0
    id: Optional[str] = None

    @property
    def name(self) -> str:
        return self.id or f"T:{self.from_bus}-{self.to_bus}"


@dataclass(frozen=True)
class Load:
    bus: str
    p_kw: float
    q_kvar: float
    model: str = "constant_power"
    id: Optional[str] = None


@dataclass(frozen=True)
class DerUnit:
    bus: str
    s_rated_kva: float
    p_rated_kw: float
    mode: ControlMode = field(default_factory=ControlMode.unity)
    settings: Optional[CurveSettings] = None
    id: Optional[str] = None


@dataclass(frozen=True)
class Feeder:
    buses: tuple[Bus, ...]
    lines: tuple[LineSegment, ...]
    source_bus: str
    transformers: tuple[TransformerBank, ...] = ()
    loads: tuple[Load, ...] = ()
    ders: tuple[DerUnit, ...] = ()
    base_mva: float = 1.0
    source_v_pu: float = 1.0
    per_unit: bool = False

    def __post_init__(self):
        # accept any iterable, store tuples so instances stay hashable/immutable
        for name in ("buses", "lines", "transformers", "loads", "ders"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def base_kva(self) -> float:
        return self.base_mva * 1000.0

    def bus(self, bus_id: str) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    def load_ids(self) -> list[str]:
        return [ld.id or f"load{i}" for i, ld in enumerate(self.loads)]

    def der_ids(self) -> list[str]:
        return [d.id or f"der{i}" for i, d in enumerate(self.ders)]

    def transformer_ids(self) -> list[str]:
        return [t.name for t in self.transformers]


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "feeder valid"
        return "\n".join(self.violations)


class TopologyError(ValueError):
    """Raised when an operation needs a radial, well-formed feeder."""


def _branches(feeder: Feeder):
    for ln in feeder.lines:
        yield "line", ln
    for tr in feeder.transformers:
        yield "transformer", tr


def _keyed_branches(feeder: Feeder):
    for i, ln in enumerate(feeder.lines):
        yield ("line", i), ln
    for i, tr in enumerate(feeder.transformers):
        yield ("transformer", i), tr


def validate_topology(feeder: Feeder) -> ValidationReport:
    """Check radiality, references and field invariants.

    Every check runs; the report collects all violations instead of stopping at
    the first one.
    """
    out: list[str] = []
    ids = [b.id for b in feeder.buses]
    known = set(ids)
    if len(known) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        out.append(f"duplicate bus ids: {dup}")

    if feeder.source_bus not in known:
        out.append(f"dangling reference: source_bus {feeder.source_bus!r} not a bus")
    if not feeder.base_mva > 0:
        out.append(f"base_mva must be > 0 (got {feeder.base_mva})")
    if not feeder.source_v_pu > 0:
        out.append(f"source_v_pu must be > 0 (got {feeder.source_v_pu})")

    for b in feeder.buses:
        if not (b.nominal_kv > 0):
            out.append(f"bus {b.id}: nominal_kv must be > 0 (got {b.nominal_kv})")
        lo, hi = b.v_limits
        if not lo < hi:
            out.append(f"bus {b.id}: v_limits min {lo} not below max {hi}")
        if b.phase_count not in (1, 2, 3):
            out.append(f"bus {b.id}: phase_count must be 1..3 (got {b.phase_count})")

    kv = {b.id: b.nominal_kv for b in feeder.buses}
    for kind, br in _branches(feeder):
        tag = f"{kind} {br.from_bus}->{br.to_bus}"
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                out.append(f"dangling reference: {tag} references missing bus {end!r}")
        if br.from_bus == br.to_bus:
            out.append(f"cycle detected: {tag} is a self loop")
        if kind == "line":
            z = br.impedance
            if z.real < 0:
                out.append(f"{tag}: negative resistance {z.real}")
            if z == 0:
                out.append(f"{tag}: zero impedance")
            if (br.from_bus in kv and br.to_bus in kv
                    and not math.isclose(kv[br.from_bus], kv[br.to_bus])):
                out.append(f"{tag}: base mismatch, joins {kv[br.from_bus]} kV and "
                           f"{kv[br.to_bus]} kV buses")
        else:
            if not br.rating_kva > 0:
                out.append(f"{tag}: rating_kva must be > 0")
            if not 0.9 <= br.tap_ratio <= 1.1:
                out.append(f"{tag}: tap_ratio {br.tap_ratio} outside [0.9, 1.1]")
            if br.series_impedance.real < 0:
                out.append(f"{tag}: negative resistance")

    for i, ld in enumerate(feeder.loads):
        if ld.bus not in known:
            out.append(f"dangling reference: load {ld.id or i} on missing bus {ld.bus!r}")
        if not (math.isfinite(ld.p_kw) and math.isfinite(ld.q_kvar)):
            out.append(f"load {ld.id or i}: non-finite power")
        if ld.model != "constant_power":
            out.append(f"load {ld.id or i}: unsupported model {ld.model!r}")

    for i, d in enumerate(feeder.ders):
        name = d.id or f"der{i}"
        if d.bus not in known:
            out.append(f"dangling reference: DER {name} on missing bus {d.bus!r}")
        if not (d.s_rated_kva >= d.p_rated_kw > 0):
            out.append(f"DER {name}: need s_rated_kva >= p_rated_kw > 0")
        elif d.p_rated_kw > d.s_rated_kva * math.sqrt(1 - DER_Q_HEADROOM**2) * (1 + 1e-12):
            out.append(f"DER {name}: p_rated_kw exceeds sizing rule "
                       f"s_rated*sqrt(1-{DER_Q_HEADROOM}^2)")

    _check_tree(feeder, known, out)
    return ValidationReport(out)


def _check_tree(feeder: Feeder, known: set[str], out: list[str]) -> None:
    n_edges = len(feeder.lines) + len(feeder.transformers)
    if n_edges != len(known) - 1:
        out.append(f"not radial: {n_edges} branches for {len(known)} buses "
                   f"(need {len(known) - 1})")

    parent = {b: b for b in known}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    cycle = False
    for _, br in _branches(feeder):
        if br.from_bus not in known or br.to_bus not in known:
            continue
        ra, rb = find(br.from_bus), find(br.to_bus)
        if ra == rb:
            cycle = True
        else:
            parent[ra] = rb
    if cycle:
        out.append("cycle detected")
    if known and len({find(b) for b in known}) > 1:
        out.append("not connected: some buses unreachable from the source")

    # transformer taps are defined on the from side, so orientation matters
    if feeder.source_bus in known and not cycle:
        try:
            order = downstream_order(feeder, check=False)
        except TopologyError:
            return
        for br in order.branches:
            if isinstance(br.element, TransformerBank) and br.reversed:
                out.append(f"transformer {br.element.name} points toward the source")


@dataclass(frozen=True)
class OrderedBranch:
    element: LineSegment | TransformerBank
    key: tuple[str, int]
    parent: str
    child: str
    reversed: bool


@dataclass(frozen=True)
class Ordering:
    buses: tuple[str, ...]
    branches: tuple[OrderedBranch, ...]  # branches[i] feeds buses[i + 1]

    @property
    def reverse_buses(self) -> tuple[str, ...]:
        return self.buses[::-1]

    @property
    def reverse_branches(self) -> tuple[OrderedBranch, ...]:
        return self.branches[::-1]


def downstream_order(feeder: Feeder, check: bool = True) -> Ordering:
    """Breadth-first order from the source; branch ``i`` feeds bus ``i + 1``.

    Adjacency follows insertion order, so the result is stable for a given
    feeder.
    """
    known = {b.id for b in feeder.buses}
    if check:
        n_edges = len(feeder.lines) + len(feeder.transformers)
        if n_edges != len(known) - 1:
            raise TopologyError(f"not radial: {n_edges} branches for {len(known)} buses")
    if feeder.source_bus not in known:
        raise TopologyError(f"source bus {feeder.source_bus!r} missing")

    adj: dict[str, list] = {b: [] for b in known}
    for key, br in _keyed_branches(feeder):
        if br.from_bus not in known or br.to_bus not in known:
            raise TopologyError(f"branch {br.from_bus}->{br.to_bus} references a missing bus")
        adj[br.from_bus].append((br.to_bus, key, br, False))
        adj[br.to_bus].append((br.from_bus, key, br, True))

    seen = {feeder.source_bus}
    buses = [feeder.source_bus]
    branches: list[OrderedBranch] = []
    queue = deque([feeder.source_bus])
    used: set[tuple[str, int]] = set()
    while queue:
        u = queue.popleft()
        for v, key, br, rev in adj[u]:
            if key in used:
                continue
            used.add(key)
            if v in seen:
                raise TopologyError("cycle detected")
            seen.add(v)
            buses.append(v)
            branches.append(OrderedBranch(br, key, u, v, rev))
            queue.append(v)
    if len(seen) != len(known):
        raise TopologyError("not connected: some buses unreachable from the source")
    return Ordering(tuple(buses), tuple(branches))


def per_unit_normalize(feeder: Feeder) -> Feeder:
    """Express impedances and powers on ``base_mva`` and bus ``nominal_kv``.

    Z_base = kV**2 / MVA for lines; transformer impedances move from their own
    kVA base to the system base; powers are divided by the system kVA base.
    Already-normalized feeders are returned unchanged.
    """
    if feeder.per_unit:
        return feeder
    if not feeder.base_mva > 0:
        raise ValueError(f"base_mva must be > 0 (got {feeder.base_mva})")
    kv = {}
    for b in feeder.buses:
        if not b.nominal_kv > 0:
            raise ValueError(f"bus {b.id}: nominal_kv must be > 0 for normalization")
        kv[b.id] = b.nominal_kv
    sbase = feeder.base_kva

    lines = tuple(replace(ln, impedance=ln.impedance / (kv[ln.from_bus] ** 2 / feeder.base_mva))
                  for ln in feeder.lines)
    trs = tuple(replace(t, series_impedance=t.series_impedance * (sbase / t.rating_kva))
                for t in feeder.transformers)
    loads = tuple(replace(ld, p_kw=ld.p_kw / sbase, q_kvar=ld.q_kvar / sbase)
                  for ld in feeder.loads)
    ders = tuple(replace(d, s_rated_kva=d.s_rated_kva / sbase, p_rated_kw=d.p_rated_kw / sbase)
                 for d in feeder.ders)
    return replace(feeder, lines=lines, transformers=trs, loads=loads, ders=ders, per_unit=True)


def ensure_valid(feeder: Feeder) -> Feeder:
    rep = validate_topology(feeder)
    if not rep.ok:
        raise TopologyError(str(rep))
    return feeder


def bus_limits(feeder: Feeder, order: tuple[str, ...]) -> np.ndarray:
    lim = {b.id: b.v_limits for b in feeder.buses}
    return np.array([lim[b] for b in order], dtype=float).reshape(-1, 2)
