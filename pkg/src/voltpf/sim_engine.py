"""Couple the control curves with the network solver.

Two drivers live here:

* :func:`solve_static_with_control` iterates inverter set points against the
  power flow until every DER sits on its curve (damped fixed point).
* :func:`run_timeseries` steps a quasi-static simulation in which each DER has
  a first-order response towards the command of a supervisory agent; agents
  sample V at a fixed period and their commands arrive after a delay.

Internally everything is p.u. on the feeder base; results are reported in
kW / kvar.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .control_curves import (
    ControlMode,
    CurveSettings,
    SignedPF,
    apply_capability_limit,
    implausible_voltage,
    preset_ieee1547_default,
    q_from_pf,
    target_q,
    voltpf_pf,
    ModeKind,
)
from .grid_model import Feeder, bus_limits, ensure_valid
from .powerflow import PowerFlowSolution, RadialNetwork, SolverOptions, solve_radial, transformer_loading

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class ControlOptions:
    relaxation: float = 0.5
    tolerance: float = 1e-6       # per DER, as a fraction of S_rated
    max_iterations: int = 50

    def __post_init__(self):
        if not 0 < self.relaxation <= 1:
            raise ValueError(f"relaxation must lie in (0, 1], got {self.relaxation}")
        if not self.tolerance > 0:
            raise ValueError("control tolerance must be > 0")


@dataclass(frozen=True)
class DynamicOptions:
    dt_s: Optional[float] = None  # None: use the profile spacing
    tau_s: float = 5.0
    agent_period_s: float = 1.0
    agent_delay_s: float = 1.0

    def __post_init__(self):
        if self.dt_s is not None and not self.dt_s > 0:
            raise ValueError("dt must be > 0")
        if self.tau_s < 0 or self.agent_delay_s < 0 or self.agent_period_s < 0:
            raise ValueError("tau, agent period and delay must be >= 0")


@dataclass(frozen=True, eq=False)
class TimeSeriesProfiles:
    """Aligned per-entity series in kW / kvar / p.u. on uniform timestamps (s)."""

    timestamps: np.ndarray
    load_ids: tuple[str, ...] = ()
    load_p: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    load_q: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    der_ids: tuple[str, ...] = ()
    der_p: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    source_v: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=float)
        object.__setattr__(self, "timestamps", t)
        n = len(t)
        for name, ids in (("load_p", self.load_ids), ("load_q", self.load_ids),
                          ("der_p", self.der_ids)):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(len(ids), n)
            object.__setattr__(self, name, arr)
        if self.source_v is not None:
            sv = np.asarray(self.source_v, dtype=float)
            if sv.shape != (n,):
                raise ValueError("source_v must share the timestamp length")
            object.__setattr__(self, "source_v", sv)
        if n > 1:
            d = np.diff(t)
            if not np.allclose(d, d[0], rtol=1e-9, atol=1e-9) or d[0] <= 0:
                raise ValueError("timestamps must be uniform and increasing")
        if np.any(self.der_p < 0):
            raise ValueError("DER available power must be >= 0")

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def spacing(self) -> float:
        return float(self.timestamps[1] - self.timestamps[0]) if len(self) > 1 else 0.0

    def at(self, k: int) -> "TimeSeriesProfiles":
        return self.window(k, k + 1)

    def window(self, start: int, stop: int) -> "TimeSeriesProfiles":
        sl = slice(start, stop)
        return TimeSeriesProfiles(
            self.timestamps[sl], self.load_ids, self.load_p[:, sl], self.load_q[:, sl],
            self.der_ids, self.der_p[:, sl],
            None if self.source_v is None else self.source_v[sl])

    def frozen(self, k: int, steps: int, dt: float) -> "TimeSeriesProfiles":
        """Hold the values of step ``k`` constant for ``steps`` steps."""
        rep = lambda a: np.repeat(a[:, k:k + 1], steps, axis=1)  # noqa: E731
        return TimeSeriesProfiles(
            np.arange(steps) * dt, self.load_ids, rep(self.load_p), rep(self.load_q),
            self.der_ids, rep(self.der_p),
            None if self.source_v is None else np.full(steps, self.source_v[k]))


@dataclass(frozen=True, eq=False)
class OperatingPoint:
    """Loads, DER available power (kW / kvar) and source voltage for one instant."""

    load_p: np.ndarray
    load_q: np.ndarray
    der_p: np.ndarray
    source_v: float

    @classmethod
    def nominal(cls, feeder: Feeder) -> "OperatingPoint":
        """Feeder nameplate values: loads as declared, DERs at rated P."""
        k = feeder.base_kva if feeder.per_unit else 1.0
        return cls(np.array([ld.p_kw * k for ld in feeder.loads], dtype=float),
                   np.array([ld.q_kvar * k for ld in feeder.loads], dtype=float),
                   np.array([d.p_rated_kw * k for d in feeder.ders], dtype=float),
                   feeder.source_v_pu)


def operating_point(feeder: Feeder, profiles: Optional[TimeSeriesProfiles], k: int) -> OperatingPoint:
    """Values of step ``k``; entities absent from the profiles keep nameplate values."""
    op = OperatingPoint.nominal(feeder)
    if profiles is None:
        return op
    load_p, load_q, der_p = op.load_p.copy(), op.load_q.copy(), op.der_p.copy()
    li = {lid: i for i, lid in enumerate(profiles.load_ids)}
    for i, lid in enumerate(feeder.load_ids()):
        if lid in li:
            load_p[i] = profiles.load_p[li[lid], k]
            load_q[i] = profiles.load_q[li[lid], k]
    di = {did: i for i, did in enumerate(profiles.der_ids)}
    for i, did in enumerate(feeder.der_ids()):
        if did in di:
            der_p[i] = profiles.der_p[di[did], k]
    sv = op.source_v if profiles.source_v is None else float(profiles.source_v[k])
    return OperatingPoint(load_p, load_q, der_p, sv)


class _DerSet:
    """Per-DER data in p.u. plus the mode and settings each one runs."""

    def __init__(self, net: RadialNetwork, feeder: Feeder, mode: Optional[ControlMode],
                 settings: Optional[CurveSettings], der_modes: Optional[Sequence[ControlMode]] = None):
        pu = net.feeder
        self.ids = feeder.der_ids()
        self.buses = [d.bus for d in pu.ders]
        self.bus_index = np.array([net.index[d.bus] for d in pu.ders], dtype=int)
        self.s_rated = np.array([d.s_rated_kva for d in pu.ders], dtype=float)
        self.p_rated = np.array([d.p_rated_kw for d in pu.ders], dtype=float)
        default = settings or preset_ieee1547_default()
        if der_modes is not None:
            if len(der_modes) != len(pu.ders):
                raise ValueError("der_modes must list one mode per DER")
            self.modes = list(der_modes)
        else:
            self.modes = [mode or d.mode for d in pu.ders]
        self.settings = [d.settings or default for d in pu.ders]

    def __len__(self):
        return len(self.ids)

    def target(self, i: int, v: float, p: float) -> float:
        return target_q(self.modes[i], v, p, self.p_rated[i], self.s_rated[i], self.settings[i])


@dataclass
class DerSetpoint:
    id: str
    bus: str
    v_pu: float
    p_kw: float
    q_kvar: float
    pf: SignedPF
    clamped: bool = False
    implausible_v: bool = False


@dataclass
class StaticResult:
    solution: PowerFlowSolution
    setpoints: list[DerSetpoint]
    converged: bool
    iterations: int
    q_trajectory: np.ndarray  # (iterations, n_der) kvar, the set points each solve used

    @property
    def q_kvar(self) -> np.ndarray:
        return np.array([s.q_kvar for s in self.setpoints])

    @property
    def v_der(self) -> np.ndarray:
        return np.array([s.v_pu for s in self.setpoints])


def _network(feeder: Feeder) -> RadialNetwork:
    return RadialNetwork(ensure_valid(feeder))


def _assemble(net: RadialNetwork, load_bus: np.ndarray, op: OperatingPoint, ders: _DerSet,
              p: np.ndarray, q: np.ndarray) -> np.ndarray:
    s = np.zeros(net.n, dtype=complex)
    sb = net.base_kva
    np.add.at(s, load_bus, -(op.load_p + 1j * op.load_q) / sb)
    if len(ders):
        np.add.at(s, ders.bus_index, p + 1j * q)
    return s


def _clamp_all(p: np.ndarray, q: np.ndarray, s_rated: np.ndarray):
    p_out, q_out = p.copy(), q.copy()
    flags = np.zeros(len(p), dtype=bool)
    for i in range(len(p)):
        p_out[i], q_out[i], flags[i] = apply_capability_limit(p[i], q[i], s_rated[i])
    return p_out, q_out, flags


def _load_buses(net: RadialNetwork) -> np.ndarray:
    return np.array([net.index[ld.bus] for ld in net.feeder.loads], dtype=int)


def solve_static_with_control(feeder: Feeder,
                              point: Optional[OperatingPoint] = None,
                              mode: Optional[ControlMode] = None,
                              settings: Optional[CurveSettings] = None,
                              options: ControlOptions = ControlOptions(),
                              solver: SolverOptions = SolverOptions(),
                              q_init_kvar: Optional[np.ndarray] = None,
                              der_modes: Optional[Sequence[ControlMode]] = None,
                              network: Optional[RadialNetwork] = None) -> StaticResult:
    """Snapshot power flow with every DER converged onto its control curve.

    Each control iteration solves the network with the current set points,
    evaluates every curve at the solved terminal voltage and relaxes
    ``Q <- Q + relaxation * (Q_target - Q)``. Iteration stops once every
    ``|Q_target - Q|`` is below ``tolerance * S_rated``. Non-convergence is
    reported through ``converged=False`` with the trajectory attached.
    """
    net = network or _network(feeder)
    ders = _DerSet(net, feeder, mode, settings, der_modes)
    op = point or OperatingPoint.nominal(feeder)
    sb = net.base_kva
    load_bus = _load_buses(net)
    p_avail = np.asarray(op.der_p, dtype=float) / sb
    if np.any(p_avail < 0):
        raise ValueError("DER available power must be >= 0")
    n = len(ders)
    q = np.zeros(n) if q_init_kvar is None else np.asarray(q_init_kvar, dtype=float) / sb
    p, q, clamped = _clamp_all(p_avail, q, ders.s_rated)
    tol = options.tolerance * ders.s_rated

    traj = []
    v_prev = None
    sol = None
    converged = False
    it = 0
    for it in range(1, options.max_iterations + 1):
        s = _assemble(net, load_bus, op, ders, p, q)
        sol = solve_radial(net, s, replace(solver, flat_start=v_prev is None and solver.flat_start),
                           v_init=v_prev, v_source=op.source_v)
        if not sol.converged:
            raise SimulationError(f"power flow did not converge in control iteration {it}")
        v_prev = sol.voltage
        traj.append(q * sb)
        vm = np.abs(sol.voltage[ders.bus_index])
        q_t = np.array([ders.target(i, vm[i], p[i]) for i in range(n)])
        _, q_t, clamped = _clamp_all(p, q_t, ders.s_rated)
        resid = q_t - q
        if n == 0 or np.all(np.abs(resid) < tol):
            converged = True
            break
        q = q + options.relaxation * resid
        p, q, _ = _clamp_all(p, q, ders.s_rated)

    if not converged:
        log.warning("control loop did not converge in %d iterations", options.max_iterations)
    vm = np.abs(sol.voltage[ders.bus_index])
    setpoints = [
        DerSetpoint(ders.ids[i], ders.buses[i], float(vm[i]), float(p[i] * sb), float(q[i] * sb),
                    SignedPF.from_pq(p[i], q[i]), bool(clamped[i]), implausible_voltage(vm[i]))
        for i in range(n)
    ]
    return StaticResult(sol, setpoints, converged, it, np.array(traj).reshape(len(traj), n))


# --- delay-buffered supervisory agent -------------------------------------------------


@dataclass(frozen=True)
class Command:
    """A set point in flight: either a Q value (p.u.) or a PF applied to live P."""

    due: float
    q: float = 0.0
    pf: Optional[SignedPF] = None

    def q_at(self, p: float) -> float:
        return self.q if self.pf is None else q_from_pf(p, self.pf)


@dataclass(frozen=True)
class InverterAgentState:
    v_measured: float = float("nan")
    last_update: float = float("-inf")
    active: Command = Command(due=float("-inf"))
    queue: tuple[Command, ...] = ()
    q: float = 0.0               # first-order filter state (inverter output)
    clamped: bool = False

    @property
    def q_command(self) -> float:
        return self.active.q if self.active.pf is None else float("nan")


def agent_update(agent: InverterAgentState, v_measured: float, p_available: float,
                 mode: ControlMode, settings: Optional[CurveSettings], now: float,
                 delay: float = 1.0, p_rated: float = 1.0,
                 s_rated: Optional[float] = None) -> InverterAgentState:
    """Sample the terminal voltage and enqueue a command due at ``now + delay``.

    PF-issuing modes (volt-PF, constant PF) queue a power factor that the
    inverter turns into Q with whatever P it has when the command applies;
    the other modes queue Q directly.
    """
    if s_rated is None:
        s_rated = p_rated
    if mode.kind is ModeKind.VOLT_PF:
        cmd = Command(now + delay, pf=voltpf_pf(v_measured, settings))
    elif mode.kind is ModeKind.CONSTANT_PF:
        cmd = Command(now + delay, pf=mode.pf)
    else:
        cmd = Command(now + delay, q=target_q(mode, v_measured, p_available, p_rated, s_rated, settings))
    queue = tuple(sorted(agent.queue + (cmd,), key=lambda c: c.due))
    return replace(agent, v_measured=v_measured, last_update=now, queue=queue)


def dequeue(agent: InverterAgentState, now: float, eps: float = 1e-9) -> InverterAgentState:
    """Activate due commands; when several are due the latest one wins."""
    due = [c for c in agent.queue if c.due <= now + eps]
    if not due:
        return agent
    rest = tuple(c for c in agent.queue if c.due > now + eps)
    return replace(agent, active=due[-1], queue=rest)


def filter_step(agent: InverterAgentState, p_available: float, s_rated: float,
                dt: float, tau: float) -> InverterAgentState:
    """q <- q + (dt/tau)(q_target - q); tau = 0 (or dt >= tau) jumps to the target."""
    target = agent.active.q_at(p_available)
    alpha = 1.0 if tau == 0 else min(1.0, dt / tau)
    q = agent.q + alpha * (target - agent.q)
    _, q, clamped = apply_capability_limit(p_available, q, s_rated)
    return replace(agent, q=q, clamped=clamped)


# --- time series --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    feeder: Feeder
    profiles: Optional[TimeSeriesProfiles] = None
    mode: Optional[ControlMode] = None
    der_modes: Optional[tuple[ControlMode, ...]] = None
    settings: Optional[CurveSettings] = None
    static_hour: Optional[int] = None
    start: int = 0
    stop: Optional[int] = None
    interpolate_points: Optional[int] = None
    control: ControlOptions = ControlOptions()
    dynamic: DynamicOptions = DynamicOptions()
    solver: SolverOptions = SolverOptions()
    label: str = ""

    def mode_label(self) -> str:
        if self.der_modes is not None:
            return "mixed"
        return self.mode.label if self.mode is not None else "feeder"


@dataclass
class DynamicState:
    agents: tuple[InverterAgentState, ...]
    voltage: Optional[np.ndarray] = None
    step: int = 0


@dataclass
class _Model:
    net: RadialNetwork
    feeder: Feeder
    ders: _DerSet
    load_bus: np.ndarray
    profiles: Optional[TimeSeriesProfiles]
    options: DynamicOptions
    solver: SolverOptions


@dataclass
class StepRecord:
    solution: PowerFlowSolution
    p: np.ndarray  # p.u.
    q: np.ndarray
    clamped: np.ndarray


def step_dynamic(state: DynamicState, model: _Model, k: int, t: float, dt: float) -> tuple[DynamicState, StepRecord]:
    """Advance one quasi-static step at time ``t`` (profile index ``k``)."""
    ders = model.ders
    op = operating_point(model.feeder, model.profiles, k)
    p_avail = op.der_p / model.net.base_kva
    tau = model.options.tau_s
    agents = []
    for i, ag in enumerate(state.agents):
        ag = dequeue(ag, t)
        ag = filter_step(ag, p_avail[i], ders.s_rated[i], dt, tau)
        agents.append(ag)
    q = np.array([ag.q for ag in agents])
    clamped = np.array([ag.clamped for ag in agents], dtype=bool)
    p = np.minimum(p_avail, ders.s_rated) if len(ders) else p_avail
    s = _assemble(model.net, model.load_bus, op, ders, p, q)
    warm = state.voltage is not None
    sol = solve_radial(model.net, s, replace(model.solver, flat_start=not warm),
                       v_init=state.voltage, v_source=op.source_v)
    if not sol.converged:
        raise SimulationError("power flow diverged", step=k)
    vm = np.abs(sol.voltage[ders.bus_index])
    period = model.options.agent_period_s
    for i, ag in enumerate(agents):
        if t - ag.last_update >= period - 1e-9:
            agents[i] = agent_update(ag, float(vm[i]), float(p_avail[i]), ders.modes[i],
                                     ders.settings[i], t, model.options.agent_delay_s,
                                     ders.p_rated[i], ders.s_rated[i])
    return DynamicState(tuple(agents), sol.voltage, state.step + 1), StepRecord(sol, p, q, clamped)


def interpolate_profiles(profiles: TimeSeriesProfiles, points: int = 1440) -> TimeSeriesProfiles:
    """Resample hourly-style profiles onto ``points`` uniform samples.

    Natural cubic splines per series, knots reproduced exactly. The output
    covers the whole input span including the final interval, which is
    extrapolated by the last spline piece. DER power is floored at 0 and
    capped at the largest input value of its series.
    """
    n = len(profiles)
    t = profiles.timestamps
    step = profiles.spacing if n > 1 else 3600.0
    span = n * step
    t_out = t[0] + np.arange(points) * (span / points)

    if n >= 4:
        def interp(y):
            return CubicSpline(t, y, axis=-1, bc_type="natural")(t_out)
    else:
        warnings.warn(f"only {n} profile points; falling back to linear interpolation",
                      stacklevel=2)

        def interp(y):
            y = np.atleast_2d(y)
            return np.vstack([np.interp(t_out, t, row) for row in y])

    def each(arr):
        if arr.shape[0] == 0:
            return np.zeros((0, points))
        return np.asarray(interp(arr)).reshape(arr.shape[0], points)

    der_p = each(profiles.der_p)
    if der_p.size:
        der_p = np.clip(der_p, 0.0, profiles.der_p.max(axis=1, keepdims=True))
    sv = None if profiles.source_v is None else each(profiles.source_v[None, :])[0]
    return TimeSeriesProfiles(t_out, profiles.load_ids, each(profiles.load_p), each(profiles.load_q),
                              profiles.der_ids, der_p, sv)


@dataclass
class ScenarioResult:
    label: str
    mode: str
    timestamps: np.ndarray
    bus_ids: tuple[str, ...]
    bus_limits: np.ndarray          # (n_bus, 2)
    der_ids: tuple[str, ...]
    der_buses: tuple[str, ...]
    transformer_ids: tuple[str, ...]
    bus_v: np.ndarray               # (T, n_bus) |V| p.u.
    der_v: np.ndarray               # (T, n_der)
    der_p: np.ndarray               # kW
    der_q: np.ndarray               # kvar
    der_clamped: np.ndarray
    feeder_p_kw: np.ndarray
    feeder_q_kvar: np.ndarray
    loss_kw: np.ndarray
    transformer_loading: np.ndarray  # (T, n_tr) percent
    converged: np.ndarray           # power flow and control, per step
    pf_iterations: np.ndarray
    control_iterations: np.ndarray
    static: bool = False
    metrics: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.timestamps)

    @property
    def der_pf(self) -> np.ndarray:
        """|P| / |S| per DER step; unity where P = 0."""
        s = np.hypot(self.der_p, self.der_q)
        with np.errstate(invalid="ignore", divide="ignore"):
            pf = np.where((self.der_p > 0) & (s > 0), self.der_p / s, 1.0)
        return pf

    @property
    def der_excitation(self) -> np.ndarray:
        """+1 injecting, -1 absorbing, 0 unity."""
        return np.sign(np.where(self.der_p > 0, self.der_q, 0.0)).astype(int)

    @property
    def total_der_q(self) -> np.ndarray:
        return self.der_q.sum(axis=1)

    @property
    def total_der_abs_q(self) -> np.ndarray:
        return np.abs(self.der_q).sum(axis=1)

    @classmethod
    def empty(cls, label: str = "", mode: str = "") -> "ScenarioResult":
        z = np.zeros(0)
        z2 = np.zeros((0, 0))
        return cls(label, mode, z, (), np.zeros((0, 2)), (), (), (), z2, z2, z2, z2,
                   z2.astype(bool), z, z, z, z2, z.astype(bool), z.astype(int), z.astype(int))


class _Recorder:
    def __init__(self, net: RadialNetwork, ders: _DerSet, feeder: Feeder, steps: int):
        nb, nd, nt = net.n, len(ders), len(feeder.transformers)
        self.net, self.ders, self.feeder = net, ders, feeder
        self.bus_v = np.zeros((steps, nb))
        self.der_v = np.zeros((steps, nd))
        self.der_p = np.zeros((steps, nd))
        self.der_q = np.zeros((steps, nd))
        self.clamped = np.zeros((steps, nd), dtype=bool)
        self.fp = np.zeros(steps)
        self.fq = np.zeros(steps)
        self.loss = np.zeros(steps)
        self.tl = np.zeros((steps, nt))
        self.conv = np.zeros(steps, dtype=bool)
        self.pf_it = np.zeros(steps, dtype=int)
        self.ctl_it = np.zeros(steps, dtype=int)

    def put(self, k, sol, p_pu, q_pu, clamped, converged=True, ctl_it=0):
        sb = self.net.base_kva
        self.bus_v[k] = sol.vmag
        self.der_v[k] = sol.vmag[self.ders.bus_index]
        self.der_p[k] = p_pu * sb
        self.der_q[k] = q_pu * sb
        self.clamped[k] = clamped
        self.fp[k] = sol.feederhead_p_kw
        self.fq[k] = sol.feederhead_q_kvar
        self.loss[k] = sol.total_loss_kw
        self.tl[k] = transformer_loading(sol)
        self.conv[k] = sol.converged and converged
        self.pf_it[k] = sol.iterations
        self.ctl_it[k] = ctl_it

    def result(self, label, mode, timestamps, static) -> ScenarioResult:
        return ScenarioResult(
            label, mode, np.asarray(timestamps, dtype=float), self.net.bus_ids,
            bus_limits(self.feeder, self.net.bus_ids), tuple(self.ders.ids), tuple(self.ders.buses),
            tuple(self.feeder.transformer_ids()), self.bus_v, self.der_v, self.der_p, self.der_q,
            self.clamped, self.fp, self.fq, self.loss, self.tl, self.conv, self.pf_it, self.ctl_it,
            static=static)


def run_static(config: ScenarioConfig, k: Optional[int] = None,
               q_init_kvar: Optional[np.ndarray] = None) -> tuple[ScenarioResult, StaticResult]:
    """Static control solve at profile index ``k`` (default: ``static_hour``)."""
    feeder = config.feeder
    net = _network(feeder)
    k = config.static_hour if k is None else k
    if config.profiles is not None and k is None:
        k = 0
    if config.profiles is not None and not 0 <= k < len(config.profiles):
        raise SimulationError(f"static hour {k} outside profile range 0..{len(config.profiles) - 1}")
    op = operating_point(feeder, config.profiles, k or 0)
    res = solve_static_with_control(feeder, op, config.mode, config.settings, config.control,
                                    config.solver, q_init_kvar, config.der_modes, net)
    ders = _DerSet(net, feeder, config.mode, config.settings, config.der_modes)
    rec = _Recorder(net, ders, feeder, 1)
    sb = net.base_kva
    p = np.array([s.p_kw for s in res.setpoints]) / sb
    q = np.array([s.q_kvar for s in res.setpoints]) / sb
    rec.put(0, res.solution, p, q, np.array([s.clamped for s in res.setpoints], dtype=bool),
            res.converged, res.iterations)
    ts = [0.0] if config.profiles is None else [config.profiles.timestamps[k]]
    return rec.result(config.label, config.mode_label(), ts, True), res


def run_timeseries(config: ScenarioConfig) -> ScenarioResult:
    """Run a scenario: a static snapshot when ``static_hour`` is set or the
    profile has one step, otherwise a quasi-static dynamic simulation."""
    if config.static_hour is not None or config.profiles is None or len(config.profiles) == 1:
        return run_static(config)[0]

    profiles = config.profiles
    if config.interpolate_points and config.interpolate_points != len(profiles):
        profiles = interpolate_profiles(profiles, config.interpolate_points)
    stop = len(profiles) if config.stop is None else min(config.stop, len(profiles))
    profiles = profiles.window(config.start, stop)
    steps = len(profiles)
    dt = config.dynamic.dt_s or profiles.spacing
    if not dt > 0:
        raise SimulationError("cannot infer a time step from the profiles; set dt_s")

    net = _network(config.feeder)
    ders = _DerSet(net, config.feeder, config.mode, config.settings, config.der_modes)
    model = _Model(net, config.feeder, ders, _load_buses(net), profiles, config.dynamic, config.solver)
    state = DynamicState(tuple(InverterAgentState() for _ in range(len(ders))))
    rec = _Recorder(net, ders, config.feeder, steps)
    times = np.arange(steps) * dt
    for k in range(steps):
        try:
            state, step = step_dynamic(state, model, k, float(times[k]), dt)
        except SimulationError as exc:
            raise SimulationError(str(exc).split(": ", 1)[-1], step=config.start + k) from exc
        rec.put(k, step.solution, step.p, step.q, step.clamped)
    return rec.result(config.label, config.mode_label(), profiles.timestamps, False)


def run_dynamic_frozen(config: ScenarioConfig, k: int, steps: int, dt: float) -> ScenarioResult:
    """Dynamic run with the profile values of index ``k`` held constant."""
    if config.profiles is None:
        op = OperatingPoint.nominal(config.feeder)
        prof = TimeSeriesProfiles(np.zeros(1), config.feeder.load_ids(), op.load_p[:, None],
                                  op.load_q[:, None], tuple(config.feeder.der_ids()), op.der_p[:, None],
                                  np.array([op.source_v]))
        k = 0
    else:
        prof = config.profiles
    frozen = prof.frozen(k, steps, dt)
    return run_timeseries(replace(config, profiles=frozen, static_hour=None, start=0, stop=None,
                                  interpolate_points=None, dynamic=replace(config.dynamic, dt_s=dt)))


__all__ = [
    "ControlOptions", "DynamicOptions", "TimeSeriesProfiles", "OperatingPoint", "DerSetpoint",
    "StaticResult", "Command", "InverterAgentState", "ScenarioConfig", "ScenarioResult",
    "DynamicState", "SimulationError", "solve_static_with_control",
    "agent_update", "dequeue", "filter_step", "step_dynamic", "interpolate_profiles",
    "run_static", "run_timeseries", "run_dynamic_frozen", "operating_point",
]
