import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import two_bus
from oracles import two_bus_control_fixed_point, voltpf2_ref, voltpf_ref, voltvar_ref
from voltpf.control_curves import ControlMode, SignedPF, preset_ieee1547_default, voltpf_q
from voltpf.grid_model import Bus, Feeder, LineSegment, Load
from voltpf.sim_engine import (
    Command,
    ControlOptions,
    DynamicOptions,
    InverterAgentState,
    OperatingPoint,
    ScenarioConfig,
    SimulationError,
    TimeSeriesProfiles,
    agent_update,
    dequeue,
    filter_step,
    interpolate_profiles,
    operating_point,
    run_dynamic_frozen,
    run_static,
    run_timeseries,
    solve_static_with_control,
)

IEEE = preset_ieee1547_default()
BREAKS = (0.92, 0.98, 1.02, 1.08)
MODES = ("voltvar", "voltpf", "voltpf2")
TIGHT = ControlOptions(tolerance=1e-11, max_iterations=200)

# DER case: 20 kW on a weak line, 1 MVA base, source at 1.03 p.u.
R, X, VS = 0.5, 0.5, 1.03
P_PU, S_PU = 0.020, 0.0223


def der_case():
    return two_bus(R, X, der_kw=20.0, s_rated=22.3, vs=VS)


def oracle(mode):
    q_of_v = {
        "voltvar": lambda v: voltvar_ref(v, S_PU, *BREAKS),
        "voltpf": lambda v: voltpf_ref(v, P_PU, *BREAKS),
        "voltpf2": lambda v: voltpf2_ref(v, P_PU, P_PU, S_PU, *BREAKS),
    }[mode]
    return two_bus_control_fixed_point(q_of_v, P_PU, 0.0, 0.0, R, X, VS)


# --- static control ---------------------------------------------------------------

@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("q0", [0.0, -0.44 * 22.3])
def test_static_matches_bisection_oracle(mode, q0):
    v_ref, q_ref = oracle(mode)
    assert v_ref > IEEE.v4  # the DER really is in its absorbing region
    res = solve_static_with_control(der_case(), mode=ControlMode.parse(mode), q_init_kvar=np.array([q0]))
    assert res.converged
    assert abs(res.v_der[0] - v_ref) < 1e-6
    assert abs(res.q_kvar[0] / 1000 - q_ref) < 1e-6
    assert abs(res.q_kvar[0] / 22.3 - q_ref / S_PU) < 1e-6


def test_deadband_converges_in_one_iteration():
    f = two_bus(0.01, 0.01, der_kw=5.0, vs=1.0)
    res = solve_static_with_control(f, mode=ControlMode.parse("voltvar"))
    assert res.converged and res.iterations == 1
    assert res.q_kvar[0] == 0.0


@pytest.mark.parametrize("mode", MODES)
def test_fixed_point_soundness(synthetic60, mode):
    feeder, profiles = synthetic60
    cfg = ScenarioConfig(feeder, profiles, mode=ControlMode.parse(mode), static_hour=13)
    _, res = run_static(cfg)
    assert res.converged
    s_rated = np.array([d.s_rated_kva for d in feeder.ders])
    for sp, s in zip(res.setpoints, s_rated):
        target = {"voltvar": lambda: -min(0.44 * s, 0.44 * s * max(0.0, sp.v_pu - 1.02) / 0.06),
                  "voltpf": lambda: voltpf_q(sp.v_pu, sp.p_kw, IEEE),
                  "voltpf2": None}[mode]
        if target is not None:
            assert abs(target() - sp.q_kvar) <= 1e-6 * s


@pytest.mark.parametrize("mode", MODES)
def test_initial_condition_and_relaxation_independence(synthetic60, mode):
    feeder, profiles = synthetic60
    cfg = ScenarioConfig(feeder, profiles, mode=ControlMode.parse(mode), static_hour=13)
    s_rated = np.array([d.s_rated_kva for d in feeder.ders])
    _, flat = run_static(cfg)
    _, sat = run_static(cfg, q_init_kvar=-0.44 * s_rated)
    _, half = run_static(replace(cfg, control=ControlOptions(relaxation=0.25, max_iterations=100)))
    for other in (sat, half):
        assert other.converged
        assert np.max(np.abs(other.q_kvar - flat.q_kvar) / s_rated) < 1e-5
        assert np.max(np.abs(other.v_der - flat.v_der)) < 1e-5


def test_non_convergence_returns_trajectory():
    res = solve_static_with_control(der_case(), mode=ControlMode.parse("voltvar"),
                                    options=ControlOptions(max_iterations=3))
    assert not res.converged
    assert res.q_trajectory.shape == (3, 1)


def test_power_flow_failure_raises():
    f = two_bus(5.0, 5.0, p_load=2000.0, q_load=1000.0, der_kw=5.0)
    with pytest.raises(SimulationError):
        solve_static_with_control(f, mode=ControlMode.parse("voltvar"))


def test_no_ders_is_plain_load_flow():
    f = two_bus(0.01, 0.02, p_load=100.0, q_load=30.0)
    res = solve_static_with_control(f, mode=ControlMode.parse("voltpf"))
    assert res.converged and res.setpoints == []
    r = run_timeseries(ScenarioConfig(f, _flat_profiles(f, 5), mode=ControlMode.parse("voltpf")))
    assert r.converged.all() and r.der_q.shape == (5, 0)


def test_static_is_deterministic(synthetic60):
    feeder, profiles = synthetic60
    cfg = ScenarioConfig(feeder, profiles, mode=ControlMode.parse("voltpf"), static_hour=13)
    a, b = run_static(cfg)[0], run_static(cfg)[0]
    np.testing.assert_array_equal(a.bus_v, b.bus_v)
    np.testing.assert_array_equal(a.der_q, b.der_q)


def test_clamping_is_reported():
    # 0.9 * S of Q cannot fit next to rated P
    res = solve_static_with_control(der_case(), mode=ControlMode.parse("constq:-0.9"))
    sp = res.setpoints[0]
    assert sp.clamped and sp.p_kw == 20.0
    s_app = np.hypot(sp.p_kw, sp.q_kvar)
    assert 22.3 * (1 - 1e-6) <= s_app <= 22.3 + 1e-9


# --- agents and filter ------------------------------------------------------------

def test_agent_deadband_command_is_zero():
    ag = agent_update(InverterAgentState(), 1.0, 1.0, ControlMode.parse("voltvar"), IEEE, now=0.0)
    assert ag.queue[0].q == 0.0 and ag.queue[0].due == 1.0


def test_agent_voltpf_command():
    ag = agent_update(InverterAgentState(), 1.08, 1.0, ControlMode.parse("voltpf"), IEEE,
                      now=3.0, delay=1.0)
    cmd = ag.queue[0]
    assert cmd.due == 4.0
    assert cmd.pf == SignedPF.of(0.9, "absorb")
    assert cmd.q_at(1.0) == pytest.approx(-0.48432, abs=1e-5)
    # nothing applies before it is due
    assert dequeue(ag, 3.5).active.due == float("-inf")
    assert dequeue(ag, 4.0).active == cmd


def test_latest_due_command_wins():
    ag = InverterAgentState(queue=(Command(1.0, q=-0.1), Command(2.0, q=-0.2), Command(9.0, q=-0.9)))
    ag = dequeue(ag, 5.0)
    assert ag.active.q == -0.2
    assert [c.due for c in ag.queue] == [9.0]


def test_pf_command_tracks_live_p():
    ag = InverterAgentState(active=Command(0.0, pf=SignedPF.of(0.9, "absorb")))
    a = filter_step(ag, 1.0, 2.0, dt=1.0, tau=0.0)
    b = filter_step(ag, 0.5, 2.0, dt=1.0, tau=0.0)
    assert b.q == pytest.approx(0.5 * a.q)


@settings(max_examples=50)
@given(st.floats(0.01, 10.0), st.floats(0.01, 20.0))
def test_filter_is_first_order(dt, tau):
    ag = InverterAgentState(active=Command(0.0, q=-1.0))
    out = filter_step(ag, 0.0, 10.0, dt, tau)
    assert out.q == pytest.approx(-min(1.0, dt / tau))


# --- dynamic runs ------------------------------------------------------------------

@pytest.mark.parametrize("mode", MODES)
def test_dynamic_steady_state_equals_static(mode):
    cfg = ScenarioConfig(der_case(), mode=ControlMode.parse(mode), control=TIGHT,
                         dynamic=DynamicOptions(tau_s=0.0, agent_delay_s=0.0))
    _, ref = run_static(cfg)
    dyn = run_dynamic_frozen(cfg, 0, 60, 1.0)
    assert abs(dyn.der_v[-1, 0] - ref.v_der[0]) < 1e-6
    assert abs(dyn.der_q[-1, 0] - ref.q_kvar[0]) / 22.3 < 1e-6


def test_step_response_within_five_tau():
    tau = 5.0
    cfg = ScenarioConfig(der_case(), mode=ControlMode.parse("voltpf"), control=TIGHT,
                         dynamic=DynamicOptions(tau_s=tau, agent_delay_s=0.0))
    q_ref = run_static(cfg)[1].q_kvar[0]
    dyn = run_dynamic_frozen(cfg, 0, 400, 0.1)
    reached = dyn.timestamps[np.argmax(dyn.der_q[:, 0] / q_ref >= 0.99)]
    assert (dyn.der_q[:, 0] / q_ref >= 0.99).any()
    assert reached <= 5 * tau


def test_agent_delay_keeps_steady_state():
    base = ScenarioConfig(der_case(), mode=ControlMode.parse("voltpf"))
    runs = [run_dynamic_frozen(ScenarioConfig(der_case(), mode=base.mode,
                                              dynamic=DynamicOptions(tau_s=5.0, agent_delay_s=d)),
                               0, 600, 0.5) for d in (0.0, 1.0)]
    assert abs(runs[0].der_q[-1, 0] - runs[1].der_q[-1, 0]) / 22.3 < 1e-6
    assert abs(runs[0].der_v[-1, 0] - runs[1].der_v[-1, 0]) < 1e-6


def test_one_step_scenario_is_static(synthetic60):
    feeder, profiles = synthetic60
    one = profiles.window(13, 14)
    cfg = ScenarioConfig(feeder, one, mode=ControlMode.parse("voltvar"))
    r = run_timeseries(cfg)
    ref = run_static(ScenarioConfig(feeder, profiles, mode=cfg.mode, static_hour=13))[0]
    assert r.static
    np.testing.assert_array_equal(r.der_q, ref.der_q)


def test_unity_reproduces_baseline_violations(synthetic60):
    feeder, profiles = synthetic60
    r = run_timeseries(ScenarioConfig(feeder, profiles, mode=ControlMode.unity(), static_hour=13))
    assert (r.bus_v > 1.05).any()
    assert np.all(r.der_q == 0)


def test_divergence_names_the_step():
    f = Feeder([Bus("a", 1.0), Bus("b", 1.0)], [LineSegment("a", "b", 5 + 5j)], "a",
               loads=[Load("b", 1.0, 0.0, id="L")])
    load_p = np.array([[1.0, 1.0, 5000.0]])
    prof = TimeSeriesProfiles(np.arange(3) * 60.0, ("L",), load_p, load_p * 0.0, (), np.zeros((0, 3)))
    with pytest.raises(SimulationError) as err:
        run_timeseries(ScenarioConfig(f, prof))
    assert err.value.step == 2
    assert "step 2" in str(err.value)


def test_operating_point_keeps_nameplate_for_missing_entities():
    f = two_bus(0.01, 0.02, p_load=10.0, q_load=2.0, der_kw=5.0)
    prof = TimeSeriesProfiles(np.array([0.0, 60.0]), (), np.zeros((0, 2)), np.zeros((0, 2)),
                              ("PV1",), np.array([[1.0, 2.0]]), None)
    op = operating_point(f, prof, 1)
    assert op.load_p[0] == 10.0 and op.der_p[0] == 2.0 and op.source_v == 1.0
    assert OperatingPoint.nominal(f).der_p[0] == 5.0


# --- interpolation -----------------------------------------------------------------

def _flat_profiles(feeder, n, value=1.0):
    ids = tuple(feeder.load_ids())
    return TimeSeriesProfiles(np.arange(n) * 3600.0, ids, np.full((len(ids), n), value),
                              np.zeros((len(ids), n)), (), np.zeros((0, n)))


def _profiles(load_p, der_p):
    n = load_p.shape[1]
    return TimeSeriesProfiles(np.arange(n) * 3600.0, ("L",), load_p, 0.3 * load_p,
                              ("PV",), der_p, np.full(n, 1.0))


def test_interpolate_constant():
    prof = _profiles(np.full((1, 24), 3.0), np.full((1, 24), 2.0))
    out = interpolate_profiles(prof, 1440)
    assert len(out) == 1440 and out.spacing == 60.0
    np.testing.assert_allclose(out.load_p, 3.0, atol=1e-12)
    np.testing.assert_allclose(out.der_p, 2.0, atol=1e-12)


def test_interpolate_reproduces_knots_and_ramps():
    ramp = np.linspace(0.0, 1.0, 24)[None, :]
    rough = np.random.default_rng(0).uniform(0, 5, size=(1, 24))
    out = interpolate_profiles(_profiles(rough, ramp), 1440)
    np.testing.assert_allclose(out.load_p[0, ::60], rough[0], atol=1e-12)
    # a natural spline through affine data is the line itself
    mid = out.der_p[0, 30:-60:60]
    np.testing.assert_allclose(mid, (np.arange(23) + 0.5) / 23.0, atol=1e-9)


def test_interpolate_clips_der_power():
    spiky = np.zeros((1, 24))
    spiky[0, 10:14] = [0.0, 5.0, 5.0, 0.0]
    out = interpolate_profiles(_profiles(np.ones((1, 24)), spiky), 1440)
    assert out.der_p.min() >= 0.0 and out.der_p.max() <= 5.0


def test_interpolate_few_points_warns():
    prof = _profiles(np.ones((1, 3)), np.ones((1, 3)))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        out = interpolate_profiles(prof, 30)
    assert any("linear" in str(x.message) for x in w)
    assert len(out) == 30


def test_profiles_reject_negative_der_power():
    with pytest.raises(ValueError):
        _profiles(np.ones((1, 2)), -np.ones((1, 2)))
