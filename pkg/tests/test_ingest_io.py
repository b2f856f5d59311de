import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voltpf.control_curves import ControlMode
from voltpf.grid_model import TopologyError, validate_topology
from voltpf.ingest_io import (
    DER_CLASSES_KW,
    RESULT_COLUMNS,
    FormatError,
    SyntheticFeederParams,
    feeder_from_dict,
    feeder_to_dict,
    generate_synthetic_feeder,
    load_feeder,
    load_profiles,
    parse_profiles,
    profiles_to_csv,
    result_csv,
    save_feeder,
    save_profiles,
    write_result,
)
from voltpf.sim_engine import ScenarioConfig, ScenarioResult, run_static, run_timeseries


def test_fixture_feeder_loads(fixture_feeder_path, fixture_profiles_path):
    f = load_feeder(fixture_feeder_path)
    p = load_profiles(fixture_profiles_path)
    assert validate_topology(f).ok
    assert len(p) == 24 and p.spacing == 3600.0
    assert set(p.der_ids) == set(f.der_ids())


def test_feeder_roundtrip(tmp_path, synthetic60):
    feeder, _ = synthetic60
    path = tmp_path / "f.json"
    save_feeder(feeder, path)
    assert load_feeder(path) == feeder


def test_feeder_roundtrip_keeps_modes_and_settings(fixture_feeder_path):
    doc = json.loads(fixture_feeder_path.read_text())
    doc["ders"][0]["mode"] = {"kind": "constpf", "pf": 0.95, "excitation": "absorb"}
    doc["ders"][1]["settings"] = "ieee1547"
    f = feeder_from_dict(doc)
    assert f.ders[0].mode == ControlMode.parse("constpf:0.95absorb")
    assert feeder_from_dict(feeder_to_dict(f)) == f


def test_top_level_settings_are_the_der_default(fixture_feeder_path):
    doc = json.loads(fixture_feeder_path.read_text())
    doc["curve_settings"] = {"v1": 0.9, "v2": 0.97, "v4": 1.03, "v5": 1.1, "pf_lim_inject": 0.9,
                             "pf_lim_absorb": 0.9, "q_lim_inject_pu": 0.44, "q_lim_absorb_pu": 0.44}
    f = feeder_from_dict(doc)
    assert all(d.settings.v5 == 1.1 for d in f.ders)


def test_missing_source_bus_names_the_key(fixture_feeder_path):
    doc = json.loads(fixture_feeder_path.read_text())
    del doc["source_bus"]
    with pytest.raises(FormatError, match="source_bus"):
        feeder_from_dict(doc)


def test_bad_field_reports_json_path(fixture_feeder_path):
    doc = json.loads(fixture_feeder_path.read_text())
    doc["lines"][2]["impedance"] = [1.0]
    with pytest.raises(FormatError, match=r"\$\.lines\[2\]\.impedance"):
        feeder_from_dict(doc)


def test_loop_file_is_a_topology_error(tmp_path, fixture_feeder_path):
    doc = json.loads(fixture_feeder_path.read_text())
    first, last = doc["buses"][1]["id"], doc["buses"][-1]["id"]
    doc["lines"].append({"from_bus": first, "to_bus": last, "impedance": [1.0, 1.0]})
    path = tmp_path / "loop.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(TopologyError, match="loop.json"):
        load_feeder(path)


def test_broken_json_reports_position(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"base_mva": 1,\n  "buses": [}')
    with pytest.raises(FormatError, match="line 2"):
        load_feeder(path)


PROFILE_2x = """timestamp,entity_id,kind,value
0,L1,load_p,1.0
0,L1,load_q,0.2
0,PV1,der_p,0.0
1,L1,load_p,1.5
1,L1,load_q,0.3
1,PV1,der_p,2.0
"""


def test_profiles_parse():
    p = parse_profiles(PROFILE_2x)
    assert len(p) == 2 and p.spacing == 60.0
    assert p.load_ids == ("L1",) and p.der_ids == ("PV1",)
    np.testing.assert_array_equal(p.load_p, [[1.0, 1.5]])
    assert p.source_v is None


def test_profiles_iso_timestamps():
    text = PROFILE_2x.replace("\n0,", "\n2024-06-01T12:00:00,").replace("\n1,", "\n2024-06-01T12:15:00,")
    p = parse_profiles(text)
    assert p.spacing == 900.0


def test_profiles_gap_is_listed():
    text = PROFILE_2x.replace("1,PV1,der_p,2.0\n", "")
    with pytest.raises(FormatError, match="PV1/der_p: 1 missing"):
        parse_profiles(text)


@pytest.mark.parametrize("bad, match", [
    ("0,PV2,der_p,-1.0\n", "negative der_p"),
    ("0,L1,load_p,3.0\n", "duplicate"),
    ("0,L1,volts,1.0\n", "unknown kind"),
    ("x,L1,load_p,1.0\n", "timestamp"),
    ("0,L1,load_p,abc\n", "not a number"),
])
def test_profiles_reject(bad, match):
    with pytest.raises(FormatError, match=match):
        parse_profiles(PROFILE_2x + bad)


def test_profiles_bad_header():
    with pytest.raises(FormatError, match="header"):
        parse_profiles("time,entity,kind,value\n")


def test_profiles_roundtrip(tmp_path, synthetic60):
    _, prof = synthetic60
    path = tmp_path / "p.csv"
    save_profiles(prof, path)
    back = load_profiles(path)
    assert profiles_to_csv(back) == profiles_to_csv(prof)
    np.testing.assert_array_equal(back.der_p[np.argsort(back.der_ids)],
                                  prof.der_p[np.argsort(prof.der_ids)])


def test_generator_is_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_feeder(generate_synthetic_feeder(SyntheticFeederParams(seed=42))[0], a)
    save_feeder(generate_synthetic_feeder(SyntheticFeederParams(seed=42))[0], b)
    assert a.read_bytes() == b.read_bytes()
    c = generate_synthetic_feeder(SyntheticFeederParams(seed=43))[0]
    assert c != generate_synthetic_feeder(SyntheticFeederParams(seed=42))[0]


def test_generator_penetration_and_classes(synthetic60):
    feeder, prof = synthetic60
    assert len(feeder.buses) == 60
    rated = sum(d.p_rated_kw for d in feeder.ders)
    peak = sum(ld.p_kw for ld in feeder.loads)
    assert 100 * rated / peak == pytest.approx(200.0, rel=1e-3)
    assert {d.p_rated_kw for d in feeder.ders} <= set(DER_CLASSES_KW)
    # midday availability lies in [0.2, 1.0] of rating
    ratio = prof.der_p.max(axis=1) / np.array([d.p_rated_kw for d in feeder.ders])
    assert ratio.min() >= 0.2 - 1e-3 and ratio.max() <= 1.0


def test_generator_zero_penetration_and_infeasible():
    f, p = generate_synthetic_feeder(SyntheticFeederParams(bus_count=10, penetration_pct=0))
    assert f.ders == () and p.der_p.shape == (0, 24)
    with pytest.raises(ValueError):
        generate_synthetic_feeder(SyntheticFeederParams(bus_count=10, der_count=20))
    with pytest.raises(ValueError, match="penetration"):
        SyntheticFeederParams(penetration_pct=1e-300)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 80), st.integers(1, 4), st.integers(0, 2**32 - 1), st.one_of(st.just(0.0), st.floats(1, 300)))
def test_generated_feeders_are_valid(n, branching, seed, pen):
    f, p = generate_synthetic_feeder(SyntheticFeederParams(bus_count=n, branching=branching,
                                                           seed=seed, penetration_pct=pen))
    assert validate_topology(f).ok  # includes the DER sizing rule
    assert len(f.buses) == n
    assert np.all(p.der_p >= 0)


def test_write_result(tmp_path, fixture_feeder_path, fixture_profiles_path):
    f, p = load_feeder(fixture_feeder_path), load_profiles(fixture_profiles_path)
    r = run_timeseries(ScenarioConfig(f, p, mode=ControlMode.parse("voltpf")))
    paths = write_result(r, tmp_path / "res")
    assert [x.name for x in paths] == ["res.csv", "res.json"]
    rows = list(csv.reader(io.StringIO(paths[0].read_text())))
    assert tuple(rows[0]) == RESULT_COLUMNS
    pf_rows = {(k, e) for k, e, fld, _ in rows[1:] if fld == "pf"}
    assert pf_rows == {(str(k), d) for k in range(24) for d in r.der_ids}
    summary = json.loads(paths[1].read_text())
    assert summary["steps"] == 24 and summary["all_converged"]


def test_empty_result_is_header_only():
    assert result_csv(ScenarioResult.empty()) == ",".join(RESULT_COLUMNS) + "\n"


def test_result_csv_is_deterministic(fixture_feeder_path, fixture_profiles_path):
    f, p = load_feeder(fixture_feeder_path), load_profiles(fixture_profiles_path)
    cfg = ScenarioConfig(f, p, mode=ControlMode.parse("voltvar"), static_hour=14)
    assert result_csv(run_static(cfg)[0]) == result_csv(run_static(cfg)[0])
