import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from voltpf.control_curves import preset_ieee1547_default  # noqa: E402
from voltpf.grid_model import Bus, DerUnit, Feeder, LineSegment, Load  # noqa: E402
from voltpf.ingest_io import SyntheticFeederParams, generate_synthetic_feeder  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def ieee():
    return preset_ieee1547_default()


@pytest.fixture
def fixture_feeder_path():
    return FIXTURES / "feeder12.json"


@pytest.fixture
def fixture_profiles_path():
    return FIXTURES / "profiles12.csv"


@pytest.fixture(scope="session")
def synthetic60():
    return generate_synthetic_feeder(SyntheticFeederParams())


def two_bus(r=0.01, x=0.02, p_load=0.0, q_load=0.0, der_kw=None, s_rated=None, vs=1.0):
    """Per-unit two-bus feeder; impedance in p.u., powers in kW on a 1 MVA base."""
    loads = [Load("b1", p_load, q_load, id="L1")] if (p_load or q_load) else []
    ders = []
    if der_kw is not None:
        ders = [DerUnit("b1", s_rated or der_kw / 0.89, der_kw, id="PV1")]
    return Feeder(buses=[Bus("b0", 1.0), Bus("b1", 1.0)],
                  lines=[LineSegment("b0", "b1", complex(r, x))],
                  loads=loads, ders=ders, source_bus="b0", source_v_pu=vs)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
