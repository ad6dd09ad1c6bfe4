import numpy as np
import pytest

from topoest.acpf import LoadSnapshot, solve_acpf
from topoest.grid import ieee33, parse_grid
from topoest.measurement import NoiseConfig, make_rng, measure

TWO_BUS = """
[meta]
base_kv,1
base_mva,1

[buses]
id,kind,p_kw,q_kvar
1,substation,0,0
2,load,100,50

[lines]
id,from,to,r_ohm,x_ohm,switch
1,1,2,0.01,0.01,-

[pmus]
bus
1
2
"""


@pytest.fixture(scope="session")
def feeder():
    return ieee33()


@pytest.fixture(scope="session")
def two_bus():
    return parse_grid(TWO_BUS)


def snapshot(model, topo, noise=None, seed=0, scale=1.0):
    """Truth state and one measurement set at nominal load."""
    loads = LoadSnapshot.nominal(model, scale)
    state = solve_acpf(model, topo, loads)
    ms = measure(model, topo, state, loads, noise or NoiseConfig.off(), make_rng(seed, 0, 1))
    return state, ms


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
