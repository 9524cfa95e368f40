import numpy as np
import pytest

from bilevel_vvc.grid import ieee33, network_from_dict


def line_doc(n=4, r=0.01, x=0.02, load=0.05, pv_buses=(), pv_p=0.04, pv_s=0.06, oltc=False, caps=()):
    """A per-unit chain 1-2-...-n with equal loads; optional PVs, OLTC on the first branch, CBs."""
    doc = {
        "units": "pu", "slack_bus": 1, "v_min": 0.95, "v_max": 1.05,
        "buses": [{"id": 1}] + [{"id": k, "p": load, "q": load / 2} for k in range(2, n + 1)],
        "branches": [{"from": k, "to": k + 1, "r": r, "x": x} for k in range(1, n)],
        "pv_units": [{"bus": b, "p_rating": pv_p, "s_rating": pv_s} for b in pv_buses],
    }
    if oltc:
        doc["oltcs"] = [{"from": 1, "to": 2, "n_positions": 5, "step_pu": 0.0125, "max_move": 2}]
    doc["capbanks"] = [{"bus": b, "n_units": 2, "q_total": 0.02, "max_move": 1} for b in caps]
    return doc


@pytest.fixture
def line_net():
    return network_from_dict(line_doc(5, pv_buses=(3, 5)))


@pytest.fixture
def device_net():
    return network_from_dict(line_doc(5, pv_buses=(3, 5), oltc=True, caps=(4,)))


@pytest.fixture(scope="session")
def net33():
    return ieee33()


@pytest.fixture(scope="session")
def net33_groups():
    return ieee33(groups=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
