import json

import pytest

from bilevel_vvc.cli import main
from conftest import line_doc


@pytest.fixture
def files(tmp_path):
    net = tmp_path / "net.json"
    net.write_text(json.dumps(line_doc(5, pv_buses=(3, 5), oltc=True, caps=(4,))))
    weak = tmp_path / "weak.json"
    weak.write_text(json.dumps(line_doc(4, r=0.3, x=0.6, load=0.5)))
    short = tmp_path / "short.json"
    short.write_text(json.dumps(line_doc(6, r=0.02, x=0.05, load=0.3, pv_buses=(3, 6), pv_p=0.01, pv_s=0.02)))
    return tmp_path, net, weak, short


def run(tmp, *argv):
    return main([*argv, "--out", str(tmp / "out")])


def test_pf_ok_and_output(files):
    tmp, net, _, _ = files
    assert run(tmp, "pf", "--net", str(net)) == 0
    doc = json.loads((tmp / "out" / "pf" / "pf.json").read_text())
    assert doc["converged"] and len(doc["v_sq"]) == 5


def test_bundled_network_name(tmp_path):
    assert main(["pf", "--net", "ieee33.json", "--out", str(tmp_path)]) == 0


def test_missing_file_is_usage_error(files):
    tmp, _, _, _ = files
    assert run(tmp, "pf", "--net", str(tmp / "nope.json")) == 2


def test_bad_flag_is_usage_error(files):
    tmp, net, _, _ = files
    assert run(tmp, "dispatch", "--net", str(net), "--mode", "model7") == 2


def test_collapse_is_numerical_error(files):
    tmp, _, weak, _ = files
    assert run(tmp, "pf", "--net", str(weak)) == 3


def test_unreachable_band_is_infeasible(files):
    tmp, _, _, short = files
    assert run(tmp, "lower", "--net", str(short), "--period", "19") == 4
    assert (tmp / "out" / "lower" / "lower.json").exists()


def test_equal_ratio_without_leader_is_usage_error(files):
    tmp, net, _, _ = files
    assert run(tmp, "lower", "--net", str(net), "--period", "13", "--objective", "equal_ratio") == 2


def test_dispatch_matches_oracle_and_is_deterministic(files):
    tmp, net, _, _ = files
    assert run(tmp, "dispatch", "--net", str(net), "--period", "13", "--run-id", "a") == 0
    assert run(tmp, "dispatch", "--net", str(net), "--period", "13", "--run-id", "b") == 0
    assert run(tmp, "oracle", "--net", str(net), "--period", "13") == 0
    a = (tmp / "out" / "a" / "decision.json").read_text()
    assert a == (tmp / "out" / "b" / "decision.json").read_text()
    assert (tmp / "out" / "a" / "timings.json").exists()
    dec, ora = json.loads(a), json.loads((tmp / "out" / "oracle" / "oracle.json").read_text())
    assert (dec["taps"], dec["cb_units"]) == (ora["taps"], ora["cb_units"])
    assert dec["kkt_residual"] <= 1e-6


def test_lower_distributed(files):
    tmp, net, _, _ = files
    assert run(tmp, "lower", "--net", str(net), "--period", "13", "--distributed") == 0
    doc = json.loads((tmp / "out" / "lower" / "lower.json").read_text())
    assert doc["distributed"]["max_error_vs_central"] <= 1e-3


def test_simulate_and_compare(files):
    tmp, net, _, _ = files
    assert run(tmp, "simulate", "--net", str(net), "--horizon", "2", "--mode", "all") == 0
    sim = tmp / "out" / "simulate"
    for mode in ("bilevel", "model1", "model2", "no-control"):
        assert (sim / f"metrics_{mode}.json").exists()
        assert (sim / f"periods_{mode}.csv").exists()
    assert (sim / "comparison.json").exists()
    metrics = [str(sim / "metrics_bilevel.json"), str(sim / "metrics_no-control.json")]
    assert main(["compare", *metrics, "--out", str(tmp / "out")]) == 0
    assert main(["compare", metrics[0], "--out", str(tmp / "out")]) == 2
