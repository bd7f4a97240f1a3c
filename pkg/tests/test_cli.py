import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from charguide.cli import emit_outputs, main, read_samples_csv
from charguide.config import ConfigError, parse_config
from charguide.samplers import SampleBatch, SamplerKind


def test_experiment_defaults():
    g = parse_config("", "gaussian")
    assert g["gaussian"]["c"] == (-5.0, 5.0) and g["guidance"]["omega"] == 4.0
    assert g["sampler"]["steps"] == 20
    assert parse_config("", "mixture")["guidance"]["omega"] == 6.0
    m = parse_config("", "magnet")
    assert m["magnet"]["temperature"] == 196.0 and m["run"]["batch"] == 8192
    assert m["guidance"]["omega"] == 4.0 and m["guidance"]["projection"] == "channel_mean"
    assert parse_config("[sampler]\nkind = ode\n", "gaussian")["sampler"]["steps"] == 1000


def test_unknown_key_names_section_key_and_line():
    text = "[run]\nseed = 3\n\n[guidance]\nomega = 2\nbogus = 1\n"
    with pytest.raises(ConfigError, match=r"\[guidance\] bogus \(line 6\)"):
        parse_config(text, "gaussian")
    with pytest.raises(ConfigError, match=r"unknown section \[extra\] \(line 1\)"):
        parse_config("[extra]\na = 1\n", "gaussian")


@pytest.mark.parametrize("text,where", [
    ("[guidance]\nomega = four\n", r"\[guidance\] omega \(line 2\)"),
    ("[sampler]\nkind = ode\nsteps = 20\n", r"\[sampler\] steps \(line 3\)"),
    ("[guidance]\nsolver = newton\n", r"\[guidance\] solver"),
    ("[run]\nexperiment = mixture\n", r"\[run\] experiment"),
    ("[mixture]\nn_mc = 10\n", r"\[mixture\] n_mc"),
])
def test_bad_values(text, where):
    with pytest.raises(ConfigError, match=where):
        parse_config(text, "gaussian")


def test_magnet_temperature_and_omega_agree():
    assert parse_config("[guidance]\nomega = 0\n", "magnet")["magnet"]["temperature"] == 200.0
    assert parse_config("[magnet]\ntemperature = 198\n", "magnet")["guidance"]["omega"] == 2.0
    with pytest.raises(ConfigError, match="disagrees"):
        parse_config("[magnet]\ntemperature = 198\n[guidance]\nomega = 4\n", "magnet")


@settings(max_examples=30, deadline=None)
@given(
    exp=st.sampled_from(["gaussian", "mixture", "magnet", "diagnose", "iterstudy", "mh"]),
    seed=st.integers(0, 10**9),
    tol=st.floats(1e-8, 1.0),
    gamma=st.floats(1e-4, 2.0),
    paired=st.booleans(),
)
def test_config_echo_round_trip(exp, seed, tol, gamma, paired):
    over = {"run": {"seed": str(seed), "paired": str(paired)},
            "guidance": {"tolerance": repr(tol), "gamma": repr(gamma)}}
    cfg = parse_config("", exp, over)
    assert parse_config(cfg.to_ini()) == cfg


def _batch(x):
    return SampleBatch(np.asarray(x, float), 0, SamplerKind("ddim", 20), {"method": "cf", "omega": 4.0})


def test_emit_outputs_minimal(tmp_path):
    emit_outputs(_batch([[1.0, 2.0], [3.0, 4.5]]), {}, [], tmp_path)
    meta, data = read_samples_csv(tmp_path / "samples.csv")
    assert data.shape == (2, 2)
    assert meta["dim"] == "2" and meta["seed"] == "0"
    assert json.loads((tmp_path / "traces.json").read_text()) == []
    assert not list(tmp_path.glob(".*"))  # no temp files left behind


def test_emit_outputs_nonfinite_json(tmp_path):
    emit_outputs(None, {"a": {"ratio": float("inf"), "x": np.float64(1.5)}}, [], tmp_path)
    assert json.loads((tmp_path / "metrics.json").read_text()) == {"a": {"ratio": "inf", "x": 1.5}}


SMALL = ["--set", "run.batch=300"]


def test_gaussian_paired_run(tmp_path):
    assert main(["gaussian", "--out", str(tmp_path), "--paired", "--seed", "0"] + SMALL) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    pair = metrics["paired"]
    assert pair["kl_ch"] < pair["kl_cf"] and pair["ch_better"]
    assert {"ddim-20/cf/4", "ddim-20/ch/4"} <= set(metrics)
    traces = json.loads((tmp_path / "traces.json").read_text())
    assert traces[0]["key"] == "ddim-20/ch/4"
    assert len(traces[0]["per_step"]["step"]) == 20
    cfg = parse_config((tmp_path / "config_echo.ini").read_text())
    assert cfg["run"]["paired"] and cfg["run"]["batch"] == 300


@pytest.mark.filterwarnings("ignore:mixture components")
def test_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["mixture", "--out", str(d), "--seed", "5"] + SMALL) == 0
    assert (a / "samples.csv").read_bytes() == (b / "samples.csv").read_bytes()
    # the echo reproduces the run
    c = tmp_path / "c"
    assert main(["mixture", "--config", str(a / "config_echo.ini"), "--out", str(c)]) == 0
    assert (a / "samples.csv").read_bytes() == (c / "samples.csv").read_bytes()


def test_config_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[guidance]\nbogus = 1\n")
    assert main(["gaussian", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "bogus" in capsys.readouterr().err
    assert main(["diagnose", "--paired", "--out", str(tmp_path / "o")]) == 2
    assert main(["gaussian", "--config", str(tmp_path / "missing.ini")]) == 2


def test_runtime_failure_leaves_marker(tmp_path):
    out = tmp_path / "run"
    code = main(["magnet", "--out", str(out), "--set", "magnet.dataset_t1=/nonexistent.bin",
                 "--set", "magnet.mh_samples=200", "--set", "magnet.dataset_size=100",
                 "--set", "magnet.mh_burn_in=10"])
    assert code == 3
    assert "nonexistent" in (out / "FAILED").read_text()
    assert not (out / "samples.csv").exists()


MAGNET_SMALL = ["--set", "magnet.mh_samples=4096", "--set", "magnet.dataset_size=2048",
                "--set", "magnet.mh_burn_in=300", "--set", "magnet.mh_chains=256",
                "--set", "run.batch=1024"]


def test_mh_then_magnet_at_curie_temperature(tmp_path):
    data = tmp_path / "mh"
    assert main(["mh", "--out", str(data)] + MAGNET_SMALL) == 0
    metrics = json.loads((data / "metrics.json").read_text())
    assert 0.3 < metrics["mh/T=200"]["acceptance_rate"] < 0.6
    assert (data / "magnetization.csv").exists()
    run = tmp_path / "mag"
    args = ["magnet", "--out", str(run), "--set", "guidance.omega=0", "--set", "guidance.method=cf",
            "--set", f"magnet.dataset_t1={data / 'dataset_T200.bin'}",
            "--set", f"magnet.dataset_t0={data / 'dataset_T201.bin'}"] + MAGNET_SMALL
    assert main(args) == 0
    m = json.loads((run / "metrics.json").read_text())
    assert m["reference"]["temperature"] == 200.0
    # omega = 0 samples the T = 200 model: a single peak
    assert m["ddim-20/cf/0"]["magnetization"]["peak_count"] == 1
    meta, data_rows = read_samples_csv(run / "samples.csv")
    assert data_rows.shape == (1024, 64) and meta["method"] == "cf"


def test_iterstudy_writes_per_step_counts(tmp_path):
    assert main(["iterstudy", "--out", str(tmp_path), "--set", "run.batch=200"]) == 0
    traces = json.loads((tmp_path / "traces.json").read_text())
    assert [t["key"].split("tol=")[1] for t in traces] == ["0.01", "0.001", "0.0001"]
    for t in traces:
        assert len(t["per_step"]["mean_iterations"]) == 50
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert "all_in_middle" in metrics["locality"]


def test_diagnose_report(tmp_path):
    assert main(["diagnose", "--out", str(tmp_path), "--set", "diagnose.probes=3"]) == 0
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert len(m["fp/ch/4"]["e_m_norms"]) == 3
    _, probes = read_samples_csv(tmp_path / "samples.csv")
    assert probes.shape == (3, 2)
