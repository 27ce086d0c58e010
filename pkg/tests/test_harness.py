import csv
import hashlib
import json

import numpy as np
import pytest

from piadm.cli import main
from piadm.harness import (ROW_FIELDS, SWEEP_FIELDS, ConfigError, ExperimentConfig, run, sweep_dimension,
                           write_record)

# KL(p_eta || output law) of the sequential exponential integrator on N(0, 1),
# T=6, eta=0.01, eps=0.05, from the scalar variance recursion and the engine.
SEQUENTIAL_KL = 6.2519519913e-05

SDE_CONFIG = {"target": {"variant": "gaussian", "mean": [0.5, -0.2], "cov": [[0.8, 0.1], [0.1, 1.1]]},
              "implementation": "piadm_sde",
              "plan": {"T": 3.0, "eta": 0.02, "N": 6, "base_step": 0.05, "picard_depth": 5},
              "seed": 4, "n_samples": 500, "chunk_size": 128}


def fingerprint(header):
    return hashlib.sha256(",".join(header).encode()).hexdigest()[:12]


def test_sequential_integrator_accuracy():
    rec = run({"target": {"variant": "standard_normal", "dim": 1}, "implementation": "sequential_sde",
               "plan": {"T": 6.0, "eta": 0.01, "N": 6, "base_step": 0.05, "picard_depth": 1}, "n_samples": 10})
    assert rec.comparison["kl"] < 0.05
    assert rec.comparison["kl"] == pytest.approx(SEQUENTIAL_KL, rel=1e-8)


def test_same_config_same_payload():
    a, b = run(SDE_CONFIG), run(SDE_CONFIG)
    assert json.dumps(a.payload(), sort_keys=True) == json.dumps(b.payload(), sort_keys=True)
    assert np.array_equal(a.samples, b.samples)
    assert a.config_hash == ExperimentConfig.from_dict({**SDE_CONFIG, "threads": 3}).hash()


def test_parallel_and_sequential_runs_agree_at_convergence():
    cfg = {**SDE_CONFIG, "residual_tol": 1e-26, "plan": {**SDE_CONFIG["plan"], "picard_depth": 40}}
    a = run(cfg)
    b = run({**cfg, "implementation": "sequential_sde"})
    assert a.comparison["kind"] == "exact_law_unavailable" and b.comparison["kind"] == "exact_law"
    assert np.allclose(a.samples, b.samples, rtol=1e-9, atol=1e-9)


def test_counters_agree_with_report():
    rec = run(SDE_CONFIG)
    n_chunks = -(-SDE_CONFIG["n_samples"] // SDE_CONFIG["chunk_size"])
    assert rec.counters["score_calls"] == n_chunks * rec.report["sequential_rounds"] == n_chunks * 6 * 5
    assert rec.counters["score_evaluations"] == n_chunks * rec.report["total_score_evals"]


def test_mixture_run_reports_sample_distances():
    rec = run({"target": {"variant": "mixture", "means": [[-1.0], [1.0]], "covariances": [[[0.4]], [[0.4]]],
                          "weights": [0.5, 0.5]},
               "implementation": "piadm_ode", "plan": {"T": 3.0, "eta": 0.05, "N": 3, "base_step": 0.1,
                                                       "picard_depth": 4},
               "corrector": {"T_dagger": 0.3, "N_dagger": 1, "M_dagger": 5, "K_dagger": 3, "gamma": 1.5},
               "n_samples": 400, "reference_samples": 2000})
    assert rec.comparison["kind"] == "samples" and rec.comparison["sliced_w2"] > 0
    assert rec.row()["KL"] is None


def test_preset_configs():
    rec = run({"target": {"variant": "standard_normal", "dim": 2}, "implementation": "piadm_ode",
               "preset": {"name": "theorem2", "delta": 0.3, "picard_depth": 3}, "n_samples": 50})
    assert rec.plan["picard_depth"] == 3 and rec.corrector["N_dagger"] == 1
    assert rec.config["delta"] == 0.3


@pytest.mark.parametrize("bad", [
    {**SDE_CONFIG, "preset": {"name": "theorem1", "delta": 0.1}},
    {**SDE_CONFIG, "implementation": "fast"},
    {**SDE_CONFIG, "mode": "loose"},
    {**SDE_CONFIG, "n_samples": 0},
    {**SDE_CONFIG, "colour": "blue"},
    {**{k: v for k, v in SDE_CONFIG.items() if k != "plan"}, "preset": {"name": "theorem3", "delta": 0.1}},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_written_files_and_schema(tmp_path):
    write_record(run(SDE_CONFIG), tmp_path)
    with open(tmp_path / "rows.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ROW_FIELDS and fingerprint(rows[0]) == fingerprint(ROW_FIELDS)
    assert rows[1][0] == "2" and rows[1][2] == "piadm_sde"
    with open(tmp_path / "residuals.csv") as fh:
        res = list(csv.reader(fh))
    assert res[0] == ["block", "iteration", "residual"] and len(res) == 1 + 6 * 5
    record = json.loads((tmp_path / "record.json").read_text())
    assert record["config_hash"] == ExperimentConfig.from_dict(SDE_CONFIG).hash()
    assert "timing" in record and "wall_clock" not in record["report"]


def test_cli_run(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SDE_CONFIG))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "out"), "--threads", "2"]) == 0
    assert (tmp_path / "out" / "record.json").exists()
    assert main(["run", "--config", str(cfg), "--mode", "paper_verbatim", "--out", str(tmp_path / "v")]) == 0
    assert json.loads((tmp_path / "v" / "record.json").read_text())["config"]["mode"] == "paper_verbatim"


def test_cli_failures(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**SDE_CONFIG, "colour": 1}))
    assert main(["run", "--config", str(bad)]) == 2
    failing = tmp_path / "failing.json"
    failing.write_text(json.dumps({**SDE_CONFIG, "plan": {**SDE_CONFIG["plan"], "base_step": 0.07}}))
    assert main(["run", "--config", str(failing), "--out", str(tmp_path / "f")]) == 1


def test_sweep_row_reproduces_single_run(tmp_path):
    base = {"target": {"variant": "standard_normal", "dim": 2}, "implementation": "piadm_sde",
            "preset": {"name": "theorem1", "delta": 0.3, "constants": {"c_eps": 4.0}},
            "seed": 1, "n_samples": 4, "chunk_size": 4}
    rows, ok = sweep_dimension(base, [2], tol=1e-8, out_path=tmp_path / "sweep.csv")
    assert ok and rows[0]["status"] == "ok"
    single = run({**base, "preset": {**base["preset"], "picard_depth": rows[0]["K_min"]}})
    assert single.report["sequential_rounds"] == rows[0]["sequential_rounds"]
    assert single.report["total_score_evals"] == rows[0]["total_score_evals"]
    final = max(h[-1] for h in single.report["residual_history"])
    assert final == rows[0]["final_residual"]
    with open(tmp_path / "sweep.csv") as fh:
        assert next(csv.reader(fh)) == SWEEP_FIELDS


def test_sweep_marks_skipped_and_failed_rows(tmp_path):
    capped = {"target": {"variant": "standard_normal", "dim": 2}, "implementation": "piadm_sde",
              "preset": {"name": "theorem1", "delta": 0.3, "constants": {"node_cap": 1000}},
              "n_samples": 2}
    rows, ok = sweep_dimension(capped, [2, 64], tol=1e-8, search_k=False)
    assert ok and rows[0]["status"] == "plan_only" and rows[1]["status"].startswith("skipped")
    with pytest.raises(ConfigError):
        sweep_dimension(capped, [8, 2], tol=1e-8)
    cfg = tmp_path / "sweep.json"
    cfg.write_text(json.dumps(capped))
    code = main(["sweep", "--config", str(cfg), "--dims", "2", "--tol", "0", "--out", str(tmp_path / "s")])
    summary = json.loads((tmp_path / "s" / "sweep_summary.json").read_text())
    assert code == 1 and summary["rows"][0]["status"].startswith("failed")
