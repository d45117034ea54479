import csv
import json

import numpy as np
import pytest

from sdentropy.divergence import ConvergenceReport
from sdentropy.errors import ConfigurationError, DegenerateDataError, ResourceError
from sdentropy.experiments import (
    RunRecorder,
    config_digest,
    default_config,
    emit_plot_data,
    load_config,
    run_experiment,
    run_gbm_entropy,
    run_gl_entropy,
    run_malliavin_probe,
    run_strong_order,
    sha256_file,
    validate_config,
)


def small_gbm(**over):
    cfg = default_config("gbm_entropy")
    cfg.update(M=2000, ladder=[3, 4, 5])
    cfg.update(over)
    return cfg


def small_gl(**over):
    cfg = default_config("gl_entropy")
    cfg.update(M=500, ladder=[3, 4, 5], h_ref=7)
    cfg["grid"] = dict(cfg["grid"], n=[40, 40])
    cfg.update(over)
    return cfg


@pytest.mark.parametrize("name", ["gbm_entropy", "gl_entropy", "strong_order", "malliavin_probe",
                                  "fig1_desk", "fig2_desk"])
def test_shipped_configs_validate(name):
    validate_config(default_config(name))


def test_paper_scale_gl_needs_its_larger_budget():
    cfg = default_config("gl_entropy")
    cfg["budget_minutes"] = 30
    with pytest.raises(ResourceError):
        validate_config(cfg)


def test_paper_values_in_shipped_defaults():
    f1 = default_config("gbm_entropy")
    assert f1["model"] == {"alpha": 0.6, "sigma": 0.1, "x0": 1.0}
    assert f1["ladder"] == [3, 4, 5, 6, 7] and f1["h_ref"] == 12
    assert f1["bandwidth"] == 0.05 and f1["epsilon"] == 1e-10
    assert f1["grid"] == {"kind": "log", "lo": 0.001, "hi": 10.0, "n": 1000}
    f2 = default_config("gl_entropy")
    assert f2["model"] == {"alpha": 0.5, "beta": 1.0, "gamma": 3.0, "sigma": 0.5}
    assert f2["ladder"] == [5, 6, 7, 8, 9] and f2["h_ref"] == 14
    assert f2["bandwidth"] == [0.15, 0.15] and f2["grid"]["n"] == [200, 200]


def test_validation_reports_every_problem():
    cfg = small_gbm(M=3, seed=-1, ladder=[3], epsilon=0, bandwidth=-1, reference="nope")
    with pytest.raises(ConfigurationError) as err:
        validate_config(cfg)
    msg = str(err.value)
    for key in ("seed", "M must", "ladder has 1", "epsilon", "bandwidth", "reference"):
        assert key in msg


def test_single_h_ladder_rejected_before_simulation():
    with pytest.raises(ConfigurationError, match=">= 3 rows"):
        run_gbm_entropy(small_gbm(ladder=[5]))


def test_ladder_must_increase_and_h_ref_be_finer():
    with pytest.raises(ConfigurationError):
        validate_config(small_gbm(ladder=[5, 4, 3]))
    with pytest.raises(ConfigurationError, match="finer"):
        validate_config(small_gbm(paper_literal=True, h_ref=5))


def test_budget_and_grid_caps():
    with pytest.raises(ResourceError, match="reduce M"):
        validate_config(small_gbm(M=10**11))
    cfg = small_gl()
    cfg["grid"]["n"] = [300, 300]
    with pytest.raises(ResourceError):
        validate_config(cfg)


def test_load_config_merges_over_default(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("kind: gbm_entropy\nM: 1234\nmodel:\n  sigma: 0.2\n")
    cfg = load_config(p)
    assert cfg["M"] == 1234 and cfg["model"] == {"alpha": 0.6, "sigma": 0.2, "x0": 1.0}
    assert cfg["ladder"] == [3, 4, 5, 6, 7]


def test_config_digest_ignores_output_and_threads():
    a = small_gbm()
    assert config_digest(a) == config_digest(dict(a, threads=4, out="x"))
    assert config_digest(a) != config_digest(dict(a, seed=1))


def test_gbm_sigma_zero_is_degenerate():
    with pytest.raises(DegenerateDataError):
        run_gbm_entropy(small_gbm(model={"alpha": 0.6, "sigma": 0.0, "x0": 1.0}))


def test_small_gbm_run_outputs(tmp_path):
    run = run_gbm_entropy(small_gbm(), tmp_path)
    assert [r["h"] for r in run.report.rows] == [0.125, 0.0625, 0.03125]
    assert all(r["KL_normalized"] > 0 for r in run.report.rows)
    with open(tmp_path / "convergence.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["h", "KL_raw", "KL_normalized", "TV", "W1"] and len(rows) == 4
    assert set(run.manifest["files"]) >= {"convergence.csv", "fit.json", "reference-lines.csv",
                                          "densities/reference.csv", "densities/euler_k03.csv"}
    for name, digest in run.manifest["files"].items():
        assert sha256_file(tmp_path / name) == digest
    assert b"\r\n" not in (tmp_path / "convergence.csv").read_bytes()


@pytest.mark.parametrize("over", [{"paper_literal": True, "h_ref": 7},
                                  {"exact_reference": "smoothed_pdf"},
                                  {"coupled": False},
                                  {"bandwidth": "silverman"}])
def test_gbm_reference_variants(over):
    run = run_gbm_entropy(small_gbm(**over))
    assert np.isfinite(run.report.slope)
    assert len(run.report.rows) == 3


def test_gbm_run_is_thread_invariant():
    a = run_gbm_entropy(small_gbm(threads=1))
    b = run_gbm_entropy(small_gbm(threads=3))
    assert a.report.rows == b.report.rows


def test_gl_run_records_bandwidth(tmp_path):
    run = run_gl_entropy(small_gl(), tmp_path)
    assert run.reference.bandwidth == (0.15, 0.15)
    for f in (tmp_path / "densities").iterdir():
        header = json.loads(f.read_text().splitlines()[0][2:])
        assert header["bandwidth"] == [0.15, 0.15]
    assert "W1" not in run.report.rows[0]


def test_gl_without_saturation_runs():
    run = run_gl_entropy(small_gl(model={"alpha": 0.5, "beta": 0.0, "gamma": 3.0, "sigma": 0.5}))
    assert all(np.all(np.isfinite(t)) for t in run.terminals.values())


def test_strong_order_deterministic_limit():
    cfg = default_config("strong_order")
    cfg.update(M=20, model={"alpha": 0.6, "sigma": 0.0, "x0": 1.0})
    res = run_strong_order(cfg)
    assert res.euler_slope == pytest.approx(1.0, abs=0.1)
    assert [r["rms_euler"] for r in res.rows] == [r["rms_milstein"] for r in res.rows]


def test_malliavin_probe_additive_closed_form(tmp_path):
    cfg = default_config("malliavin_probe")
    cfg["probe"].update(model="additive", M=20, p=[1, 2])
    run = run_malliavin_probe(cfg, tmp_path)
    for p in (1, 2):
        assert run.inverse[p].exponent == pytest.approx(-p, abs=0.01)
    summary = json.loads((tmp_path / "probe_summary.json").read_text())
    assert "inverse_moment_p2.csv" in summary


def test_emit_plot_data_guides(tmp_path):
    rows = [{"h": 2.0**-k, "KL_raw": 4.0**-k, "KL_normalized": 4.0**-k, "TV": 2.0**-k} for k in range(3, 8)]
    rep = ConvergenceReport(rows, "KL_normalized", 2.0, 0.0, 0.0, {}, {})
    emit_plot_data(rep, tmp_path)
    with open(tmp_path / "convergence.csv", newline="") as fh:
        data = list(csv.DictReader(fh))
    assert len(data) == 5 and list(data[0]) == ["h", "KL_raw", "KL_normalized", "TV"]
    with open(tmp_path / "reference-lines.csv", newline="") as fh:
        guide = list(csv.DictReader(fh))
    assert float(guide[0]["second_order"]) == rows[0]["KL_normalized"]
    for a, b in zip(guide, guide[1:]):
        assert float(a["second_order"]) / float(b["second_order"]) == pytest.approx(4.0, rel=1e-14)
        assert float(a["first_order"]) / float(b["first_order"]) == pytest.approx(2.0, rel=1e-14)
    assert json.loads((tmp_path / "fit.json").read_text())["slope"] == 2.0


def test_emit_plot_data_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    rep = ConvergenceReport([{"h": 0.5, "KL_normalized": 1.0}], "KL_normalized", 0, 0, 0, {}, {})
    with pytest.raises(OSError):
        emit_plot_data(rep, blocker / "sub")


def test_recorder_without_output_dir():
    rec = RunRecorder({"kind": "gbm_entropy"})
    with rec.stage("x"):
        pass
    assert rec.path("a.csv") is None and rec.finish() is None
    assert "x" in rec.stages


def test_run_experiment_dispatch():
    cfg = default_config("strong_order")
    cfg["M"] = 20
    assert hasattr(run_experiment(cfg), "euler_slope")
