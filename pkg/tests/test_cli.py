import csv
import json
import math

import pytest

from mvscale.__main__ import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, EXIT_REPLAY, main, resolve_threads
from mvscale.artifacts import RunSummary, first_difference
from mvscale.config import ExperimentConfig, load_config
from mvscale.errors import ConfigError, ReplayMismatchError
from mvscale.experiments import ExperimentRunner, replay


def _read_csv(path):
    with path.open() as fh:
        return list(csv.DictReader(fh))


def _linear_simulate():
    return {
        "experiment": "simulate",
        "model": {"name": "linear"},
        "time_scales": {"epsilon": 0.2, "delta": 0.05},
        "sim": {"dt_macro": 0.05, "horizon": 0.5, "n_particles": 8, "n_reps": 3},
        "x0": [1.0],
        "seed": 11,
    }


@pytest.fixture
def zero_run(tmp_path, write_config, load_example):
    out = tmp_path / "zero"
    assert main(["simulate", "--config", str(write_config(load_example("zero.json"))), "--out", str(out)]) == EXIT_OK
    return out


# --- run -----------------------------------------------------------------


def test_zero_simulate_reports_constant_trajectory(zero_run):
    summary = json.loads((zero_run / "summary.json").read_text())
    assert summary["experiment"] == "simulate"
    assert summary["seed"] == 7
    assert summary["headline"]["max_mean_change"] == 0.0
    assert summary["headline"]["final_mean"] == [1.0]
    assert set(summary["artifacts"]) == {"trajectory.csv"}

    rows = _read_csv(zero_run / "trajectory.csv")
    assert len(rows) == 2 * 11
    assert {row["mean_x0"] for row in rows} == {"1.0"}
    assert list(rows[0]) == ["rep", "t", "mean_x0", "mean_y0", "m2_x", "m2_y"]


@pytest.mark.parametrize(
    "payload",
    [
        {"experiment": "simulate", "model": {"name": "zero"}, "bogus": 1},
        {"experiment": "simulate", "model": {"name": "quadratic"}},
        {"experiment": "simulate", "model": {"name": "zero"}, "time_scales": {"epsilon": 2.0, "delta": 0.1}},
        {"experiment": "simulate", "model": {"name": "zero"}, "x0": [1.0, 2.0]},
        {"experiment": "simulate", "model": {"name": "zero"}, "seed": -1},
    ],
)
def test_malformed_config_exits_2_without_artifacts(tmp_path, write_config, payload):
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(write_config(payload)), "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()


def test_missing_or_mismatched_config(tmp_path, write_config, load_example):
    assert main(["simulate", "--config", str(tmp_path / "absent.json")]) == EXIT_CONFIG
    path = write_config(load_example("zero.json"))
    assert main(["probe", "--config", str(path), "--out", str(tmp_path / "p")]) == EXIT_CONFIG
    assert main(["simulate", "--out", str(tmp_path / "p")]) == EXIT_CONFIG
    assert main(["replay"]) == EXIT_CONFIG


def test_load_config_rejects_unknown_keys(write_config):
    with pytest.raises(ConfigError, match="invalid config"):
        load_config(write_config({"experiment": "simulate", "model": {"name": "zero", "p": 1}}))


def test_seed_override_changes_hash(tmp_path, write_config, load_example):
    path = write_config(load_example("zero.json"))
    out = tmp_path / "seeded"
    assert main(["simulate", "--config", str(path), "--out", str(out), "--seed-override", "99"]) == EXIT_OK
    summary = RunSummary.read(out / "summary.json")
    assert summary.seed == 99
    original = load_config(path)
    assert summary.config_hash == original.with_seed(99).config_hash()
    assert summary.config_hash != original.config_hash()
    assert main(["simulate", "--config", str(path), "--seed-override", str(2**64)]) == EXIT_CONFIG


def test_numerical_failure_exits_3(tmp_path, write_config):
    # the zero model has no averaging error at all, so the log-log fit is degenerate
    payload = {
        "experiment": "averaging-rate",
        "model": {"name": "zero"},
        "time_scales": {"epsilon": 0.1, "delta": 0.05},
        "sim": {"dt_macro": 0.1, "horizon": 0.2, "n_particles": 2, "n_reps": 2},
        "invariant": {"n_particles": 50},
        "sweep": {"epsilons": [0.1, 0.2, 0.3, 0.4], "n_boot": 10},
        "x0": [0.0],
    }
    out = tmp_path / "rate"
    assert main(["averaging-rate", "--config", str(write_config(payload)), "--out", str(out)]) == EXIT_NUMERICAL
    assert not (out / "summary.json").exists()


# --- replay --------------------------------------------------------------


def test_immediate_replay_passes(zero_run):
    assert main(["replay", str(zero_run / "summary.json")]) == EXIT_OK


def test_replay_detects_edited_byte(zero_run):
    target = zero_run / "trajectory.csv"
    data = bytearray(target.read_bytes())
    offset = len(data) - 3
    data[offset] = ord("7") if data[offset] != ord("7") else ord("8")
    target.write_bytes(bytes(data))

    with pytest.raises(ReplayMismatchError) as info:
        replay(zero_run / "summary.json")
    assert info.value.filename == "trajectory.csv"
    assert info.value.offset == offset
    assert main(["replay", str(zero_run / "summary.json")]) == EXIT_REPLAY


def test_replay_detects_missing_artifact(zero_run):
    (zero_run / "trajectory.csv").unlink()
    assert main(["replay", str(zero_run / "summary.json")]) == EXIT_REPLAY


def test_replay_rejects_tampered_config(zero_run):
    path = zero_run / "summary.json"
    summary = json.loads(path.read_text())
    summary["config"]["seed"] = 8
    path.write_text(json.dumps(summary))
    assert main(["replay", str(path)]) == EXIT_CONFIG


def test_replay_with_other_thread_count_passes(tmp_path, write_config):
    out = tmp_path / "linear"
    path = write_config(_linear_simulate())
    assert main(["simulate", "--config", str(path), "--out", str(out), "--threads", "1"]) == EXIT_OK
    assert main(["replay", str(out / "summary.json"), "--threads", "3"]) == EXIT_OK
    assert replay(out / "summary.json", threads=2) == ["trajectory.csv"]


def test_first_difference():
    assert first_difference(b"abc", b"abc") is None
    assert first_difference(b"abc", b"abd") == 2
    assert first_difference(b"ab", b"abc") == 2


# --- threads -------------------------------------------------------------


def test_thread_resolution(monkeypatch):
    monkeypatch.delenv("MVSCALE_THREADS", raising=False)
    assert resolve_threads(None) == 1
    monkeypatch.setenv("MVSCALE_THREADS", "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
    monkeypatch.setenv("MVSCALE_THREADS", "many")
    with pytest.raises(ConfigError):
        resolve_threads(None)
    with pytest.raises(ConfigError):
        resolve_threads(0)


# --- other experiment kinds ----------------------------------------------


def test_frozen_invariant_experiment(tmp_path):
    config = ExperimentConfig.model_validate(
        {
            "experiment": "frozen-invariant",
            "model": {"name": "linear"},
            "sim": {"dt_macro": 0.1, "horizon": 1.0, "n_particles": 10},
            "invariant": {"n_particles": 400, "tol": 0.15, "ergodicity_horizon": 3.0},
            "seed": 2,
        }
    )
    summary = ExperimentRunner(config, tmp_path).run()
    assert summary.headline["converged"]
    assert summary.headline["invariant_m2"] == pytest.approx(1.0, abs=0.25)
    assert 0.7 <= summary.headline["ergodicity_rate"] <= 1.3
    assert len(_read_csv(tmp_path / "invariant.csv")) == 400
    assert set(summary.artifacts) == {"invariant.csv", "ergodicity.csv"}


def test_ldp_rate_experiment_matches_closed_forms(tmp_path, load_example):
    config = ExperimentConfig.model_validate(load_example("linear_ldp.json"))
    summary = ExperimentRunner(config, tmp_path).run()
    headline = summary.headline
    assert headline["averaged_path_rate"] <= 1e-8
    for value, exact in zip(headline["rates"], headline["closed_forms"]):
        assert value == pytest.approx(exact, rel=1e-2)
    rows = _read_csv(tmp_path / "rate.csv")
    assert [row["kind"] for row in rows] == ["sine", "sine", "power"]
    assert "exit_rate.csv" not in summary.artifacts


def test_controlled_run_experiment(tmp_path):
    config = ExperimentConfig.model_validate(
        {
            "experiment": "controlled-run",
            "model": {"name": "linear"},
            "time_scales": {"epsilon": 0.1, "delta": 5e-4, "separation": 0.1},
            "sim": {"dt_macro": 0.01, "horizon": 0.2, "n_particles": 20},
            "invariant": {"n_particles": 300, "tol": 0.2},
            "control": {"value": [0.5, 0.0], "thinning": 2, "histogram_bins": 8},
            "seed": 4,
        }
    )
    summary = ExperimentRunner(config, tmp_path).run()
    headline = summary.headline
    assert headline["total_mass"] == pytest.approx(0.2)
    assert headline["time_mass_error"] <= 2 * 0.01
    assert headline["control_energy"] == pytest.approx(0.5 * 0.25 * 0.3)
    assert set(summary.artifacts) == {"trajectory.csv", "occupation_time.csv", "occupation_h.csv", "occupation_y.csv"}
    atoms = _read_csv(tmp_path / "occupation_h.csv")
    assert len(atoms) == 1 and float(atoms[0]["mass"]) == pytest.approx(1.0)


def test_controlled_run_checks_scale_regime(tmp_path):
    config = ExperimentConfig.model_validate(
        {
            "experiment": "controlled-run",
            "model": {"name": "linear"},
            "time_scales": {"epsilon": 0.1, "delta": 0.05},
        }
    )
    with pytest.raises(ConfigError):
        ExperimentRunner(config, tmp_path)


def test_probe_experiment(tmp_path):
    config = ExperimentConfig.model_validate(
        {"experiment": "probe", "model": {"name": "linear"}, "probe": {"n_samples": 64}, "seed": 5}
    )
    summary = ExperimentRunner(config, tmp_path).run()
    report = json.loads((tmp_path / "probe.json").read_text())
    assert report["n_samples"] == 64
    assert report["violations"]["monotonicity"] == 0
    assert summary.headline["issues"]


def _default_cbo(**sim):
    payload = {
        "experiment": "cbo-optimize",
        "model": {"name": "cbo"},
        "time_scales": {"epsilon": 0.1, "delta": 0.01},
        "sim": {"dt_macro": 0.01, "horizon": 0.1, "n_particles": 500, "fast_init_scale": 3.0, "slow_init_scale": 1.0},
        "x0": [0.0],
        "seed": 3,
    }
    payload["sim"].update(sim)
    return payload


def test_cbo_defaults_to_tamed_drifts(tmp_path):
    config = ExperimentConfig.model_validate(_default_cbo())
    summary = ExperimentRunner(config, tmp_path).run()
    assert summary.tolerances["taming"] == "drift_tamed"
    for m_ell, m_h in summary.headline["terminal_consensus"]:
        assert math.isfinite(m_ell[0]) and math.isfinite(m_h[0])
    rows = _read_csv(tmp_path / "trajectory.csv")
    assert all(math.isfinite(float(row["m2_y"])) for row in rows)


def test_untamed_cbo_blow_up_exits_3(tmp_path, write_config):
    # wide fast start: the explicit step of the cubic potential overshoots and diverges
    out = tmp_path / "cbo"
    path = write_config(_default_cbo(taming="none"))
    assert main(["cbo-optimize", "--config", str(path), "--out", str(out)]) == EXIT_NUMERICAL
    assert not (out / "summary.json").exists()


def _exit_check(**overrides):
    payload = {
        "experiment": "ldp-rate",
        "model": {"name": "linear", "c": 0.0},
        "time_scales": {"epsilon": 0.1, "delta": 1e-4},
        "sim": {"dt_macro": 0.01, "horizon": 1.0, "n_particles": 10},
        "ldp": {"exit": {"epsilons": [0.05], "radii": [0.5]}},
    }
    payload.update(overrides)
    return payload


@pytest.mark.parametrize(
    "payload",
    [
        # delta / (eps * separation) = 1 in the eps = 0.001 cell
        _exit_check(ldp={"exit": {"epsilons": [0.05, 0.001], "radii": [0.5, 0.5]}}),
        _exit_check(time_scales={"epsilon": 0.1, "delta": 0.5}, ldp={"exit": {"epsilons": [0.1], "radii": [0.5]}}),
        # the quasi-potential comparison needs a decoupled slow drift
        _exit_check(model={"name": "linear"}),
    ],
)
def test_exit_rate_check_validates_its_cells(tmp_path, write_config, payload):
    out = tmp_path / "exit"
    assert main(["ldp-rate", "--config", str(write_config(payload)), "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()


def test_rate_report_columns(tmp_path):
    config = ExperimentConfig.model_validate(
        {
            "experiment": "averaging-rate",
            "model": {"name": "linear"},
            "sim": {"dt_macro": 0.1, "horizon": 0.2, "n_particles": 2, "n_reps": 2},
            "invariant": {"n_particles": 200, "tol": 0.3},
            "sweep": {"epsilons": [0.1, 0.2, 0.3, 0.4], "n_boot": 10},
            "x0": [1.0],
            "seed": 6,
        }
    )
    ExperimentRunner(config, tmp_path).run()
    rows = _read_csv(tmp_path / "rate_report.csv")
    assert list(rows[0]) == ["epsilon", "delta", "estimate", "std_error"]
    assert [float(row["epsilon"]) for row in rows] == [0.1, 0.2, 0.3, 0.4]
    assert float(rows[0]["delta"]) == pytest.approx(1e-3)


@pytest.mark.slow
def test_cbo_optimize_finds_bilevel_minimiser(tmp_path, load_example):
    config = ExperimentConfig.model_validate(load_example("cbo.json"))
    hits = 0
    for seed in range(10):
        summary = ExperimentRunner(config.with_seed(seed), tmp_path / str(seed), threads=2).run()
        [(m_ell, m_h)] = summary.headline["terminal_consensus"]
        hits += abs(m_ell[0] - 2.0) <= 0.1 and abs(m_h[0] - 1.0) <= 0.1
    assert hits >= 9


@pytest.mark.slow
def test_cbo_optimize_run_replays(tmp_path, write_config, load_example):
    out = tmp_path / "cbo"
    path = write_config(load_example("cbo.json"))
    assert main(["cbo-optimize", "--config", str(path), "--out", str(out), "--threads", "2"]) == EXIT_OK
    assert main(["replay", str(out / "summary.json")]) == EXIT_OK
