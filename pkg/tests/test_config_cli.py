import json
import os

import numpy as np
import pytest

from driftcal.cli import main
from driftcal.config import ConfigError, parse_config
from driftcal.runner import emit_plot_data, orchestrate, recompute_report
from driftcal.samples import load_samples


def base_config(out_dir="out", mode="integrated_delta", **extra):
    cfg = {
        "mode": mode,
        "out_dir": out_dir,
        "seed": 3,
        "synthetic": {
            "simulator": {"kind": "analytic_dipole", "amplitude": 1.0,
                          "spread_weight": 0.5, "spread_length": 8.0},
            "domain_bounds": [[5.0, 40.0]],
            "theta_priors": [
                {"kind": "uniform", "lo": 35.0, "hi": 55.0},
                {"kind": "uniform", "lo": 0.28, "hi": 0.38},
                {"kind": "uniform", "lo": 0.56, "hi": 2.88},
            ],
            "param_names": ["mu", "nu", "l_c"],
            "n_sim": 20,
            "n_obs": 5,
            "noise_sd": 0.08,
            "truth": {
                "theta0": [45.0, 0.33, 1.72],
                "drifts": [
                    {"kind": "exp_decay", "params": [-0.3, 0.2]},
                    {"kind": "exp_decay", "params": [-0.2, 0.25]},
                    {"kind": "zero", "params": []},
                ],
            },
        },
        "emulator": {"budget": 40},
        "mcmc": {"iterations": 220, "burn_in": 100, "thin": 2, "chains": 2},
        "grid_points": 21,
        "trajectories": 4,
        "predictive_draws": 60,
    }
    cfg.update(extra)
    return cfg


def test_minimal_config_fills_defaults():
    cfg = parse_config(json.dumps(base_config()))
    assert cfg.mode == "integrated_delta"
    assert cfg.mcmc.adapt_target == 0.3
    assert cfg.mcmc.seed == 3
    assert cfg.priors.noise.kind == "inverse_gamma"
    assert cfg.priors.theta is not None and len(cfg.priors.theta) == 3
    assert cfg.theta0 == (45.0, 0.33, 1.72)  # defaults to the synthetic truth


def test_burn_in_constraint_reported_with_both_fields():
    raw = base_config()
    raw["mcmc"] = {"iterations": 100, "burn_in": 100}
    with pytest.raises(ConfigError) as err:
        parse_config(json.dumps(raw))
    msg = str(err.value)
    assert "burn_in" in msg and "iterations" in msg


def test_compare_requires_koh_block():
    raw = base_config(mode="compare")
    with pytest.raises(ConfigError, match="koh"):
        parse_config(json.dumps(raw))
    raw["koh"] = {"iterations": 200, "burn_in": 80}
    cfg = parse_config(json.dumps(raw))
    assert cfg.koh_mcmc is not None
    assert cfg.koh_mcmc.seed != cfg.mcmc.seed


def test_unknown_keys_rejected_with_paths():
    raw = base_config()
    raw["mcmc"]["wrong"] = 1
    raw["typo_top"] = True
    with pytest.raises(ConfigError) as err:
        parse_config(json.dumps(raw))
    paths = [p for p, _ in err.value.errors]
    assert "mcmc.wrong" in paths
    assert "typo_top" in paths


def test_errors_are_collected_not_first_only():
    raw = base_config()
    raw["mcmc"] = {"iterations": 0, "thin": 0}
    raw["synthetic"]["noise_sd"] = -1
    with pytest.raises(ConfigError) as err:
        parse_config(json.dumps(raw))
    assert len(err.value.errors) >= 3


def test_dataset_or_synthetic_required():
    raw = {"mode": "koh", "out_dir": "x"}
    with pytest.raises(ConfigError, match="dataset"):
        parse_config(json.dumps(raw))


def test_generate_writes_budgeted_dataset(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    raw = base_config(out_dir=str(tmp_path / "run"), mode="generate")
    raw["synthetic"]["n_sim"] = 43
    cfg_path.write_text(json.dumps(raw))
    assert main(["generate", "--config", str(cfg_path)]) == 0
    lines = (tmp_path / "run" / "dataset.csv").read_text().strip().splitlines()
    records = [l for l in lines if not l.startswith("#")][1:]  # drop the column header
    assert len(records) == 48  # 43 simulator runs + 5 observations


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    raw = base_config(out_dir=str(out))
    cfg = parse_config(json.dumps(raw))
    report = orchestrate(cfg)
    return out, raw, report


def test_orchestrate_writes_declared_outputs(small_run):
    out, _raw, report = small_run
    for name in ("config_echo.json", "dataset.csv", "emulator.json", "report.json",
                 "timing.json", "predictive.csv", "predictive_obs.csv"):
        assert (out / name).exists(), name
    for name in ("drift_mu.csv", "drift_nu.csv", "drift_l_c.csv"):
        assert (out / name).exists(), name
    assert (out / "samples" / "meta.json").exists()
    assert 0.0 <= report.metrics["coverage_obs"] <= 1.0
    loaded = load_samples(out / "samples")
    assert loaded.kind == "integrated_delta"


def test_report_rmse_matches_recomputation(small_run):
    out, _raw, report = small_run
    recomputed = recompute_report(str(out))
    assert abs(recomputed["rmse_obs"] - report.metrics["rmse_obs"]) < 1e-12
    assert abs(recomputed["coverage_obs"] - report.metrics["coverage_obs"]) < 1e-12


def test_cli_report_subcommand(small_run, capsys):
    out, _raw, _report = small_run
    assert main(["report", "--out", str(out)]) == 0
    body = json.loads(capsys.readouterr().out)
    assert "rmse_obs" in body


def test_rerun_is_byte_identical(tmp_path):
    raw1 = base_config(out_dir=str(tmp_path / "a"))
    raw2 = base_config(out_dir=str(tmp_path / "b"))
    orchestrate(parse_config(json.dumps(raw1)))
    orchestrate(parse_config(json.dumps(raw2)))
    skip = {"timing.json", "config_echo.json"}  # config echo embeds out_dir
    for root, _dirs, files in os.walk(tmp_path / "a"):
        for name in files:
            if name in skip:
                continue
            a = os.path.join(root, name)
            b = a.replace(str(tmp_path / "a"), str(tmp_path / "b"), 1)
            with open(a, "rb") as fa, open(b, "rb") as fb:
                assert fa.read() == fb.read(), name


def test_emit_plot_data_guards(tmp_path):
    raw = base_config(out_dir=str(tmp_path / "r"))
    cfg = parse_config(json.dumps(raw))
    orchestrate(cfg)
    samples = load_samples(tmp_path / "r" / "samples")

    class NoDraws:
        n_draws = 0

    with pytest.raises(ValueError, match="draw"):
        emit_plot_data(NoDraws(), np.linspace(0, 1, 5), tmp_path / "e", emulator=None)

    from driftcal.gp import ExactEmulator

    emu = ExactEmulator(lambda row: 0.0)
    files = emit_plot_data(samples, np.array([0.5]), tmp_path / "one", emu, trajectories=2)
    table = np.atleast_2d(np.loadtxt(files[0], delimiter=",", comments="#"))
    assert table.shape[0] == 1  # single-row file is still valid


def test_rerun_from_echoed_config_reproduces_outputs(tmp_path):
    raw = base_config(out_dir=str(tmp_path / "first"))
    orchestrate(parse_config(json.dumps(raw)))
    echoed = json.loads((tmp_path / "first" / "config_echo.json").read_text())
    echoed["out_dir"] = str(tmp_path / "second")
    orchestrate(parse_config(json.dumps(echoed)))
    for name in ("dataset.csv", "predictive.csv", "predictive_obs.csv",
                 "samples/sigma2.csv", "samples/delta_mu.csv", "report.json"):
        a = (tmp_path / "first" / name).read_bytes()
        b = (tmp_path / "second" / name).read_bytes()
        assert a == b, name


def test_cli_fit_emulator_subcommand(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(base_config(out_dir=str(tmp_path / "run"))))
    assert main(["fit-emulator", "--config", str(cfg_path)]) == 0
    body = json.loads((tmp_path / "run" / "emulator.json").read_text())
    assert body["format"] == "driftcal-emulator v1"
    assert body["n_train"] == 20
    assert not (tmp_path / "run" / "samples").exists()  # stops before calibration


def test_cli_seed_override_changes_outputs(tmp_path):
    for seed_args, sub in ((["--seed", "3"], "a"), (["--seed", "4"], "b")):
        cfg_path = tmp_path / f"cfg_{sub}.json"
        cfg_path.write_text(json.dumps(base_config(out_dir=str(tmp_path / sub))))
        assert main(["calibrate", "--config", str(cfg_path), *seed_args]) == 0
    a = np.loadtxt(tmp_path / "a" / "sigma2.csv".replace("sigma2", "samples/sigma2"),
                   delimiter=",", comments="#")
    b = np.loadtxt(tmp_path / "b" / "samples" / "sigma2.csv", delimiter=",", comments="#")
    assert not np.array_equal(a, b)


def test_chain_thread_pool_matches_sequential(tmp_path, monkeypatch):
    raw = base_config(out_dir=str(tmp_path / "seq"))
    orchestrate(parse_config(json.dumps(raw)))
    monkeypatch.setenv("DRIFTCAL_THREADS", "2")
    raw2 = base_config(out_dir=str(tmp_path / "par"))
    orchestrate(parse_config(json.dumps(raw2)))
    a = np.loadtxt(tmp_path / "seq" / "samples" / "delta_mu.csv", delimiter=",", comments="#")
    b = np.loadtxt(tmp_path / "par" / "samples" / "delta_mu.csv", delimiter=",", comments="#")
    assert np.array_equal(a, b)


def test_compare_mode_report_keys(tmp_path):
    raw = base_config(out_dir=str(tmp_path / "cmp"), mode="compare")
    raw["koh"] = {"iterations": 220, "burn_in": 100, "thin": 2, "chains": 2}
    report = orchestrate(parse_config(json.dumps(raw)))
    for key in ("koh.rmse_obs", "integrated_delta.rmse_obs",
                "koh.rmse_obs_emulator_only", "lowx_rmse_ratio"):
        assert key in report.metrics, key
    # on the drift problem the single-theta emulator fit trails the drift-field fit
    assert (report.metrics["koh.rmse_obs_emulator_only"]
            > report.metrics["integrated_delta.rmse_obs"])
    assert (tmp_path / "cmp" / "koh" / "samples" / "meta.json").exists()
    assert (tmp_path / "cmp" / "integrated_delta" / "predictive.csv").exists()


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"mode": "nope", "out_dir": ""}))
    assert main(["calibrate", "--config", str(bad)]) == 2
    assert "configuration errors" in capsys.readouterr().err


def test_cli_missing_dataset_is_stage_error(tmp_path, capsys):
    raw = base_config(out_dir=str(tmp_path / "r"))
    del raw["synthetic"]
    raw["dataset"] = str(tmp_path / "missing.csv")
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(raw))
    assert main(["calibrate", "--config", str(cfg_path)]) == 1
    assert "[dataset]" in capsys.readouterr().err
