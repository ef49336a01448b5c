import json

import pytest

from speclk import cli
from speclk import toyfit as T

SMALL = {
    "gradcheck": ["--trials", "20", "--set", "regime_V=1000"],
    "gaussian-demo": ["--set", "n_mu=13", "--set", "n_sigma=10", "--set", "landscape_resolution=10", "--set", "grid_n=4001"],
    "capacity-exp": ["--set", "tasks=2", "--set", "epochs=20", "--set", "V=6", "--set", "C=3"],
    "specdec-sim": ["--set", "rounds=3000", "--set", "K_max=3", "--set", "exactness_instances=3"],
    "train": ["--set", "epochs=5", "--set", "heads=2"],
}


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_config_file_and_precedence(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# comment\ntrials = 7   # inline\nseed = 3\nformat=json\n")
    layers = [cli.read_config_file(conf), {"trials": "9"}]
    cfg = cli.resolve_config(cli.GradcheckConfig, *layers)
    assert (cfg.trials, cfg.seed, cfg.format) == (9, 3, "json")


def test_config_errors(tmp_path):
    with pytest.raises(cli.ConfigError):
        cli.resolve_config(cli.GradcheckConfig, {"bogus": 1})
    with pytest.raises(cli.ConfigError):
        cli.resolve_config(cli.GradcheckConfig, {"trials": "many"})
    with pytest.raises(cli.ConfigError):
        cli.resolve_config(cli.TrainRunConfig, {"mask_kl_target": "maybe"})
    bad = tmp_path / "bad.conf"
    bad.write_text("just words\n")
    assert cli.main(["gradcheck", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert cli.main(["gradcheck", "--set", "nope=1", "--out", str(tmp_path)]) == 2


def test_gradcheck_exit_codes(tmp_path):
    assert cli.main(["gradcheck", "--out", str(tmp_path / "a"), *SMALL["gradcheck"]]) == 0
    assert cli.main(["gradcheck", "--out", str(tmp_path / "b"), "--set", "tolerance=0", *SMALL["gradcheck"]]) == 1
    assert cli.main(["gradcheck", "--out", str(tmp_path / "c"), "--trials", "0", "--set", "regime_V=1000"]) == 0
    rep = json.loads((tmp_path / "c" / "gradcheck_report.json").read_text())
    assert rep["checks"] == 0 and rep["worst_case"] is None
    manifest = json.loads((tmp_path / "b" / "manifest-gradcheck.json").read_text())
    assert manifest["status"] == "fail" and manifest["config"]["tolerance"] == 0.0


def test_failure_message_names_worst_case(tmp_path, capsys):
    cli.main(["gradcheck", "--out", str(tmp_path), "--set", "tolerance=0", *SMALL["gradcheck"]])
    err = capsys.readouterr().err
    assert "gradcheck failed" in err and "trial" in err and "coordinate" in err


def test_json_format(tmp_path):
    assert cli.main(["gradcheck", "--out", str(tmp_path), "--format", "json", *SMALL["gradcheck"]]) == 0
    table = json.loads((tmp_path / "magnitudes.json").read_text())
    assert table["columns"][0] == "loss" and len(table["rows"]) == 9


@pytest.mark.parametrize("command", sorted(SMALL))
def test_rerun_from_manifest_is_byte_identical(tmp_path, command):
    out = tmp_path / "run"
    assert cli.main([command, "--out", str(out), *SMALL[command]]) == 0
    first = _files(out)
    assert cli.main([command, "--config", str(out / f"manifest-{command}.json")]) == 0
    assert _files(out) == first


def test_jobs_do_not_change_outputs(tmp_path):
    args = ["capacity-exp", *SMALL["capacity-exp"]]
    assert cli.main([*args, "--out", str(tmp_path / "serial")]) == 0
    assert cli.main([*args, "--out", str(tmp_path / "parallel"), "--jobs", "2"]) == 0
    a, b = _files(tmp_path / "serial"), _files(tmp_path / "parallel")
    a.pop("manifest-capacity-exp.json"), b.pop("manifest-capacity-exp.json")
    assert a == b


def test_capacity_single_context_reaches_full_acceptance(tmp_path):
    args = ["capacity-exp", "--out", str(tmp_path), "--set", "C=1", "--set", "V=5", "--set", "tasks=2",
            "--set", "epochs=600", "--set", "learning_rate=0.1", "--set", "early_stop_window=0",
            "--set", "concentration=1.0", "--set", "checks="]
    assert cli.main(args) == 0
    rows = (tmp_path / "capacity.csv").read_text().splitlines()[1:]
    for row in rows:
        assert float(row.split(",")[2]) > 0.97, row


def test_capacity_fixture(tmp_path, fixture_dir):
    args = ["capacity-exp", "--out", str(tmp_path), "--set", f"fixture={fixture_dir / 'task_v4_c3_seed0.json'}"]
    assert cli.main(args) == 0
    summary = json.loads((tmp_path / "capacity_summary.json").read_text())
    assert summary["checks"]["hybrid_near_optimum"] and summary["checks"]["hybrid_ge_kl_mean"]


def test_train_history_lambda_column(tmp_path):
    assert cli.main(["train", "--out", str(tmp_path / "h"), *SMALL["train"]]) == 0
    assert (tmp_path / "h" / "history.csv").read_text().startswith("epoch,head,loss,alpha,lambda,eval_alpha")
    assert cli.main(["train", "--out", str(tmp_path / "t"), "--set", "loss=tv", "--set", "epochs=5"]) == 0
    assert (tmp_path / "t" / "history.csv").read_text().startswith("epoch,head,loss,alpha,eval_alpha")


def test_specdec_from_checkpoint(tmp_path):
    assert cli.main(["train", "--out", str(tmp_path), *SMALL["train"]]) == 0
    args = ["specdec-sim", "--out", str(tmp_path), "--set", f"checkpoint={tmp_path / 'checkpoint.json'}",
            "--set", "rounds=5000", "--set", "K_max=3", "--set", "exactness_instances=0"]
    assert cli.main(args) == 0
    assert (tmp_path / "trace.jsonl").read_text().count("\n") == 50


def test_specdec_identical_models_give_full_tau(tmp_path):
    args = ["specdec-sim", "--out", str(tmp_path), "--set", "draft_mix=0", "--set", "rounds=2000",
            "--set", "K_max=4", "--set", "exactness_instances=0"]
    assert cli.main(args) == 0
    rows = [r.split(",") for r in (tmp_path / "tau.csv").read_text().splitlines()[1:]]
    for mode, K, tau, *_ in rows:
        if mode == "stochastic":
            assert float(tau) == int(K) + 1


def test_gaussian_demo_single_gaussian(tmp_path):
    args = ["gaussian-demo", "--out", str(tmp_path), "--set", "mixture=1.0:0.5:1.2", *SMALL["gaussian-demo"][:-2]]
    assert cli.main(args) == 0
    fits = json.loads((tmp_path / "fit_summary.json").read_text())["fits"]
    for f in fits.values():
        assert f["mu"] == pytest.approx(0.5, abs=1e-3) and f["sigma"] == pytest.approx(1.2, abs=1e-3)
    header = (tmp_path / "landscape_tv.csv").read_text().splitlines()[0]
    assert header == "objective,mu,sigma,loss"


def test_strict_mode_promotes_grid_warnings(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(T, "boundary_issues", lambda grid, *d: ["density too high at the edge"])
    args = ["gaussian-demo", "--out", str(tmp_path), *SMALL["gaussian-demo"]]
    assert cli.main(args) == 0
    assert "warning" in capsys.readouterr().err
    assert cli.main([*args, "--strict"]) == 1


def test_report(tmp_path):
    assert cli.main(["report", "--out", str(tmp_path)]) == 1
    cli.main(["train", "--out", str(tmp_path), *SMALL["train"]])
    assert cli.main(["report", "--out", str(tmp_path)]) == 0
    assert "[PASS] train" in (tmp_path / "report.txt").read_text()
