"""CLI behavior: exit codes, help screens, and stage composition via files."""

import json

import numpy as np
import pytest

from metaborrow.cli import main
from metaborrow.data import (ArmSummary, SubjectRecord, TrialSummary,
                             make_dataset, read_subjects, write_subjects,
                             write_summaries)

SUBCOMMANDS = ("meta", "reconstruct", "weights", "estimate", "simulate",
               "case-study", "pipeline")


def summaries_csv(tmp_path, x_means=(-1.0, 0.0, 1.0)):
    rng = np.random.default_rng(42)
    trials = []
    for i, mu in enumerate(x_means):
        tid = f"trial{i + 1}"
        arms = tuple(ArmSummary(
            tid, arm_val, 40 + 5 * i,
            y_mean=1.0 + 2.0 * arm_val - mu + rng.normal(0, 0.1),
            y_var=2.0 + 0.1 * i,
            x_mean=(mu,), x_var=(1.0,), x_family=("continuous",),
        ) for arm_val in (1, 0))
        trials.append(TrialSummary(tid, arms))
    path = tmp_path / "summaries.csv"
    write_summaries(trials, path)
    return str(path)


def target_csv(tmp_path):
    rng = np.random.default_rng(99)
    subs = []
    for i in range(40):
        z = i % 2
        x = float(rng.normal())
        y = 1.0 + 2.0 * z - x + float(rng.normal())
        subs.append(SubjectRecord("tgt", z, y, (x,), 1.0, "target"))
    path = tmp_path / "target.csv"
    write_subjects(make_dataset(subs, target_id="tgt"), path, include_weight=False)
    return str(path)


def run_ok(capsys, argv):
    assert main(argv) == 0
    return capsys.readouterr().out


def run_fail(capsys, argv):
    with pytest.raises(SystemExit) as exc_info:
        main(argv)
    captured = capsys.readouterr()
    return exc_info.value.code, captured.err


def test_help_screens(capsys):
    for args in ([], *([cmd] for cmd in SUBCOMMANDS)):
        assert main([*args, "--help"]) == 0
        assert "Usage:" in capsys.readouterr().out


def test_no_args_shows_usage(capsys):
    with pytest.raises(SystemExit) as exc_info:
        main([])
    out = capsys.readouterr()
    assert exc_info.value.code in (0, 2)
    assert "Usage:" in out.out + out.err


def test_unknown_option_is_usage_error(capsys):
    code, err = run_fail(capsys, ["meta", "--nonsense"])
    assert code == 2
    assert "nonsense" in err.lower() or "no such option" in err.lower()


def test_missing_input_file_is_usage_error(tmp_path, capsys):
    code, err = run_fail(capsys, ["meta", "--summaries", str(tmp_path / "no.csv")])
    assert code == 2
    assert "does not exist" in err


def test_config_errors_exit_2(tmp_path, capsys):
    spath = summaries_csv(tmp_path)
    code, err = run_fail(capsys, ["simulate", "--reps", "2"])
    assert code == 2 and "error: a seed is required" in err
    code, err = run_fail(capsys, ["reconstruct", "--summaries", spath,
                                  "--seed", "1"])
    assert code == 2 and "output path is required" in err
    code, err = run_fail(capsys, ["case-study", "--scenario", "bogus"])
    assert code == 2  # click Choice rejects it before the command runs


def test_data_error_exits_3(tmp_path, capsys):
    spath = summaries_csv(tmp_path)
    lines = (tmp_path / "summaries.csv").read_text().splitlines()
    dup = tmp_path / "dup.csv"
    dup.write_text("\n".join(lines + [lines[1]]) + "\n")
    code, err = run_fail(capsys, ["meta", "--summaries", str(dup)])
    assert code == 3
    assert "duplicate" in err


def test_numerical_error_exits_4(tmp_path, capsys):
    # one covariate mean shared by every arm: collinear with the intercept
    spath = summaries_csv(tmp_path, x_means=(0.5, 0.5, 0.5))
    code, err = run_fail(capsys, ["meta", "--summaries", spath])
    assert code == 4
    assert "x1_mean" in err


def test_stage_composition(tmp_path, capsys):
    spath = summaries_csv(tmp_path)
    tpath = target_csv(tmp_path)
    fit_json = str(tmp_path / "fit.json")
    recon_csv = str(tmp_path / "recon.csv")
    pooled_csv = str(tmp_path / "pooled.csv")
    weighted_csv = str(tmp_path / "weighted.csv")
    est_json = str(tmp_path / "est.json")

    out = run_ok(capsys, ["meta", "--summaries", spath, "--out", fit_json])
    assert "rows: 6" in out and "tau2:" in out
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert fit["columns"] == ["intercept", "arm", "x1_mean"]

    out = run_ok(capsys, ["reconstruct", "--summaries", spath,
                          "--meta-fit", fit_json, "--seed", "11",
                          "--out", recon_csv])
    assert "reconstructed 270 subjects from 3 trials" in out

    recon = read_subjects(recon_csv)
    target = read_subjects(tpath)
    assert {s.source for s in recon.subjects} == {"reconstructed"}
    write_subjects(make_dataset(recon.subjects + target.subjects), pooled_csv)

    out = run_ok(capsys, ["weights", "--subjects", pooled_csv,
                          "--out", weighted_csv])
    assert "converged=True" in out
    assert "weights: mean 1.000000" in out

    out = run_ok(capsys, ["estimate", "--subjects", weighted_csv,
                          "--estimator", "both", "--out", est_json])
    assert "regression (w4): z =" in out
    assert "univariate: delta =" in out
    payload = json.loads((tmp_path / "est.json").read_text())
    assert set(payload) == {"regression", "univariate"}
    # borrowing 270 reconstructed subjects should land near the true effect 2
    assert abs(payload["regression"]["contrast_z"]["estimate"] - 2.0) < 1.0


def test_group_seed_and_out_fallbacks(tmp_path, capsys):
    spath = summaries_csv(tmp_path)
    recon_csv = tmp_path / "recon.csv"
    run_ok(capsys, ["--seed", "11", "--out", str(recon_csv),
                    "reconstruct", "--summaries", spath])
    assert recon_csv.exists()
    # explicit subcommand seed wins over the group default
    other = tmp_path / "other.csv"
    run_ok(capsys, ["--seed", "99", "reconstruct", "--summaries", spath,
                    "--seed", "11", "--out", str(other)])
    assert other.read_text() == recon_csv.read_text()


def test_simulate_cell_and_from_label(tmp_path, capsys):
    csv1 = tmp_path / "cell.csv"
    out = run_ok(capsys, ["simulate", "--K", "5", "--n", "20", "--reps", "4",
                          "--seed", "123", "--out", str(csv1)])
    label = next(line.split()[1] for line in out.splitlines()
                 if line.startswith("cell "))
    assert label == "K5-n20-normal-one_to_one-identified-both_arms-reps4-seed123-w3"
    assert "pooled_regression" in out and "target_regression" in out

    csv2 = tmp_path / "again.csv"
    run_ok(capsys, ["simulate", "--from-label", label, "--out", str(csv2)])
    assert csv1.read_text() == csv2.read_text()


def test_case_study_meta_and_nc_rows(tmp_path, capsys):
    out = run_ok(capsys, ["case-study", "--scenario", "meta"])
    assert "meta stage: 8 arm rows" in out
    assert "arm:x1_mean" not in out  # case-study design is main-effects only

    out_json = tmp_path / "cs.json"
    out = run_ok(capsys, ["case-study", "--scenario", "single_arm",
                          "--out", str(out_json)])
    assert "single_arm" in out and "NC" in out
    payload = json.loads(out_json.read_text())
    assert payload["seed"] == 40
    assert payload["scenarios"][0]["estimate"] == "NC"


def test_pipeline_command_with_config_file(tmp_path, capsys):
    spath = summaries_csv(tmp_path)
    tpath = target_csv(tmp_path)
    cfg = {"summaries": spath, "target": tpath, "seed": 7,
           "out": str(tmp_path / "run"), "meat": "w4"}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    out = run_ok(capsys, ["pipeline", "--config", str(cfg_path),
                          "--meat", "w3"])
    assert "z contrast:" in out
    assert (tmp_path / "run" / "summary.txt").exists()
    est = json.loads((tmp_path / "run" / "estimate.json").read_text())
    assert est["meat"] == "w3"  # the flag overrides the config file
