"""Command-line interface: config resolution, artifacts, manifests, exit codes.

Every test drives main(argv) in-process and keeps the physics tiny so the
whole file runs in seconds.  Determinism tests compare bytes, not parsed
values: the CSV writer promises shortest round-trip decimals and the
manifest promises stable key order.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from doublepass.cli import (
    ENV_OUTPUT_ROOT,
    EXIT_CONFIG,
    EXIT_NUMERICAL,
    EXIT_OK,
    main,
)
from doublepass.filters import CouplingParams, run_sse_generative
from doublepass.sde import NoiseStream

TRAJ_ARGS = ["--f", "10", "--m", "0.1", "--k", "0.1", "--omega", "2.0",
             "--dt", "1e-3", "--t-final", "0.05", "--seed", "5"]


def run_traj(out: Path, extra=()) -> int:
    return main(["trajectory", *TRAJ_ARGS, "--out", str(out), *extra])


def test_trajectory_writes_csv_and_manifest(tmp_path) -> None:
    out = tmp_path / "traj"
    assert run_traj(out) == EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == [
        "manifest.json",
        "trajectory.csv",
    ]
    lines = (out / "trajectory.csv").read_text().strip().split("\n")
    assert lines[0] == "time,pi_fz_single_pass,pi_fz_double_pass"
    assert len(lines) == 51
    first = [float(x) for x in lines[1].split(",")]
    assert first[0] == 0.0


def test_trajectory_without_measurement_or_field_stays_flat(tmp_path) -> None:
    out = tmp_path / "flat"
    code = main(
        ["trajectory", "--f", "10", "--m", "0", "--k", "0", "--omega", "0",
         "--dt", "1e-3", "--t-final", "0.05", "--out", str(out)]
    )
    assert code == EXIT_OK
    rows = (out / "trajectory.csv").read_text().strip().split("\n")[1:]
    for row in rows:
        _, single, double = (float(x) for x in row.split(","))
        # expectation sums leave ~1e-16 dust; no dynamics means no growth
        assert abs(single) < 1e-12
        assert abs(double) < 1e-12


def test_trajectory_csv_round_trips_generator_output(tmp_path) -> None:
    out = tmp_path / "traj"
    run_traj(out)
    rows = (out / "trajectory.csv").read_text().strip().split("\n")[1:]
    double = np.array([float(r.split(",")[2]) for r in rows])
    p = CouplingParams(0.1, 0.1, 1.0, 2.0)
    dW = NoiseStream(5, 0, 1e-3).increments(50)
    rec = run_sse_generative(10.0, p, dW, 1e-3)
    # repr-based cells must reproduce the computed floats exactly
    assert np.array_equal(double, rec.pi_fz)


def test_reruns_are_byte_identical(tmp_path) -> None:
    a, b = tmp_path / "a", tmp_path / "b"
    run_traj(a)
    run_traj(b)
    for name in ("trajectory.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_manifest_lists_config_and_hashes(tmp_path) -> None:
    out = tmp_path / "traj"
    run_traj(out)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "trajectory"
    assert manifest["config"]["f"] == 10.0
    assert manifest["config"]["seed"] == 5
    assert "out" not in manifest["config"]
    assert "plot" not in manifest["config"]
    assert set(manifest["artifacts"]) == {"trajectory.csv"}
    assert len(manifest["artifacts"]["trajectory.csv"]) == 64
    assert "doublepass" in manifest["versions"]


def test_verify_manifest_accepts_fresh_run(tmp_path, capsys) -> None:
    out = tmp_path / "traj"
    run_traj(out)
    assert main(["verify-manifest", str(out / "manifest.json")]) == EXIT_OK
    assert "trajectory.csv: ok" in capsys.readouterr().out


def test_verify_manifest_flags_tampered_artifact(tmp_path, capsys) -> None:
    out = tmp_path / "traj"
    run_traj(out)
    with open(out / "trajectory.csv", "a") as fh:
        fh.write("0.051,0.0,0.0\n")
    assert main(["verify-manifest", str(out / "manifest.json")]) == EXIT_NUMERICAL
    assert "MISMATCH" in capsys.readouterr().out


def test_verify_manifest_flags_missing_artifact(tmp_path) -> None:
    out = tmp_path / "traj"
    run_traj(out)
    (out / "trajectory.csv").unlink()
    assert main(["verify-manifest", str(out / "manifest.json")]) == EXIT_NUMERICAL


def test_verify_manifest_rejects_unreadable_path(tmp_path) -> None:
    assert main(["verify-manifest", str(tmp_path / "nope.json")]) == EXIT_CONFIG


def test_config_file_supplies_values(tmp_path) -> None:
    ini = tmp_path / "run.ini"
    ini.write_text(
        "[trajectory]\nf = 10\nm = 0.1\nk = 0.1\nomega = 2.0\n"
        "dt = 1e-3\nt-final = 0.05\nseed = 5\n"
    )
    out = tmp_path / "traj"
    assert main(["trajectory", "--config", str(ini), "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["f"] == 10.0
    assert manifest["config"]["seed"] == 5


def test_flags_override_config_file(tmp_path) -> None:
    ini = tmp_path / "run.ini"
    ini.write_text("[trajectory]\nf = 10\ndt = 1e-3\nt-final = 0.05\n")
    out = tmp_path / "traj"
    assert main(
        ["trajectory", "--config", str(ini), "--f", "15", "--out", str(out)]
    ) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["f"] == 15.0
    assert manifest["config"]["dt"] == 1e-3


def test_unknown_config_key_is_rejected(tmp_path, capsys) -> None:
    ini = tmp_path / "run.ini"
    ini.write_text("[trajectory]\nbogus = 1\n")
    assert main(["trajectory", "--config", str(ini)]) == EXIT_CONFIG
    assert "unknown key" in capsys.readouterr().err


def test_unknown_config_section_is_rejected(tmp_path, capsys) -> None:
    ini = tmp_path / "run.ini"
    ini.write_text("[mystery]\nf = 1\n")
    assert main(["trajectory", "--config", str(ini)]) == EXIT_CONFIG
    assert "unknown config section" in capsys.readouterr().err


def test_default_section_is_rejected(tmp_path) -> None:
    ini = tmp_path / "run.ini"
    ini.write_text("[DEFAULT]\nf = 1\n[trajectory]\ndt = 1e-3\n")
    assert main(["trajectory", "--config", str(ini)]) == EXIT_CONFIG


def test_sections_for_other_subcommands_are_ignored(tmp_path) -> None:
    # one file can configure several subcommands; only the active section applies
    ini = tmp_path / "run.ini"
    ini.write_text(
        "[trajectory]\nf = 10\ndt = 1e-3\nt-final = 0.05\n"
        "[crb-scan]\nrealizations = 2\n"
    )
    out = tmp_path / "traj"
    assert main(["trajectory", "--config", str(ini), "--out", str(out)]) == EXIT_OK


def test_bad_horizon_exits_config_code_without_files(tmp_path, capsys) -> None:
    out = tmp_path / "traj"
    code = main(
        ["trajectory", "--f", "10", "--dt", "1e-3", "--t-final", "0.0505",
         "--out", str(out)]
    )
    assert code == EXIT_CONFIG
    assert "integer multiple" in capsys.readouterr().err
    assert not out.exists()


def test_invalid_spin_size_exits_config_code(tmp_path) -> None:
    assert main(
        ["trajectory", "--f", "-3", "--dt", "1e-3", "--t-final", "0.05",
         "--out", str(tmp_path / "x")]
    ) == EXIT_CONFIG


def test_unknown_scheme_exits_config_code(tmp_path) -> None:
    assert main(
        ["trajectory", *TRAJ_ARGS, "--scheme", "bogus", "--out", str(tmp_path / "x")]
    ) == EXIT_CONFIG


def test_env_var_sets_default_output_root(tmp_path, monkeypatch) -> None:
    monkeypatch.setenv(ENV_OUTPUT_ROOT, str(tmp_path))
    assert main(["trajectory", *TRAJ_ARGS]) == EXIT_OK
    assert (tmp_path / "trajectory" / "manifest.json").is_file()


def test_compare_filters_masks_weak_signal_with_nan(tmp_path) -> None:
    out = tmp_path / "cmp"
    code = main(
        ["compare-filters", "--f", "10", "--m", "0.1", "--k", "0.1",
         "--omega", "2.0", "--dt", "1e-3", "--t-final", "0.05",
         "--seed", "5", "--out", str(out)]
    )
    assert code == EXIT_OK
    rows = (out / "error.csv").read_text().strip().split("\n")[1:]
    values = [float(r.split(",")[1]) for r in rows]
    finite = [v for v in values if not math.isnan(v)]
    # the x-polarized start leaves early samples below the mask level
    assert math.isnan(values[0])
    assert finite and all(v >= 0.0 for v in finite)
    assert main(["verify-manifest", str(out / "manifest.json")]) == EXIT_OK


def test_compare_filters_rejects_rotation_without_precession(tmp_path) -> None:
    assert main(
        ["compare-filters", "--f", "10", "--omega", "2.0", "--gamma", "0",
         "--dt", "1e-3", "--t-final", "0.05", "--out", str(tmp_path / "x")]
    ) == EXIT_CONFIG


def test_crb_scan_emits_points_reference_and_fit(tmp_path) -> None:
    out = tmp_path / "crb"
    code = main(
        ["crb-scan", "--f-values", "5,10,20", "--realizations", "2",
         "--dt", "1e-2", "--seed", "7", "--out", str(out)]
    )
    assert code == EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == [
        "fit.json", "manifest.json", "points.csv", "reference.csv",
    ]
    fit = json.loads((out / "fit.json").read_text())
    assert set(fit) == {"slope", "intercept", "r_squared"}
    rows = (out / "points.csv").read_text().strip().split("\n")
    assert rows[0] == "F,mean,std,n_ok"
    assert len(rows) == 4
    assert main(["verify-manifest", str(out / "manifest.json")]) == EXIT_OK


def test_particle_scan_emits_squeezing_table(tmp_path) -> None:
    out = tmp_path / "part"
    code = main(
        ["particle-scan", "--f-values", "50", "--realizations", "2",
         "--np", "200", "--d", "16", "--dt", "1e-3", "--b-true", "0.5",
         "--seed", "11", "--out", str(out)]
    )
    assert code == EXIT_OK
    assert (out / "xi.csv").is_file()
    rows = (out / "xi.csv").read_text().strip().split("\n")
    assert rows[0] == "F,xi_mean,xi_std,b_mean"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["results"]["scan"]["prior_D"] == [16.0]


def test_scan_abort_exits_numerical_without_files(tmp_path, capsys) -> None:
    out = tmp_path / "part"
    code = main(
        ["particle-scan", "--f-values", "50", "--realizations", "2",
         "--np", "200", "--d", "16", "--dt", "1e-2", "--b-true", "0.5",
         "--seed", "11", "--out", str(out)]
    )
    assert code == EXIT_NUMERICAL
    assert "numerical failure" in capsys.readouterr().err
    assert not out.exists()


def test_bias_scan_writes_everything_even_when_trend_fails(tmp_path) -> None:
    out = tmp_path / "bias"
    code = main(
        ["bias-scan", "--d-values", "4,16", "--f", "20", "--realizations", "2",
         "--np", "200", "--dt", "1e-3", "--seed", "3", "--out", str(out)]
    )
    manifest = json.loads((out / "manifest.json").read_text())
    assert (out / "bias.csv").is_file()
    assert (out / "posterior_0.csv").is_file()
    assert (out / "posterior_1.csv").is_file()
    fits = json.loads((out / "gauss_fit.json").read_text())
    assert [f["D"] for f in fits] == [4.0, 16.0]
    if manifest["results"]["bias_decreased"]:
        assert code == EXIT_OK
    else:
        assert code == EXIT_NUMERICAL
    # the artifacts stay reproducible either way
    assert main(["verify-manifest", str(out / "manifest.json")]) == EXIT_OK


def test_plot_flag_adds_svg_outside_manifest(tmp_path) -> None:
    out = tmp_path / "traj"
    assert run_traj(out, extra=["--plot"]) == EXIT_OK
    assert (out / "trajectory.svg").is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    assert "trajectory.svg" not in manifest["artifacts"]


def test_version_flag_reports_package_version(capsys) -> None:
    assert main(["--version"]) == EXIT_OK
    assert "doublepass" in capsys.readouterr().out


def test_missing_subcommand_is_usage_error(capsys) -> None:
    assert main([]) == EXIT_CONFIG
    capsys.readouterr()
