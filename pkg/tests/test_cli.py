import json

import pytest

from cli.runner import main, run
from core.io import read_csv


SMALL_A = {
    "schema": "collapselab/1",
    "model": {"family": "A", "n": 2, "m": 1, "polarization": [1],
              "grid": {"base": [8, 8], "fiber": [8, 8]}},
    "t": 0.2,
    "t_schedule": [0.2, 0.1, 0.05],
}

VERIFY_A = dict(
    SMALL_A,
    model={"family": "A", "n": 2, "m": 1, "polarization": [1], "grid": {"base": [16, 16], "fiber": [8, 8]}},
    t_schedule=[0.1, 0.05, 0.025],
    gh={"radius_fraction": 0.8},
)


@pytest.fixture(autouse=True)
def no_env_out(monkeypatch):
    monkeypatch.delenv("COLLAPSELAB_OUT", raising=False)


def write_config(path, data):
    with open(path, "w") as f:
        json.dump(data, f)
    return path


def load_manifest(out_dir):
    with open(out_dir / "manifest.json") as f:
        return json.load(f)


def test_invalid_time_exits_with_validation_code(tmp_path):
    config = write_config(tmp_path / "bad.json", dict(SMALL_A, t=0.0))
    assert run("solve", config, str(tmp_path / "out")) == 1


def test_missing_config_file(tmp_path):
    assert run("solve", tmp_path / "nope.json", str(tmp_path / "out")) == 1


def test_serial_pins_blas_threads():
    from main import BLAS_THREAD_VARS, pin_threads

    env = pin_threads(["verify", "--serial"], {"OMP_NUM_THREADS": "8"})
    assert all(env[name] == "1" for name in BLAS_THREAD_VARS)
    assert pin_threads(["verify", "--threads", "4"], {}) == {}


def test_threads_must_be_positive():
    assert main(["mirror", "--threads", "0"]) == 1


def test_mirror_bundled_scenario(tmp_path):
    out = tmp_path / "mirror"
    assert run("mirror", "mirror_uu", str(out), serial=True) == 0
    for name in ("mirror_period.csv", "mirror_checks.csv", "lcs_path.csv", "config.json"):
        assert (out / name).exists()
    manifest = load_manifest(out)
    assert manifest["status"] == "ok"
    assert manifest["exit_code"] == 0
    assert manifest["failure_stage"] is None
    _, columns, rows = read_csv(out / "lcs_path.csv")
    assert len(rows) == 16
    assert columns[-1] == "affine_defect"
    checks = dict(read_csv(out / "mirror_checks.csv")[2])
    assert float(checks["random_samples"]) == 4000
    assert float(checks["exact_identity_failures"]) == 0
    assert float(checks["random_norm_identity_max"]) <= 1e-10

    again = tmp_path / "again"
    assert run("mirror", "mirror_uu", str(again), serial=True) == 0
    assert load_manifest(again)["outputs"] == manifest["outputs"]


def test_env_out_takes_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("COLLAPSELAB_OUT", str(tmp_path / "env"))
    assert run("mirror", "mirror_uu", str(tmp_path / "flag"), serial=True) == 0
    assert (tmp_path / "env" / "manifest.json").exists()
    assert not (tmp_path / "flag").exists()


def test_solve_writes_dumps(tmp_path):
    config = write_config(tmp_path / "a.json", SMALL_A)
    out = tmp_path / "solve"
    assert main(["solve", "--config", str(config), "--out", str(out), "--serial"]) == 0
    for stem in ("phi", "omega_tilde"):
        assert (out / f"{stem}.bin").exists()
        assert (out / f"{stem}.json").exists()
    manifest = load_manifest(out)
    names = {entry["path"] for entry in manifest["outputs"]}
    assert {"phi.bin", "omega_tilde.bin", "solve_log.csv"} <= names
    begun = [s["stage"] for s in manifest["stages"] if s["status"] == "begin"]
    assert begun == ["build_model", "build_problem", "solve", "write"]


@pytest.mark.slow
def test_verify_family_a(tmp_path):
    config = write_config(tmp_path / "a.json", VERIFY_A)
    out = tmp_path / "verify"
    assert run("verify", config, str(out), serial=True) == 0
    _, columns, rows = read_csv(out / "verify_summary.csv")
    assert columns == ["name", "passed", "detail"]
    assert all(row[1] == "1" for row in rows)
    names = {row[0] for row in rows}
    assert {"volume_ratio_matches_prediction", "distortion_near_stencil_floor", "continuation_complete",
            "random_norm_identity", "exact_identities_hold", "semiflat_xi_fiber_constant",
            "flat_constant_is_one_plus_t", "ddbar_spectral_mode", "projection_distortion_decreasing"} <= names


def test_gh_reference_radius_follows_radius_fraction():
    from cli.runner import GH_COLUMNS, gh_experiment
    from core.config import ScenarioConfig
    from core.ma_solver import continuation
    from core.model import family_a

    config = ScenarioConfig(data={"gh": {"radius_fraction": 0.6, "volume_radii": [0.5]}})
    results = continuation(family_a((8, 8), (8, 8)), [0.1])
    data = gh_experiment(config, results)
    # unit base chart: half-width 0.5, so r_bar = 0.3 and r = 0.15
    (t, r, r_bar, got, want, error), = data["volume_rows"]
    assert (t, r, r_bar) == pytest.approx((0.1, 0.15, 0.3))
    assert 0.0 < got < 1.0 and 0.0 < want < 1.0
    row = dict(zip(GH_COLUMNS, data["rows"][0]))
    assert row["projection_distortion"] >= row["distortion"]
    assert row["diameter_x_lower"] <= row["diameter_x_upper"]
