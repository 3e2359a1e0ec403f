"""
Command-line tests: reports, manifests and exit codes
"""

import io
import json
import math
import sys

import pytest
from click.testing import CliRunner

# Fix encoding for Windows
if sys.platform == "win32":
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8')

from simdim import __version__
from simdim.cli import main
from simdim.config import CONFIG_DIR

POINT_FAST = """
name = "point-fast"
dimension = 1

[[atoms]]
rho = 0.5
b = 0.0

[decomposition]
K = 2
n_blocks = 2
seeds = 2
resamples = 200
bootstrap = 20
taylor_trials = 20
samples = 2000
"""

HALF_FAST = """
name = "half-fast"
dimension = 1
exact = "rational"

[[atoms]]
rho = "1/2"
b = 1

[[atoms]]
rho = "1/2"
b = -1

[enumeration]
n_max = 6

[sampling]
count = 50000
depth = 30

[ladder]
r_min = 0.015625
r_max = 0.25
"""


def _write(tmp_path, name, text):
    path = tmp_path / f"{name}.toml"
    path.write_text(text, encoding="utf-8")
    return path


def _run(args, env=None):
    return CliRunner().invoke(main, args, env=env)


def test_version_and_help():
    """--version prints the package version"""
    result = _run(["--version"])
    assert result.exit_code == 0
    assert __version__ in result.output
    assert "analyze" in _run(["--help"]).output

    print("✓ Version and help passed")


def test_analyze_cantor_exact_invariants(tmp_path):
    """chi = -log 3, H/n = log 2, Delta_3 = M_3 = 2/9 in rational mode"""
    out = tmp_path / "cantor"
    result = _run(["analyze", "--config", str(CONFIG_DIR / "cantor.toml"), "--out", str(out)])
    assert result.exit_code == 0, result.output

    report = json.loads((out / "analyze.json").read_text(encoding="utf-8"))
    profile = report["profile"]
    assert profile["lyapunov"] == pytest.approx(-math.log(3), abs=1e-12)
    assert all(abs(h - math.log(2)) <= 1e-12 for h in profile["entropy_upper"])
    assert len(profile["entropy_upper"]) == 10
    third = report["generations"][2]
    assert third["delta_exact"] == "2/9" and third["m_exact"] == "2/9"
    assert report["predicted_dimension"] == pytest.approx(math.log(2) / math.log(3), abs=1e-9)
    assert report["complete"]

    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "analyze"
    assert len(manifest["config_sha256"]) == 64
    assert "analyze.json" in manifest["files"] and "generations.csv" in manifest["files"]
    assert (out / "summary.md").exists()

    print("✓ Cantor analysis passed")


def test_analyze_is_reproducible_across_threads(tmp_path):
    """Same config and seed give byte-identical reports for 1 and 3 threads"""
    cfg = str(CONFIG_DIR / "rotation2d.toml")
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(["analyze", "-c", cfg, "-o", str(a), "--threads", "1"]).exit_code == 0
    assert _run(["analyze", "-c", cfg, "-o", str(b), "--threads", "3"]).exit_code == 0
    for name in ("analyze.json", "generations.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()

    print("✓ Reproducibility passed")


def test_analyze_point_and_golden(tmp_path):
    """Single atom has zero entropy; the golden system drops below log 2 at n = 3"""
    out = tmp_path / "point"
    assert _run(["analyze", "-c", str(CONFIG_DIR / "point.toml"), "-o", str(out)]).exit_code == 0
    report = json.loads((out / "analyze.json").read_text(encoding="utf-8"))
    assert report["profile"]["h_hat"] == 0.0
    assert report["predicted_dimension"] == 0.0

    out = tmp_path / "golden"
    assert _run(["analyze", "-c", str(CONFIG_DIR / "golden.toml"), "-o", str(out)]).exit_code == 0
    report = json.loads((out / "analyze.json").read_text(encoding="utf-8"))
    rates = report["profile"]["entropy_upper"]
    assert rates[1] == pytest.approx(math.log(2), abs=1e-12)
    assert rates[2] < math.log(2) - 1e-3
    assert report["generations"][2]["support_size"] == 7

    print("✓ Point and golden analysis passed")


def test_analyze_budget_writes_partial_results(tmp_path):
    """A budget too small for n = 4 exits 3 with n <= 3 on disk"""
    out = tmp_path / "budget"
    result = _run(["analyze", "-c", str(CONFIG_DIR / "cantor.toml"), "-o", str(out), "--budget", "10"])
    assert result.exit_code == 3
    report = json.loads((out / "analyze.json").read_text(encoding="utf-8"))
    assert not report["complete"]
    assert report["completed_n"] == 3
    assert len(report["generations"]) == 3

    print("✓ Budget handling passed")


def test_config_errors_exit_2(tmp_path):
    """Malformed TOML and missing fields both map to exit code 2"""
    bad = _write(tmp_path, "bad", "dimension = [\n")
    assert _run(["analyze", "-c", str(bad), "-o", str(tmp_path / "x")]).exit_code == 2

    missing = _write(tmp_path, "missing", "dimension = 1\n[[atoms]]\nb = 1\n")
    result = _run(["analyze", "-c", str(missing), "-o", str(tmp_path / "y")])
    assert result.exit_code == 2
    assert "atoms[0].rho" in result.output

    assert _run(["analyze", "-c", str(tmp_path / "nope.toml")]).exit_code == 2

    print("✓ Config error tests passed")


def test_verify_filter(tmp_path):
    """--filter sim_group runs only that suite"""
    out = tmp_path / "verify"
    result = _run(["verify", "--filter", "sim_group", "-o", str(out)])
    assert result.exit_code == 0, result.output
    report = json.loads((out / "verify.json").read_text(encoding="utf-8"))
    assert [s["name"] for s in report["suites"]] == ["sim_group"]
    assert report["passed"]

    assert _run(["verify", "--filter", "no_such_suite", "-o", str(out)]).exit_code == 2

    print("✓ Verify filter passed")


@pytest.mark.parametrize("value", ["not-a-number", "1e-30", "-1"])
def test_verify_bad_tolerance_fails(tmp_path, value):
    """An unusable SIMDIM_ORTHO_TOL fails the orthogonality check with exit 4"""
    out = tmp_path / "verify"
    result = _run(["verify", "-f", "sim_group", "-o", str(out)], env={"SIMDIM_ORTHO_TOL": value})
    assert result.exit_code == 4
    report = json.loads((out / "verify.json").read_text(encoding="utf-8"))
    failed = [c["name"] for c in report["suites"][0]["checks"] if not c["passed"]]
    assert failed == ["orthogonality of long products"]

    print("✓ Bad tolerance detection passed")


def test_decompose_degenerate_system(tmp_path):
    """Deterministic system: every floor is zero, warning, exit 0"""
    cfg = _write(tmp_path, "point", POINT_FAST)
    out = tmp_path / "decompose"
    result = _run(["decompose", "-c", str(cfg), "-o", str(out)])
    assert result.exit_code == 0, result.output
    assert "Degenerate" in result.output

    report = json.loads((out / "decompose.json").read_text(encoding="utf-8"))
    assert report["degenerate"]
    assert all(run["variance_sum"]["total"] <= 1e-10 for run in report["decompositions"])
    assert not report["gaussian"]["verdict"]
    for name in ("decomposition.jsonl", "variance_sums.csv", "gaussian_frontier.csv", "manifest.json"):
        assert (out / name).exists()

    print("✓ Degenerate decomposition passed")


def test_decompose_infeasible_plan(tmp_path):
    """Blocks shorter than K fail in the build stage with a nonzero exit"""
    cfg = _write(tmp_path, "bad_plan", POINT_FAST.replace("K = 2", "K = 4\nf_len = 2\nh_len = 2"))
    result = _run(["decompose", "-c", str(cfg), "-o", str(tmp_path / "d")])
    assert result.exit_code == 1
    assert "stage 'build'" in result.output

    print("✓ Infeasible plan passed")


def test_dimension_uniform(tmp_path):
    """x/2 +- 1 has dimension 1 and the verdict agrees with the prediction"""
    cfg = _write(tmp_path, "half", HALF_FAST)
    out = tmp_path / "dimension"
    result = _run(["dimension", "-c", str(cfg), "-o", str(out), "--seed", "3"])
    assert result.exit_code == 0, result.output

    report = json.loads((out / "dimension.json").read_text(encoding="utf-8"))
    assert report["estimate"]["slope"] == pytest.approx(1.0, abs=0.05)
    assert report["estimate"]["predicted"] == pytest.approx(1.0)
    assert report["estimate"]["verdict"] == "consistent"
    lines = (out / "scale_ladder.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "r,H,stderr" and len(lines) >= 5
    assert (out / "scale_ladder.dat").read_text(encoding="utf-8").startswith("# slope")

    print("✓ Uniform dimension passed")


if __name__ == "__main__":
    print("Running CLI tests...\n")
    test_version_and_help()
    print("\n✅ All CLI tests passed!")
