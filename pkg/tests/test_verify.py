"""
Verification suite runner and built-in system tests
"""

import io
import math
import sys

import pytest

# Fix encoding for Windows
if sys.platform == "win32":
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8')

from simdim.errors import ConfigError
from simdim.measure_core import lyapunov_exponent
from simdim.systems import BUILTIN_SYSTEMS, builtin_system
from simdim.verify import SUITES, run_suites


def test_builtin_systems():
    """Every reference system builds and contracts on average"""
    for name in BUILTIN_SYSTEMS:
        assert lyapunov_exponent(builtin_system(name)) < 0, name
    assert builtin_system("rotation2d").d == 2
    with pytest.raises(KeyError):
        builtin_system("nope")

    print("✓ Built-in systems passed")


def test_exact_suites_pass():
    """The closed-form suites pass and report every check"""
    report = run_suites(["measure_core", "semigroup_enum"], seed=0)
    assert report.passed, report.to_dict()
    names = [c.name for c in report.suites[1].checks]
    assert "golden supp(mu^3) has 7 elements" in names
    assert "Delta_3 = M_3 = 2/9 exactly" in names

    payload = report.to_dict()
    assert payload["failed"] == []
    assert "seconds" not in payload["suites"][0]

    print("✓ Exact suites passed")


def test_sim_group_suite_reads_tolerance_at_call_time(monkeypatch):
    """A tolerance set after import still reaches the orthogonality check"""
    assert run_suites(["sim_group"]).passed
    monkeypatch.setenv("SIMDIM_ORTHO_TOL", "0")
    report = run_suites(["sim_group"])
    assert not report.passed
    assert report.failed() == ["sim_group"]

    print("✓ Tolerance override passed")


def test_unknown_suite():
    """Unknown names are a config error listing what exists"""
    with pytest.raises(ConfigError, match="sim_group"):
        run_suites(["bogus"])
    assert list(SUITES)[0] == "sim_group"

    print("✓ Unknown suite passed")


if __name__ == "__main__":
    print("Running verification tests...\n")
    test_builtin_systems()
    test_exact_suites_pass()
    test_unknown_suite()
    print("\n✅ All verification tests passed!")
