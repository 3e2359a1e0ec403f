"""
Measure invariant tests
"""

import io
import math
import sys

import numpy as np
import pytest

# Fix encoding for Windows
if sys.platform == "win32":
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8')

from simdim.measure_core import (
    FiniteMeasure,
    IrreducibilityVerdict,
    attractor_radius_bound,
    common_fixed_point,
    is_contracting,
    is_contracting_on_average,
    is_irreducible,
    lyapunov_exponent,
    profile_measure,
    rho_bound_R,
    upper_dimension_bound,
    _invariance_defect,
)
from simdim.sim_group import SimElement, rotation_2d, rotation_from_angles


def line(rho, b, sign=1.0):
    return SimElement(rho, [[sign]], [b])


def test_lyapunov_examples():
    """chi on closed-form measures"""
    mu = FiniteMeasure.uniform([line(1.0, 0.0), line(1.0, 1.0)])
    assert lyapunov_exponent(mu) == 0.0

    mu = FiniteMeasure.uniform([line(1 / 3, 1.0), line(1 / 3, -1.0)])
    assert lyapunov_exponent(mu) == pytest.approx(-math.log(3), abs=1e-12)

    mu = FiniteMeasure([line(2.0, 0.0), line(0.25, 1.0)], [1 / 3, 2 / 3])
    assert lyapunov_exponent(mu) == pytest.approx(-math.log(2), abs=1e-12)
    assert is_contracting_on_average(mu)
    assert not is_contracting(mu)

    assert is_contracting_on_average(FiniteMeasure.uniform([line(0.5, 0.0)]))
    assert not is_contracting_on_average(FiniteMeasure.uniform([line(2.0, 0.0)]))

    print("✓ Lyapunov exponent tests passed")


def test_lyapunov_affine_in_weights():
    """chi of a mixture is the mixture of chi's"""
    rng = np.random.default_rng(0)
    atoms = [line(r, b) for r, b in zip(rng.uniform(0.1, 2.0, 4), rng.normal(size=4))]
    for _ in range(20):
        w1 = rng.dirichlet(np.ones(4))
        w2 = rng.dirichlet(np.ones(4))
        t = rng.uniform()
        mix = FiniteMeasure(atoms, t * w1 + (1 - t) * w2)
        expected = t * lyapunov_exponent(FiniteMeasure(atoms, w1)) + (1 - t) * lyapunov_exponent(FiniteMeasure(atoms, w2))
        assert lyapunov_exponent(mix) == pytest.approx(expected, abs=1e-12)

    print("✓ Affine-in-weights tests passed")


def test_measure_validation():
    """Weights must sum to one and atoms must be distinct"""
    with pytest.raises(ValueError):
        FiniteMeasure([line(0.5, 0.0)], [0.9])
    with pytest.raises(ValueError):
        FiniteMeasure.uniform([line(0.5, 0.0), line(0.5, 0.0)])

    print("✓ Measure validation tests passed")


def test_common_fixed_point():
    """Fixed points of single atoms and of families"""
    x = common_fixed_point(FiniteMeasure.uniform([line(0.5, 0.0)]))
    assert x is not None and x[0] == pytest.approx(0.0)

    assert common_fixed_point(FiniteMeasure.uniform([line(1 / 3, 1.0), line(1 / 3, -1.0)])) is None

    x = common_fixed_point(FiniteMeasure.uniform([line(0.5, 1.0), line(0.25, 1.5)]))
    assert x is not None and x[0] == pytest.approx(2.0)

    # a pure translation has no fixed point at all
    assert common_fixed_point(FiniteMeasure.uniform([line(1.0, 1.0), line(0.5, 0.0)])) is None

    print("✓ Fixed point tests passed")


def test_irreducibility():
    """d=1 trivially irreducible; identity rotations reducible; generic rotation irreducible"""
    mu = FiniteMeasure.uniform([line(1 / 3, 1.0), line(1 / 3, -1.0)])
    assert is_irreducible(mu).verdict == IrreducibilityVerdict.IRREDUCIBLE

    mu = FiniteMeasure.uniform([
        SimElement(0.5, np.eye(2), [1.0, 0.0]),
        SimElement(0.5, np.eye(2), [0.0, 1.0]),
    ])
    result = is_irreducible(mu)
    assert result.verdict == IrreducibilityVerdict.REDUCIBLE
    assert result.witness.shape == (2, 1)
    assert _invariance_defect(result.witness, [a.rot for a in mu.atoms]) <= 1e-8

    mu = FiniteMeasure.uniform([SimElement(0.5, rotation_2d(2 * math.pi * 0.34), [1.0, 0.0])])
    assert is_irreducible(mu).verdict == IrreducibilityVerdict.IRREDUCIBLE

    print("✓ Irreducibility tests passed")


def test_irreducibility_finds_rotation_axis():
    """Rotations about a common axis in d=3 leave that axis invariant"""
    mu = FiniteMeasure.uniform([
        SimElement(0.5, rotation_from_angles(3, [0.0, 0.0, 0.7]), [1.0, 0.0, 0.0]),
        SimElement(0.4, rotation_from_angles(3, [0.0, 0.0, -1.9]), [0.0, 1.0, 0.0]),
    ])
    result = is_irreducible(mu)
    assert result.verdict == IrreducibilityVerdict.REDUCIBLE
    assert _invariance_defect(result.witness, [a.rot for a in mu.atoms]) <= 1e-8

    mu = FiniteMeasure.uniform([
        SimElement(0.5, rotation_from_angles(3, [0.0, 0.0, 0.7]), [1.0, 0.0, 0.0]),
        SimElement(0.4, rotation_from_angles(3, [0.9, 0.0, 0.0]), [0.0, 1.0, 0.0]),
    ])
    assert is_irreducible(mu).verdict == IrreducibilityVerdict.IRREDUCIBLE

    print("✓ Axis detection tests passed")


def test_attractor_radius_bound():
    """Geometric-series radius and the expanding case"""
    assert attractor_radius_bound(FiniteMeasure.uniform([line(1 / 3, 1.0), line(1 / 3, -1.0)])) == pytest.approx(1.5)
    assert attractor_radius_bound(FiniteMeasure.uniform([line(0.5, 0.0)])) == 0.0
    assert attractor_radius_bound(FiniteMeasure([line(2.0, 0.0), line(0.25, 1.0)], [1 / 3, 2 / 3])) == math.inf

    print("✓ Attractor radius tests passed")


def test_rho_bound_and_upper_dimension():
    """R covers the rho-range; min{d, h/|chi|}"""
    mu = FiniteMeasure([line(2.0, 0.0), line(0.25, 1.0)], [1 / 3, 2 / 3])
    assert rho_bound_R(mu) == pytest.approx(4.0)
    mu = FiniteMeasure.uniform([line(1 / 3, 1.0), line(1 / 3, -1.0)])
    assert upper_dimension_bound(mu, math.log(2)) == pytest.approx(math.log(2) / math.log(3))
    mu = FiniteMeasure.uniform([line(1 / 2, 1.0), line(1 / 2, -1.0)])
    assert upper_dimension_bound(mu, math.log(2)) == pytest.approx(1.0)

    print("✓ rho-bound tests passed")


def test_profile_measure():
    """Profile carries chi, rho-range and the supplied entropy table"""
    mu = FiniteMeasure.uniform([line(1 / 3, 1.0), line(1 / 3, -1.0)])
    profile = profile_measure(mu, entropy_upper=[math.log(2)] * 3)
    assert profile.lyapunov == pytest.approx(-math.log(3))
    assert profile.rho_range == pytest.approx((1 / 3, 1 / 3))
    assert profile.h_hat == pytest.approx(math.log(2))
    assert profile.fixed_point is None
    assert profile.to_dict()["irreducible"]["verdict"] == "Irreducible"

    print("✓ Profile tests passed")


if __name__ == "__main__":
    print("Running measure tests...\n")
    test_lyapunov_examples()
    test_common_fixed_point()
    test_irreducibility()
    print("\n✅ All measure tests passed!")
