"""
Semigroup enumeration and separation tests
"""

import io
import math
import sys
from fractions import Fraction

import numpy as np
import pytest

# Fix encoding for Windows
if sys.platform == "win32":
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8')

from simdim.errors import AmbiguousDedup, BudgetExceeded
from simdim.exact import ExactMeasure, QuadraticNumber, exact_compose, exact_distance
from simdim.measure_core import FiniteMeasure
from simdim.semigroup_enum import (
    DedupIndex,
    brute_force_min_distance,
    delta_n,
    entropy_rate_bounds,
    enumerate_convolution,
    generation_table,
    m_n,
    separation_verdict,
    shannon_entropy,
    write_generation_csv,
)
from simdim.sim_group import SimElement, identity, rotation_2d

LAMBDA_GOLDEN = (math.sqrt(5) - 1) / 2


def bernoulli(lam, weights=(0.5, 0.5)):
    return FiniteMeasure([SimElement(lam, [[1.0]], [1.0]), SimElement(lam, [[1.0]], [-1.0])], list(weights))


def exact_bernoulli(lam):
    return ExactMeasure(rhos=(lam, lam), signs=(1, 1), trans=(lam / lam, -(lam / lam)),
                        weights=(Fraction(1, 2), Fraction(1, 2)))


def test_first_generation_is_mu():
    """n=1 returns the atoms with their weights"""
    mu = bernoulli(1 / 3, (0.25, 0.75))
    s = enumerate_convolution(mu, 1)
    assert s.size == 2
    assert np.allclose(sorted(s.probs), [0.25, 0.75])

    print("✓ First generation tests passed")


def test_free_system_counts():
    """x/3 +- 1 has 2^n distinct words"""
    mu = bernoulli(1 / 3)
    for n in range(1, 8):
        s = enumerate_convolution(mu, n)
        assert s.size == 2 ** n
        assert np.allclose(s.probs, 1 / 2 ** n)
        assert s.probs.sum() == pytest.approx(1.0, abs=1e-10 * n)
    assert shannon_entropy(enumerate_convolution(mu, 3)) == pytest.approx(3 * math.log(2))

    print("✓ Free system tests passed")


def test_golden_collision_in_floats():
    """(+,-,-) and (-,+,+) collide since 1 - l - l^2 = 0"""
    mu = bernoulli(LAMBDA_GOLDEN)
    s = enumerate_convolution(mu, 3)
    assert s.size == 7
    assert sorted(s.probs)[-1] == pytest.approx(0.25)
    assert shannon_entropy(s) == pytest.approx(22 / 8 * math.log(2), abs=1e-12)

    print("✓ Golden collision tests passed")


def test_entropy_rates():
    """Deterministic, free and golden entropy tables"""
    single = FiniteMeasure([SimElement(0.5, [[1.0]], [1.0])], [1.0])
    assert entropy_rate_bounds(single, 4) == pytest.approx([0.0] * 4)

    assert entropy_rate_bounds(bernoulli(1 / 3), 10) == pytest.approx([math.log(2)] * 10, abs=1e-12)

    golden = entropy_rate_bounds(bernoulli(LAMBDA_GOLDEN), 6)
    assert golden[0] == pytest.approx(math.log(2))
    assert golden[1] == pytest.approx(math.log(2))
    assert golden[2] == pytest.approx(22 / 24 * math.log(2))
    assert all(v < math.log(2) - 1e-9 for v in golden[2:])

    print("✓ Entropy rate tests passed")


def test_subadditivity():
    """H(mu^(m+n)) <= H(mu^m) + H(mu^n)"""
    mu = FiniteMeasure([
        SimElement(LAMBDA_GOLDEN, [[1.0]], [1.0]),
        SimElement(LAMBDA_GOLDEN, [[1.0]], [-1.0]),
        SimElement(LAMBDA_GOLDEN, [[1.0]], [0.0]),
    ], [0.2, 0.3, 0.5])
    rows, _ = generation_table(mu, 6)
    h = {r.n: r.entropy for r in rows}
    for a in h:
        for b in h:
            if a + b in h:
                assert h[a + b] <= h[a] + h[b] + 1e-9

    print("✓ Subadditivity holds")


def test_delta_and_m_free_system():
    """Delta_3 = M_3 = 2/9 for x/3 +- 1"""
    rows, sets = generation_table(bernoulli(1 / 3), 4)
    assert rows[2].delta_n == pytest.approx(2 / 9, abs=1e-12)
    assert rows[2].m_n == pytest.approx(2 / 9, abs=1e-12)
    for r in rows:
        assert r.m_n == pytest.approx(2 * 3.0 ** (-(r.n - 1)), abs=1e-12)
    assert m_n(sets, 0) is None

    single = FiniteMeasure([SimElement(0.5, [[1.0]], [1.0])], [1.0])
    assert delta_n(enumerate_convolution(single, 3)) is None

    print("✓ Delta/M tests passed")


def test_m_n_monotone_and_bounded_by_delta():
    """M_n non-increasing and at most min_k Delta_k"""
    mu = FiniteMeasure([
        SimElement(0.5, rotation_2d(0.4), [1.0, 0.0]),
        SimElement(0.6, rotation_2d(-1.1), [0.0, 1.0]),
        SimElement(0.45, np.eye(2), [-1.0, -0.5]),
    ], [0.3, 0.3, 0.4])
    rows, _ = generation_table(mu, 5)
    for prev, cur in zip(rows, rows[1:]):
        assert cur.m_n <= prev.m_n + 1e-15
    for i, r in enumerate(rows):
        assert r.m_n <= min(x.delta_n for x in rows[:i + 1]) + 1e-15

    print("✓ M_n monotonicity tests passed")


def test_spatial_index_matches_brute_force():
    """KD-tree minima equal the all-pairs scan for small systems"""
    rng = np.random.default_rng(11)
    for trial in range(5):
        d = 1 + trial % 2
        atoms = []
        for _ in range(3):
            rot = rotation_2d(rng.uniform(-2, 2)) if d == 2 else np.eye(1) * rng.choice([-1.0, 1.0])
            atoms.append(SimElement(rng.uniform(0.3, 0.8), rot, rng.normal(size=d)))
        mu = FiniteMeasure.uniform(atoms)
        _, sets = generation_table(mu, 4)
        for s in sets:
            assert delta_n(s) == brute_force_min_distance(s.elements) or \
                delta_n(s) == pytest.approx(brute_force_min_distance(s.elements), rel=1e-12)
        union = [identity(d)] + [g for s in sets for g in s.elements]
        assert m_n(sets, 4) == pytest.approx(brute_force_min_distance(union), rel=1e-12)

    print("✓ Spatial index matches brute force")


def test_budget_exceeded_reports_completed_n():
    """Budget stops before the generation that would overflow"""
    with pytest.raises(BudgetExceeded) as info:
        entropy_rate_bounds(bernoulli(1 / 3), 10, budget=100)
    assert info.value.completed_n == 6
    assert len(info.value.partial) == 6
    assert info.value.exit_code == 3

    print("✓ Budget tests passed")


def test_ambiguous_dedup():
    """A pair just outside the tolerance is flagged"""
    index = DedupIndex(1, 1e-9)
    index.insert(0.0, np.eye(1), np.array([0.0]), 0.5)
    with pytest.raises(AmbiguousDedup):
        index.insert(0.0, np.eye(1), np.array([5e-9]), 0.5)
    assert index.insert(0.0, np.eye(1), np.array([1e-10]), 0.5) == 0

    print("✓ Ambiguous dedup tests passed")


def test_separation_verdict():
    """Free system separates exponentially with c close to log 3"""
    report = separation_verdict(bernoulli(1 / 3), 8)
    assert report.condition_exponential
    assert report.condition_weak
    assert report.fitted_c <= math.log(3) + 1e-9
    assert report.growth_rate == pytest.approx(math.log(3), rel=1e-6)
    assert "not an asymptotic certificate" in report.label

    single = FiniteMeasure([SimElement(0.5, [[1.0]], [1.0])], [1.0])
    assert separation_verdict(single, 4).vacuous

    golden = separation_verdict(bernoulli(LAMBDA_GOLDEN), 8)
    assert all(v > 0 for v in golden.m)

    print("✓ Separation verdict tests passed")


def test_thread_count_invariance():
    """Enumeration output does not depend on the thread count"""
    mu = bernoulli(LAMBDA_GOLDEN)
    a = enumerate_convolution(mu, 8, threads=1)
    b = enumerate_convolution(mu, 8, threads=4)
    assert np.array_equal(a.trans, b.trans)
    assert np.array_equal(a.probs, b.probs)

    print("✓ Thread invariance tests passed")


def test_exact_rational_mode():
    """Exact Delta_3 = M_3 = 2/9 for x/3 +- 1"""
    mu = exact_bernoulli(Fraction(1, 3))
    rows, sets = generation_table(mu, 10)
    assert [r.support_size for r in rows] == [2 ** n for n in range(1, 11)]
    assert all(abs(r.entropy / r.n - math.log(2)) <= 1e-12 for r in rows)
    assert delta_n(sets, 3) == Fraction(2, 9)
    assert m_n(sets, 3) == Fraction(2, 9)
    assert rows[2].delta_exact == "2/9"

    print("✓ Exact rational tests passed")


def test_exact_golden_mode():
    """Q(sqrt 5) arithmetic merges the Pisot collision exactly"""
    lam = QuadraticNumber.golden_inverse()
    assert lam * lam == 1 - lam
    assert float(lam) == pytest.approx(LAMBDA_GOLDEN)

    mu = exact_bernoulli(lam)
    s = enumerate_convolution(mu, 3)
    assert s.size == 7
    assert shannon_entropy(s) == pytest.approx(22 / 8 * math.log(2), abs=1e-12)

    table = entropy_rate_bounds(mu, 12)
    assert table[2] == pytest.approx(22 / 24 * math.log(2), abs=1e-12)
    assert all(v < math.log(2) for v in table[2:])

    dist = delta_n(s)
    assert isinstance(dist, QuadraticNumber)
    assert dist > 0

    print("✓ Exact golden tests passed")


def test_quadratic_number_ordering():
    """Sign of a + b sqrt 5 decided exactly"""
    assert QuadraticNumber(3, -1) > 0          # 3 > sqrt 5
    assert QuadraticNumber(2, -1) < 0          # 2 < sqrt 5
    assert QuadraticNumber(-3, 1) < 0
    assert QuadraticNumber(1, 1) / QuadraticNumber(1, 1) == 1
    g = exact_compose(*exact_bernoulli(QuadraticNumber.golden_inverse()).atoms())
    assert exact_distance(g, g) == 0

    print("✓ Quadratic number tests passed")


def test_write_generation_csv(tmp_path):
    """CSV carries the documented header"""
    rows, _ = generation_table(bernoulli(1 / 3), 3)
    path = write_generation_csv(rows, tmp_path / "gen.csv")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "n,support_size,entropy,delta_n,m_n"
    assert len(lines) == 4

    print("✓ CSV tests passed")


if __name__ == "__main__":
    print("Running enumeration tests...\n")
    test_free_system_counts()
    test_golden_collision_in_floats()
    test_entropy_rates()
    test_exact_golden_mode()
    print("\n✅ All enumeration tests passed!")
