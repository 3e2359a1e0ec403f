"""
Similarity group algebra tests
"""

import io
import math
import sys

import numpy as np
import pytest

# Fix encoding for Windows
if sys.platform == "win32":
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8')

from simdim.errors import OrthogonalityError, RotationBranchError
from simdim.sim_group import (
    LieVector,
    SimElement,
    apply,
    compose,
    differential_psi,
    embed_affine,
    exp_map,
    from_matrix,
    identity,
    inverse,
    lie_dimension,
    log_map,
    metric_dist,
    operator_norm,
    power,
    psi_matrix,
    rotation_2d,
    rotation_from_angles,
)


def _random_element(rng, d, rho_range=(0.2, 2.0)):
    angles = rng.uniform(-2.5, 2.5, size=max(1, d * (d - 1) // 2))
    rot = rotation_from_angles(d, angles) if d > 1 else np.eye(1)
    return SimElement(rng.uniform(*rho_range), rot, rng.normal(size=d))


def _random_lie(rng, d, radius):
    coords = rng.normal(size=lie_dimension(d))
    coords *= radius * rng.uniform() / np.linalg.norm(coords)
    return LieVector.from_coords(d, coords)


def test_compose_examples():
    """Composition law on the worked d=1 example"""
    g = SimElement(1 / 3, [[1.0]], [1.0])
    h = SimElement(1 / 3, [[1.0]], [-1.0])
    gh = compose(g, h)
    assert gh.rho == pytest.approx(1 / 9)
    assert gh.trans[0] == pytest.approx(2 / 3)

    e = identity(1)
    assert metric_dist(compose(e, g), g) == 0.0
    assert metric_dist(compose(g, inverse(g)), e) < 1e-12

    print("✓ Composition tests passed")


def test_compose_matches_action():
    """(g o h)(x) = g(h(x)) and the embedding is a homomorphism"""
    rng = np.random.default_rng(1)
    for d in (1, 2, 3, 4):
        for _ in range(20):
            g, h = _random_element(rng, d), _random_element(rng, d)
            x = rng.normal(size=d)
            assert np.allclose(apply(compose(g, h), x), apply(g, apply(h, x)), atol=1e-12)
            assert np.allclose(embed_affine(compose(g, h)), embed_affine(g) @ embed_affine(h), atol=1e-12)
            assert compose(g, h).rho == g.rho * h.rho

    print("✓ Action and homomorphism tests passed")


def test_apply_examples():
    """apply on a concrete point and the similarity property"""
    g = SimElement(0.5, np.eye(2), [1.0, 0.0])
    assert np.allclose(apply(g, [2.0, 2.0]), [2.0, 1.0])
    assert np.allclose(apply(identity(2), [3.0, -1.0]), [3.0, -1.0])

    rng = np.random.default_rng(2)
    g = _random_element(rng, 3)
    x, y = rng.normal(size=3), rng.normal(size=3)
    lhs = np.linalg.norm(apply(g, x) - apply(g, y))
    assert lhs == pytest.approx(g.rho * np.linalg.norm(x - y), rel=1e-12)

    cloud = rng.normal(size=(10, 3))
    assert np.allclose(apply(g, cloud)[4], apply(g, cloud[4]))

    print("✓ apply tests passed")


def test_metric_examples():
    """Metric values on hand-computed pairs"""
    g = SimElement(1.0, [[1.0]], [0.0])
    assert metric_dist(g, g) == 0.0
    assert metric_dist(g, SimElement(math.e, [[1.0]], [0.0])) == pytest.approx(1.0)
    assert metric_dist(g, SimElement(1.0, [[1.0]], [3.0])) == pytest.approx(3.0)
    assert metric_dist(g, SimElement(1.0, [[-1.0]], [0.0])) == pytest.approx(2.0)

    print("✓ Metric example tests passed")


def test_metric_triangle_inequality():
    """Symmetry and triangle inequality on random triples"""
    rng = np.random.default_rng(3)
    for d in (1, 2, 3, 5):
        for _ in range(250):
            a, b, c = (_random_element(rng, d) for _ in range(3))
            assert metric_dist(a, b) == pytest.approx(metric_dist(b, a), abs=1e-15)
            assert metric_dist(a, c) <= metric_dist(a, b) + metric_dist(b, c) + 1e-12

    print("✓ Triangle inequality holds")


def test_operator_norm_power_iteration_matches_svd():
    """Power iteration path agrees with SVD for d > 3"""
    rng = np.random.default_rng(4)
    for _ in range(20):
        m = rng.normal(size=(5, 5))
        assert operator_norm(m) == pytest.approx(np.linalg.norm(m, 2), rel=1e-6)

    print("✓ Operator norm tests passed")


def test_orthogonality_guard():
    """Small drift is repaired, large drift is rejected"""
    rot = rotation_2d(0.3)
    drifted = rot + 1e-9 * np.array([[1.0, 0.0], [0.0, 0.0]])
    g = SimElement(1.0, drifted, [0.0, 0.0])
    assert np.linalg.norm(g.rot @ g.rot.T - np.eye(2)) < 1e-12

    with pytest.raises(OrthogonalityError):
        SimElement(1.0, rot * 1.01, [0.0, 0.0])

    with pytest.raises(ValueError):
        SimElement(-1.0, np.eye(1), [0.0])

    print("✓ Orthogonality guard tests passed")


def test_exp_log_examples():
    """exp/log on closed-form cases"""
    assert metric_dist(exp_map(LieVector.zero(2)), identity(2)) == 0.0
    assert log_map(identity(3)).norm() == pytest.approx(0.0, abs=1e-14)

    g = exp_map(LieVector(math.log(2.0), np.zeros((1, 1)), [0.0]))
    assert g.rho == pytest.approx(2.0)
    assert g.trans[0] == pytest.approx(0.0)

    u = log_map(SimElement(2.0, np.eye(1), [0.0]))
    assert u.scale == pytest.approx(math.log(2.0))
    assert u.trans[0] == pytest.approx(0.0)

    print("✓ exp/log example tests passed")


def test_log_branch_cut():
    """Rotation by pi has no principal logarithm"""
    with pytest.raises(RotationBranchError):
        log_map(SimElement(1.0, rotation_2d(math.pi), [0.0, 0.0]))
    with pytest.raises(RotationBranchError):
        log_map(SimElement(0.5, -np.eye(1), [1.0]))

    print("✓ Branch cut tests passed")


def test_exp_log_round_trip():
    """exp(log(exp(u))) = exp(u) for |u| <= 0.5"""
    rng = np.random.default_rng(5)
    for d in (1, 2, 3, 4):
        for _ in range(100):
            u = _random_lie(rng, d, 0.5)
            g = exp_map(u)
            assert metric_dist(exp_map(log_map(g)), g) <= 1e-9
            assert log_map(g).norm() == pytest.approx(u.norm(), abs=1e-9)

    print("✓ exp/log round trip passed")


def test_log_of_large_rotations():
    """Angles up to just below pi are recovered"""
    rng = np.random.default_rng(6)
    for _ in range(50):
        g = _random_element(rng, 3)
        assert metric_dist(exp_map(log_map(g)), g) <= 1e-9

    print("✓ Large-angle logarithm tests passed")


def test_differential_psi_examples():
    """psi_x(u) = alpha x + beta"""
    u = LieVector(2.0, np.zeros((1, 1)), [3.0])
    assert differential_psi([5.0], u)[0] == pytest.approx(13.0)
    assert np.allclose(differential_psi([1.0, 2.0], LieVector.zero(2)), 0.0)

    print("✓ psi example tests passed")


def test_psi_linearity_and_matrix():
    """psi_x is linear and psi_matrix reproduces it in coordinates"""
    rng = np.random.default_rng(7)
    for d in (1, 2, 3):
        x = rng.normal(size=d)
        u, v = _random_lie(rng, d, 1.0), _random_lie(rng, d, 1.0)
        a, b = rng.normal(size=2)
        lhs = differential_psi(x, a * u + b * v)
        rhs = a * differential_psi(x, u) + b * differential_psi(x, v)
        assert np.allclose(lhs, rhs, atol=1e-12)
        assert np.allclose(psi_matrix(x) @ u.coords(), differential_psi(x, u), atol=1e-12)

    print("✓ psi linearity tests passed")


def test_psi_is_derivative():
    """Finite differences of exp(tu)x converge to psi_x(u) linearly in t"""
    rng = np.random.default_rng(8)
    for d in (1, 2, 3):
        u = _random_lie(rng, d, 1.0)
        x = rng.normal(size=d)
        target = differential_psi(x, u)
        errors = []
        for t in (1e-3, 1e-4, 1e-5):
            fd = (apply(exp_map(t * u), x) - x) / t
            errors.append(np.linalg.norm(fd - target))
        k_fit = max(e / t for e, t in zip(errors, (1e-3, 1e-4, 1e-5)))
        for e, t in zip(errors, (1e-3, 1e-4, 1e-5)):
            assert e <= k_fit * t + 1e-12

        fd = (apply(exp_map(1e-6 * u), x) - x) / 1e-6
        assert np.linalg.norm(fd - target) <= 1e-4 * max(np.linalg.norm(target), 1.0)

    print("✓ psi derivative tests passed")


def test_embedding_round_trip_and_power():
    """from_matrix inverts embed_affine; power agrees with repeated compose"""
    rng = np.random.default_rng(9)
    g = _random_element(rng, 2, rho_range=(0.5, 0.9))
    assert metric_dist(from_matrix(embed_affine(g)), g) < 1e-12

    manual = identity(2)
    for _ in range(5):
        manual = compose(manual, g)
    assert metric_dist(power(g, 5), manual) < 1e-12
    assert metric_dist(power(g, -2), inverse(compose(g, g))) < 1e-10

    m = embed_affine(SimElement(1 / 3, [[1.0]], [1.0]))
    assert np.allclose(m, [[1 / 3, 1.0], [0.0, 1.0]])

    print("✓ Embedding tests passed")


def test_rotation_helpers():
    """Angle helpers produce proper rotations"""
    for d, n_angles in ((2, 1), (3, 3), (4, 6)):
        rot = rotation_from_angles(d, np.linspace(0.1, 0.7, n_angles))
        assert np.allclose(rot @ rot.T, np.eye(d), atol=1e-12)
        assert np.linalg.det(rot) == pytest.approx(1.0)
    assert lie_dimension(1) == 2
    assert lie_dimension(2) == 4
    assert lie_dimension(3) == 7

    print("✓ Rotation helper tests passed")


if __name__ == "__main__":
    print("Running similarity group tests...\n")
    test_compose_examples()
    test_compose_matches_action()
    test_metric_triangle_inequality()
    test_exp_log_round_trip()
    test_psi_is_derivative()
    print("\n✅ All similarity group tests passed!")
