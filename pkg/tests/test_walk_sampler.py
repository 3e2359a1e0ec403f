"""
Random walk and attractor sampling tests
"""

import io
import math
import sys

import numpy as np
import pytest

# Fix encoding for Windows
if sys.platform == "win32":
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8')

from simdim.errors import NotContractingOnAverage, StoppingCapExceeded
from simdim.measure_core import FiniteMeasure
from simdim.sim_group import SimElement, compose, metric_dist, power
from simdim.walk_sampler import (
    choose_kappa,
    load_point_cloud,
    push_forward,
    sample_attractor,
    sample_walk,
    save_point_cloud,
    stationarity_check,
    stopped_walk,
    tau_statistics,
)


def bernoulli(lam):
    return FiniteMeasure.uniform([SimElement(lam, [[1.0]], [1.0]), SimElement(lam, [[1.0]], [-1.0])])


def test_sample_walk_basics():
    """Empty walk, deterministic walk and prefix consistency"""
    mu = bernoulli(1 / 3)
    path = sample_walk(mu, 0, seed=1)
    assert path.n == 0
    assert metric_dist(path.product(), SimElement(1.0, [[1.0]], [0.0])) == 0.0

    g = SimElement(0.5, [[1.0]], [1.0])
    single = FiniteMeasure([g], [1.0])
    assert metric_dist(sample_walk(single, 5, seed=2).product(), power(g, 5)) < 1e-12

    path = sample_walk(mu, 30, seed=3)
    for i in range(1, path.n):
        assert metric_dist(path.prefix[i], compose(path.prefix[i - 1], path.steps[i])) < 1e-12
        assert path.prefix[i].rho == pytest.approx(math.exp(path.log_rho_prefix[i + 1]), rel=1e-12)

    print("✓ Walk basics passed")


def test_sample_walk_frequencies_and_reproducibility():
    """Equal weights give frequencies near 1/2; same seed, same walk"""
    mu = bernoulli(1 / 3)
    path = sample_walk(mu, 100_000, seed=4)
    freq = np.mean(path.indices == 0)
    assert 0.495 <= freq <= 0.505
    assert np.array_equal(path.indices, sample_walk(mu, 100_000, seed=4).indices)

    print(f"  Atom 0 frequency: {freq:.4f}")
    print("✓ Frequency tests passed")


def test_stopped_walk_examples():
    """Deterministic stopping times and the rho window"""
    single = FiniteMeasure([SimElement(0.5, [[1.0]], [0.0])], [1.0])
    for k in (1, 5, 17):
        _, tau = stopped_walk(single, 2.0 ** -k, seed=0)
        assert tau == k

    _, tau = stopped_walk(bernoulli(1 / 3), 3.0 ** -5, seed=0)
    assert tau == 5

    mix = FiniteMeasure.uniform([SimElement(0.5, [[1.0]], [1.0]), SimElement(0.25, [[1.0]], [-1.0])])
    kappa = 1 / 8
    for seed in range(200):
        q, tau = stopped_walk(mix, kappa, seed)
        assert tau in (2, 3)
        assert kappa / 4 * (1 - 1e-12) <= q.rho <= kappa * (1 + 1e-12)

    print("✓ Stopped walk tests passed")


def test_stopping_cap():
    """An expanding system never reaches kappa"""
    expanding = FiniteMeasure([SimElement(2.0, [[1.0]], [0.0])], [1.0])
    with pytest.raises(StoppingCapExceeded):
        stopped_walk(expanding, 0.5, seed=0)

    print("✓ Stopping cap tests passed")


def test_attractor_fixed_point_and_support():
    """Single contraction samples its fixed point; Cantor samples stay in [-3/2, 3/2]"""
    cloud = sample_attractor(FiniteMeasure([SimElement(0.5, [[1.0]], [0.0])], [1.0]), 100, seed=0, depth=10)
    assert np.allclose(cloud.points, 0.0)

    cloud = sample_attractor(bernoulli(1 / 3), 20_000, seed=1, kappa=3.0 ** -20)
    assert np.all(np.abs(cloud.points) <= 1.5 + 1e-12)
    assert cloud.rho_max <= 3.0 ** -20 * (1 + 1e-9)
    assert cloud.bias_bound <= 1.5 * 3.0 ** -20 * (1 + 1e-9)

    print("✓ Attractor support tests passed")


def test_attractor_uniform_mean():
    """x/2 +- 1 gives the uniform law on [-2, 2]"""
    n = 50_000
    cloud = sample_attractor(bernoulli(0.5), n, seed=2, depth=40)
    sigma = math.sqrt(4 / 3)
    assert abs(cloud.points.mean()) <= 3 * sigma / math.sqrt(n)
    assert cloud.points.var() == pytest.approx(4 / 3, rel=0.05)

    print("✓ Uniform limit tests passed")


def test_attractor_depth_and_kappa_agree():
    """Fixed depth and kappa stopping coincide when rho is constant"""
    mu = bernoulli(1 / 3)
    a = sample_attractor(mu, 1000, seed=3, depth=12)
    b = sample_attractor(mu, 1000, seed=3, kappa=3.0 ** -12)
    assert a.points.shape == b.points.shape
    assert np.all(np.abs(a.points) <= 1.5)
    assert np.all(np.abs(b.points) <= 1.5)

    print("✓ Depth/kappa tests passed")


def test_attractor_thread_invariance():
    """Identical seed gives identical clouds for any thread count"""
    mu = FiniteMeasure([SimElement(2.0, [[1.0]], [1.0]), SimElement(0.25, [[-1.0]], [0.5])], [1 / 3, 2 / 3])
    a = sample_attractor(mu, 70_000, seed=5, kappa=1e-6, threads=1)
    b = sample_attractor(mu, 70_000, seed=5, kappa=1e-6, threads=4)
    assert np.array_equal(a.points, b.points)

    print("✓ Thread invariance tests passed")


def test_attractor_requires_contraction_on_average():
    """chi >= 0 is rejected"""
    with pytest.raises(NotContractingOnAverage):
        sample_attractor(FiniteMeasure([SimElement(2.0, [[1.0]], [0.0])], [1.0]), 10, seed=0, kappa=0.1)

    print("✓ Contraction guard passed")


def test_stationarity():
    """Pushing samples once more through mu does not move the cloud"""
    mu = bernoulli(1 / 3)
    cloud = sample_attractor(mu, 1500, seed=6, kappa=3.0 ** -25)
    result = stationarity_check(mu, cloud, seed=7)
    assert result["passed"], result

    pushed = push_forward(mu, cloud.points, seed=8)
    assert pushed.shape == cloud.points.shape

    print("✓ Stationarity tests passed")


def test_choose_kappa_on_average_system():
    """Pilot-based kappa scales with the cloud spread"""
    mu = FiniteMeasure([SimElement(2.0, [[1.0]], [1.0]), SimElement(0.25, [[1.0]], [-1.0])], [1 / 3, 2 / 3])
    kappa = choose_kappa(mu, 1e-3, seed=0)
    assert 0 < kappa < 1e-3

    print("✓ choose_kappa tests passed")


def test_tau_statistics():
    """Deterministic and renewal-type stopping times"""
    single = FiniteMeasure([SimElement(0.5, [[1.0]], [0.0])], [1.0])
    kappa = 2.0 ** -10.5
    report = tau_statistics(single, kappa, 100, seed=0)
    assert report.var_tau == 0.0
    assert report.mean_tau == math.ceil(math.log(1 / kappa) / math.log(2))

    kappa = 3.0 ** -7
    report = tau_statistics(bernoulli(1 / 3), kappa, 200, seed=0)
    assert abs(report.ratio - 1) <= 1 / math.log(1 / kappa)

    mix = FiniteMeasure.uniform([SimElement(0.5, [[1.0]], [1.0]), SimElement(0.25, [[1.0]], [-1.0])])
    report = tau_statistics(mix, 2.0 ** -40, 10_000, seed=1)
    assert abs(report.ratio - 1) <= 0.1
    probs = [p for _, p in report.tail]
    assert all(0 <= p <= 1 for p in probs)
    assert all(a >= b for a, b in zip(probs, probs[1:]))

    print(f"  Mixture ratio: {report.ratio:.4f}")
    print("✓ tau statistics tests passed")


def test_point_cloud_round_trip(tmp_path):
    """CSV and npz writers keep the header"""
    cloud = sample_attractor(bernoulli(1 / 3), 50, seed=9, depth=8)
    for fmt in ("csv", "npz"):
        path = save_point_cloud(cloud, tmp_path / f"cloud.{fmt}", fmt=fmt)
        back = load_point_cloud(path)
        assert back.seed == 9
        assert back.stop == {"rule": "depth", "value": 8}
        assert np.allclose(back.points, cloud.points)

    print("✓ Point cloud IO tests passed")


if __name__ == "__main__":
    print("Running walk sampler tests...\n")
    test_sample_walk_basics()
    test_stopped_walk_examples()
    test_tau_statistics()
    print("\n✅ All walk sampler tests passed!")
