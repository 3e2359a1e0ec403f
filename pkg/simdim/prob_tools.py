"""
Probability tools: Wasserstein distances, Gaussian approximation of sums,
matrix Cramér bounds and the Gaussian-to-full-dimension diagnostic.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import ot
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.stats import binom, norm, special_ortho_group

from .config import EntropyConfig, ProbConfig
from .errors import EmptyCloud, HypothesisUnverifiable, TooFewSamples
from .utils import chunk_bounds, parallel_map, rng_stream

logger = logging.getLogger(__name__)

W1_METHODS = ("exact-1d", "assignment", "transport", "sliced")

_SUM_KEY = 21
_GAUSS_KEY = 22
_CRAMER_KEY = 23
_BLOCK = 4096


# =============================================================================
# Wasserstein distance
# =============================================================================

@dataclass
class W1Result:
    value: float
    method: str
    sample_sizes: tuple
    slices: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "method": self.method,
            "sample_sizes": list(self.sample_sizes),
            "slices": self.slices,
        }


def _as_cloud(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise EmptyCloud("empty point cloud")
    return x


def empirical_w1(cloud1, cloud2, seed: int = 0, slices: int = ProbConfig.SLICES) -> W1Result:
    """
    W1 between two empirical measures (uniform weights on the points).

    d = 1 uses the sorted-sample formula, equal sizes up to ASSIGNMENT_MAX
    an optimal assignment, unequal sizes up to ASSIGNMENT_MAX an exact
    transport plan; larger clouds fall back to sliced W1, which only bounds
    the true distance from below.

    Raises:
        EmptyCloud: either cloud is empty
    """
    x, y = _as_cloud(cloud1), _as_cloud(cloud2)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"clouds live in dimensions {x.shape[1]} and {y.shape[1]}")
    sizes = (x.shape[0], y.shape[0])
    if x.shape[1] == 1:
        value = float(ot.wasserstein_1d(x[:, 0], y[:, 0], p=1.0))
        return W1Result(max(value, 0.0), "exact-1d", sizes)
    if max(sizes) <= ProbConfig.ASSIGNMENT_MAX:
        cost = cdist(x, y)
        if sizes[0] == sizes[1]:
            rows, cols = linear_sum_assignment(cost)
            return W1Result(float(cost[rows, cols].mean()), "assignment", sizes)
        a = np.full(sizes[0], 1.0 / sizes[0])
        b = np.full(sizes[1], 1.0 / sizes[1])
        return W1Result(float(ot.emd2(a, b, cost)), "transport", sizes)
    value = ot.sliced_wasserstein_distance(x, y, n_projections=slices, p=1, seed=seed)
    return W1Result(float(value), "sliced", sizes, slices)


def _psi(z):
    """Antiderivative of the normal CDF: z Phi(z) + phi(z)."""
    return z * norm.cdf(z) + norm.pdf(z)


def w1_to_gaussian_1d(atoms, probs, mean: float, sd: float) -> float:
    """
    Exact W1 between sum_k probs[k] delta_{atoms[k]} and N(mean, sd^2).

    Integrates |F(x) - Phi((x - mean)/sd)| piecewise between atoms, splitting
    each piece where Phi crosses the constant CDF level.
    """
    atoms = np.asarray(atoms, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if atoms.size == 0:
        raise EmptyCloud("no atoms")
    if sd <= 0:
        return float(np.sum(probs * np.abs(atoms - mean)))
    order = np.argsort(atoms, kind="stable")
    atoms, probs = atoms[order], probs[order]
    z = (atoms - mean) / sd
    levels = np.cumsum(probs)[:-1]
    z1, z2 = z[:-1], z[1:]
    with np.errstate(divide="ignore"):
        z_star = np.clip(norm.ppf(np.clip(levels, 0.0, 1.0)), z1, z2)

    def below(lo, hi, c):
        return c * (hi - lo) - (_psi(hi) - _psi(lo))

    middle = below(z1, z_star, levels) - below(z_star, z2, levels)
    total = _psi(z[0]) + _psi(-z[-1]) + float(np.sum(middle))
    return float(sd * total)


def histogram_tv(cloud1, cloud2, bins: int = 50) -> float:
    """Total variation between two 1-d clouds on a shared histogram grid."""
    x = _as_cloud(cloud1)[:, 0]
    y = _as_cloud(cloud2)[:, 0]
    lo, hi = min(x.min(), y.min()), max(x.max(), y.max())
    if hi <= lo:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    p, _ = np.histogram(x, bins=edges)
    q, _ = np.histogram(y, bins=edges)
    return 0.5 * float(np.abs(p / x.size - q / y.size).sum())


def gaussian_kernel_lipschitz(sd: float) -> float:
    """L1-Lipschitz constant of the N(0, sd^2) density: int |phi'| = 2 phi(0) / sd."""
    return math.sqrt(2.0 / math.pi) / sd


def tv_from_w1(c: float, w1: float) -> float:
    """TV(X + A, Y + A) <= c W1(X, Y) / 2 for A with c-Lipschitz density."""
    return 0.5 * c * w1


# =============================================================================
# Gaussian approximation of sums
# =============================================================================

SUMMAND_KINDS = ("rademacher", "uniform", "two_point", "zero")


@dataclass(frozen=True)
class SummandSpec:
    """
    Law of one summand with |X| <= delta.

    rademacher: independent +-delta/sqrt(d) coordinates; uniform: uniform on
    the cube of half-side delta/sqrt(d); two_point: delta e_1 with
    probability p, else 0; zero: X = 0. An optional orthogonal `rotation`
    is applied to every draw.
    """
    kind: str
    delta: float
    d: int = 1
    rotation: Optional[tuple] = None
    p: float = 0.5

    def __post_init__(self):
        if self.kind not in SUMMAND_KINDS:
            raise ValueError(f"unknown summand kind {self.kind!r}; expected one of {SUMMAND_KINDS}")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if not 0 <= self.p <= 1:
            raise ValueError("p must lie in [0, 1]")

    @property
    def rot(self) -> np.ndarray:
        return np.eye(self.d) if self.rotation is None else np.asarray(self.rotation, dtype=float)

    def base_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of one summand before rotation."""
        d, s = self.d, self.delta / math.sqrt(self.d)
        mean = np.zeros(d)
        if self.kind == "rademacher":
            return mean, s * s * np.eye(d)
        if self.kind == "uniform":
            return mean, s * s / 3.0 * np.eye(d)
        if self.kind == "two_point":
            mean[0] = self.p * self.delta
            cov = np.zeros((d, d))
            cov[0, 0] = self.delta ** 2 * self.p * (1 - self.p)
            return mean, cov
        return mean, np.zeros((d, d))

    def sample_sums(self, rng: np.random.Generator, n: int, count: int) -> np.ndarray:
        """count draws of X_1 + ... + X_n before rotation."""
        d, s = self.d, self.delta / math.sqrt(self.d)
        if self.kind == "rademacher":
            return s * (2.0 * rng.binomial(n, 0.5, size=(count, d)) - n)
        if self.kind == "two_point":
            out = np.zeros((count, d))
            out[:, 0] = self.delta * rng.binomial(n, self.p, size=count)
            return out
        if self.kind == "uniform":
            out = np.zeros((count, d))
            for lo, hi in chunk_bounds(n, 256):
                out += rng.uniform(-s, s, size=(count, hi - lo, d)).sum(axis=1)
            return out
        return np.zeros((count, d))


@dataclass
class BerryEsseenReport:
    n: int
    d: int
    delta: float
    method: str
    w1: float
    trials: int
    mean: list = field(default_factory=list)
    cov: list = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.w1 / self.delta if self.delta > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "d": self.d,
            "delta": self.delta,
            "method": self.method,
            "w1": self.w1,
            "ratio": self.ratio,
            "trials": self.trials,
            "mean": self.mean,
            "cov": self.cov,
        }


def berry_esseen_check(
    spec: SummandSpec,
    n: int,
    trials: int = 10_000,
    seed: int = 0,
    threads: int = 1,
) -> BerryEsseenReport:
    """
    W1 between S = X_1 + ... + X_n and N(E S, Var S), reported against delta.

    For d = 1 Rademacher and two-point summands the law of S is binomial and
    the distance is exact. Otherwise S is simulated; in d = 1 the empirical
    law is compared with the exact Gaussian, in higher dimension with a
    Gaussian cloud of the same size. Both clouds are drawn in the unrotated
    frame and rotated together.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    mean1, cov1 = spec.base_moments()
    mean, cov = n * mean1, n * cov1
    rot = spec.rot
    if spec.kind == "zero" or spec.delta == 0:
        return BerryEsseenReport(n, spec.d, spec.delta, "exact", 0.0, 0,
                                 (rot @ mean).tolist(), (rot @ cov @ rot.T).tolist())

    if spec.d == 1 and spec.kind in ("rademacher", "two_point"):
        k = np.arange(n + 1)
        if spec.kind == "rademacher":
            atoms, probs = spec.delta * (2.0 * k - n), binom.pmf(k, n, 0.5)
        else:
            atoms, probs = spec.delta * k, binom.pmf(k, n, spec.p)
        w1 = w1_to_gaussian_1d(atoms, probs, float(mean[0]), math.sqrt(cov[0, 0]))
        method = "exact"
    else:
        def draw(bounds):
            block, (lo, hi) = bounds
            return spec.sample_sums(rng_stream(seed, _SUM_KEY, block), n, hi - lo)

        sums = np.concatenate(parallel_map(draw, list(enumerate(chunk_bounds(trials, _BLOCK))), threads))
        if spec.d == 1:
            w1 = w1_to_gaussian_1d(sums[:, 0], np.full(trials, 1.0 / trials), float(mean[0]), math.sqrt(cov[0, 0]))
            method = "monte-carlo-1d"
        else:
            gauss = rng_stream(seed, _GAUSS_KEY).multivariate_normal(mean, cov, size=trials, method="eigh")
            res = empirical_w1(sums @ rot.T, gauss @ rot.T, seed=seed)
            w1, method = res.value, f"monte-carlo-{res.method}"
    logger.info(f"Berry-Esseen {spec.kind} n={n}: W1/delta = {w1 / spec.delta:.4f} ({method})")
    return BerryEsseenReport(n, spec.d, spec.delta, method, w1, trials if method != "exact" else 0,
                             (rot @ mean).tolist(), (rot @ cov @ rot.T).tolist())


# =============================================================================
# Matrix Cramér bound
# =============================================================================

@dataclass(frozen=True)
class DeterministicPsd:
    """X_i = m I."""
    m: float
    d: int = 1

    @property
    def floor(self) -> float:
        return self.m

    @property
    def bound(self) -> float:
        return self.m

    def sample(self, rng: np.random.Generator, shape: tuple) -> np.ndarray:
        return np.broadcast_to(self.m * np.eye(self.d), shape + (self.d, self.d)).copy()


@dataclass(frozen=True)
class BernoulliPsd:
    """Scalar X_i in {0, 1} with P[X_i = 1] = p."""
    p: float
    d: int = 1

    def __post_init__(self):
        if self.d != 1:
            raise ValueError("BernoulliPsd is scalar")

    @property
    def floor(self) -> float:
        return self.p

    @property
    def bound(self) -> float:
        return 1.0

    def sample(self, rng: np.random.Generator, shape: tuple) -> np.ndarray:
        return (rng.random(shape) < self.p).astype(float)[..., None, None]


@dataclass(frozen=True)
class RotatedUniformPsd:
    """X_i = Q diag(u) Q^T with u_j ~ U[0, 2m] and Q Haar random, so E X_i = m I."""
    m: float
    d: int = 2

    @property
    def floor(self) -> float:
        return self.m

    @property
    def bound(self) -> float:
        return 2.0 * self.m

    def sample(self, rng: np.random.Generator, shape: tuple) -> np.ndarray:
        count = int(np.prod(shape))
        u = rng.uniform(0.0, 2.0 * self.m, size=(count, self.d))
        if self.d == 1:
            return u.reshape(shape + (1, 1))
        q = special_ortho_group.rvs(self.d, size=count, random_state=rng).reshape(count, self.d, self.d)
        x = np.einsum("nij,nj,nkj->nik", q, u, q)
        return x.reshape(shape + (self.d, self.d))


@dataclass
class CramerCheck:
    n: int
    d: int
    a: float
    b: float
    trials: int
    hits: int
    empirical_log_prob: float
    bound_log_prob: float
    exact_log_prob: Optional[float] = None

    @property
    def empirical_prob(self) -> float:
        return self.hits / self.trials

    @property
    def margin(self) -> float:
        return self.bound_log_prob - self.empirical_log_prob

    @property
    def passed(self) -> bool:
        p = self.empirical_prob
        se = math.sqrt(p * (1 - p) / self.trials)
        return p <= math.exp(self.bound_log_prob) + 3.0 * se

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "d": self.d,
            "a": self.a,
            "b": self.b,
            "trials": self.trials,
            "hits": self.hits,
            "empirical_log_prob": self.empirical_log_prob,
            "bound_log_prob": self.bound_log_prob,
            "exact_log_prob": self.exact_log_prob,
            "margin": self.margin,
            "passed": self.passed,
        }


def cramer_bound(n: int, a: float, b: float, d: int, c: float = ProbConfig.CRAMER_C) -> float:
    """log of c-calibrated bound on P[X_1 + ... + X_n <= (n a / 4) I]."""
    log_cover = 0.0 if d == 1 else d * math.log(1.0 + 16.0 * b / a)
    return -c * n * a / b + log_cover


def cramer_check(
    generator,
    floors: Sequence[float],
    b: float,
    n: int,
    trials: int = 10_000,
    seed: int = 0,
    threads: int = 1,
) -> CramerCheck:
    """
    Probability that the sum of n PSD matrices stays below (n a / 4) I.

    The generator certifies 0 <= X_i <= bound I and E[X_i | past] >= floor I;
    floors[i] must not exceed that floor and b must dominate the bound.

    Raises:
        HypothesisUnverifiable: the floors or b are not certified by the generator
    """
    floors = np.broadcast_to(np.asarray(floors, dtype=float), (n,))
    if np.any(floors < 0) or np.any(floors > generator.floor * (1 + 1e-12)):
        raise HypothesisUnverifiable(f"floors above the certified {generator.floor:g}")
    if b < generator.bound * (1 - 1e-12):
        raise HypothesisUnverifiable(f"b = {b:g} below the generator bound {generator.bound:g}")
    a = float(floors.sum() / n)
    if a <= 0:
        raise HypothesisUnverifiable("the floors sum to zero")
    level = n * a / 4.0
    d = generator.d

    def count(bounds):
        block, (lo, hi) = bounds
        rng = rng_stream(seed, _CRAMER_KEY, block)
        total = generator.sample(rng, (hi - lo, n)).sum(axis=1)
        return int(np.sum(np.linalg.eigvalsh(total)[:, 0] <= level))

    hits = sum(parallel_map(count, list(enumerate(chunk_bounds(trials, 1024))), threads))
    emp = math.log(hits / trials) if hits else -math.inf
    exact = None
    if isinstance(generator, BernoulliPsd):
        exact = float(binom.logcdf(math.floor(level), n, generator.p))
    report = CramerCheck(n, d, a, b, trials, hits, emp, cramer_bound(n, a, b, d), exact)
    logger.info(f"Cramér n={n}: empirical {emp:.4g} vs bound {report.bound_log_prob:.4g}")
    return report


# =============================================================================
# Gaussian approximation to full dimension
# =============================================================================

@dataclass
class GaussianDimensionReport:
    C: float
    r: float
    d: int
    cells: list
    mass_fraction: float
    frontier: list
    entropy_gap: Optional[float]
    full_gap: float

    @property
    def verdict(self) -> bool:
        return self.mass_fraction >= ProbConfig.GAUSSIAN_MASS

    def to_dict(self) -> dict:
        return {
            "C": self.C,
            "r": self.r,
            "d": self.d,
            "mass_fraction": self.mass_fraction,
            "frontier": self.frontier,
            "entropy_between_scales": self.entropy_gap,
            "d_log_2": self.full_gap,
            "verdict": self.verdict,
            "cells": self.cells,
        }


def _mass_fraction(cells: list, total: int, C: float, r: float) -> float:
    good = sum(c["count"] for c in cells if c["sigma_ratio"] >= C and c["w1"] < r / C)
    return good / total


def gaussian_dimension_check(
    samples,
    C: float,
    r: float,
    labels: Optional[np.ndarray] = None,
    cell_side: Optional[float] = None,
    seed: int = 0,
    threads: int = 1,
) -> GaussianDimensionReport:
    """
    Test whether the cloud is, cell by cell, close to a wide Gaussian at scale r.

    Cells come from `labels` or a grid of side `cell_side` (the whole cloud is
    one cell by default). In each cell with enough points a Gaussian is fitted
    and both clauses are checked: lambda_min(Sigma) >= C r^2 and
    W1(cell, N(x0, Sigma)) < r / C. The report gives the mass fraction where
    both hold, the same fraction for a ladder of C, and the measured
    entropy between scales H(r|2r) next to the full-dimensional d log 2.

    Raises:
        TooFewSamples: fewer points than one Gaussian fit needs
    """
    from .entropy_est import SmoothingSpec, entropy_between_scales

    x = _as_cloud(samples)
    total, d = x.shape
    if total < ProbConfig.GAUSSIAN_MIN_CELL:
        raise TooFewSamples(f"{total} samples; a Gaussian fit needs {ProbConfig.GAUSSIAN_MIN_CELL}")
    if labels is None:
        if cell_side is None:
            labels = np.zeros(total, dtype=np.int64)
        else:
            _, labels = np.unique(np.floor(x / cell_side).astype(np.int64), axis=0, return_inverse=True)
    labels = np.asarray(labels).reshape(-1)
    groups = [np.flatnonzero(labels == u) for u in np.unique(labels)]

    def fit(rows):
        pts = x[rows]
        if rows.size < ProbConfig.GAUSSIAN_MIN_CELL:
            return {"count": int(rows.size), "sigma_ratio": 0.0, "w1": math.inf, "fitted": False}
        center = pts.mean(axis=0)
        sigma = np.atleast_2d(np.cov(pts, rowvar=False))
        lam = float(np.linalg.eigvalsh(sigma)[0])
        if d == 1:
            w1 = w1_to_gaussian_1d(pts[:, 0], np.full(rows.size, 1.0 / rows.size),
                                   float(center[0]), math.sqrt(max(sigma[0, 0], 0.0)))
        else:
            rng = rng_stream(seed, _GAUSS_KEY, int(rows[0]))
            gauss = rng.multivariate_normal(center, sigma, size=rows.size, method="eigh")
            w1 = empirical_w1(pts, gauss, seed=seed).value
        return {"count": int(rows.size), "sigma_ratio": lam / (r * r), "w1": w1, "fitted": True}

    cells = parallel_map(fit, groups, threads)
    fraction = _mass_fraction(cells, total, C, r)
    frontier = [[c, _mass_fraction(cells, total, c, r)] for c in ProbConfig.FRONTIER_C]

    gap = None
    if total >= EntropyConfig.MIN_GRID_SAMPLES:
        gap = entropy_between_scales(x, SmoothingSpec("cube", 1.0), r, 2 * r, seed=seed)
    report = GaussianDimensionReport(C, r, d, cells, fraction, frontier, gap, d * math.log(2.0))
    logger.info(f"Gaussian check C={C:g} r={r:g}: mass fraction {fraction:.3f}")
    return report
