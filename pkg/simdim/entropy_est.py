"""
Entropy at a scale and dimension estimation from point clouds.

The primary estimator is the cube kernel: the entropy of a cloud smoothed
by the uniform measure on an r-cube, minus the kernel's own entropy, is the
Shannon entropy of the r-grid cell counts. Grid phases are averaged and
shared across scales so that entropies between scales telescope exactly.
A Kozachenko-Leonenko nearest-neighbour estimator covers the Gaussian and
truncated-Gaussian kernels.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma
from scipy.stats import chi2
from sklearn.neighbors import KDTree

from .config import EntropyConfig
from .errors import NotContractingOnAverage, ScaleRangeTooNarrow, TooFewSamples
from .utils import ensure_dir, parallel_map, rng_stream

logger = logging.getLogger(__name__)

KERNELS = ("cube", "gaussian", "truncated_gaussian")

# stream keys for the random pieces of this module
_PHASE_KEY = 0
_JITTER_KEY = 1


def _as_cloud(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


@dataclass(frozen=True)
class SmoothingSpec:
    """A scale-r smoothing kernel A_r with A_r = r A_1 in law."""
    kind: str
    r: float
    a: float = 1.0  # truncation radius multiple for the truncated Gaussian

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValueError(f"unknown smoothing kind {self.kind!r}; choose from {KERNELS}")
        if self.r <= 0:
            raise ValueError("scale r must be positive")
        if self.kind == "truncated_gaussian" and self.a < 1:
            raise ValueError("truncation multiple a must be at least 1")

    def at_scale(self, r: float) -> "SmoothingSpec":
        return SmoothingSpec(self.kind, r, self.a)

    def entropy(self, d: int) -> float:
        """Closed-form differential entropy H(A_r)."""
        return smoothing_entropy(self.kind, d, self.r, self.a)

    def sample(self, rng: np.random.Generator, n: int, d: int) -> np.ndarray:
        if self.kind == "cube":
            return self.r * (rng.random((n, d)) - 0.5)
        if self.kind == "gaussian":
            return self.r * rng.standard_normal((n, d))
        # radius^2 / r^2 is chi^2_d conditioned on <= a^2; direction uniform
        cap = chi2.cdf(self.a ** 2, d)
        radius = self.r * np.sqrt(chi2.ppf(rng.random(n) * cap, d))
        direction = rng.standard_normal((n, d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        return radius[:, None] * direction


def smoothing_entropy(kind: str, d: int, r: float, a: float = 1.0) -> float:
    """
    H(A_r) in nats.

    cube: d log r; gaussian: (d/2) log(2 pi e r^2); truncated gaussian on
    |x| <= a r: (d/2) log(2 pi r^2) + log F_d(a^2) + (d/2) F_{d+2}(a^2) / F_d(a^2)
    with F_k the chi^2_k CDF.
    """
    if kind == "cube":
        return d * math.log(r)
    if kind == "gaussian":
        return 0.5 * d * math.log(2 * math.pi * math.e * r * r)
    if kind == "truncated_gaussian":
        fd = chi2.cdf(a * a, d)
        fd2 = chi2.cdf(a * a, d + 2)
        return 0.5 * d * math.log(2 * math.pi * r * r) + math.log(fd) + 0.5 * d * fd2 / fd
    raise ValueError(f"unknown smoothing kind {kind!r}")


def stability_bound(d: int, c: float) -> float:
    """Moving every point by at most c r changes the r-scale entropy by at most d log(2c + 4)."""
    return d * math.log(2 * c + 4)


# =============================================================================
# Grid (cube kernel) estimator
# =============================================================================

def grid_phases(d: int, seed: int, phases: int = EntropyConfig.PHASES) -> np.ndarray:
    """Fractional grid offsets in [0, 1)^d, shared by every scale."""
    return rng_stream(seed, _PHASE_KEY).random((phases, d))


def _cell_entropy(x: np.ndarray, r: float, offset: np.ndarray) -> float:
    cells = np.floor(x / r + offset).astype(np.int64)
    if cells.shape[1] == 1:
        _, counts = np.unique(cells[:, 0], return_counts=True)
    else:
        _, counts = np.unique(cells, axis=0, return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def grid_entropy_at_scale(
    samples,
    r: float,
    seed: int = 0,
    phases: Optional[np.ndarray] = None,
) -> float:
    """
    Cube-kernel entropy H(cloud; r) from r-grid cell counts.

    Args:
        samples: (N, d) cloud (or (N,) for d = 1)
        r: Grid side
        seed: Seed of the phase offsets (ignored when phases is given)
        phases: Explicit (P, d) fractional offsets

    Returns:
        Phase-averaged cell entropy in nats

    Raises:
        TooFewSamples: fewer than EntropyConfig.MIN_GRID_SAMPLES points
    """
    x = _as_cloud(samples)
    if x.shape[0] < EntropyConfig.MIN_GRID_SAMPLES:
        raise TooFewSamples(f"{x.shape[0]} samples, need at least {EntropyConfig.MIN_GRID_SAMPLES}")
    if r <= 0:
        raise ValueError("scale r must be positive")
    if phases is None:
        phases = grid_phases(x.shape[1], seed)
    return float(np.mean([_cell_entropy(x, r, off) for off in phases]))


# =============================================================================
# Nearest-neighbour estimator
# =============================================================================

def knn_entropy(x: np.ndarray, k: int = EntropyConfig.KNN_K) -> float:
    """Kozachenko-Leonenko differential entropy (max-norm balls), in nats."""
    n, d = x.shape
    if k >= n:
        raise TooFewSamples(f"k={k} needs more than {n} samples")
    tree = KDTree(x, metric="chebyshev")
    dist = tree.query(x, k=k + 1)[0][:, k]
    dist = np.maximum(dist, np.finfo(float).tiny)
    return float(digamma(n) - digamma(k) + d * math.log(2) + d * np.mean(np.log(dist)))


def knn_smoothed_entropy(samples, spec: SmoothingSpec, seed: int = 0,
                         k: int = EntropyConfig.KNN_K) -> float:
    """
    H(cloud * A_r) - H(A_r) via the nearest-neighbour estimator.

    Every sample is jittered by an independent draw of A_r before the
    differential entropy is estimated.

    Raises:
        TooFewSamples: fewer than EntropyConfig.MIN_KNN_SAMPLES points
    """
    x = _as_cloud(samples)
    n, d = x.shape
    if n < EntropyConfig.MIN_KNN_SAMPLES:
        raise TooFewSamples(f"{n} samples, need at least {EntropyConfig.MIN_KNN_SAMPLES}")
    jittered = x + spec.sample(rng_stream(seed, _JITTER_KEY), n, d)
    return knn_entropy(jittered, k) - spec.entropy(d)


def entropy_at_scale(samples, spec: SmoothingSpec, seed: int = 0,
                     phases: Optional[np.ndarray] = None) -> float:
    """Dispatch to the grid estimator for cubes, to kNN otherwise."""
    if spec.kind == "cube":
        return grid_entropy_at_scale(samples, spec.r, seed=seed, phases=phases)
    return knn_smoothed_entropy(samples, spec, seed=seed)


def entropy_between_scales(samples, spec: SmoothingSpec, r1: float, r2: float, seed: int = 0) -> float:
    """
    H(cloud; r1 | r2) = H(cloud; r1) - H(cloud; r2) for r1 <= r2.

    Both terms share the cloud and the random phases (or jitter stream), so
    H(r|4r) = H(r|2r) + H(2r|4r) holds exactly.
    """
    if not 0 < r1 <= r2:
        raise ValueError("need 0 < r1 <= r2")
    if r1 == r2:
        return 0.0
    x = _as_cloud(samples)
    phases = grid_phases(x.shape[1], seed) if spec.kind == "cube" else None
    h1 = entropy_at_scale(x, spec.at_scale(r1), seed=seed, phases=phases)
    h2 = entropy_at_scale(x, spec.at_scale(r2), seed=seed, phases=phases)
    return h1 - h2


# =============================================================================
# Dimension estimation
# =============================================================================

@dataclass
class DimensionReport:
    scales: list
    entropy_at_scale: list
    stderr: list
    slope: float
    slope_stderr: float
    intercept: float
    predicted: Optional[float] = None
    verdict: str = "not compared"
    warnings: list = field(default_factory=list)
    kind: str = "cube"
    dimension: int = 1

    @property
    def band(self) -> tuple[float, float]:
        return (self.slope - 2 * self.slope_stderr, self.slope + 2 * self.slope_stderr)

    def to_dict(self) -> dict:
        return {
            "scales": list(self.scales),
            "entropy_at_scale": list(self.entropy_at_scale),
            "stderr": list(self.stderr),
            "slope": self.slope,
            "slope_stderr": self.slope_stderr,
            "band": list(self.band),
            "intercept": self.intercept,
            "predicted": self.predicted,
            "verdict": self.verdict,
            "warnings": list(self.warnings),
            "kind": self.kind,
            "dimension": self.dimension,
        }


def scale_ladder(r_min: float, r_max: float, n_scales: Optional[int] = None) -> np.ndarray:
    """Scales from r_max down: ratio 2 by default, geometric with n_scales points otherwise."""
    if not 0 < r_min < r_max:
        raise ValueError("need 0 < r_min < r_max")
    if n_scales is None:
        count = int(math.floor(math.log2(r_max / r_min) + 1e-9)) + 1
        scales = r_max * 2.0 ** -np.arange(count)
    else:
        scales = np.geomspace(r_max, r_min, n_scales)
    if len(scales) < EntropyConfig.MIN_SCALES:
        raise ScaleRangeTooNarrow(
            f"{len(scales)} scales in [{r_min:g}, {r_max:g}], need at least {EntropyConfig.MIN_SCALES}")
    return scales


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def estimate_dimension(
    samples,
    r_min: float,
    r_max: float,
    n_scales: Optional[int] = None,
    seed: int = 0,
    bias_bound: Optional[float] = None,
    threads: int = 1,
    spec: Optional[SmoothingSpec] = None,
) -> DimensionReport:
    """
    Least-squares slope of H(cloud; r) against log(1/r).

    Per-scale standard errors and the slope standard error come from an
    8-way leave-one-block-out jackknife over the cloud.

    Args:
        samples: (N, d) cloud
        r_min, r_max: Scale range
        n_scales: Number of geometric scales (ratio-2 ladder when None)
        seed: Seed for grid phases / jitter
        bias_bound: Truncation bias of the sampler (warns when not << r_min)
        threads: Worker threads (one task per scale)
        spec: Smoothing kernel family (cube by default)

    Returns:
        DimensionReport
    """
    x = _as_cloud(samples)
    n, d = x.shape
    spec = spec or SmoothingSpec("cube", r_max)
    scales = scale_ladder(r_min, r_max, n_scales)
    phases = grid_phases(d, seed) if spec.kind == "cube" else None
    splits = EntropyConfig.JACKKNIFE_SPLITS
    blocks = np.array_split(np.arange(n), splits)

    def at_scale(r: float) -> tuple[float, np.ndarray]:
        s = spec.at_scale(r)
        full = entropy_at_scale(x, s, seed=seed, phases=phases)
        loo = np.array([
            entropy_at_scale(np.delete(x, blk, axis=0), s, seed=seed, phases=phases) for blk in blocks
        ])
        return full, loo

    results = parallel_map(at_scale, list(scales), threads)
    h = np.array([r[0] for r in results])
    loo = np.array([r[1] for r in results])        # (scales, splits)
    log_inv = np.log(1.0 / scales)

    jk = math.sqrt((splits - 1) / splits)
    stderr = jk * np.sqrt(np.sum((loo - loo.mean(axis=1, keepdims=True)) ** 2, axis=1))
    slope, intercept = _ols(log_inv, h)
    loo_slopes = np.array([_ols(log_inv, loo[:, j])[0] for j in range(splits)])
    slope_stderr = float(jk * np.sqrt(np.sum((loo_slopes - loo_slopes.mean()) ** 2)))

    warnings = []
    if bias_bound is not None and bias_bound > 0.1 * scales.min():
        warnings.append(
            f"sampling truncation bias {bias_bound:.3g} is not << r_min={scales.min():.3g}")
    if not -0.1 <= slope <= d + 0.1:
        warnings.append(f"slope {slope:.3f} outside [0, d] beyond fitting slack")
    diffs = np.diff(h)   # scales decrease, so entropy should increase
    if np.any(diffs < -EntropyConfig.MONOTONE_SLACK):
        warnings.append("entropy is not monotone across the scale ladder")
    for w in warnings:
        logger.warning(w)

    logger.info(f"Dimension slope {slope:.4f} +- {slope_stderr:.4f} over {len(scales)} scales")
    return DimensionReport(
        scales=scales.tolist(),
        entropy_at_scale=h.tolist(),
        stderr=stderr.tolist(),
        slope=slope,
        slope_stderr=slope_stderr,
        intercept=intercept,
        warnings=warnings,
        kind=spec.kind,
        dimension=d,
    )


def predicted_dimension(profile, d: Optional[int] = None) -> float:
    """
    min{d, h/|chi|} from a MeasureProfile.

    The entropy estimate is an upper bound on the random walk entropy, so
    the prediction is an upper bound on the dimension.

    Raises:
        NotContractingOnAverage: chi >= 0
    """
    d = profile.dimension if d is None else d
    if profile.lyapunov >= 0:
        raise NotContractingOnAverage(f"chi = {profile.lyapunov:.6g} is not negative")
    if profile.h_hat is None:
        raise ValueError("profile has no entropy table")
    return min(float(d), profile.h_hat / abs(profile.lyapunov))


def compare_to_prediction(report: DimensionReport, predicted: float) -> DimensionReport:
    """Fill predicted and verdict on report."""
    report.predicted = predicted
    margin = 2 * report.slope_stderr + EntropyConfig.VERDICT_SLACK
    if abs(report.slope - predicted) <= margin:
        report.verdict = "consistent"
    elif report.slope < predicted:
        report.verdict = "below prediction (prediction is an upper bound)"
    else:
        report.verdict = "above prediction"
    return report


# =============================================================================
# Local dimension
# =============================================================================

@dataclass
class LocalDimensionReport:
    radii: list
    ratios: np.ndarray   # (points, radii); nan where the ball is empty
    mean: list
    spread: list

    def to_dict(self) -> dict:
        return {"radii": list(self.radii), "mean": list(self.mean), "spread": list(self.spread)}


def local_dimension(samples, x_subset, radii: Sequence[float], exclude_self: bool = True) -> LocalDimensionReport:
    """
    log cloud(B_r(x)) / log(2r) at each x and radius r.

    The denominator is the ball diameter, so a uniform measure on an interval
    gives exactly 1. Radii are capped at 2r < 1: above it log(2r) >= 0 and the
    ratio stops being a dimension. Clouds of diameter above 1 (the Cantor
    system's attractor has radius 3/2) should be scaled down before probing
    their coarse scales.

    Args:
        samples: (N, d) cloud
        x_subset: indices into samples, or an (m, d) array of points
        radii: Ball radii (2r < 1)
        exclude_self: Drop the centre when it is itself a sample

    Raises:
        ValueError: a radius outside 0 < 2r < 1
    """
    x = _as_cloud(samples)
    n = x.shape[0]
    subset = np.asarray(x_subset)
    from_cloud = subset.ndim == 1 and np.issubdtype(subset.dtype, np.integer)
    centers = x[subset] if from_cloud else _as_cloud(subset)
    if n < 2 or centers.shape[0] == 0:
        raise TooFewSamples("local dimension needs a cloud and at least one centre")
    tree = cKDTree(x)
    drop = 1 if (exclude_self and from_cloud) else 0
    ratios = np.full((centers.shape[0], len(radii)), np.nan)
    for j, r in enumerate(radii):
        if not 0 < 2 * r < 1:
            raise ValueError(f"radius {r} must satisfy 0 < 2r < 1 (rescale the cloud to probe coarser scales)")
        counts = np.asarray(tree.query_ball_point(centers, r, return_length=True)) - drop
        mass = counts / (n - drop)
        with np.errstate(divide="ignore"):
            ratios[:, j] = np.where(counts > 0, np.log(mass) / math.log(2 * r), np.nan)
    mean = np.nanmean(ratios, axis=0)
    spread = np.nanstd(ratios, axis=0)
    return LocalDimensionReport(list(radii), ratios, mean.tolist(), spread.tolist())


# =============================================================================
# Output
# =============================================================================

def write_scale_ladder(report: DimensionReport, csv_path: Path, dat_path: Optional[Path] = None) -> Path:
    """CSV (r, H, stderr) plus a gnuplot-ready .dat with the fitted line."""
    ensure_dir(csv_path.parent)
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["r", "H", "stderr"])
        for r, h, s in zip(report.scales, report.entropy_at_scale, report.stderr):
            writer.writerow([repr(float(r)), repr(float(h)), repr(float(s))])
    if dat_path is not None:
        with open(dat_path, "w", encoding="utf-8") as f:
            f.write(f"# slope {report.slope!r} intercept {report.intercept!r}\n")
            f.write("# log(1/r) H stderr fit\n")
            for r, h, s in zip(report.scales, report.entropy_at_scale, report.stderr):
                li = math.log(1.0 / r)
                f.write(f"{li!r} {h!r} {s!r} {report.slope * li + report.intercept!r}\n")
    return csv_path
