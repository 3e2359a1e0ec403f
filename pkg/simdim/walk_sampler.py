"""
Random walks on Sim(R^d) driven by mu.

Covers the walk q_n = g_1 ... g_n, the stopping time
tau_kappa = inf{n >= 0 : rho(q_n) <= kappa}, sampling of the self-similar
measure through stopped products applied to an anchor point, and the
large-deviation statistics of tau_kappa.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

from .config import SamplingConfig
from .errors import NotContractingOnAverage, StoppingCapExceeded
from .measure_core import FiniteMeasure, attractor_radius_bound, is_contracting_on_average, lyapunov_exponent
from .sim_group import SimElement, compose, identity
from .utils import chunk_bounds, ensure_dir, parallel_map, rng_stream

logger = logging.getLogger(__name__)


def _stop_threshold(kappa: float) -> float:
    """log kappa plus the relative float slack counted as 'reached'."""
    log_k = math.log(kappa)
    return log_k + SamplingConfig.STOP_REL_TOL * max(1.0, abs(log_k))


def _draw_indices(mu: FiniteMeasure, rng: np.random.Generator, size) -> np.ndarray:
    """Inverse-CDF draw of atom indices."""
    cdf = np.cumsum(mu.weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(size), side="right")


@dataclass(frozen=True, eq=False)
class WalkPath:
    """
    A realised walk: the atom index of every step.

    steps and prefix products are derived on demand, so long walks do not
    carry thousands of group elements around.
    """
    measure: FiniteMeasure
    indices: np.ndarray
    seed: int

    @property
    def n(self) -> int:
        return int(self.indices.shape[0])

    @cached_property
    def steps(self) -> list[SimElement]:
        return [self.measure.atoms[i] for i in self.indices]

    @cached_property
    def prefix(self) -> list[SimElement]:
        """q_1, ..., q_n with q_i = q_{i-1} g_i."""
        out = []
        q = identity(self.measure.d)
        for g in self.steps:
            q = compose(q, g)
            out.append(q)
        return out

    @cached_property
    def log_rho_prefix(self) -> np.ndarray:
        """log rho(q_i) for i = 0..n (exact sums, no underflow)."""
        return np.concatenate([[0.0], np.cumsum(self.measure.log_rhos()[self.indices])])

    def product(self) -> SimElement:
        return self.prefix[-1] if self.n else identity(self.measure.d)

    def segment(self, start: int, stop: int) -> SimElement:
        """Product of steps start+1 .. stop (1-based), i.e. g_{start+1} ... g_stop."""
        q = identity(self.measure.d)
        for i in self.indices[start:stop]:
            q = compose(q, self.measure.atoms[i])
        return q


@dataclass
class TauReport:
    kappa: float
    trials: int
    mean_tau: float
    var_tau: float
    tail: list
    chi: float
    ratio: float  # mean_tau * |chi| / log(1/kappa)

    def to_dict(self) -> dict:
        return {
            "kappa": self.kappa,
            "trials": self.trials,
            "mean_tau": self.mean_tau,
            "var_tau": self.var_tau,
            "tail": [list(t) for t in self.tail],
            "chi": self.chi,
            "ratio": self.ratio,
        }


@dataclass
class PointCloud:
    """Samples of the self-similar measure and how they were produced."""
    points: np.ndarray
    seed: int
    stop: dict
    rho_max: float = 0.0
    bias_bound: float = math.inf
    anchor: Optional[np.ndarray] = None

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    @property
    def d(self) -> int:
        return int(self.points.shape[1])

    def header(self) -> dict:
        return {
            "d": self.d,
            "count": self.count,
            "seed": self.seed,
            "stop": self.stop,
            "rho_max": self.rho_max,
            "bias_bound": self.bias_bound,
        }


# =============================================================================
# Walks
# =============================================================================

def sample_walk(mu: FiniteMeasure, n: int, seed: int) -> WalkPath:
    """n i.i.d. steps from mu."""
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = rng_stream(seed)
    return WalkPath(measure=mu, indices=_draw_indices(mu, rng, n), seed=seed)


def stopped_walk(mu: FiniteMeasure, kappa: float, seed: int) -> tuple[SimElement, int]:
    """
    Run the walk until rho(q_n) <= kappa.

    Returns:
        (q_tau, tau)

    Raises:
        StoppingCapExceeded: after SamplingConfig.STOPPING_CAP steps
    """
    if not 0 < kappa < 1:
        raise ValueError(f"kappa must lie in (0, 1), got {kappa}")
    path = stopped_path(mu, kappa, seed)
    return path.product(), path.n


def stopped_path(mu: FiniteMeasure, kappa: float, seed: int, start: float = 0.0) -> WalkPath:
    """
    The walk up to and including tau_kappa.

    Args:
        start: log rho already accumulated before the first step
    """
    rng = rng_stream(seed)
    threshold = _stop_threshold(kappa)
    log_rhos = mu.log_rhos()
    chunks = []
    total = start
    steps = 0
    chunk = 64
    while steps < SamplingConfig.STOPPING_CAP:
        idx = _draw_indices(mu, rng, chunk)
        cum = total + np.cumsum(log_rhos[idx])
        hit = np.flatnonzero(cum <= threshold)
        if hit.size:
            chunks.append(idx[:hit[0] + 1])
            return WalkPath(mu, np.concatenate(chunks), seed)
        chunks.append(idx)
        total = float(cum[-1])
        steps += chunk
        chunk = min(chunk * 2, 1 << 16)
    raise StoppingCapExceeded(
        f"rho(q_n) stayed above kappa={kappa:g} for {SamplingConfig.STOPPING_CAP} steps "
        f"(chi = {lyapunov_exponent(mu):.4g})")


# =============================================================================
# Attractor sampling
# =============================================================================

def _attractor_block(mu: FiniteMeasure, seed: int, block: int, count: int,
                     depth: Optional[int], kappa: Optional[float], anchor: np.ndarray):
    rng = rng_stream(seed, block)
    d = mu.d
    log_rhos = mu.log_rhos()
    rhos = np.exp(log_rhos)
    rots = mu.rot_stack()
    trans = mu.trans_stack()

    if depth is not None:
        idx = _draw_indices(mu, rng, (count, depth))
        x = np.broadcast_to(anchor, (count, d)).copy()
        # q x = g_1(g_2(...g_n(x))): apply the last step first
        for k in range(depth - 1, -1, -1):
            j = idx[:, k]
            x = rhos[j, None] * np.einsum("nij,nj->ni", rots[j], x) + trans[j]
        log_rho = log_rhos[idx].sum(axis=1) if depth else np.zeros(count)
        return x, float(np.exp(log_rho.max())) if count else 0.0

    threshold = _stop_threshold(kappa)
    lin = np.broadcast_to(np.eye(d), (count, d, d)).copy()   # rho(q) U(q)
    shift = np.zeros((count, d))                              # b(q)
    cum = np.zeros(count)
    active = np.arange(count)
    steps = 0
    while active.size:
        if steps >= SamplingConfig.STOPPING_CAP:
            raise StoppingCapExceeded(
                f"{active.size} samples still above kappa={kappa:g} after {steps} steps")
        j = _draw_indices(mu, rng, active.size)
        shift[active] += np.einsum("nij,nj->ni", lin[active], trans[j])
        lin[active] = np.einsum("nij,njk->nik", lin[active], rhos[j, None, None] * rots[j])
        cum[active] += log_rhos[j]
        active = active[cum[active] > threshold]
        steps += 1
    points = np.einsum("nij,j->ni", lin, anchor) + shift
    return points, float(np.exp(cum.max())) if count else 0.0


def sample_attractor(
    mu: FiniteMeasure,
    count: int,
    seed: int,
    depth: Optional[int] = None,
    kappa: Optional[float] = None,
    anchor: Optional[np.ndarray] = None,
    threads: int = 1,
) -> PointCloud:
    """
    Draw count points q x0 of the self-similar measure.

    Exactly one of depth (fixed n) or kappa (stopped products) must be given.
    Points are produced in fixed-size blocks, each with its own random
    stream, so the cloud is identical for any thread count.

    Args:
        mu: Contracting-on-average measure
        count: Number of points
        seed: Base seed
        depth: Fixed walk length
        kappa: Stopping threshold on rho(q)
        anchor: Start point x0 (origin by default)
        threads: Worker threads

    Returns:
        PointCloud with the truncation-bias bound rho_max * attractor radius
    """
    if (depth is None) == (kappa is None):
        raise ValueError("give exactly one of depth or kappa")
    if kappa is not None and not 0 < kappa < 1:
        raise ValueError(f"kappa must lie in (0, 1), got {kappa}")
    if not is_contracting_on_average(mu):
        raise NotContractingOnAverage(f"chi = {lyapunov_exponent(mu):.6g} is not negative")
    anchor = np.zeros(mu.d) if anchor is None else np.asarray(anchor, dtype=float)

    bounds = chunk_bounds(count, SamplingConfig.BLOCK_SIZE)
    results = parallel_map(
        lambda ib: _attractor_block(mu, seed, ib[0], ib[1][1] - ib[1][0], depth, kappa, anchor),
        list(enumerate(bounds)),
        threads,
    )
    points = np.concatenate([r[0] for r in results]) if results else np.zeros((0, mu.d))
    rho_max = max((r[1] for r in results), default=0.0)
    radius = attractor_radius_bound(mu)
    bias = rho_max * (radius + float(np.linalg.norm(anchor))) if math.isfinite(radius) else math.inf
    stop = {"rule": "depth", "value": depth} if depth is not None else {"rule": "kappa", "value": kappa}
    logger.info(f"Sampled {count} attractor points ({stop['rule']}={stop['value']}, rho_max={rho_max:.3g})")
    return PointCloud(points=points, seed=seed, stop=stop, rho_max=rho_max, bias_bound=bias, anchor=anchor)


def choose_kappa(mu: FiniteMeasure, target_resolution: float, seed: int, threads: int = 1) -> float:
    """
    kappa <= target_resolution / (1 + p99 |q x0|) from a pilot run.

    Bounds the truncation bias for systems whose support is unbounded.
    """
    pilot_kappa = min(0.5, target_resolution)
    pilot = sample_attractor(mu, SamplingConfig.PILOT_SAMPLES, seed, kappa=pilot_kappa, threads=threads)
    p99 = float(np.percentile(np.linalg.norm(pilot.points, axis=1), 99))
    kappa = target_resolution / (1.0 + p99)
    logger.info(f"Chose kappa={kappa:.3g} (pilot p99 |x| = {p99:.3g})")
    return kappa


def push_forward(mu: FiniteMeasure, points: np.ndarray, seed: int) -> np.ndarray:
    """Apply one independent g ~ mu to every point."""
    rng = rng_stream(seed)
    j = _draw_indices(mu, rng, points.shape[0])
    rhos = np.array([a.rho for a in mu.atoms])
    return rhos[j, None] * np.einsum("nij,nj->ni", mu.rot_stack()[j], points) + mu.trans_stack()[j]


def stationarity_check(mu: FiniteMeasure, cloud: PointCloud, seed: int) -> dict:
    """
    Compare W1(cloud, mu * cloud) with the W1 between two independent clouds.

    Stationarity holds empirically when the first is at most three times the
    Monte-Carlo reference.
    """
    from .prob_tools import empirical_w1

    pushed = push_forward(mu, cloud.points, seed)
    other = sample_attractor(mu, cloud.count, seed + 1, **{cloud.stop["rule"]: cloud.stop["value"]})
    w_push = empirical_w1(cloud.points, pushed).value
    w_ref = empirical_w1(cloud.points, other.points).value
    return {
        "w1_pushed": w_push,
        "w1_reference": w_ref,
        "passed": bool(w_push <= 3.0 * w_ref),
    }


# =============================================================================
# Stopping-time statistics
# =============================================================================

def _tau_block(log_rhos: np.ndarray, mu: FiniteMeasure, seed: int, block: int, count: int,
               threshold: float) -> np.ndarray:
    rng = rng_stream(seed, block)
    cum = np.zeros(count)
    tau = np.zeros(count, dtype=np.int64)
    active = np.arange(count)
    steps = 0
    while active.size:
        if steps >= SamplingConfig.STOPPING_CAP:
            raise StoppingCapExceeded(f"{active.size} walks still running after {steps} steps")
        cum[active] += log_rhos[_draw_indices(mu, rng, active.size)]
        steps += 1
        tau[active] = steps
        active = active[cum[active] > threshold]
    return tau


def tau_statistics(
    mu: FiniteMeasure,
    kappa: float,
    trials: int,
    seed: int,
    threads: int = 1,
    epsilons=SamplingConfig.TAIL_EPSILONS,
) -> TauReport:
    """
    Empirical law of tau_kappa.

    Returns:
        TauReport with mean, variance, the tail table
        P[|tau - E tau| >= eps E tau] and mean_tau * |chi| / log(1/kappa)
    """
    if not 0 < kappa < 1:
        raise ValueError(f"kappa must lie in (0, 1), got {kappa}")
    chi = lyapunov_exponent(mu)
    threshold = _stop_threshold(kappa)
    log_rhos = mu.log_rhos()
    bounds = chunk_bounds(trials, SamplingConfig.BLOCK_SIZE)
    taus = np.concatenate(parallel_map(
        lambda ib: _tau_block(log_rhos, mu, seed, ib[0], ib[1][1] - ib[1][0], threshold),
        list(enumerate(bounds)),
        threads,
    ))
    mean = float(taus.mean())
    var = float(taus.var())
    tail = [(float(eps), float(np.mean(np.abs(taus - mean) >= eps * mean))) for eps in sorted(epsilons)]
    ratio = mean * abs(chi) / math.log(1.0 / kappa)
    return TauReport(kappa=kappa, trials=trials, mean_tau=mean, var_tau=var, tail=tail, chi=chi, ratio=ratio)


# =============================================================================
# Output
# =============================================================================

def save_point_cloud(cloud: PointCloud, path: Path, fmt: str = "csv") -> Path:
    """
    Write a point cloud with its header (d, count, seed, stop rule).

    csv: '#'-prefixed JSON header line, then one point per row.
    npz: arrays 'points' and 'header' (JSON string).
    """
    ensure_dir(path.parent)
    header = json.dumps(cloud.header(), sort_keys=True)
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write(f"# {header}\n")
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow([f"x{i}" for i in range(cloud.d)])
            for row in cloud.points:
                writer.writerow([repr(float(v)) for v in row])
    elif fmt == "npz":
        with open(path, "wb") as f:
            np.savez(f, points=cloud.points, header=np.array(header))
    else:
        raise ValueError(f"unknown point cloud format: {fmt}")
    return path


def load_point_cloud(path: Path) -> PointCloud:
    """Read back a cloud written by save_point_cloud."""
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as data:
            header = json.loads(str(data["header"]))
            points = data["points"]
    else:
        with open(path, encoding="utf-8") as f:
            header = json.loads(f.readline()[1:].strip())
        points = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
    return PointCloud(points=points, seed=header["seed"], stop=header["stop"],
                      rho_max=header.get("rho_max", 0.0), bias_bound=header.get("bias_bound", math.inf))
