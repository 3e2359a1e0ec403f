"""
Proper decompositions of stopped random walks.

A proper decomposition splits a path gamma_1 ... gamma_{T_n} as
f_1 exp(U_1) h_1 ... f_n exp(U_n) h_n where every f_i is the block product
rounded to a lattice cell, U_i is the small Lie-algebra remainder and the
conditioning sigma-algebras are realised by the lattice cells. The module
builds such decompositions from sampled walks, validates axioms A1-A9,
tracks the achieved variance floors through rescaling and concatenation,
and measures the Taylor linearisation error and trace-at-scale lower bounds
that drive the variance sums.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.stats import special_ortho_group

from .config import DecompositionConfig, EnumerationConfig, SamplingConfig
from .errors import (
    BlockPlanInfeasible,
    NotContractingOnAverage,
    PreconditionViolation,
    ScaleMismatch,
    StoppingCapExceeded,
)
from .measure_core import FiniteMeasure, is_contracting_on_average
from .sim_group import (
    LieVector,
    SimElement,
    apply,
    batch_metric,
    compose,
    compose_all,
    differential_psi,
    exp_map,
    identity,
    inverse,
    lie_dimension,
    log_map,
    metric_dist,
    psi_matrix,
    rotation_angles,
)
from .utils import chunk_bounds, ensure_dir, parallel_map, rng_stream
from .walk_sampler import WalkPath, _draw_indices, _stop_threshold

logger = logging.getLogger(__name__)

# stream keys
_RESAMPLE_KEY = 11
_BOOTSTRAP_KEY = 12
_BRIDGE_KEY = 13
_TRACE_KEY = 14
_VALIDATE_KEY = 15

SATISFIED = "Satisfied"
BY_CONSTRUCTION = "Satisfied-by-construction"
VIOLATED = "Violated"
UNVERIFIED = "Unverified"


# =============================================================================
# Block products (vectorised over many independent blocks)
# =============================================================================

def _draw_blocks(mu: FiniteMeasure, rng: np.random.Generator, count: int, min_len: int,
                 level: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
    """
    Index matrix of i.i.d. blocks and their lengths.

    Every block has min_len steps; with a level, a block keeps growing
    while its log rho is still above the level (a stopping time).
    """
    idx = _draw_indices(mu, rng, (count, min_len))
    lengths = np.full(count, min_len)
    if level is None:
        return idx, lengths
    lrs = mu.log_rhos()
    cum = np.cumsum(lrs[idx], axis=1)[:, -1] if min_len else np.zeros(count)
    cols = [idx]
    width = min_len
    while True:
        need = cum > level
        if not need.any():
            break
        if width >= SamplingConfig.STOPPING_CAP:
            raise StoppingCapExceeded(f"block did not reach log rho {level:.4g} in {width} steps")
        col = _draw_indices(mu, rng, count)
        cols.append(col[:, None])
        width += 1
        lengths = lengths + need
        cum = np.where(need, cum + lrs[col], cum)
    return np.concatenate(cols, axis=1), lengths


def _products(mu: FiniteMeasure, idx: np.ndarray, lengths: np.ndarray):
    """Row products g_{idx[j,0]} ... g_{idx[j,len_j - 1]} as (log rho, rot, trans) stacks."""
    lrs, rots, trs = mu.log_rhos(), mu.rot_stack(), mu.trans_stack()
    count = idx.shape[0]
    d = mu.d
    lr = np.zeros(count)
    rot = np.tile(np.eye(d), (count, 1, 1))
    tr = np.zeros((count, d))
    for k in range(idx.shape[1]):
        live = np.flatnonzero(k < lengths)
        if live.size == 0:
            break
        a = idx[live, k]
        tr[live] += np.exp(lr[live])[:, None] * np.einsum("nij,nj->ni", rot[live], trs[a])
        rot[live] = rot[live] @ rots[a]
        lr[live] += lrs[a]
    return lr, rot, tr


def _path_block_end(path: WalkPath, start: int, min_len: int, contracting: bool) -> int:
    """End index of a path block of at least min_len steps (grown until rho < 1 if contracting)."""
    stop = start + min_len
    if stop > path.n:
        raise BlockPlanInfeasible(f"path of {path.n} steps ends inside a block starting at step {start}")
    if contracting:
        lrs = path.measure.log_rhos()[path.indices]
        cum = float(np.cumsum(lrs[start:stop])[-1]) if min_len else 0.0
        while cum >= 0:
            if stop >= path.n:
                raise BlockPlanInfeasible(
                    f"path of {path.n} steps ends before the block from step {start} contracts")
            cum += lrs[stop]
            stop += 1
    return stop


# =============================================================================
# Rounding lattice
# =============================================================================

def _flip(d: int) -> np.ndarray:
    j = np.eye(d)
    j[0, 0] = -1.0
    return j


def _rotation_coords(rots: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orientation signs and skew angles of a rotation stack (det -1 handled as base @ J)."""
    count, d = rots.shape[0], rots.shape[1]
    signs = np.sign(np.linalg.det(rots))
    k = d * (d - 1) // 2
    angles = np.zeros((count, k))
    if d == 1:
        return signs, angles
    flip = _flip(d)
    zero = np.zeros(d)
    for j in range(count):
        base = rots[j] @ flip if signs[j] < 0 else rots[j]
        angles[j] = rotation_angles(SimElement.unchecked(1.0, base, zero))
    return signs, angles


def _rotation_from_coords(sign: float, angles: np.ndarray, d: int) -> np.ndarray:
    if d == 1:
        return np.array([[sign]])
    coords = np.concatenate([[0.0], angles, np.zeros(d)])
    base = expm(LieVector.from_coords(d, coords).skew)
    return base @ _flip(d) if sign < 0 else base


@dataclass(frozen=True)
class Lattice:
    """
    Rounding cells in (log rho, rotation angles, translation).

    log rho is rounded down so that a contracting block stays contracting;
    angles and translation are rounded to the nearest lattice point.
    """
    trans_side: float
    log_rho_side: float
    angle_side: float

    @classmethod
    def at_side(cls, side: float, trans_side: Optional[float] = None) -> "Lattice":
        return cls(
            trans_side=side if trans_side is None else trans_side,
            log_rho_side=min(side, DecompositionConfig.LOG_RHO_SIDE_MAX),
            angle_side=min(side, DecompositionConfig.ANGLE_SIDE_MAX),
        )

    def cells(self, lr: np.ndarray, rot: np.ndarray, tr: np.ndarray) -> np.ndarray:
        """Integer cell labels [sign, k_rho, k_angles..., k_trans...] per element."""
        signs, angles = _rotation_coords(rot)
        k_rho = np.floor(lr / self.log_rho_side)
        k_ang = np.round(angles / self.angle_side)
        k_tr = np.round(tr / self.trans_side)
        return np.column_stack([signs, k_rho, k_ang, k_tr]).astype(np.int64)

    def points(self, cells: np.ndarray, d: int):
        """Lattice elements of the given cells as (log rho, rot, trans) stacks."""
        k = d * (d - 1) // 2
        lr = cells[:, 1] * self.log_rho_side
        tr = cells[:, 2 + k:] * self.trans_side
        rot = np.empty((cells.shape[0], d, d))
        rot_keys, inv = np.unique(cells[:, [0] + list(range(2, 2 + k))], axis=0, return_inverse=True)
        for u, key in enumerate(rot_keys):
            rot[inv.reshape(-1) == u] = _rotation_from_coords(float(key[0]), key[1:] * self.angle_side, d)
        return lr, rot, tr

    def point(self, cell: Sequence[int], d: int) -> SimElement:
        lr, rot, tr = self.points(np.asarray([cell], dtype=np.int64), d)
        return SimElement.unchecked(math.exp(lr[0]), rot[0], tr[0])

    def to_dict(self) -> dict:
        return {"trans_side": self.trans_side, "log_rho_side": self.log_rho_side, "angle_side": self.angle_side}


def _log_ratio(lr_f, rot_f, tr_f, lr_g, rot_g, tr_g) -> np.ndarray:
    """LieVector coordinates of log(f^{-1} g) for stacks of pairs (f, g) with equal orientation."""
    count, d = tr_g.shape
    alpha = lr_g - lr_f
    t = np.exp(-lr_f)[:, None] * np.einsum("nji,nj->ni", rot_f, tr_g - tr_f)
    if d == 1:
        # V(alpha) = (e^alpha - 1) / alpha
        small = np.abs(alpha) < 1e-12
        v = np.where(small, 1.0 + 0.5 * alpha, np.expm1(alpha) / np.where(small, 1.0, alpha))
        return np.column_stack([alpha, t[:, 0] / v])
    out = np.empty((count, lie_dimension(d)))
    for j in range(count):
        rel = rot_f[j].T @ rot_g[j]
        out[j] = log_map(SimElement.unchecked(math.exp(alpha[j]), rel, t[j])).coords()
    return out


def _cell_covariances(cells: np.ndarray, coords: np.ndarray, active: np.ndarray):
    """
    Within-cell covariance of coords over the active rows.

    Returns:
        (group index per row or -1, covariance per group, count per group)
    """
    group = np.full(cells.shape[0], -1)
    rows = np.flatnonzero(active)
    ell = coords.shape[1]
    if rows.size == 0:
        return group, np.zeros((0, ell, ell)), np.zeros(0, dtype=int)
    _, inv, counts = np.unique(cells[rows], axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    group[rows] = inv
    x = coords[rows]
    s1 = np.zeros((counts.size, ell))
    s2 = np.zeros((counts.size, ell, ell))
    np.add.at(s1, inv, x)
    np.add.at(s2, inv, x[:, :, None] * x[:, None, :])
    cov = np.zeros_like(s2)
    ok = counts >= DecompositionConfig.MIN_CELL_COUNT
    c = counts[ok][:, None, None].astype(float)
    cov[ok] = (s2[ok] - s1[ok][:, :, None] * s1[ok][:, None, :] / c) / (c - 1)
    return group, cov, counts


# =============================================================================
# Types
# =============================================================================

@dataclass(frozen=True)
class BlockPlan:
    """Block lengths: f blocks have at least f_len steps, h blocks exactly h_len."""
    n_blocks: int
    f_len: int
    h_len: int

    @classmethod
    def equal(cls, n_blocks: int, K: int) -> "BlockPlan":
        return cls(n_blocks, K, K)

    @property
    def min_steps(self) -> int:
        return self.n_blocks * (self.f_len + self.h_len)

    def check(self, K: int) -> None:
        if self.n_blocks < 0:
            raise BlockPlanInfeasible("number of blocks must be non-negative")
        if self.f_len < K or self.h_len < K:
            raise BlockPlanInfeasible(f"block lengths ({self.f_len}, {self.h_len}) are below K={K}")
        if K < 0:
            raise BlockPlanInfeasible("K must be non-negative")

    def to_dict(self) -> dict:
        return {"n_blocks": self.n_blocks, "f_len": self.f_len, "h_len": self.h_len}


@dataclass
class ProperDecomposition:
    """
    gamma_1 ... gamma_{T_n} = f_1 exp(U_1) h_1 ... f_n exp(U_n) h_n.

    conditioning_tag[i] records the lattice cell f_i was rounded to (None when
    f_i is the block itself), the lattice, and the h block range. floor_matrix[i]
    is the estimated E[Var(X_i | A_i) | A_{i-1}] normalised as in A9, m[i] the
    certified floor below it.
    """
    n: int
    K: int
    A: float
    r: float
    f: list
    h: list
    U: list
    S: list
    T: list
    m: list
    conditioning_tag: list
    floor_matrix: list = field(default_factory=list)
    floor_support: list = field(default_factory=list)
    bridges: list = field(default_factory=list)
    block_log_floor: list = field(default_factory=list)
    grid_step: float = DecompositionConfig.GRID_STEP
    path: Optional[WalkPath] = None
    seed: int = 0

    def log_floors(self) -> list[float]:
        """Per-block increments whose partial sums bound log rho of every prefix from below."""
        if len(self.block_log_floor) == self.n:
            return list(self.block_log_floor)
        return [math.log(f.rho) + math.log(h.rho) for f, h in zip(self.f, self.h)]

    @property
    def realized_log_kappa(self) -> float:
        return math.fsum(math.log(g.rho) for g in self.f) + math.fsum(math.log(g.rho) for g in self.h)

    @property
    def realized_kappa(self) -> float:
        """rho(f_1 h_1 ... f_n h_n) of this realisation."""
        return math.exp(self.realized_log_kappa)

    @property
    def log_kappa(self) -> float:
        return math.fsum(self.log_floors())

    @property
    def kappa(self) -> float:
        """Contraction floor: min over realisations of rho(f_1 h_1 ... f_n h_n)."""
        return math.exp(self.log_kappa)

    def prefix_log_rho(self, i: int) -> float:
        """log rho(f_1 h_1 ... f_{i-1} h_{i-1}) for 0-based block i."""
        return math.fsum(math.log(self.f[j].rho) + math.log(self.h[j].rho) for j in range(i))

    def records(self) -> list[dict]:
        out = []
        for i in range(self.n):
            tag = self.conditioning_tag[i]
            out.append({
                "block": i + 1,
                "S": self.S[i],
                "T": self.T[i],
                "f": self.f[i].to_dict(),
                "h": self.h[i].to_dict(),
                "U": self.U[i].coords().tolist(),
                "cell": tag.get("cell"),
                "zeroed": tag.get("zeroed"),
                "lattice": tag.get("lattice"),
                "m": self.m[i],
                "floor_support": self.floor_support[i] if i < len(self.floor_support) else 0,
            })
        return out

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "K": self.K,
            "A": self.A,
            "r": self.r,
            "kappa": self.kappa,
            "realized_kappa": self.realized_kappa,
            "grid_step": self.grid_step,
            "m": list(self.m),
            "variance_sum": math.fsum(self.m),
            "blocks": self.records(),
        }


@dataclass
class AxiomResult:
    axiom: str
    status: str
    failing: list = field(default_factory=list)
    detail: str = ""

    def to_dict(self) -> dict:
        return {"axiom": self.axiom, "status": self.status, "failing": list(self.failing), "detail": self.detail}


@dataclass
class DecompositionValidation:
    results: dict
    reconstruction_error: float

    @property
    def passed(self) -> bool:
        return all(r.status != VIOLATED for r in self.results.values())

    def violated(self) -> list[str]:
        return [name for name, r in self.results.items() if r.status == VIOLATED]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "reconstruction_error": self.reconstruction_error,
            "axioms": {k: v.to_dict() for k, v in self.results.items()},
        }


@dataclass
class VarianceSum:
    total: float
    n: int
    K: int
    kappa: float
    A: float
    r: float
    realized_kappa: float = 1.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "n": self.n,
            "K": self.K,
            "kappa": self.kappa,
            "realized_kappa": self.realized_kappa,
            "A": self.A,
            "r": self.r,
            "note": "lower bound for V(mu, n, K, kappa', A; r) for every kappa' <= kappa",
        }


@dataclass
class TaylorReport:
    n: int
    r: float
    rho_product: float
    exact_x: np.ndarray
    linear_S: np.ndarray
    error: float
    bound_constant: float

    @property
    def ratio(self) -> float:
        """error / (rho^{-1} r^2)."""
        return self.error * self.rho_product / (self.r * self.r) if self.r > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "r": self.r,
            "rho_product": self.rho_product,
            "exact_x": self.exact_x.tolist(),
            "linear_S": self.linear_S.tolist(),
            "error": self.error,
            "bound_constant": self.bound_constant,
        }


@dataclass
class TaylorScaling:
    n: int
    d: int
    radii: list
    max_ratio: list
    fitted_C: list
    trials: int

    @property
    def stable(self) -> bool:
        c = [x for x in self.fitted_C if x > 0]
        return len(c) == len(self.fitted_C) and max(c) <= 1.2 * min(c)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "d": self.d,
            "radii": list(self.radii),
            "max_ratio": list(self.max_ratio),
            "fitted_C": list(self.fitted_C),
            "trials": self.trials,
            "stable": self.stable,
        }


@dataclass
class TraceLowerBound:
    t: float
    zeroed_mass: float
    trials: int
    cells: int
    kappa: float
    r: float
    grid_step: float

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "zeroed_mass": self.zeroed_mass,
            "trials": self.trials,
            "cells": self.cells,
            "kappa": self.kappa,
            "r": self.r,
            "grid_step": self.grid_step,
        }


# =============================================================================
# Taylor linearisation
# =============================================================================

def taylor_linearize(
    g: Sequence[SimElement],
    u: Sequence[LieVector],
    v,
    A: Optional[float] = None,
    r: Optional[float] = None,
) -> TaylorReport:
    """
    Compare x = g_1 exp(u_1) ... g_n exp(u_n) v with its first-order expansion.

    S = g_1...g_n v + sum_i zeta_i(u_i), zeta_i(u) = rho(G_i) U(G_i) psi_{w_i}(u)
    with G_i = g_1...g_i and w_i = g_{i+1}...g_n v.

    Args:
        g: Group elements with rho < 1
        u: Lie vectors, |u_i| <= rho(G_i)^{-1} r < 1
        v: Point with |v| <= A
        A: Translation bound (defaults to the largest |b(g_i)|, |v|)
        r: Scale (defaults to the smallest admissible value)

    Raises:
        PreconditionViolation: naming the first failing inequality
    """
    n = len(g)
    if n == 0 or len(u) != n:
        raise ValueError("need equally many group elements and Lie vectors (at least one)")
    d = g[0].d
    v = np.atleast_1d(np.asarray(v, dtype=float))
    prefix = []
    acc = identity(d)
    for gi in g:
        acc = compose(acc, gi)
        prefix.append(acc)
    if A is None:
        A = max([float(np.linalg.norm(gi.trans)) for gi in g] + [float(np.linalg.norm(v))])
    if r is None:
        r = max(ui.norm() * p.rho for ui, p in zip(u, prefix))

    for i, (gi, ui, p) in enumerate(zip(g, u, prefix), start=1):
        if not gi.rho < 1:
            raise PreconditionViolation(f"rho(g_{i}) < 1 fails (rho = {gi.rho:.6g})")
        if np.linalg.norm(gi.trans) > A * (1 + 1e-12):
            raise PreconditionViolation(f"|b(g_{i})| <= A fails ({np.linalg.norm(gi.trans):.6g} > {A:.6g})")
        bound = r / p.rho
        if ui.norm() > bound * (1 + 1e-12):
            raise PreconditionViolation(f"|u_{i}| <= rho(g_1...g_{i})^-1 r fails ({ui.norm():.6g} > {bound:.6g})")
        if not bound < 1:
            raise PreconditionViolation(f"rho(g_1...g_{i})^-1 r < 1 fails ({bound:.6g})")
    if np.linalg.norm(v) > A * (1 + 1e-12):
        raise PreconditionViolation(f"|v| <= A fails ({np.linalg.norm(v):.6g} > {A:.6g})")

    word = []
    for gi, ui in zip(g, u):
        word.extend([gi, exp_map(ui)])
    x = apply(compose_all(word, d), v)

    # w_i = g_{i+1} ... g_n v, built from the right
    tails = [v]
    for gi in reversed(g[1:]):
        tails.append(apply(gi, tails[-1]))
    tails.reverse()
    s = apply(prefix[-1], v)
    for p, ui, w in zip(prefix, u, tails):
        s = s + p.rho * (p.rot @ differential_psi(w, ui))

    error = float(np.linalg.norm(x - s))
    rho_product = prefix[-1].rho
    if r > 0 and error > 0:
        bound_constant = (error * rho_product / (r * r)) ** (1.0 / n)
    else:
        bound_constant = 0.0
    return TaylorReport(n, float(r), rho_product, x, s, error, bound_constant)


def _unit_ball(rng: np.random.Generator, d: int, radius: float) -> np.ndarray:
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    return radius * rng.random() ** (1.0 / d) * direction


def random_taylor_instance(rng: np.random.Generator, n: int, d: int, r: float, A: float):
    """
    Random admissible (g, u, v) with rho(g_i) in [0.5, 0.9] and |u_i| at most its bound.

    The draws consume rng identically for every r, so one seed gives the same
    directions at every scale.
    """
    g = []
    for _ in range(n):
        rho = rng.uniform(0.5, 0.9)
        if d == 1:
            rot = np.array([[rng.choice([-1.0, 1.0])]])
        else:
            rot = special_ortho_group.rvs(d, random_state=rng)
        g.append(SimElement(rho, rot, _unit_ball(rng, d, A)))
    v = _unit_ball(rng, d, A)
    ell = lie_dimension(d)
    u = []
    log_prefix = 0.0
    for gi in g:
        log_prefix += math.log(gi.rho)
        direction = rng.standard_normal(ell)
        direction /= np.linalg.norm(direction)
        size = rng.uniform(0.5, 1.0) * math.exp(-log_prefix) * r
        u.append(LieVector.from_coords(d, size * direction))
    return g, u, v


def taylor_scaling_study(
    n: int,
    d: int,
    radii: Sequence[float] = (1e-2, 1e-3, 1e-4),
    trials: int = 1000,
    A: float = 1.0,
    seed: int = 0,
    threads: int = 1,
) -> TaylorScaling:
    """
    Max over trials of error / (rho^{-1} r^2) at each r, and C = (max ratio)^{1/n}.

    Trial t uses the same random stream at every r, so the fitted constants
    are comparable across scales.
    """
    def run(r: float) -> float:
        worst = 0.0
        for t in range(trials):
            g, u, v = random_taylor_instance(rng_stream(seed, t), n, d, r, A)
            worst = max(worst, taylor_linearize(g, u, v, A=A, r=r).ratio)
        return worst

    ratios = parallel_map(run, list(radii), threads)
    fitted = [x ** (1.0 / n) if x > 0 else 0.0 for x in ratios]
    logger.info(f"Taylor study n={n} d={d}: fitted C {', '.join(f'{c:.4g}' for c in fitted)}")
    return TaylorScaling(n, d, list(radii), ratios, fitted, trials)


# =============================================================================
# Construction
# =============================================================================

def _resampled_blocks(mu: FiniteMeasure, plan: BlockPlan, rng: np.random.Generator, count: int):
    f_idx, f_len = _draw_blocks(mu, rng, count, plan.f_len, level=np.nextafter(0.0, -1.0))
    h_idx, h_len = _draw_blocks(mu, rng, count, plan.h_len)
    return _products(mu, f_idx, f_len), _products(mu, h_idx, h_len)


def _pinned_rows(cells: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Rows whose cell holds a single block product (every U in the cell agrees)."""
    _, inv = np.unique(cells, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    groups = int(inv.max()) + 1 if inv.size else 0
    hi = np.full((groups, coords.shape[1]), -np.inf)
    lo = np.full((groups, coords.shape[1]), np.inf)
    np.maximum.at(hi, inv, coords)
    np.minimum.at(lo, inv, coords)
    return np.all(hi - lo <= EnumerationConfig.DEDUP_TOL, axis=1)[inv]


@dataclass
class _BlockSample:
    """Fresh (f, h) block pairs read in the lattice frame of one block."""
    lr_f: np.ndarray
    rot_f: np.ndarray
    tr_f: np.ndarray
    cells: np.ndarray
    coords: np.ndarray
    active: np.ndarray
    weight: np.ndarray
    log_rho: np.ndarray


def _sample_block(mu: FiniteMeasure, plan: BlockPlan, lattice: Lattice, prefix_lr: float,
                  r: float, A: float, rng: np.random.Generator, count: int) -> _BlockSample:
    """
    Resample `count` block pairs and push them through the A9 normalisation.

    coords are log(f_cell^{-1} f) over the A6 scale exp(-prefix) r; active marks
    the rows satisfying A5 and A6. log_rho is log rho(f h) with f the rounded
    cell point, or the block itself where that row would be zeroed or pinned.
    """
    (lr_f, rot_f, tr_f), (lr_h, _, tr_h) = _resampled_blocks(mu, plan, rng, count)
    cells = lattice.cells(lr_f, rot_f, tr_f)
    lr_p, rot_p, tr_p = lattice.points(cells, mu.d)
    coords = _log_ratio(lr_p, rot_p, tr_p, lr_f, rot_f, tr_f)
    with np.errstate(over="ignore"):
        a6_bound = np.exp(-prefix_lr - lr_p) * r
    active = (np.linalg.norm(coords, axis=1) <= a6_bound * (1 + 1e-12)) & (np.linalg.norm(tr_h, axis=1) <= A)
    weight = np.exp(lr_p)[:, None, None] * (rot_p @ psi_matrix(tr_h))
    rounded = active & ~_pinned_rows(cells, coords)
    log_rho = np.where(rounded, lr_p, lr_f) + lr_h
    scale = math.exp(min(-prefix_lr, 700.0)) * r
    return _BlockSample(lr_f, rot_f, tr_f, cells, coords / scale, active, weight, log_rho)


def _floor_matrix(cells, coords, ok, weight, rows: np.ndarray):
    """
    Mean over the given rows of L_j Cov(U | cell_j) L_j^T.

    Cell populations are the ok rows among `rows`; rows failing A5 or A6
    contribute zero.
    """
    group, cov, counts = _cell_covariances(cells[rows], coords[rows], ok[rows])
    contrib = np.zeros((rows.size, weight.shape[1], weight.shape[1]))
    live = group >= 0
    if live.any():
        lw = weight[rows][live]
        contrib[live] = np.einsum("nil,nlk,njk->nij", lw, cov[group[live]], lw)
    support = 0
    if live.any():
        support = int(np.sum(counts[group[live]] >= DecompositionConfig.MIN_CELL_COUNT))
    return contrib.mean(axis=0), support


def _block_floor(cells, coords, ok, weight, bootstrap: int, rng: np.random.Generator):
    """Point estimate of the A9 matrix and the bootstrap lower-confidence floor of its min eigenvalue."""
    total = cells.shape[0]
    matrix, support = _floor_matrix(cells, coords, ok, weight, np.arange(total))
    mins = []
    for _ in range(bootstrap):
        rows = rng.integers(0, total, total)
        mat, _ = _floor_matrix(cells, coords, ok, weight, rows)
        mins.append(float(np.linalg.eigvalsh(mat)[0]))
    if mins:
        m = float(np.quantile(mins, 1.0 - DecompositionConfig.CONFIDENCE))
    else:
        m = float(np.linalg.eigvalsh(matrix)[0])
    return matrix, max(0.0, m), support


def build_decomposition(
    path: WalkPath,
    K: int,
    A: float,
    r: float,
    block_plan: Optional[BlockPlan] = None,
    grid_step: float = DecompositionConfig.GRID_STEP,
    seed: Optional[int] = None,
    resamples: int = DecompositionConfig.RESAMPLES,
    bootstrap: int = DecompositionConfig.BOOTSTRAP,
) -> ProperDecomposition:
    """
    Realise a proper decomposition of (mu, n, K, A) at scale r on a sampled path.

    Block i starts where block i-1 ended; its f part has at least f_len steps
    and grows until the block product contracts (a stopping time), its h part
    has h_len steps. The f product is rounded to a lattice with side
    grid_step * rho(f_1 h_1 ... h_{i-1})^{-1} r and U_i = log(f_i^{-1} block).
    U_i is set to zero (f_i = block) when |b(h_i)| > A, when |U_i| breaks the
    A6 bound, or when the resampled blocks show that the cell pins the block
    product exactly. The floor m_i comes from `resamples` fresh (f, h) block
    pairs: the within-cell covariance of U pushed through
    rho(f) U(f) psi_{b(h)}, averaged, and bootstrapped to a lower confidence
    bound of its smallest eigenvalue.
    The same pairs give the contraction floor: the smallest log rho(f_i h_i)
    seen for block i, the realised one included, summed over blocks.

    Args:
        path: Walk supplying gamma_1, gamma_2, ...
        K: Minimal block length of axiom A1
        A: Translation threshold of axiom A5
        r: Scale in (0, 1)
        block_plan: Block lengths (one block of K + K steps by default)
        grid_step: Lattice side relative to the A6 scale
        seed: Resampling seed (defaults to the path seed)
        resamples: Fresh block pairs per floor estimate
        bootstrap: Bootstrap replicates of the floor

    Returns:
        ProperDecomposition

    Raises:
        BlockPlanInfeasible: plan inconsistent with K or longer than the path
        NotContractingOnAverage: chi >= 0
        RotationBranchError: a block rotation sits at angle pi
    """
    if not 0 < r < 1:
        raise ValueError(f"scale r must lie in (0, 1), got {r}")
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    mu = path.measure
    d = mu.d
    plan = block_plan or BlockPlan.equal(1, K)
    plan.check(K)
    if not is_contracting_on_average(mu):
        raise NotContractingOnAverage("decompositions need a measure contracting on average")
    if plan.min_steps > path.n:
        raise BlockPlanInfeasible(f"plan needs at least {plan.min_steps} steps, path has {path.n}")
    seed = path.seed if seed is None else seed

    f_list, h_list, u_list, s_list, t_list = [], [], [], [], []
    tags, floors, matrices, supports, bridges, log_floors = [], [], [], [], [], []
    prefix_lr = 0.0
    t_prev = 0
    for i in range(plan.n_blocks):
        s_i = _path_block_end(path, t_prev, plan.f_len, contracting=True)
        t_i = s_i + plan.h_len
        if t_i > path.n:
            raise BlockPlanInfeasible(f"path of {path.n} steps ends inside h block {i + 1}")
        block = path.segment(t_prev, s_i)
        h = path.segment(s_i, t_i)

        scale = math.exp(min(-prefix_lr, 700.0)) * r
        lattice = Lattice.at_side(grid_step * scale)

        sample = _sample_block(mu, plan, lattice, prefix_lr, r, A, rng_stream(seed, _RESAMPLE_KEY, i), resamples)
        cells, lr_f, rot_f, tr_f = sample.cells, sample.lr_f, sample.rot_f, sample.tr_f
        matrix, m_i, support = _block_floor(
            cells, sample.coords, sample.active, sample.weight, bootstrap, rng_stream(seed, _BOOTSTRAP_KEY, i))

        cell = lattice.cells(np.array([math.log(block.rho)]), block.rot[None], block.trans[None])[0]
        same = np.flatnonzero(np.all(cells == cell, axis=1))
        pinned = same.size > 0 and bool(np.all(batch_metric(
            lr_f[same], rot_f[same], tr_f[same],
            np.full(same.size, math.log(block.rho)), np.broadcast_to(block.rot, rot_f[same].shape),
            np.broadcast_to(block.trans, tr_f[same].shape),
        ) <= EnumerationConfig.DEDUP_TOL))

        f_cell = lattice.point(cell, d)
        u = log_map(compose(inverse(f_cell), block))
        zeroed = None
        if np.linalg.norm(h.trans) > A:
            zeroed = "A5"
        elif u.norm() > math.exp(-prefix_lr - math.log(f_cell.rho)) * r * (1 + 1e-12):
            zeroed = "A6"
        elif pinned:
            zeroed = "pinned"
        if zeroed:
            f, u = block, LieVector.zero(d)
        else:
            f = f_cell

        f_list.append(f)
        h_list.append(h)
        u_list.append(u)
        s_list.append(s_i)
        t_list.append(t_i)
        tags.append({
            "block": i + 1,
            "cell": None if zeroed else cell.tolist(),
            "zeroed": zeroed,
            "lattice": lattice.to_dict(),
            "h_steps": [s_i, t_i],
            "cell_count": int(same.size),
            "frame": {
                "index": i,
                "seed": seed,
                "prefix_log_rho": prefix_lr,
                "r": r,
                "f_len": plan.f_len,
                "h_len": plan.h_len,
                "resamples": resamples,
                "scale": 1.0,
            },
        })
        floors.append(m_i)
        matrices.append(matrix)
        supports.append(support)
        bridges.append(None)
        realized = math.log(f.rho) + math.log(h.rho)
        log_floors.append(min(float(sample.log_rho.min()), realized) if resamples else realized)
        prefix_lr += realized
        t_prev = t_i

    zeroed_count = sum(1 for t in tags if t["zeroed"] in ("A5", "A6"))
    if zeroed_count:
        logger.warning(f"{zeroed_count} of {plan.n_blocks} blocks zeroed by A5/A6")
    logger.info(f"Decomposition n={plan.n_blocks} K={K} r={r:g}: sum m = {math.fsum(floors):.6g}")
    return ProperDecomposition(
        n=plan.n_blocks, K=K, A=A, r=r,
        f=f_list, h=h_list, U=u_list, S=s_list, T=t_list, m=floors,
        conditioning_tag=tags, floor_matrix=matrices, floor_support=supports, bridges=bridges,
        block_log_floor=log_floors, grid_step=grid_step, path=path, seed=seed,
    )


def empty_decomposition(K: int, A: float, r: float) -> ProperDecomposition:
    """The n = 0 decomposition (kappa = 1)."""
    return ProperDecomposition(n=0, K=K, A=A, r=r, f=[], h=[], U=[], S=[], T=[], m=[], conditioning_tag=[])


# =============================================================================
# Validation
# =============================================================================

def reconstruct(pd: ProperDecomposition) -> SimElement:
    """f_1 exp(U_1) h_1 ... f_n exp(U_n) h_n."""
    d = pd.f[0].d if pd.n else (pd.path.measure.d if pd.path else 1)
    word = []
    for f, u, h in zip(pd.f, pd.U, pd.h):
        word.extend([f, exp_map(u), h])
    return compose_all(word, d)


def _remeasure_floor(pd: ProperDecomposition, i: int, mu: FiniteMeasure):
    """
    Independent estimate of block i's A9 matrix, in the frame it was built in.

    Returns (matrix scaled to pd's normalisation, support, scale), or None
    when the block carries no frame.
    """
    tag = pd.conditioning_tag[i] if i < len(pd.conditioning_tag) else {}
    frame = tag.get("frame")
    if not frame:
        return None
    lat = tag["lattice"]
    lattice = Lattice(lat["trans_side"], lat["log_rho_side"], lat["angle_side"])
    plan = BlockPlan(1, frame["f_len"], frame["h_len"])
    rng = rng_stream(frame["seed"], _VALIDATE_KEY, frame["index"])
    sample = _sample_block(mu, plan, lattice, frame["prefix_log_rho"], frame["r"], pd.A, rng, frame["resamples"])
    total = sample.cells.shape[0]
    matrix, support = _floor_matrix(sample.cells, sample.coords, sample.active, sample.weight, np.arange(total))
    return matrix * frame["scale"], support, frame["scale"]


def _check_a9(pd: ProperDecomposition) -> AxiomResult:
    if pd.n == 0:
        return AxiomResult("A9", SATISFIED, detail="no blocks")
    if pd.path is None:
        return AxiomResult("A9", UNVERIFIED, detail="no path to resample from")
    failing, unverified = [], []
    for i, m in enumerate(pd.m):
        measured = _remeasure_floor(pd, i, pd.path.measure)
        if measured is None:
            unverified.append(i + 1)
            continue
        mat, support, scale = measured
        slack = 3.0 * scale / math.sqrt(max(support, 1))
        low = float(np.linalg.eigvalsh(mat - m * np.eye(mat.shape[0]))[0])
        if m < 0 or low < -slack:
            failing.append(i + 1)
    detail = "min eig(E[Var] - m I) >= -3/sqrt(support) on an independent resample"
    if failing:
        return AxiomResult("A9", VIOLATED, failing, detail)
    if unverified:
        return AxiomResult("A9", UNVERIFIED, unverified, "blocks without a resampling frame")
    return AxiomResult("A9", SATISFIED, [], detail)


def validate_decomposition(pd: ProperDecomposition, path: Optional[WalkPath] = None) -> DecompositionValidation:
    """
    Check axioms A1-A9 of pd against the path it was built on.

    A1-A6 are checked numerically, A7/A8 structurally (each U_i is a function
    of its own block given its lattice cell, and blocks use disjoint step
    ranges), A9 as an eigenvalue test of each floor against a fresh
    resample of its block drawn in the frame the block was built in.
    """
    path = path or pd.path
    res = {}
    n, K = pd.n, pd.K
    tol = DecompositionConfig.RECONSTRUCTION_TOL

    # A1
    bad = []
    prev_t = 0
    for i in range(n):
        if pd.S[i] < prev_t + K or pd.T[i] < pd.S[i] + K:
            bad.append(i + 1)
        prev_t = pd.T[i]
    res["A1"] = AxiomResult("A1", VIOLATED if bad else SATISFIED, bad, "S_1 >= K, S_i >= T_{i-1} + K, T_i >= S_i + K")

    # A2 / A3
    if path is None:
        res["A2"] = AxiomResult("A2", UNVERIFIED, detail="no path")
        res["A3"] = AxiomResult("A3", UNVERIFIED, detail="no path")
        recon = float("nan")
    else:
        bad2, bad3 = [], []
        prev_t = 0
        for i in range(n):
            if pd.T[i] > path.n:
                bad2.append(i + 1)
                bad3.append(i + 1)
                continue
            if metric_dist(compose(pd.f[i], exp_map(pd.U[i])), path.segment(prev_t, pd.S[i])) > tol:
                bad2.append(i + 1)
            if metric_dist(pd.h[i], path.segment(pd.S[i], pd.T[i])) > tol:
                bad3.append(i + 1)
            prev_t = pd.T[i]
        res["A2"] = AxiomResult("A2", VIOLATED if bad2 else SATISFIED, bad2, "f_i exp(U_i) equals the f block")
        res["A3"] = AxiomResult("A3", VIOLATED if bad3 else SATISFIED, bad3, "h_i equals the h block")
        if n and pd.T[-1] <= path.n:
            recon = metric_dist(reconstruct(pd), path.segment(0, pd.T[-1]))
        else:
            recon = 0.0
        if recon > DecompositionConfig.DRIFT_TOL:
            res["reconstruction"] = AxiomResult("reconstruction", VIOLATED, detail=f"drift {recon:.3g}")
        else:
            res["reconstruction"] = AxiomResult("reconstruction", SATISFIED, detail=f"drift {recon:.3g}")

    # A4, A5, A6
    bad4 = [i + 1 for i in range(n) if not pd.f[i].rho < 1]
    res["A4"] = AxiomResult("A4", VIOLATED if bad4 else SATISFIED, bad4, "rho(f_i) < 1")
    bad5 = [i + 1 for i in range(n) if np.linalg.norm(pd.h[i].trans) > pd.A and not pd.U[i].is_zero()]
    res["A5"] = AxiomResult("A5", VIOLATED if bad5 else SATISFIED, bad5, "|b(h_i)| > A implies U_i = 0")
    bad6 = []
    for i in range(n):
        bound = math.exp(-(pd.prefix_log_rho(i) + math.log(pd.f[i].rho))) * pd.r
        if pd.U[i].norm() > bound * (1 + 1e-9):
            bad6.append(i + 1)
    res["A6"] = AxiomResult("A6", VIOLATED if bad6 else SATISFIED, bad6, "|U_i| <= rho(f_1 h_1 ... f_i)^-1 r")

    # A7: f_i is the lattice point of its recorded cell (times any absorbed bridge)
    bad7 = []
    for i in range(n):
        tag = pd.conditioning_tag[i] if i < len(pd.conditioning_tag) else {}
        if tag.get("cell") is None:
            if tag.get("zeroed") is None or not pd.U[i].is_zero():
                bad7.append(i + 1)
            continue
        lat = tag["lattice"]
        point = Lattice(lat["trans_side"], lat["log_rho_side"], lat["angle_side"]).point(tag["cell"], pd.f[i].d)
        bridge = pd.bridges[i] if i < len(pd.bridges) else None
        if bridge is not None:
            point = compose(bridge, point)
        if metric_dist(point, pd.f[i]) > tol:
            bad7.append(i + 1)
    res["A7"] = AxiomResult("A7", VIOLATED if bad7 else BY_CONSTRUCTION, bad7,
                            "U_i is determined by its own block given the lattice cell")

    # A8: disjoint step ranges
    bad8 = [i + 1 for i in range(1, n) if pd.S[i] <= pd.T[i - 1]]
    res["A8"] = AxiomResult("A8", VIOLATED if bad8 else BY_CONSTRUCTION, bad8,
                            "blocks use disjoint step ranges")

    res["A9"] = _check_a9(pd)
    report = DecompositionValidation(res, recon)
    if not report.passed:
        logger.warning(f"Decomposition violates {', '.join(report.violated())}")
    return report


# =============================================================================
# Variance sums and concatenation
# =============================================================================

def variance_sum_achieved(pd: ProperDecomposition) -> VarianceSum:
    """sum m_i with its (n, K, kappa, A, r); kappa is the contraction floor, not the realised rho."""
    return VarianceSum(math.fsum(pd.m), pd.n, pd.K, pd.kappa, pd.A, pd.r, pd.realized_kappa)


def _scaled_tag(tag: dict, factor: float, offset: int = 0, block_offset: int = 0) -> dict:
    """Copy of a conditioning tag with shifted step ranges and its floor frame rescaled."""
    out = dict(tag)
    out["block"] = tag["block"] + block_offset
    out["h_steps"] = [s + offset for s in tag["h_steps"]]
    if tag.get("frame"):
        out["frame"] = dict(tag["frame"], scale=tag["frame"]["scale"] * factor)
    return out


def rescale_decomposition(pd: ProperDecomposition, new_r: float) -> ProperDecomposition:
    """
    The same decomposition read at scale new_r.

    Floors scale by (r / new_r)^2 through the A9 normalisation. A6 stays
    valid only for new_r >= r.
    """
    factor = (pd.r / new_r) ** 2
    return replace(
        pd,
        r=new_r,
        m=[m * factor for m in pd.m],
        floor_matrix=[np.asarray(mat) * factor for mat in pd.floor_matrix],
        conditioning_tag=[_scaled_tag(t, factor) for t in pd.conditioning_tag],
    )


def concatenate(
    pd1: ProperDecomposition,
    pd2: ProperDecomposition,
    M: float,
    R: float,
    seed: Optional[int] = None,
) -> ProperDecomposition:
    """
    Join pd1 (scale r, contraction floor kappa_1) with pd2 built at scale M kappa_1^{-1} r.

    Between the two, extra mu-steps E are drawn until the realised
    rho(f_1 h_1 ... f_n h_n) rho(E) first drops to kappa_1 / M, and are
    absorbed into pd2's first f. That stopping keeps A6 for pd2's blocks
    and puts rho(f_1 h_1 ... f_n h_n E) above rho_min kappa_1 / M, so the joined
    floor is kappa = kappa_1 (rho_min / M) kappa_2 >= R^{-1} M^{-1} kappa_1 kappa_2.
    pd2's floors are rescaled to the joined normalisation by
    (M rho_1 rho(E) / kappa_1)^2, rho_1 the realised rho of pd1; this is
    (M rho(E))^2 when pd1's floor is attained. So
    sum m = sum m(pd1) + (M rho_1 rho(E) / kappa_1)^2 sum m(pd2).

    Raises:
        ScaleMismatch: different K or A, M < R, an atom with rho < 1/R, or
            pd2.r != M kappa_1^{-1} pd1.r
        PreconditionViolation: the joined decomposition fails validation
    """
    if pd1.K != pd2.K or pd1.A != pd2.A:
        raise ScaleMismatch(f"incompatible decompositions (K {pd1.K} vs {pd2.K}, A {pd1.A} vs {pd2.A})")
    if M < R:
        raise ScaleMismatch(f"M = {M:g} must be at least R = {R:g}")
    if pd2.n == 0 or pd2.path is None:
        raise ValueError("the second decomposition needs at least one block and its path")
    log_kappa1 = pd1.log_kappa
    expected = M * math.exp(-log_kappa1) * pd1.r
    if not math.isclose(pd2.r, expected, rel_tol=1e-9):
        raise ScaleMismatch(f"pd2 has r = {pd2.r:.6g}, expected M kappa_1^-1 r = {expected:.6g}")

    mu = pd2.path.measure
    d = mu.d
    log_rho_min = float(mu.log_rhos().min())
    if log_rho_min < -math.log(R) - 1e-12:
        raise ScaleMismatch(f"an atom contracts by {math.exp(log_rho_min):.6g}, below R^-1 = {1 / R:.6g}")
    realized1 = pd1.realized_log_kappa
    rng = rng_stream(pd2.seed if seed is None else seed, _BRIDGE_KEY)
    level = _stop_threshold(math.exp(log_kappa1 - realized1) / M)
    e_idx, e_len = _draw_blocks(mu, rng, 1, 0, level=level)
    e_idx = e_idx[0, :e_len[0]]
    bridge = compose_all([mu.atoms[k] for k in e_idx], d)
    factor = (M * math.exp(realized1 + math.log(bridge.rho) - log_kappa1)) ** 2

    head = pd1.path.indices[:pd1.T[-1]] if pd1.n else np.zeros(0, dtype=np.int64)
    offset = head.size + e_idx.size
    indices = np.concatenate([head, e_idx, pd2.path.indices[:pd2.T[-1]]]).astype(np.int64)
    path = WalkPath(mu, indices, pd1.path.seed if pd1.path is not None else pd2.path.seed)

    f2 = list(pd2.f)
    f2[0] = compose(bridge, f2[0])
    bridges2 = list(pd2.bridges) or [None] * pd2.n
    bridges2[0] = compose(bridge, bridges2[0]) if bridges2[0] is not None else bridge
    floors2 = pd2.log_floors()
    floors2[0] += log_rho_min - math.log(M)
    joined = ProperDecomposition(
        n=pd1.n + pd2.n,
        K=pd1.K,
        A=pd1.A,
        r=pd1.r,
        f=list(pd1.f) + f2,
        h=list(pd1.h) + list(pd2.h),
        U=list(pd1.U) + list(pd2.U),
        S=list(pd1.S) + [s + offset for s in pd2.S],
        T=list(pd1.T) + [t + offset for t in pd2.T],
        m=list(pd1.m) + [m * factor for m in pd2.m],
        conditioning_tag=list(pd1.conditioning_tag)
        + [_scaled_tag(t, factor, offset, pd1.n) for t in pd2.conditioning_tag],
        floor_matrix=list(pd1.floor_matrix) + [np.asarray(mat) * factor for mat in pd2.floor_matrix],
        floor_support=list(pd1.floor_support) + list(pd2.floor_support),
        bridges=(list(pd1.bridges) or [None] * pd1.n) + bridges2,
        block_log_floor=pd1.log_floors() + floors2,
        grid_step=pd1.grid_step if pd1.n else pd2.grid_step,
        path=path,
        seed=pd1.seed if pd1.n else pd2.seed,
    )
    report = validate_decomposition(joined)
    if not report.passed:
        raise PreconditionViolation(f"concatenated decomposition fails {', '.join(report.violated())}")
    logger.info(f"Concatenated n={joined.n}: bridge of {e_idx.size} steps, pd2 floors x {factor:.6g}")
    return joined


def concatenate_chain(pds: Sequence[ProperDecomposition], R: float, seed: Optional[int] = None) -> ProperDecomposition:
    """
    Fold decompositions at increasing scales into one at scale R^{-1} r_1.

    Starts from the empty decomposition with M = R, then joins each next
    decomposition with M = r_next kappa_acc / r_acc.
    Bridges are drawn from the measure of the decompositions' paths; seed
    fixes the bridge streams (each pd's own seed by default).

    Raises:
        ScaleMismatch: some M falls below R
    """
    if not pds:
        raise ValueError("need at least one decomposition")
    first = pds[0]
    acc = concatenate(empty_decomposition(first.K, first.A, first.r / R), first, R, R, seed=seed)
    for nxt in pds[1:]:
        M = nxt.r * acc.kappa / acc.r
        acc = concatenate(acc, nxt, M, R, seed=seed)
    return acc


def dump_decomposition(pd: ProperDecomposition, path: Path) -> Path:
    """JSON lines: one header record, then one record per block."""
    ensure_dir(path.parent)
    header = {k: v for k, v in pd.to_dict().items() if k != "blocks"}
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in pd.records():
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


# =============================================================================
# Trace at scale
# =============================================================================

def trace_at_scale_lower(
    mu: FiniteMeasure,
    kappa: float,
    r: float,
    grid_step: float = DecompositionConfig.GRID_STEP,
    trials: int = DecompositionConfig.RESAMPLES,
    seed: int = 0,
    threads: int = 1,
) -> TraceLowerBound:
    """
    Achieved lower bound t for tr(q_{tau_kappa}; r).

    Each sample q is rounded to a lattice h (side grid_step r in log rho and
    angles, grid_step r kappa in translation), U = log(h^{-1} q), and draws
    with |U| > r are zeroed. t = E[tr Var(U | cell)] / r^2 over the cells.
    """
    if not 0 < r < 1:
        raise ValueError(f"scale r must lie in (0, 1), got {r}")
    if not 0 < kappa < 1:
        raise ValueError(f"kappa must lie in (0, 1), got {kappa}")
    level = _stop_threshold(kappa)

    def draw(bounds):
        block, (lo, hi) = bounds
        idx, lengths = _draw_blocks(mu, rng_stream(seed, _TRACE_KEY, block), hi - lo, 0, level=level)
        return _products(mu, idx, lengths)

    parts = parallel_map(draw, list(enumerate(chunk_bounds(trials, SamplingConfig.BLOCK_SIZE))), threads)
    lr = np.concatenate([p[0] for p in parts])
    rot = np.concatenate([p[1] for p in parts])
    tr = np.concatenate([p[2] for p in parts])

    side = grid_step * r
    lattice = Lattice.at_side(side, trans_side=side * kappa)
    cells = lattice.cells(lr, rot, tr)
    lr_p, rot_p, tr_p = lattice.points(cells, mu.d)
    coords = _log_ratio(lr_p, rot_p, tr_p, lr, rot, tr)
    ok = np.linalg.norm(coords, axis=1) <= r
    group, cov, counts = _cell_covariances(cells, coords, ok)
    traces = np.zeros(trials)
    live = group >= 0
    traces[live] = np.trace(cov[group[live]], axis1=1, axis2=2)
    t = float(traces.mean() / (r * r))
    zeroed = float(1.0 - ok.mean())
    if zeroed > DecompositionConfig.ZEROED_WARN:
        logger.warning(f"{zeroed:.1%} of the U draws exceed r and were zeroed")
    return TraceLowerBound(t, zeroed, trials, int(counts.size), kappa, r, grid_step)
