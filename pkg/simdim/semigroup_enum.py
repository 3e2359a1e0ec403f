"""
Enumeration of supp(mu^n) with deduplication.

Generation n is built from generation n-1 by multiplying every stored
element on the right by every atom of mu, then merging products that
coincide within the dedup tolerance:
- Level 1: hash of the quantized (log rho, b) cell and its neighbours
- Level 2: full group metric against the candidates found there

Delta_n and M_n are exact minima over the stored elements, found with a
KD-tree on the embedding (log rho, vec U, b).
"""

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .config import EnumerationConfig
from .errors import AmbiguousDedup, BudgetExceeded
from .exact import ExactElementSet, ExactMeasure, exact_generations, exact_identity, exact_min_distance
from .measure_core import FiniteMeasure
from .sim_group import SimElement, batch_metric, metric_dist, operator_norm
from .utils import chunk_bounds, ensure_dir, parallel_map

logger = logging.getLogger(__name__)

SEPARATION_LABEL = "finite-range evidence, not an asymptotic certificate"


@dataclass
class WeightedElementSet:
    """supp(mu^n) stored as stacked arrays, with aggregated masses."""
    log_rho: np.ndarray   # (N,)
    rot: np.ndarray       # (N, d, d)
    trans: np.ndarray     # (N, d)
    probs: np.ndarray     # (N,)
    n: int

    @property
    def size(self) -> int:
        return self.log_rho.shape[0]

    @property
    def d(self) -> int:
        return self.trans.shape[1]

    @property
    def elements(self) -> list[SimElement]:
        return [self.element(i) for i in range(self.size)]

    def element(self, i: int) -> SimElement:
        return SimElement.unchecked(math.exp(self.log_rho[i]), self.rot[i], self.trans[i])

    def embedding(self) -> np.ndarray:
        """Rows (log rho, vec U, b); Euclidean distance <= sqrt(d) * metric."""
        return np.concatenate(
            [self.log_rho[:, None], self.rot.reshape(self.size, -1), self.trans], axis=1)

    @classmethod
    def identity(cls, d: int) -> "WeightedElementSet":
        return cls(np.zeros(1), np.eye(d)[None], np.zeros((1, d)), np.ones(1), 0)

    @classmethod
    def from_measure(cls, mu: FiniteMeasure) -> "WeightedElementSet":
        return cls(mu.log_rhos(), mu.rot_stack(), mu.trans_stack(), np.array(mu.weights), 1)


ElementSet = Union[WeightedElementSet, ExactElementSet]


@dataclass
class GenerationRow:
    """One line of the per-generation table."""
    n: int
    support_size: int
    entropy: float
    delta_n: Optional[float]
    m_n: Optional[float]
    delta_exact: Optional[str] = None
    m_exact: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "support_size": self.support_size,
            "entropy": self.entropy,
            "entropy_rate": self.entropy / self.n if self.n else 0.0,
            "delta_n": self.delta_n,
            "m_n": self.m_n,
            "delta_exact": self.delta_exact,
            "m_exact": self.m_exact,
        }


@dataclass
class SeparationReport:
    n_max: int
    delta: list
    m: list
    fitted_c: Optional[float]
    condition_exponential: bool
    condition_weak: bool
    eps_used: float
    growth_rate: Optional[float] = None
    vacuous: bool = False
    label: str = SEPARATION_LABEL
    rows: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_max": self.n_max,
            "delta": self.delta,
            "m": self.m,
            "fitted_c": self.fitted_c,
            "condition_exponential": self.condition_exponential,
            "condition_weak": self.condition_weak,
            "eps_used": self.eps_used,
            "growth_rate": self.growth_rate,
            "vacuous": self.vacuous,
            "label": self.label,
        }


# =============================================================================
# Deduplication
# =============================================================================

class DedupIndex:
    """
    Insert-or-merge index over group elements.

    Elements are bucketed by their quantized (log rho, b) cell; a new element
    is compared with the full metric against the 3^(1+d) neighbouring cells.
    The first inserted element of a merged class stays its representative.
    """

    def __init__(self, d: int, tol: float, config=None):
        if config is None:
            config = EnumerationConfig
        self.config = config
        self.d = d
        self.tol = tol
        self.ambiguous_tol = tol * config.AMBIGUITY_FACTOR
        self.cell = self.ambiguous_tol
        self.buckets: dict[tuple, list[int]] = {}
        self.offsets = list(itertools.product((-1, 0, 1), repeat=1 + d))
        self.log_rho: list[float] = []
        self.rot: list[np.ndarray] = []
        self.trans: list[np.ndarray] = []
        self.probs: list[float] = []

    def _distance(self, lr: float, rot: np.ndarray, trans: np.ndarray, rep: int) -> float:
        if self.d == 1:
            return (abs(lr - self.log_rho[rep]) + abs(rot[0, 0] - self.rot[rep][0, 0])
                    + abs(trans[0] - self.trans[rep][0]))
        return (abs(lr - self.log_rho[rep]) + operator_norm(rot - self.rot[rep])
                + float(np.linalg.norm(trans - self.trans[rep])))

    def cell_keys(self, lr: np.ndarray, trans: np.ndarray) -> list[tuple]:
        """Quantized (log rho, b) cells for a batch of elements."""
        coords = np.concatenate([lr[:, None], trans], axis=1)
        return [tuple(row) for row in np.floor(coords / self.cell).astype(np.int64).tolist()]

    def insert(self, lr: float, rot: np.ndarray, trans: np.ndarray, p: float,
               key: Optional[tuple] = None) -> int:
        """Merge into an existing representative or store as new; returns its index."""
        if key is None:
            key = self.cell_keys(np.array([lr]), np.asarray(trans)[None])[0]
        match = None
        for off in self.offsets:
            for rep in self.buckets.get(tuple(k + o for k, o in zip(key, off)), ()):
                dist = self._distance(lr, rot, trans, rep)
                if dist <= self.tol:
                    if match is None or rep < match:
                        match = rep
                elif dist < self.ambiguous_tol:
                    raise AmbiguousDedup(
                        f"elements at distance {dist:.3e}, inside ({self.tol:g}, {self.ambiguous_tol:g}); "
                        f"the dedup tolerance may split a true collision")
        if match is not None:
            self.probs[match] += p
            return match
        idx = len(self.probs)
        self.buckets.setdefault(key, []).append(idx)
        self.log_rho.append(lr)
        self.rot.append(rot)
        self.trans.append(trans)
        self.probs.append(p)
        return idx

    def to_set(self, n: int) -> WeightedElementSet:
        return WeightedElementSet(
            np.array(self.log_rho),
            np.array(self.rot).reshape(-1, self.d, self.d),
            np.array(self.trans).reshape(-1, self.d),
            np.array(self.probs),
            n,
        )


def _products(parent: WeightedElementSet, mu: FiniteMeasure, lo: int, hi: int):
    """Children of parents lo..hi-1, in (parent, atom) order."""
    lr_a, rot_a, tr_a = mu.log_rhos(), mu.rot_stack(), mu.trans_stack()
    lr_p, rot_p, tr_p = parent.log_rho[lo:hi], parent.rot[lo:hi], parent.trans[lo:hi]
    m = len(lr_a)
    lr = (lr_p[:, None] + lr_a[None, :]).reshape(-1)
    rot = np.einsum("pij,ajk->paik", rot_p, rot_a).reshape(-1, mu.d, mu.d)
    tr = (np.exp(lr_p)[:, None, None] * np.einsum("pij,aj->pai", rot_p, tr_a) + tr_p[:, None, :])
    probs = (parent.probs[lo:hi, None] * mu.weights[None, :]).reshape(-1)
    return lr, rot, tr.reshape(-1, mu.d), probs


def _next_generation(parent: WeightedElementSet, mu: FiniteMeasure, dedup_tol: float,
                     threads: int) -> WeightedElementSet:
    blocks = chunk_bounds(parent.size, max(1, EnumerationConfig.BLOCK_SIZE // mu.size))
    chunks = parallel_map(lambda b: _products(parent, mu, *b), blocks, threads)
    index = DedupIndex(mu.d, dedup_tol)
    # deterministic reduction: chunks are merged in parent order
    for lr, rot, tr, probs in chunks:
        keys = index.cell_keys(lr, tr)
        for k in range(lr.shape[0]):
            index.insert(float(lr[k]), rot[k], tr[k], float(probs[k]), keys[k])
    return index.to_set(parent.n + 1)


def enumerate_generations(
    mu: Union[FiniteMeasure, ExactMeasure],
    n_max: int,
    dedup_tol: Optional[float] = None,
    budget: Optional[int] = None,
    threads: int = 1,
) -> Iterator[ElementSet]:
    """
    Yield supp(mu^n) for n = 1..n_max.

    Raises:
        BudgetExceeded: before a generation whose pre-dedup products exceed the budget
        AmbiguousDedup: a pair lands just outside the tolerance
    """
    budget = EnumerationConfig.BUDGET if budget is None else budget
    if isinstance(mu, ExactMeasure):
        yield from exact_generations(mu, n_max, budget)
        return
    dedup_tol = EnumerationConfig.DEDUP_TOL if dedup_tol is None else dedup_tol
    current = WeightedElementSet.identity(mu.d)
    for n in range(1, n_max + 1):
        products = current.size * mu.size
        if products > budget:
            raise BudgetExceeded(
                f"generation {n} needs {products} products (budget {budget})", completed_n=n - 1)
        current = _next_generation(current, mu, dedup_tol, threads)
        logger.info(f"Generation {n}: {products} products -> {current.size} elements")
        yield current


def enumerate_convolution(
    mu: Union[FiniteMeasure, ExactMeasure],
    n: int,
    dedup_tol: Optional[float] = None,
    budget: Optional[int] = None,
    threads: int = 1,
) -> ElementSet:
    """The deduplicated support of mu^n with aggregated word probabilities."""
    if n < 1:
        raise ValueError("n must be at least 1")
    result = None
    for result in enumerate_generations(mu, n, dedup_tol, budget, threads):
        pass
    return result


# =============================================================================
# Entropy and separation
# =============================================================================

def shannon_entropy(element_set: ElementSet) -> float:
    """-sum p log p in nats."""
    if isinstance(element_set, ExactElementSet):
        return -math.fsum(
            float(p) * (math.log(p.numerator) - math.log(p.denominator)) for p in element_set.exact_probs)
    p = np.asarray(element_set.probs, dtype=float)
    p = p[p > 0]
    return float(-math.fsum(p * np.log(p)))


def entropy_rate_bounds(
    mu: Union[FiniteMeasure, ExactMeasure],
    n_max: int,
    dedup_tol: Optional[float] = None,
    budget: Optional[int] = None,
    threads: int = 1,
) -> list[float]:
    """
    H(mu^n)/n for n = 1..n_max, each an upper bound on h_mu.

    Raises:
        BudgetExceeded: with the table computed so far in `partial`
    """
    table: list[float] = []
    try:
        for s in enumerate_generations(mu, n_max, dedup_tol, budget, threads):
            table.append(shannon_entropy(s) / s.n)
    except BudgetExceeded as e:
        e.partial = table
        raise
    return table


def brute_force_min_distance(elements: Sequence[SimElement]) -> Optional[float]:
    """O(N^2) minimum metric over distinct pairs."""
    best = None
    for g, h in itertools.combinations(elements, 2):
        dist = metric_dist(g, h)
        if best is None or dist < best:
            best = dist
    return best


def _stack_min_distance(s: WeightedElementSet) -> Optional[float]:
    """Exact minimum metric over pairs of stored elements."""
    n = s.size
    if n < 2:
        return None
    lr, rot, tr = s.log_rho, s.rot, s.trans
    emb = s.embedding()
    tree = cKDTree(emb)
    # nearest Euclidean neighbours give an upper bound D* on the minimum
    _, nn = tree.query(emb, k=2)
    j_idx = nn[:, 1]
    upper = float(np.min(batch_metric(lr, rot, tr, lr[j_idx], rot[j_idx], tr[j_idx])))
    # every pair with metric <= D* lies within sqrt(d) * D* in the embedding
    radius = upper * max(1.0, math.sqrt(s.d)) * (1.0 + 1e-9)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    if pairs.size == 0:
        return upper
    a, b = pairs[:, 0], pairs[:, 1]
    return float(min(upper, np.min(batch_metric(lr[a], rot[a], tr[a], lr[b], rot[b], tr[b]))))


def delta_n(sets: Union[ElementSet, Sequence[ElementSet]], n: Optional[int] = None):
    """
    Minimum distance over distinct pairs of supp(mu^n).

    Args:
        sets: A single generation, or the per-generation list
        n: Generation to use when a list is given

    Returns:
        The minimum (exact for exact sets), or None with fewer than 2 elements
    """
    s = sets if n is None else _pick(sets, n)
    if isinstance(s, ExactElementSet):
        return exact_min_distance(s.elements)
    return _stack_min_distance(s)


def _pick(sets: Sequence[ElementSet], n: int) -> ElementSet:
    for s in sets:
        if s.n == n:
            return s
    raise KeyError(f"generation {n} was not enumerated")


def m_n(sets: Sequence[ElementSet], n: int, dedup_tol: Optional[float] = None):
    """
    Minimum distance over distinct elements of the union of supp(mu^i), i = 0..n.

    The identity (i = 0) is included. Elements repeated across generations
    are merged through the dedup index so they count once.
    """
    if n <= 0:
        return None
    chosen = [s for s in sets if 1 <= s.n <= n]
    if isinstance(chosen[0], ExactElementSet):
        first = chosen[0].elements[0].rho
        union = {exact_identity(first / first)}
        for s in chosen:
            union.update(s.elements)
        return exact_min_distance(list(union))
    dedup_tol = EnumerationConfig.DEDUP_TOL if dedup_tol is None else dedup_tol
    index = DedupIndex(chosen[0].d, dedup_tol)
    for s in [WeightedElementSet.identity(chosen[0].d)] + chosen:
        keys = index.cell_keys(s.log_rho, s.trans)
        for k in range(s.size):
            index.insert(float(s.log_rho[k]), s.rot[k], s.trans[k], 0.0, keys[k])
    return _stack_min_distance(index.to_set(n))


def _as_float(value) -> Optional[float]:
    return None if value is None else float(value)


def generation_table(
    mu: Union[FiniteMeasure, ExactMeasure],
    n_max: int,
    dedup_tol: Optional[float] = None,
    budget: Optional[int] = None,
    threads: int = 1,
) -> tuple[list[GenerationRow], list[ElementSet]]:
    """
    Enumerate up to n_max and tabulate entropy, Delta_n and M_n.

    Raises:
        BudgetExceeded: with the completed rows in `partial`
    """
    rows: list[GenerationRow] = []
    sets: list[ElementSet] = []
    try:
        for s in enumerate_generations(mu, n_max, dedup_tol, budget, threads):
            sets.append(s)
            dn = delta_n(s)
            mn = m_n(sets, s.n, dedup_tol)
            exact = isinstance(s, ExactElementSet)
            rows.append(GenerationRow(
                n=s.n,
                support_size=s.size,
                entropy=shannon_entropy(s),
                delta_n=_as_float(dn),
                m_n=_as_float(mn),
                delta_exact=str(dn) if exact and dn is not None else None,
                m_exact=str(mn) if exact and mn is not None else None,
            ))
    except BudgetExceeded as e:
        e.partial = rows
        raise
    return rows, sets


def separation_from_rows(rows: Sequence[GenerationRow], eps: float) -> SeparationReport:
    """Evaluate both separation conditions over the computed range."""
    delta = [r.delta_n for r in rows]
    m = [r.m_n for r in rows]
    vacuous = all(v is None for v in delta)

    fitted_c = None
    exponential = True
    weak = True
    logs = []
    for r in rows:
        if r.m_n is None:
            continue
        if r.m_n <= 0:
            exponential = weak = False
            fitted_c = math.inf
            break
        log_m = math.log(r.m_n)
        logs.append((r.n, log_m))
        c = -log_m / r.n
        fitted_c = c if fitted_c is None else max(fitted_c, c)
        threshold = -r.n * math.exp(math.log(r.n) ** (1.0 / 3.0 - eps))
        if log_m < threshold:
            weak = False

    growth = None
    if len(logs) >= 2:
        ns, lm = zip(*logs)
        growth = float(-np.polyfit(ns, lm, 1)[0])

    return SeparationReport(
        n_max=rows[-1].n if rows else 0,
        delta=delta,
        m=m,
        fitted_c=fitted_c,
        condition_exponential=exponential and fitted_c is not None and math.isfinite(fitted_c),
        condition_weak=weak,
        eps_used=eps,
        growth_rate=growth,
        vacuous=vacuous,
        rows=list(rows),
    )


def separation_verdict(
    mu: Union[FiniteMeasure, ExactMeasure],
    n_max: int,
    eps: float = 0.01,
    dedup_tol: Optional[float] = None,
    budget: Optional[int] = None,
    threads: int = 1,
) -> SeparationReport:
    """
    Check M_n >= exp(-c n) and log M_n >= -n exp((log n)^(1/3 - eps)) for n <= n_max.

    The verdicts describe the computed range only.
    """
    if n_max < 2:
        raise ValueError("n_max must be at least 2")
    rows, _ = generation_table(mu, n_max, dedup_tol, budget, threads)
    return separation_from_rows(rows, eps)


def write_generation_csv(rows: Sequence[GenerationRow], path: Path) -> Path:
    """CSV with columns n, support_size, entropy, delta_n, m_n."""
    ensure_dir(path.parent)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["n", "support_size", "entropy", "delta_n", "m_n"])
        for r in rows:
            writer.writerow([
                r.n, r.support_size, repr(r.entropy),
                "" if r.delta_n is None else repr(r.delta_n),
                "" if r.m_n is None else repr(r.m_n),
            ])
    return path
