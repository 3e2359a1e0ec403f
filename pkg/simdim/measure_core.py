"""
Finitely supported measures on Sim(R^d) and their exact invariants.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .config import EnumerationConfig, IrreducibilityConfig, ToleranceConfig
from .errors import DegenerateAtom, SimDimError
from .sim_group import SimElement, apply, metric_dist
from .utils import rng_stream

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FiniteMeasure:
    """mu = sum_i weights[i] * delta_{atoms[i]}."""
    atoms: tuple
    weights: np.ndarray

    def __post_init__(self):
        atoms = tuple(self.atoms)
        weights = np.asarray(self.weights, dtype=float)
        if not atoms:
            raise ValueError("a measure needs at least one atom")
        if weights.shape != (len(atoms),):
            raise ValueError(f"{len(atoms)} atoms but {weights.shape[0]} weights")
        if np.any(weights <= 0):
            raise ValueError("weights must be positive")
        if abs(weights.sum() - 1.0) > ToleranceConfig.WEIGHT_SUM_TOL:
            raise ValueError(f"weights sum to {weights.sum():.15g}, not 1")
        d = atoms[0].d
        if any(a.d != d for a in atoms):
            raise ValueError("atoms act on different dimensions")
        tol = EnumerationConfig.DEDUP_TOL
        for i, j in itertools.combinations(range(len(atoms)), 2):
            if metric_dist(atoms[i], atoms[j]) <= tol:
                raise ValueError(f"atoms {i} and {j} coincide within {tol:g}; merge their weights")
        weights = weights.copy()
        weights.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, atoms: Sequence[SimElement]) -> "FiniteMeasure":
        return cls(atoms=atoms, weights=np.full(len(atoms), 1.0 / len(atoms)))

    @property
    def d(self) -> int:
        return self.atoms[0].d

    @property
    def size(self) -> int:
        return len(self.atoms)

    def log_rhos(self) -> np.ndarray:
        return np.log([a.rho for a in self.atoms])

    def rot_stack(self) -> np.ndarray:
        return np.stack([a.rot for a in self.atoms])

    def trans_stack(self) -> np.ndarray:
        return np.stack([a.trans for a in self.atoms])


class IrreducibilityVerdict(str, Enum):
    IRREDUCIBLE = "Irreducible"
    REDUCIBLE = "ReducibleWithWitness"
    INCONCLUSIVE = "Inconclusive"


@dataclass
class IrreducibilityResult:
    verdict: IrreducibilityVerdict
    witness: Optional[np.ndarray] = None  # orthonormal basis (d, k) of an invariant subspace
    defect: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "witness": None if self.witness is None else self.witness.tolist(),
            "defect": self.defect,
        }


@dataclass
class MeasureProfile:
    """Exact invariants of mu (entropy table filled from the enumeration)."""
    lyapunov: float
    rho_range: tuple[float, float]
    entropy_upper: list[float] = field(default_factory=list)
    irreducible: Optional[IrreducibilityResult] = None
    fixed_point: Optional[np.ndarray] = None
    dimension: int = 1
    completed_n: int = 0

    @property
    def h_hat(self) -> Optional[float]:
        """Best upper bound min_n H(mu^n)/n (the limit is the infimum by subadditivity)."""
        return min(self.entropy_upper) if self.entropy_upper else None

    def to_dict(self) -> dict:
        return {
            "lyapunov": self.lyapunov,
            "rho_range": list(self.rho_range),
            "entropy_upper": list(self.entropy_upper),
            "h_hat": self.h_hat,
            "irreducible": self.irreducible.to_dict() if self.irreducible else None,
            "fixed_point": None if self.fixed_point is None else self.fixed_point.tolist(),
            "dimension": self.dimension,
            "completed_n": self.completed_n,
        }


# =============================================================================
# Invariants
# =============================================================================

def lyapunov_exponent(mu: FiniteMeasure) -> float:
    """chi_mu = sum_i w_i log rho(g_i)."""
    return float(math.fsum(w * lr for w, lr in zip(mu.weights, mu.log_rhos())))


def is_contracting_on_average(mu: FiniteMeasure) -> bool:
    return lyapunov_exponent(mu) < 0


def is_contracting(mu: FiniteMeasure) -> bool:
    """Every atom strictly contracts."""
    return all(a.rho < 1 for a in mu.atoms)


def rho_range(mu: FiniteMeasure) -> tuple[float, float]:
    rhos = [a.rho for a in mu.atoms]
    return min(rhos), max(rhos)


def rho_bound_R(mu: FiniteMeasure) -> float:
    """Smallest R >= 1 with rho(supp mu) inside [1/R, R]."""
    lo, hi = rho_range(mu)
    return max(1.0, hi, 1.0 / lo)


def attractor_radius_bound(mu: FiniteMeasure) -> float:
    """max|b| / (1 - max rho) when every atom contracts, else infinity."""
    _, hi = rho_range(mu)
    if hi >= 1:
        return math.inf
    return max(float(np.linalg.norm(a.trans)) for a in mu.atoms) / (1.0 - hi)


def upper_dimension_bound(mu: FiniteMeasure, h: float) -> float:
    """min{d, h / |chi|}; infinite chi gives no information beyond d."""
    chi = lyapunov_exponent(mu)
    if chi >= 0:
        return float(mu.d)
    return min(float(mu.d), h / abs(chi))


# =============================================================================
# Common fixed point
# =============================================================================

def _atom_fixed_point(g: SimElement) -> Optional[np.ndarray]:
    """Solve (I - rho U) x = b, or None when the system is singular."""
    a = np.eye(g.d) - g.rho * g.rot
    if np.linalg.cond(a) > ToleranceConfig.FIXED_POINT_COND_MAX:
        if g.rho == 1.0 and np.allclose(g.rot, np.eye(g.d)) and np.linalg.norm(g.trans) > 0:
            raise DegenerateAtom(f"pure translation by {g.trans.tolist()} has no fixed point")
        return None
    return np.linalg.solve(a, g.trans)


def common_fixed_point(mu: FiniteMeasure, tol: float = 1e-9) -> Optional[np.ndarray]:
    """
    Find a point fixed by every atom of mu.

    Args:
        mu: Measure to inspect
        tol: Allowed residual |g(x) - x| per atom

    Returns:
        A common fixed point, or None if there is none
    """
    d = mu.d
    try:
        for g in mu.atoms:
            _atom_fixed_point(g)
    except DegenerateAtom as e:
        logger.info(f"No common fixed point: {e}")
        return None

    # stacked least squares handles atoms whose own fixed set is a subspace
    a = np.concatenate([np.eye(d) - g.rho * g.rot for g in mu.atoms])
    b = np.concatenate([g.trans for g in mu.atoms])
    x, *_ = np.linalg.lstsq(a, b, rcond=None)
    residual = max(float(np.linalg.norm(apply(g, x) - x)) for g in mu.atoms)
    if residual <= tol:
        return x
    return None


# =============================================================================
# Irreducibility
# =============================================================================

def _word_products(rots: list[np.ndarray], max_len: int = 3) -> list[np.ndarray]:
    words = list(rots)
    frontier = list(rots)
    for _ in range(max_len - 1):
        frontier = [a @ b for a in frontier for b in rots]
        words.extend(frontier)
    return words


def _real_span(block: np.ndarray) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """Orthonormal basis of span(Re, Im) of complex columns and of its complement."""
    d = block.shape[0]
    # the real span of a complex conjugate pair is spanned by Re and Im
    real = np.concatenate([block.real, block.imag], axis=1)
    q, s, _ = np.linalg.svd(real, full_matrices=True)
    rank = int(np.sum(s > 1e-8 * max(s[0], 1e-300)))
    if 0 < rank < d:
        return q[:, :rank], q[:, rank:]
    return None


def _candidate_subspaces(m: np.ndarray, tol: float) -> list[np.ndarray]:
    """Eigenspace clusters and single eigenvector spans of m, with complements."""
    d = m.shape[0]
    vals, vecs = np.linalg.eig(m)
    blocks = [vecs[:, [i]] for i in range(d)]
    used = np.zeros(d, dtype=bool)
    for i in range(d):
        if used[i]:
            continue
        scale = max(tol, 1e-6) * max(1.0, abs(vals[i]))
        members = (np.abs(vals - vals[i]) <= scale) | (np.abs(vals - np.conj(vals[i])) <= scale)
        used |= members
        blocks.append(vecs[:, members])
    out = []
    for block in blocks:
        spans = _real_span(block)
        if spans is not None:
            out.extend(spans)
    return out


def _invariance_defect(basis: np.ndarray, rots: Sequence[np.ndarray]) -> float:
    p = basis @ basis.T
    q = np.eye(p.shape[0]) - p
    return max(float(np.linalg.norm(q @ u @ p, 2)) for u in rots)


def is_irreducible(
    mu: FiniteMeasure,
    tol: float = IrreducibilityConfig.TOL,
    trials: int = IrreducibilityConfig.TRIALS,
    seed: int = 0,
) -> IrreducibilityResult:
    """
    Randomized search for a nontrivial subspace invariant under every U(g_i).

    Each trial takes a random real combination of the rotations and their
    products up to length 3 (plus its symmetric part, which catches the
    commuting case) and tests every eigenspace cluster for invariance.
    """
    d = mu.d
    if d == 1:
        return IrreducibilityResult(IrreducibilityVerdict.IRREDUCIBLE)
    rots = [a.rot for a in mu.atoms]
    words = _word_products(rots)
    try:
        for t in range(trials):
            rng = rng_stream(seed, t)
            coeffs = rng.normal(size=len(words))
            m = sum(c * w for c, w in zip(coeffs, words))
            for cand in (m, m + m.T):
                for basis in _candidate_subspaces(cand, tol):
                    defect = _invariance_defect(basis, rots)
                    if defect <= tol:
                        # re-verify against the full word list
                        if _invariance_defect(basis, words) <= 10 * tol:
                            return IrreducibilityResult(IrreducibilityVerdict.REDUCIBLE, basis, defect)
    except (np.linalg.LinAlgError, SimDimError) as e:
        logger.warning(f"Irreducibility search failed numerically: {e}")
        return IrreducibilityResult(IrreducibilityVerdict.INCONCLUSIVE)
    return IrreducibilityResult(IrreducibilityVerdict.IRREDUCIBLE)


def profile_measure(
    mu: FiniteMeasure,
    entropy_upper: Optional[Sequence[float]] = None,
    seed: int = 0,
) -> MeasureProfile:
    """
    Assemble the MeasureProfile of mu.

    Args:
        mu: Measure to profile
        entropy_upper: H(mu^n)/n table from semigroup_enum.entropy_rate_bounds
        seed: Seed of the randomized irreducibility search

    Returns:
        MeasureProfile
    """
    table = list(entropy_upper or [])
    return MeasureProfile(
        lyapunov=lyapunov_exponent(mu),
        rho_range=rho_range(mu),
        entropy_upper=table,
        irreducible=is_irreducible(mu, seed=seed),
        fixed_point=common_fixed_point(mu),
        dimension=mu.d,
        completed_n=len(table),
    )
