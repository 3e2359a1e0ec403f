"""
The similarity group Sim(R^d) and its Lie algebra.

An element g = (rho, U, b) acts by g(x) = rho U x + b. Elements embed in
GL_{d+1} as (rho U, b; 0, 1), and the Lie algebra is embedded as
(alpha, beta; 0, 0) with alpha = s I + skew, beta in R^d.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import expm, polar, schur
from scipy.spatial.transform import Rotation

from .config import ToleranceConfig
from .errors import OrthogonalityError, RotationBranchError

logger = logging.getLogger(__name__)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


def orthogonality_defect(rot: np.ndarray) -> float:
    """Frobenius norm of U U^T - I."""
    d = rot.shape[0]
    return float(np.linalg.norm(rot @ rot.T - np.eye(d), "fro"))


def orthogonalize(rot: np.ndarray) -> np.ndarray:
    """
    Validate an orthogonal matrix, repairing small drift.

    Drift up to ToleranceConfig.ORTHO_REPAIR_TOL is projected onto O(d) by
    the polar decomposition; anything larger raises OrthogonalityError.
    """
    rot = np.asarray(rot, dtype=float)
    if rot.ndim != 2 or rot.shape[0] != rot.shape[1]:
        raise OrthogonalityError(f"rotation must be square, got shape {rot.shape}")
    defect = orthogonality_defect(rot)
    if defect <= ToleranceConfig.ORTHO_TOL:
        return rot
    if defect <= ToleranceConfig.ORTHO_REPAIR_TOL:
        logger.debug(f"Projecting rotation back onto O(d) (defect {defect:.2e})")
        return polar(rot)[0]
    raise OrthogonalityError(
        f"||U U^T - I||_F = {defect:.3e} exceeds repair tolerance "
        f"{ToleranceConfig.ORTHO_REPAIR_TOL:.1e}"
    )


@dataclass(frozen=True, eq=False)
class SimElement:
    """A similarity x -> rho * rot @ x + trans."""
    rho: float
    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        rho = float(self.rho)
        if not (rho > 0 and math.isfinite(rho)):
            raise ValueError(f"rho must be positive and finite, got {self.rho!r}")
        rot = np.atleast_2d(np.asarray(self.rot, dtype=float))
        trans = np.atleast_1d(np.asarray(self.trans, dtype=float))
        if trans.shape != (rot.shape[0],):
            raise ValueError(f"translation shape {trans.shape} does not match rotation {rot.shape}")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "rot", _readonly(orthogonalize(rot)))
        object.__setattr__(self, "trans", _readonly(trans))

    @classmethod
    def unchecked(cls, rho: float, rot: np.ndarray, trans: np.ndarray) -> "SimElement":
        """Build from arrays already known to be valid (batch kernels)."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "rho", float(rho))
        object.__setattr__(obj, "rot", _readonly(rot))
        object.__setattr__(obj, "trans", _readonly(trans))
        return obj

    @property
    def d(self) -> int:
        return self.trans.shape[0]

    @property
    def log_rho(self) -> float:
        return math.log(self.rho)

    def __call__(self, x):
        return apply(self, x)

    def __matmul__(self, other: "SimElement") -> "SimElement":
        return compose(self, other)

    def __repr__(self) -> str:
        return f"SimElement(rho={self.rho:.6g}, rot={self.rot.tolist()}, trans={self.trans.tolist()})"

    def to_dict(self) -> dict:
        return {"rho": self.rho, "rot": self.rot.tolist(), "trans": self.trans.tolist()}


def lie_dimension(d: int) -> int:
    """Dimension of the Lie algebra of Sim(R^d): scale + so(d) + translations."""
    return 1 + d * (d - 1) // 2 + d


@dataclass(frozen=True, eq=False)
class LieVector:
    """
    Element u = (alpha, beta) of the Lie algebra, alpha = scale I + skew.

    Coordinates are [scale, skew[i, j] for i < j, trans]; |u| is their
    Euclidean norm.
    """
    scale: float
    skew: np.ndarray
    trans: np.ndarray = field(default=None)

    def __post_init__(self):
        skew = np.atleast_2d(np.asarray(self.skew, dtype=float))
        d = skew.shape[0]
        trans = np.zeros(d) if self.trans is None else np.atleast_1d(np.asarray(self.trans, dtype=float))
        if skew.shape != (d, d) or trans.shape != (d,):
            raise ValueError(f"inconsistent Lie vector shapes {skew.shape}, {trans.shape}")
        if np.max(np.abs(skew + skew.T), initial=0.0) > ToleranceConfig.SKEW_TOL:
            raise ValueError("skew part is not skew-symmetric")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "skew", _readonly(skew))
        object.__setattr__(self, "trans", _readonly(trans))

    @classmethod
    def zero(cls, d: int) -> "LieVector":
        return cls(0.0, np.zeros((d, d)), np.zeros(d))

    @classmethod
    def from_coords(cls, d: int, coords: Sequence[float]) -> "LieVector":
        coords = np.asarray(coords, dtype=float)
        if coords.shape != (lie_dimension(d),):
            raise ValueError(f"expected {lie_dimension(d)} coordinates for d={d}")
        iu = np.triu_indices(d, 1)
        skew = np.zeros((d, d))
        k = len(iu[0])
        skew[iu] = coords[1:1 + k]
        skew = skew - skew.T
        return cls(coords[0], skew, coords[1 + k:])

    @property
    def d(self) -> int:
        return self.trans.shape[0]

    def coords(self) -> np.ndarray:
        iu = np.triu_indices(self.d, 1)
        return np.concatenate([[self.scale], self.skew[iu], self.trans])

    def norm(self) -> float:
        return float(np.linalg.norm(self.coords()))

    def alpha(self) -> np.ndarray:
        return self.scale * np.eye(self.d) + self.skew

    def embed(self) -> np.ndarray:
        """The (d+1)x(d+1) matrix (alpha, beta; 0, 0)."""
        d = self.d
        m = np.zeros((d + 1, d + 1))
        m[:d, :d] = self.alpha()
        m[:d, d] = self.trans
        return m

    def __add__(self, other: "LieVector") -> "LieVector":
        return LieVector(self.scale + other.scale, self.skew + other.skew, self.trans + other.trans)

    def __neg__(self) -> "LieVector":
        return LieVector(-self.scale, -self.skew, -self.trans)

    def __sub__(self, other: "LieVector") -> "LieVector":
        return self + (-other)

    def __mul__(self, c: float) -> "LieVector":
        return LieVector(c * self.scale, c * self.skew, c * self.trans)

    __rmul__ = __mul__

    def is_zero(self) -> bool:
        return self.norm() == 0.0

    def to_dict(self) -> dict:
        return {"coords": self.coords().tolist()}


# =============================================================================
# Group law
# =============================================================================

def identity(d: int) -> SimElement:
    return SimElement.unchecked(1.0, np.eye(d), np.zeros(d))


def compose(g: SimElement, h: SimElement) -> SimElement:
    """(g o h)(x) = g(h(x))."""
    rot = g.rot @ h.rot
    trans = g.rho * (g.rot @ h.trans) + g.trans
    # products of valid rotations drift only by round-off; repair if needed
    return SimElement(g.rho * h.rho, rot, trans)


def inverse(g: SimElement) -> SimElement:
    """g^{-1} = (1/rho, U^T, -rho^{-1} U^T b)."""
    rot_t = g.rot.T
    return SimElement.unchecked(1.0 / g.rho, rot_t, -(rot_t @ g.trans) / g.rho)


def power(g: SimElement, k: int) -> SimElement:
    """g^k by repeated squaring (negative k uses the inverse)."""
    if k < 0:
        g, k = inverse(g), -k
    result = identity(g.d)
    base = g
    while k:
        if k & 1:
            result = compose(result, base)
        base = compose(base, base)
        k >>= 1
    return result


def compose_all(elements: Sequence[SimElement], d: int) -> SimElement:
    """Left-to-right product g_1 g_2 ... g_n (identity for an empty list)."""
    result = identity(d)
    for g in elements:
        result = compose(result, g)
    return result


def apply(g: SimElement, x) -> np.ndarray:
    """rho U x + b for a point (d,) or a cloud (N, d)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if g.d == 1 and x.ndim == 1 and x.shape[0] != 1:
        x = x[:, None]
        return (g.rho * x @ g.rot.T + g.trans)[:, 0]
    return g.rho * (x @ g.rot.T) + g.trans


# =============================================================================
# Metric
# =============================================================================

def operator_norm(m: np.ndarray) -> float | np.ndarray:
    """
    Spectral norm of a matrix or a stack of matrices.

    SVD for d <= 3, power iteration on M^T M otherwise.
    """
    m = np.asarray(m, dtype=float)
    if m.shape[-1] <= 3:
        out = np.linalg.norm(m, ord=2, axis=(-2, -1))
        return float(out) if m.ndim == 2 else out
    return _power_norm(m)


def _power_norm(m: np.ndarray) -> float | np.ndarray:
    stack = m if m.ndim == 3 else m[None]
    gram = np.einsum("nji,njk->nik", stack, stack)
    d = stack.shape[-1]
    v = np.ones((stack.shape[0], d)) / math.sqrt(d)
    # deterministic perturbation so v is not orthogonal to the top eigenvector
    v = v + 1e-3 * np.arange(1, d + 1) / d
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    lam = np.zeros(stack.shape[0])
    for _ in range(ToleranceConfig.POWER_ITER_MAX):
        w = np.einsum("nij,nj->ni", gram, v)
        new_lam = np.linalg.norm(w, axis=1)
        nz = new_lam > 0
        v[nz] = w[nz] / new_lam[nz, None]
        converged = np.all(np.abs(new_lam - lam) <= ToleranceConfig.POWER_ITER_TOL * np.maximum(new_lam, 1.0))
        lam = new_lam
        if converged:
            break
    out = np.sqrt(lam)
    return float(out[0]) if m.ndim == 2 else out


def metric_dist(g: SimElement, h: SimElement) -> float:
    """d(g,h) = |log rho(g) - log rho(h)| + ||U(g) - U(h)|| + |b(g) - b(h)|."""
    return (
        abs(math.log(g.rho) - math.log(h.rho))
        + operator_norm(g.rot - h.rot)
        + float(np.linalg.norm(g.trans - h.trans))
    )


def batch_metric(
    log_rho1: np.ndarray, rot1: np.ndarray, trans1: np.ndarray,
    log_rho2: np.ndarray, rot2: np.ndarray, trans2: np.ndarray,
) -> np.ndarray:
    """Row-wise metric between two equally long stacks of elements."""
    return (
        np.abs(log_rho1 - log_rho2)
        + np.atleast_1d(operator_norm(rot1 - rot2))
        + np.linalg.norm(trans1 - trans2, axis=-1)
    )


# =============================================================================
# Embedding, exponential and logarithm
# =============================================================================

def embed_affine(g: SimElement) -> np.ndarray:
    """The block matrix (rho U, b; 0, 1)."""
    d = g.d
    m = np.eye(d + 1)
    m[:d, :d] = g.rho * g.rot
    m[:d, d] = g.trans
    return m


def from_matrix(m: np.ndarray) -> SimElement:
    """Read a SimElement back from its GL_{d+1} embedding."""
    m = np.asarray(m, dtype=float)
    d = m.shape[0] - 1
    if not np.allclose(m[d], np.eye(d + 1)[d], atol=1e-12):
        raise ValueError("last row of an affine embedding must be (0, ..., 0, 1)")
    a = m[:d, :d]
    rho = abs(np.linalg.det(a)) ** (1.0 / d)
    return SimElement(rho, a / rho, m[:d, d])


def exp_map(u: LieVector) -> SimElement:
    """Matrix exponential of the embedded Lie vector, read back as SimElement."""
    d = u.d
    e = expm(u.embed())
    rho = math.exp(u.scale)
    return SimElement(rho, e[:d, :d] / rho, e[:d, d])


def _rotation_log(rot: np.ndarray) -> np.ndarray:
    """Principal logarithm of an orthogonal matrix via its real Schur form."""
    d = rot.shape[0]
    if d == 1:
        if rot[0, 0] < 0:
            raise RotationBranchError("reflection x -> -x has no real logarithm (eigenvalue -1)")
        return np.zeros((1, 1))
    t, z = schur(rot, output="real")
    log_t = np.zeros((d, d))
    i = 0
    while i < d:
        if i + 1 < d and abs(t[i + 1, i]) > ToleranceConfig.BRANCH_TOL * 1e-3:
            theta = math.atan2(t[i + 1, i], t[i, i])
            if abs(np.exp(1j * theta) + 1.0) < ToleranceConfig.BRANCH_TOL:
                raise RotationBranchError(f"rotation angle {theta:.12g} is at the branch cut pi")
            log_t[i + 1, i] = theta
            log_t[i, i + 1] = -theta
            i += 2
        else:
            if t[i, i] + 1.0 < ToleranceConfig.BRANCH_TOL:
                raise RotationBranchError("rotation has eigenvalue -1 (angle pi or reflection)")
            i += 1
    skew = z @ log_t @ z.T
    return 0.5 * (skew - skew.T)


def _v_matrix(alpha: np.ndarray) -> np.ndarray:
    """V(alpha) = sum_k alpha^k/(k+1)!, the top-right block of expm([[alpha, I], [0, 0]])."""
    d = alpha.shape[0]
    big = np.zeros((2 * d, 2 * d))
    big[:d, :d] = alpha
    big[:d, d:] = np.eye(d)
    return expm(big)[:d, d:]


def log_map(g: SimElement) -> LieVector:
    """
    Principal logarithm of g.

    Raises:
        RotationBranchError: when U(g) has an eigenvalue at -1
    """
    skew = _rotation_log(g.rot)
    alpha = math.log(g.rho) * np.eye(g.d) + skew
    beta = np.linalg.solve(_v_matrix(alpha), g.trans)
    return LieVector(math.log(g.rho), skew, beta)


def differential_psi(x, u: LieVector) -> np.ndarray:
    """psi_x(u) = alpha x + beta, the derivative at t = 0 of exp(tu) x."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return u.alpha() @ x + u.trans


def psi_matrix(x) -> np.ndarray:
    """
    The d x l matrix of psi_x in LieVector coordinates.

    A stack of points of shape (N, d) gives an (N, d, l) stack.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    x = np.atleast_2d(x)
    n, d = x.shape
    out = np.zeros((n, d, lie_dimension(d)))
    out[:, :, 0] = x
    col = 1
    for i, j in zip(*np.triu_indices(d, 1)):
        # basis skew E_ij = e_i e_j^T - e_j e_i^T
        out[:, i, col] = x[:, j]
        out[:, j, col] = -x[:, i]
        col += 1
    out[:, :, col:] = np.eye(d)
    return out[0] if single else out


# =============================================================================
# Rotation helpers
# =============================================================================

def rotation_2d(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotation_from_angles(d: int, angles: Sequence[float]) -> np.ndarray:
    """
    Rotation from an angle list (radians).

    d=2: one angle; d=3: intrinsic "xyz" Euler angles; otherwise d(d-1)/2
    Givens angles applied in upper-triangle plane order.
    """
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    if d == 1:
        return np.eye(1)
    if d == 2:
        return rotation_2d(float(angles[0]))
    if d == 3 and angles.shape == (3,):
        return Rotation.from_euler("xyz", angles).as_matrix()
    planes = list(zip(*np.triu_indices(d, 1)))
    if angles.shape != (len(planes),):
        raise ValueError(f"expected {len(planes)} Givens angles for d={d}")
    rot = np.eye(d)
    for (i, j), theta in zip(planes, angles):
        giv = np.eye(d)
        c, s = math.cos(theta), math.sin(theta)
        giv[i, i] = giv[j, j] = c
        giv[i, j], giv[j, i] = -s, s
        rot = rot @ giv
    return rot


def rotation_angles(g: SimElement) -> np.ndarray:
    """Skew coordinates of log U(g) (the rotation angles used for grid rounding)."""
    iu = np.triu_indices(g.d, 1)
    return _rotation_log(g.rot)[iu]
