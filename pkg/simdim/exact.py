"""
Exact arithmetic for one-dimensional systems.

Elements x -> rho * s * x + b with s = +-1 and rho, b in Q or in the
quadratic field Q(sqrt 5). Collisions between words are decided by exact
equality, so Pisot coincidences (1 - l - l^2 = 0 for l = 1/phi) merge with
no tolerance at all.
"""

import functools
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, NamedTuple, Optional, Sequence, Union

from .errors import BudgetExceeded

logger = logging.getLogger(__name__)

SQRT5 = math.sqrt(5.0)


@functools.total_ordering
class QuadraticNumber:
    """a + b*sqrt(5) with rational a, b."""

    __slots__ = ("a", "b")

    def __init__(self, a=0, b=0):
        self.a = Fraction(a)
        self.b = Fraction(b)

    @classmethod
    def coerce(cls, value) -> "QuadraticNumber":
        if isinstance(value, QuadraticNumber):
            return value
        if isinstance(value, (list, tuple)):
            a, b = value
            return cls(Fraction(a), Fraction(b))
        return cls(Fraction(value), 0)

    @classmethod
    def golden_inverse(cls) -> "QuadraticNumber":
        """1/phi = (sqrt 5 - 1)/2."""
        return cls(Fraction(-1, 2), Fraction(1, 2))

    def sign(self) -> int:
        sa = (self.a > 0) - (self.a < 0)
        sb = (self.b > 0) - (self.b < 0)
        if sa == sb or sb == 0:
            return sa
        if sa == 0:
            return sb
        # opposite signs: compare a^2 with 5 b^2
        diff = self.a * self.a - 5 * self.b * self.b
        return sa if diff > 0 else (sb if diff < 0 else 0)

    def conjugate(self) -> "QuadraticNumber":
        return QuadraticNumber(self.a, -self.b)

    def __add__(self, other):
        o = QuadraticNumber.coerce(other)
        return QuadraticNumber(self.a + o.a, self.b + o.b)

    __radd__ = __add__

    def __neg__(self):
        return QuadraticNumber(-self.a, -self.b)

    def __sub__(self, other):
        return self + (-QuadraticNumber.coerce(other))

    def __rsub__(self, other):
        return QuadraticNumber.coerce(other) - self

    def __mul__(self, other):
        o = QuadraticNumber.coerce(other)
        return QuadraticNumber(self.a * o.a + 5 * self.b * o.b, self.a * o.b + self.b * o.a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = QuadraticNumber.coerce(other)
        norm = o.a * o.a - 5 * o.b * o.b
        if norm == 0:
            raise ZeroDivisionError("division by zero in Q(sqrt 5)")
        num = self * o.conjugate()
        return QuadraticNumber(num.a / norm, num.b / norm)

    def __rtruediv__(self, other):
        return QuadraticNumber.coerce(other) / self

    def __abs__(self):
        return -self if self.sign() < 0 else self

    def __eq__(self, other):
        if not isinstance(other, (QuadraticNumber, Fraction, int)):
            return NotImplemented
        o = QuadraticNumber.coerce(other)
        return self.a == o.a and self.b == o.b

    def __lt__(self, other):
        return (self - QuadraticNumber.coerce(other)).sign() < 0

    def __hash__(self):
        return hash(self.a) if self.b == 0 else hash((self.a, self.b))

    def __float__(self):
        return float(self.a) + float(self.b) * SQRT5

    def __repr__(self):
        return f"QuadraticNumber({self.a}, {self.b})"

    def __str__(self):
        if self.b == 0:
            return str(self.a)
        return f"{self.a} + {self.b}*sqrt(5)"


Number = Union[Fraction, QuadraticNumber]


class ExactElement(NamedTuple):
    """x -> rho * sign * x + b."""
    rho: Number
    sign: int
    b: Number


def exact_identity(one: Number = Fraction(1)) -> ExactElement:
    return ExactElement(one, 1, one - one)


def exact_compose(g: ExactElement, h: ExactElement) -> ExactElement:
    return ExactElement(g.rho * h.rho, g.sign * h.sign, g.rho * g.sign * h.b + g.b)


def exact_distance(g: ExactElement, h: ExactElement) -> Union[Number, float]:
    """
    Group-metric distance.

    Exact when the scale and sign parts agree (only the translation term
    survives), float otherwise.
    """
    if g.rho == h.rho and g.sign == h.sign:
        return abs(g.b - h.b)
    return (
        abs(math.log(float(g.rho)) - math.log(float(h.rho)))
        + abs(g.sign - h.sign)
        + abs(float(g.b) - float(h.b))
    )


@dataclass(frozen=True)
class ExactMeasure:
    """Finitely supported measure on one-dimensional exact similarities."""
    rhos: tuple
    signs: tuple
    trans: tuple
    weights: tuple

    def __post_init__(self):
        for name in ("rhos", "signs", "trans", "weights"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        n = len(self.rhos)
        if not n or any(len(getattr(self, k)) != n for k in ("signs", "trans", "weights")):
            raise ValueError("exact measure needs equally many rhos, signs, trans and weights")
        if any(float(r) <= 0 for r in self.rhos):
            raise ValueError("rho must be positive")
        if any(s not in (1, -1) for s in self.signs):
            raise ValueError("signs must be +1 or -1")
        if sum(self.weights, Fraction(0)) != 1:
            raise ValueError("exact weights must sum to exactly 1")
        if len(set(self.atoms())) != n:
            raise ValueError("exact atoms must be distinct")

    @property
    def d(self) -> int:
        return 1

    @property
    def size(self) -> int:
        return len(self.rhos)

    def atoms(self) -> list[ExactElement]:
        return [ExactElement(r, s, b) for r, s, b in zip(self.rhos, self.signs, self.trans)]

    def one(self) -> Number:
        return self.rhos[0] / self.rhos[0]

    def to_float(self):
        """The FiniteMeasure with float parameters."""
        from .measure_core import FiniteMeasure
        from .sim_group import SimElement

        atoms = [SimElement(float(g.rho), [[float(g.sign)]], [float(g.b)]) for g in self.atoms()]
        return FiniteMeasure(atoms=atoms, weights=[float(w) for w in self.weights])


@dataclass
class ExactElementSet:
    """supp(mu^n) with exact masses; same reading interface as WeightedElementSet."""
    elements: list
    exact_probs: list
    n: int

    @property
    def probs(self):
        import numpy as np
        return np.array([float(p) for p in self.exact_probs])

    @property
    def size(self) -> int:
        return len(self.elements)

    def to_sim_elements(self):
        from .sim_group import SimElement
        return [SimElement(float(g.rho), [[float(g.sign)]], [float(g.b)]) for g in self.elements]


def exact_generations(
    mu: ExactMeasure,
    n_max: int,
    budget: Optional[int] = None,
) -> Iterator[ExactElementSet]:
    """
    Yield supp(mu^n) for n = 1..n_max, built generation by generation.

    Raises:
        BudgetExceeded: before a generation whose products exceed the budget
    """
    atoms = list(zip(mu.atoms(), mu.weights))
    current = {exact_identity(mu.one()): Fraction(1)}
    for n in range(1, n_max + 1):
        products = len(current) * len(atoms)
        if budget is not None and products > budget:
            raise BudgetExceeded(
                f"generation {n} needs {products} products (budget {budget})", completed_n=n - 1)
        nxt: dict[ExactElement, Fraction] = {}
        for parent, p in current.items():
            for atom, w in atoms:
                child = exact_compose(parent, atom)
                nxt[child] = nxt.get(child, Fraction(0)) + p * w
        current = nxt
        logger.debug(f"exact generation {n}: {len(current)} elements")
        yield ExactElementSet(list(current.keys()), list(current.values()), n)


def _min_gap_sorted(values: Sequence) -> Optional[Number]:
    best = None
    for a, b in zip(values, values[1:]):
        gap = b - a
        if best is None or gap < best:
            best = gap
    return best


def _min_cross_gap(xs: Sequence, ys: Sequence) -> float:
    """min |x - y| between two sorted lists, as a float."""
    i = j = 0
    best = math.inf
    while i < len(xs) and j < len(ys):
        gap = abs(float(xs[i]) - float(ys[j]))
        best = min(best, gap)
        if xs[i] < ys[j]:
            i += 1
        else:
            j += 1
    return best


def exact_min_distance(elements: Sequence[ExactElement]) -> Optional[Union[Number, float]]:
    """
    Minimum metric distance over distinct pairs.

    Elements sharing (rho, sign) are compared exactly through sorted
    translations; pairs across groups contribute a float distance.
    """
    if len(elements) < 2:
        return None
    groups: dict[tuple, list] = {}
    for g in elements:
        groups.setdefault((g.rho, g.sign), []).append(g.b)
    sorted_groups = {k: sorted(v) for k, v in groups.items()}

    best_exact = None
    for values in sorted_groups.values():
        gap = _min_gap_sorted(values)
        if gap is not None and (best_exact is None or gap < best_exact):
            best_exact = gap

    best_float = math.inf
    keys = list(sorted_groups)
    for i, ki in enumerate(keys):
        for kj in keys[i + 1:]:
            base = abs(math.log(float(ki[0])) - math.log(float(kj[0]))) + abs(ki[1] - kj[1])
            if base >= best_float or (best_exact is not None and base >= float(best_exact)):
                continue
            best_float = min(best_float, base + _min_cross_gap(sorted_groups[ki], sorted_groups[kj]))

    if best_exact is not None and float(best_exact) <= best_float:
        return best_exact
    return best_float
