"""
Built-in reference systems.

Small measures whose invariants are known in closed form; the verification
suites and the sample configs are built from them.
"""

import math
from fractions import Fraction

import numpy as np

from .exact import ExactMeasure, QuadraticNumber
from .measure_core import FiniteMeasure
from .sim_group import SimElement, rotation_2d

GOLDEN_LAMBDA = (math.sqrt(5.0) - 1.0) / 2.0


def bernoulli(lam: float, b: float = 1.0) -> FiniteMeasure:
    """x -> lam x +- b with equal weights."""
    return FiniteMeasure.uniform([SimElement(lam, [[1.0]], [b]), SimElement(lam, [[1.0]], [-b])])


def exact_bernoulli(lam: Fraction, b: Fraction = Fraction(1)) -> ExactMeasure:
    half = Fraction(1, 2)
    return ExactMeasure(rhos=[lam, lam], signs=[1, 1], trans=[b, -b], weights=[half, half])


def golden() -> FiniteMeasure:
    """x -> x/phi +- 1, the Pisot case with exact collisions from n = 3."""
    return bernoulli(GOLDEN_LAMBDA)


def exact_golden() -> ExactMeasure:
    lam = QuadraticNumber.golden_inverse()
    one = QuadraticNumber.coerce(1)
    half = Fraction(1, 2)
    return ExactMeasure(rhos=[lam, lam], signs=[1, 1], trans=[one, -one], weights=[half, half])


def point_mass(d: int = 1) -> FiniteMeasure:
    """A single contraction x -> x/2; its self-similar measure is delta_0."""
    return FiniteMeasure([SimElement(0.5, np.eye(d), np.zeros(d))], [1.0])


def rotation2d(theta: float = 1.0, lam: float = 0.5) -> FiniteMeasure:
    """Planar system with an irrational rotation angle (irreducible, no fixed point)."""
    e1 = np.array([1.0, 0.0])
    return FiniteMeasure.uniform([
        SimElement(lam, rotation_2d(theta), e1),
        SimElement(lam, np.eye(2), -e1),
    ])


def on_average() -> FiniteMeasure:
    """rho in {2, 1/4} with weights 1/3, 2/3: chi = -log 2 although one atom expands."""
    return FiniteMeasure(
        [SimElement(2.0, [[1.0]], [1.0]), SimElement(0.25, [[1.0]], [-1.0])],
        [1.0 / 3.0, 2.0 / 3.0],
    )


BUILTIN_SYSTEMS = {
    "cantor": lambda: bernoulli(1.0 / 3.0),
    "half": lambda: bernoulli(0.5),
    "golden": golden,
    "point": point_mass,
    "rotation2d": rotation2d,
    "on_average": on_average,
}


def builtin_system(name: str) -> FiniteMeasure:
    """Look up a reference system by name."""
    try:
        return BUILTIN_SYSTEMS[name]()
    except KeyError:
        raise KeyError(f"unknown system {name!r}; available: {', '.join(BUILTIN_SYSTEMS)}") from None
