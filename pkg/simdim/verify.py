"""
Invariant suites run by `simdim verify`.

Each suite exercises one module on the built-in systems and returns a list
of named checks. Suites are cheap versions of the acceptance experiments:
small enough to run in a minute, with margins matching their sample sizes.
"""

import math
import os
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from .config import ToleranceConfig
from .errors import ConfigError, SimDimError
from .utils import get_logger, rng_stream

logger = get_logger()


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail}


@dataclass
class SuiteResult:
    name: str
    checks: list = field(default_factory=list)
    error: Optional[str] = None
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.error is None and all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        # timing stays out so repeated runs write identical JSON
        return {
            "name": self.name,
            "passed": self.passed,
            "error": self.error,
            "checks": [c.to_dict() for c in self.checks],
        }


@dataclass
class VerifyReport:
    suites: list

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)

    def failed(self) -> list[str]:
        return [s.name for s in self.suites if not s.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "failed": self.failed(),
            "suites": [s.to_dict() for s in self.suites],
        }


def _check(name: str, passed, detail: str = "") -> Check:
    return Check(name, bool(passed), detail)


# =============================================================================
# Suites
# =============================================================================

_MIN_ORTHO_TOL = 1e-15


def _ortho_tol() -> float:
    """SIMDIM_ORTHO_TOL read at call time, so a bad override is caught by the suite."""
    raw = os.getenv("SIMDIM_ORTHO_TOL")
    if raw is None:
        return ToleranceConfig.ORTHO_TOL
    try:
        return float(raw)
    except ValueError:
        return math.nan


def suite_sim_group(seed: int, threads: int) -> list[Check]:
    from .sim_group import (
        SimElement, compose, compose_all, exp_map, inverse, log_map, metric_dist,
        orthogonality_defect, rotation_2d, rotation_from_angles,
    )

    checks = []
    rng = rng_stream(seed, 100)
    elements = []
    for d in (1, 2, 3):
        for _ in range(4):
            if d == 1:
                rot = np.array([[rng.choice([-1.0, 1.0])]])
            elif d == 2:
                rot = rotation_2d(rng.uniform(-3, 3))
            else:
                rot = rotation_from_angles(3, rng.uniform(-1, 1, 3))
            elements.append(SimElement(rng.uniform(0.2, 2.0), rot, rng.normal(size=d)))
    worst = 0.0
    for d in (1, 2, 3):
        g = [e for e in elements if e.d == d]
        worst = max(worst, metric_dist(compose(compose(g[0], g[1]), g[2]), compose(g[0], compose(g[1], g[2]))))
        worst = max(worst, metric_dist(compose(g[0], inverse(g[0])), compose_all([], d)))
    checks.append(_check("associativity and inverses", worst <= 1e-12, f"max drift {worst:.3g}"))

    drift = 0.0
    for g in elements:
        if g.d == 1 and g.rot[0, 0] < 0:
            continue
        drift = max(drift, metric_dist(exp_map(log_map(g)), g))
    checks.append(_check("exp(log g) = g", drift <= 1e-9, f"max drift {drift:.3g}"))

    tol = _ortho_tol()
    usable = math.isfinite(tol) and tol >= _MIN_ORTHO_TOL
    long = compose_all([elements[4], elements[5]] * 500, 2)
    defect = orthogonality_defect(long.rot)
    checks.append(_check("orthogonality of long products", usable and defect <= tol,
                         f"defect {defect:.3g} vs SIMDIM_ORTHO_TOL {tol:g}"))
    return checks


def suite_measure_core(seed: int, threads: int) -> list[Check]:
    from .measure_core import common_fixed_point, is_irreducible, lyapunov_exponent
    from .systems import bernoulli, on_average, point_mass, rotation2d

    checks = [
        _check("chi of x/3 +- 1", abs(lyapunov_exponent(bernoulli(1 / 3)) + math.log(3)) <= 1e-12),
        _check("chi on average", abs(lyapunov_exponent(on_average()) + math.log(2)) <= 1e-12),
    ]
    fixed = common_fixed_point(point_mass(2))
    checks.append(_check("point mass fixed point", fixed is not None and np.allclose(fixed, 0.0)))
    checks.append(_check("no common fixed point", common_fixed_point(bernoulli(1 / 3)) is None))
    verdict = is_irreducible(rotation2d(), seed=seed).verdict.value
    checks.append(_check("irrational rotation irreducible", verdict == "Irreducible", verdict))
    return checks


def suite_semigroup_enum(seed: int, threads: int) -> list[Check]:
    from .semigroup_enum import (
        delta_n, entropy_rate_bounds, enumerate_convolution, enumerate_generations, m_n, shannon_entropy,
    )
    from .systems import bernoulli, exact_bernoulli, exact_golden

    checks = []
    rates = entropy_rate_bounds(bernoulli(1 / 3), 10, threads=threads)
    err = max(abs(r - math.log(2)) for r in rates)
    checks.append(_check("H(mu^n)/n = log 2 for x/3 +- 1", err <= 1e-12, f"max error {err:.3g}"))

    sets = list(enumerate_generations(exact_bernoulli(Fraction(1, 3)), 3))
    d3, m3 = delta_n(sets[-1]), m_n(sets, 3)
    checks.append(_check("Delta_3 = M_3 = 2/9 exactly", d3 == Fraction(2, 9) and m3 == Fraction(2, 9), f"{d3}, {m3}"))

    gold = enumerate_convolution(exact_golden(), 3)
    h3 = shannon_entropy(gold)
    checks.append(_check("golden supp(mu^3) has 7 elements", gold.size == 7, str(gold.size)))
    checks.append(_check("golden H(mu^3) = (22/8) log 2", abs(h3 - 22 / 8 * math.log(2)) <= 1e-12, f"{h3:.15g}"))
    return checks


def suite_walk_sampler(seed: int, threads: int) -> list[Check]:
    from .systems import bernoulli, on_average
    from .walk_sampler import sample_attractor, stopped_walk

    checks = []
    _, tau = stopped_walk(bernoulli(1 / 3), 3.0 ** -5, seed)
    checks.append(_check("tau for constant rho", tau == 5, str(tau)))
    a = sample_attractor(on_average(), 70_000, seed, kappa=1e-6, threads=1)
    b = sample_attractor(on_average(), 70_000, seed, kappa=1e-6, threads=max(2, threads))
    checks.append(_check("thread-count invariance", np.array_equal(a.points, b.points)))
    cloud = sample_attractor(bernoulli(1 / 3), 20_000, seed, kappa=3.0 ** -20)
    checks.append(_check("Cantor support in [-3/2, 3/2]", np.all(np.abs(cloud.points) <= 1.5 + 1e-12)))
    return checks


def suite_entropy_est(seed: int, threads: int) -> list[Check]:
    from .entropy_est import SmoothingSpec, entropy_between_scales, estimate_dimension
    from .systems import bernoulli
    from .walk_sampler import sample_attractor

    checks = []
    cloud = sample_attractor(bernoulli(1 / 3), 200_000, seed, kappa=3.0 ** -25, threads=threads)
    report = estimate_dimension(cloud.points, 2.0 ** -9, 2.0 ** -3, seed=seed, threads=threads,
                                bias_bound=cloud.bias_bound)
    target = math.log(2) / math.log(3)
    checks.append(_check("Cantor dimension", abs(report.slope - target) <= 0.05, f"slope {report.slope:.4f}"))

    spec = SmoothingSpec("cube", 1.0)
    r = 2.0 ** -6
    whole = entropy_between_scales(cloud.points, spec, r, 4 * r, seed=seed)
    parts = (entropy_between_scales(cloud.points, spec, r, 2 * r, seed=seed)
             + entropy_between_scales(cloud.points, spec, 2 * r, 4 * r, seed=seed))
    checks.append(_check("telescoping", abs(whole - parts) <= 1e-12))

    half = sample_attractor(bernoulli(0.5), 200_000, seed, depth=40, threads=threads)
    report = estimate_dimension(half.points, 2.0 ** -8, 2.0 ** -3, seed=seed, threads=threads)
    checks.append(_check("uniform dimension", abs(report.slope - 1.0) <= 0.05, f"slope {report.slope:.4f}"))
    return checks


def suite_decomp_engine(seed: int, threads: int) -> list[Check]:
    from .decomp_engine import (
        BlockPlan, build_decomposition, concatenate, random_taylor_instance, taylor_linearize,
        validate_decomposition, variance_sum_achieved,
    )
    from .systems import bernoulli
    from .walk_sampler import sample_walk

    checks = []
    mu = bernoulli(1 / 3)
    failures = 0
    for s in range(10):
        path = sample_walk(mu, 40, seed=seed + s)
        pd = build_decomposition(path, K=4, A=2.0, r=0.5, block_plan=BlockPlan.equal(3, 4),
                                 resamples=400, bootstrap=20)
        failures += not validate_decomposition(pd, path).passed
    checks.append(_check("free system decompositions validate", failures == 0, f"{failures} of 10 failed"))

    ratios = []
    for t in range(20):
        g, u, v = random_taylor_instance(rng_stream(seed, 200, t), 3, 2, 1e-3, 1.0)
        small = random_taylor_instance(rng_stream(seed, 200, t), 3, 2, 5e-4, 1.0)
        ratios.append(taylor_linearize(g, u, v, A=1.0, r=1e-3).error
                      / taylor_linearize(*small, A=1.0, r=5e-4).error)
    median = float(np.median(ratios))
    checks.append(_check("Taylor error quadratic in r", abs(median - 4.0) <= 0.6, f"median ratio {median:.3f}"))

    pd1 = build_decomposition(sample_walk(mu, 30, seed=seed), K=3, A=2.0, r=0.1 * 3.0 ** -12,
                              block_plan=BlockPlan.equal(2, 3), resamples=400, bootstrap=20)
    # M = 2R: the bridge takes two steps and pd2's floors shrink by (M rho(E))^2 = 4/9
    M, R = 6.0, 3.0
    r2 = M / pd1.kappa * pd1.r
    pd2 = build_decomposition(sample_walk(mu, 30, seed=seed + 1), K=3, A=2.0, r=r2,
                              block_plan=BlockPlan.equal(1, 3), resamples=400, bootstrap=20)
    joined = concatenate(pd1, pd2, M=M, R=R)
    factor = (M * joined.bridges[pd1.n].rho) ** 2
    expected = variance_sum_achieved(pd1).total + factor * variance_sum_achieved(pd2).total
    got = variance_sum_achieved(joined).total
    checks.append(_check("concatenation adds rescaled variance sums",
                         math.isclose(got, expected, rel_tol=1e-9, abs_tol=1e-15), f"{got:.6g} vs {expected:.6g}"))
    floor = pd1.kappa * pd2.kappa / (R * M)
    checks.append(_check("concatenated kappa >= kappa_1 kappa_2 / (RM)",
                         floor * (1 - 1e-12) <= joined.kappa <= joined.realized_kappa,
                         f"{joined.kappa:.6g} vs {floor:.6g}"))
    return checks


def suite_prob_tools(seed: int, threads: int) -> list[Check]:
    from .prob_tools import BernoulliPsd, SummandSpec, berry_esseen_check, cramer_check, empirical_w1

    checks = []
    k = np.arange(1000)
    w = empirical_w1((k + 0.5) / 1000, 2 * (k + 0.5) / 1000).value
    checks.append(_check("W1 of uniform grids", abs(w - 0.5) <= 2e-3, f"{w:.6f}"))
    ratio = berry_esseen_check(SummandSpec("rademacher", 1.0), 1).ratio
    checks.append(_check("Berry-Esseen single step", ratio <= 2, f"{ratio:.4f}"))
    cramer = cramer_check(BernoulliPsd(0.5), 0.5, 1.0, 40, trials=5000, seed=seed, threads=threads)
    checks.append(_check("Cramér Bernoulli", cramer.passed and cramer.exact_log_prob <= cramer.bound_log_prob))
    return checks


SUITES: dict[str, Callable[[int, int], list[Check]]] = {
    "sim_group": suite_sim_group,
    "measure_core": suite_measure_core,
    "semigroup_enum": suite_semigroup_enum,
    "walk_sampler": suite_walk_sampler,
    "entropy_est": suite_entropy_est,
    "decomp_engine": suite_decomp_engine,
    "prob_tools": suite_prob_tools,
}


def run_suites(names: Optional[list[str]] = None, seed: int = 0, threads: int = 1) -> VerifyReport:
    """
    Run the named suites (all by default).

    A suite that raises is recorded as failed with the error message.

    Raises:
        ConfigError: unknown suite name
    """
    names = names or list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ConfigError(f"unknown suite(s) {', '.join(unknown)}; available: {', '.join(SUITES)}")
    results = []
    for name in names:
        logger.info(f"Running suite {name}")
        start = time.perf_counter()
        result = SuiteResult(name)
        try:
            result.checks = SUITES[name](seed, threads)
        except (SimDimError, ValueError, ArithmeticError) as e:
            logger.exception(f"Suite {name} raised")
            result.error = f"{type(e).__name__}: {e}"
        result.seconds = time.perf_counter() - start
        status = "passed" if result.passed else "FAILED"
        logger.info(f"Suite {name} {status} in {result.seconds:.1f}s")
        results.append(result)
    return VerifyReport(results)
