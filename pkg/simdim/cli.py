"""
CLI module for simdim.

Provides commands for the exact invariants of a measure, Monte-Carlo
dimension estimation, proper decomposition experiments and the built-in
verification suites.
"""

import sys
import io

# Fix encoding for Windows
if sys.platform == "win32":
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8')
    sys.stderr = io.TextIOWrapper(sys.stderr.buffer, encoding='utf-8')

import functools
import math
from pathlib import Path
from typing import Callable, Optional

import click

from . import __version__
from .config import OUTPUT_DIR, DecompositionConfig, SystemConfig, ensure_directories, load_system_config, resolve_threads
from .errors import BudgetExceeded, SimDimError, SuiteFailure
from .report import fmt, write_manifest, write_report, write_rows_csv, write_summary
from .utils import ensure_dir, get_logger, setup_logging


# =============================================================================
# Shared plumbing
# =============================================================================

def _fail(exc: Exception, stage: Optional[str] = None) -> None:
    """Echo an error and exit with its code (1 for unexpected errors)."""
    where = f" in stage '{stage}'" if stage else ""
    click.echo(f"❌ Error{where}: {exc}", err=True)
    sys.exit(getattr(exc, "exit_code", 1))


def _guard(name: str) -> Callable:
    """Map simdim errors to their exit codes and log anything unexpected."""
    def decorator(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except SimDimError as e:
                _fail(e)
            except Exception as e:
                get_logger().exception(f"{name} failed")
                _fail(e)
        return wrapper
    return decorator


def _run_options(fn):
    """--seed, --threads and --out, shared by every command."""
    fn = click.option("--out", "-o", "out", type=click.Path(path_type=Path), default=None,
                      help="Output directory (default: config output_dir or output/<system>/<command>)")(fn)
    fn = click.option("--threads", "-t", type=int, default=None,
                      help="Worker threads (SIMDIM_THREADS overrides)")(fn)
    fn = click.option("--seed", "-s", type=int, default=None,
                      help="Base seed (default: seed from the config)")(fn)
    return fn


_config_option = click.option(
    "--config", "-c", "config_path",
    type=click.Path(path_type=Path),
    required=True,
    help="System configuration (.toml)",
)


def _out_dir(out: Optional[Path], cfg: Optional[SystemConfig], command: str) -> Path:
    if out is not None:
        return ensure_dir(out)
    if cfg is not None and cfg.output_dir is not None:
        return ensure_dir(cfg.output_dir)
    system = cfg.name if cfg is not None else "builtin"
    return ensure_dir(OUTPUT_DIR / system / command)


def _seed(seed: Optional[int], cfg: Optional[SystemConfig]) -> int:
    if seed is not None:
        return seed
    return cfg.seed if cfg is not None else 0


# =============================================================================
# CLI Group
# =============================================================================

@click.group()
@click.version_option(version=__version__, prog_name="simdim")
@click.option(
    "--debug",
    is_flag=True,
    help="Enable debug logging"
)
@click.pass_context
def main(ctx: click.Context, debug: bool) -> None:
    """
    simdim - dimension diagnostics for self-similar measures.

    Run 'simdim COMMAND --help' for more information on a command.
    """
    ctx.ensure_object(dict)

    level = "DEBUG" if debug else "INFO"
    setup_logging(level=level)

    ensure_directories()


# =============================================================================
# Analyze Command
# =============================================================================

@main.command()
@_config_option
@_run_options
@click.option("--budget", "-b", type=int, default=None, help="Products allowed per generation")
@_guard("Analyze")
def analyze(config_path: Path, seed: Optional[int], threads: Optional[int],
            out: Optional[Path], budget: Optional[int]) -> None:
    """
    Exact invariants: chi, entropy table, Delta_n / M_n, irreducibility.

    With exact = "rational" or "golden" in the config the enumeration runs in
    exact arithmetic and Delta_n, M_n are reported as exact numbers.
    """
    from .entropy_est import predicted_dimension
    from .measure_core import is_contracting_on_average, profile_measure
    from .semigroup_enum import generation_table, separation_from_rows, write_generation_csv

    cfg = load_system_config(config_path)
    seed = _seed(seed, cfg)
    threads = resolve_threads(threads)
    budget = cfg.budget if budget is None else budget
    out_dir = _out_dir(out, cfg, "analyze")
    mu = cfg.to_measure()
    source = cfg.to_exact_measure() or mu

    click.echo(f"🔢 Enumerating supp(mu^n) for {cfg.name}, n <= {cfg.n_max} ({cfg.exact} arithmetic)...")
    partial: Optional[BudgetExceeded] = None
    try:
        rows, _ = generation_table(source, cfg.n_max, cfg.dedup_tol, budget, threads)
    except BudgetExceeded as e:
        partial = e
        rows = list(e.partial)
        click.echo(f"⚠️  Budget exceeded after n = {e.completed_n}; writing partial results", err=True)

    rates = [row.entropy / row.n for row in rows]
    profile = profile_measure(mu, rates, seed=seed)
    separation = separation_from_rows(rows, cfg.eps) if rows else None
    predicted = None
    if is_contracting_on_average(mu) and rates:
        predicted = predicted_dimension(profile)

    payload = {
        "system": cfg.name,
        "profile": profile.to_dict(),
        "contracting_on_average": is_contracting_on_average(mu),
        "generations": [row.to_dict() for row in rows],
        "separation": separation.to_dict() if separation else None,
        "predicted_dimension": predicted,
        "budget": budget,
        "complete": partial is None,
        "completed_n": partial.completed_n if partial else len(rows),
    }
    files = [
        write_report(out_dir, "analyze", payload),
        write_generation_csv(rows, out_dir / "generations.csv"),
    ]
    verdict = "n/a"
    if separation is not None:
        verdict = "exponential" if separation.condition_exponential else (
            "weak" if separation.condition_weak else "fails")
    files.append(write_summary(out_dir, f"Analysis: {cfg.name}", cfg, seed, [
        ("Invariants", [
            f"chi = {fmt(profile.lyapunov, 12)}",
            f"rho range = [{fmt(profile.rho_range[0])}, {fmt(profile.rho_range[1])}]",
            f"h_hat = {fmt(profile.h_hat, 12)} (min over n <= {len(rows)})",
            f"irreducible: {profile.irreducible.verdict.value}",
            f"common fixed point: {'yes' if profile.fixed_point is not None else 'no'}",
        ]),
        ("Separation", [
            f"n = {row.n}: |supp| = {row.support_size}, Delta = {row.delta_exact or fmt(row.delta_n)}, "
            f"M = {row.m_exact or fmt(row.m_n)}" for row in rows
        ] + [f"verdict over computed range: {verdict}"]),
        ("Prediction", [f"min(d, h/|chi|) = {fmt(predicted)}"]),
    ]))
    write_manifest(out_dir, "analyze", cfg, seed, files)

    click.echo(f"   chi = {profile.lyapunov:.12g}, h_hat = {fmt(profile.h_hat, 12)}")
    click.echo(f"   predicted dimension: {fmt(predicted)}")
    if partial is not None:
        _fail(partial)
    click.echo(f"✅ Wrote {out_dir}")


# =============================================================================
# Dimension Command
# =============================================================================

@main.command()
@_config_option
@_run_options
@_guard("Dimension")
def dimension(config_path: Path, seed: Optional[int], threads: Optional[int], out: Optional[Path]) -> None:
    """
    Sample the self-similar measure and estimate its dimension.

    The slope of the smoothed entropy against log(1/r) is compared with
    min{d, h/|chi|}, using the entropy table from [enumeration].
    """
    import numpy as np

    from .entropy_est import (
        SmoothingSpec, compare_to_prediction, estimate_dimension, local_dimension,
        predicted_dimension, write_scale_ladder,
    )
    from .measure_core import profile_measure
    from .semigroup_enum import entropy_rate_bounds
    from .utils import rng_stream
    from .walk_sampler import choose_kappa, sample_attractor

    cfg = load_system_config(config_path)
    seed = _seed(seed, cfg)
    threads = resolve_threads(threads)
    out_dir = _out_dir(out, cfg, "dimension")
    mu = cfg.to_measure()

    r_min = float(cfg.ladder.get("r_min", 2.0 ** -10))
    r_max = float(cfg.ladder.get("r_max", 2.0 ** -3))
    n_scales = cfg.ladder.get("n_scales")
    spec = SmoothingSpec(str(cfg.ladder.get("kind", "cube")), 1.0, float(cfg.ladder.get("a", 1.0)))
    count = int(cfg.sampling.get("count", 200_000))
    depth = cfg.sampling.get("depth")
    kappa = cfg.sampling.get("kappa")
    if depth is None and kappa is None:
        kappa = choose_kappa(mu, r_min / 100.0, seed, threads)

    click.echo(f"🎲 Sampling {count} points of {cfg.name}...")
    cloud = sample_attractor(mu, count, seed, depth=depth, kappa=kappa, threads=threads)

    click.echo(f"📏 Estimating dimension over r in [{r_min:g}, {r_max:g}]...")
    report = estimate_dimension(cloud.points, r_min, r_max, n_scales=n_scales, seed=seed,
                                bias_bound=cloud.bias_bound, threads=threads, spec=spec)

    source = cfg.to_exact_measure() or mu
    n_entropy = int(cfg.sampling.get("entropy_n", min(cfg.n_max, 12)))
    try:
        rates = entropy_rate_bounds(source, n_entropy, cfg.dedup_tol, cfg.budget, threads)
    except BudgetExceeded as e:
        rates = list(e.partial)
        report.warnings.append(f"entropy table stopped at n = {e.completed_n} (budget)")
    profile = profile_measure(mu, rates, seed=seed)
    if rates:
        compare_to_prediction(report, predicted_dimension(profile))

    rng = rng_stream(seed, 7)
    centres = rng.choice(cloud.count, size=min(200, cloud.count), replace=False)
    radii = [r for r in report.scales if 2 * r < 1]
    local = local_dimension(cloud.points, np.sort(centres), radii)

    files = [
        write_scale_ladder(report, out_dir / "scale_ladder.csv", out_dir / "scale_ladder.dat"),
        out_dir / "scale_ladder.dat",
        write_rows_csv(out_dir / "local_dimension.csv", ["r", "mean", "spread"],
                       zip(map(float, local.radii), local.mean, local.spread)),
    ]
    files.append(write_report(out_dir, "dimension", {
        "system": cfg.name,
        "sampling": cloud.header(),
        "estimate": report.to_dict(),
        "profile": profile.to_dict(),
        "local_dimension": local.to_dict(),
    }))
    files.append(write_summary(out_dir, f"Dimension: {cfg.name}", cfg, seed, [
        ("Estimate", [
            f"slope = {fmt(report.slope)} +- {fmt(report.slope_stderr, 3)}",
            f"predicted min(d, h/|chi|) = {fmt(report.predicted)}",
            f"verdict: {report.verdict}",
        ]),
        ("Sampling", [f"{cloud.count} points, stop {cloud.stop}", f"bias bound {fmt(cloud.bias_bound)}"]),
        ("Warnings", list(report.warnings)),
    ]))
    write_manifest(out_dir, "dimension", cfg, seed, files)

    for w in report.warnings:
        click.echo(f"⚠️  {w}", err=True)
    click.echo(f"   slope = {report.slope:.4f} (predicted {fmt(report.predicted, 4)}): {report.verdict}")
    click.echo(f"✅ Wrote {out_dir}")


# =============================================================================
# Decompose Command
# =============================================================================

class _Stage:
    """Tags errors with the pipeline stage they came from."""

    def __init__(self):
        self.name = "setup"

    def __call__(self, name: str) -> None:
        self.name = name
        get_logger().debug(f"decompose stage: {name}")


@main.command()
@_config_option
@_run_options
def decompose(config_path: Path, seed: Optional[int], threads: Optional[int], out: Optional[Path]) -> None:
    """
    Build proper decompositions across seeds and test the Gaussian step.

    Stages: build and validate decompositions on sampled walks, the Taylor
    scaling study, the trace lower bound at scale r, and the per-cell
    Gaussian check of the sampled measure.
    """
    stage = _Stage()
    try:
        _decompose(config_path, seed, threads, out, stage)
    except SimDimError as e:
        _fail(e, stage.name)
    except Exception as e:
        get_logger().exception(f"Decompose failed in stage {stage.name}")
        _fail(e, stage.name)


def _decompose(config_path: Path, seed: Optional[int], threads: Optional[int],
               out: Optional[Path], stage: _Stage) -> None:
    from .decomp_engine import (
        BlockPlan, build_decomposition, dump_decomposition, taylor_scaling_study,
        trace_at_scale_lower, validate_decomposition, variance_sum_achieved,
    )
    from .prob_tools import gaussian_dimension_check
    from .walk_sampler import sample_attractor, sample_walk

    logger = get_logger()
    stage("config")
    cfg = load_system_config(config_path)
    seed = _seed(seed, cfg)
    threads = resolve_threads(threads)
    out_dir = _out_dir(out, cfg, "decompose")
    mu = cfg.to_measure()
    opts = cfg.decomposition

    K = int(opts.get("K", 4))
    A = float(opts.get("A", 2.0))
    r = float(opts.get("r", 0.5))
    plan = BlockPlan(int(opts.get("n_blocks", 3)), int(opts.get("f_len", K)), int(opts.get("h_len", K)))
    path_len = int(opts.get("path_len", 10 * plan.min_steps))
    seeds = int(opts.get("seeds", 5))
    extra = {k: opts[k] for k in ("grid_step", "resamples", "bootstrap") if k in opts}

    stage("build")
    click.echo(f"🧱 Building {seeds} decompositions (K={K}, {plan.n_blocks} blocks, r={r:g})...")
    runs = []
    for s in range(seeds):
        path = sample_walk(mu, path_len, seed + s)
        pd = build_decomposition(path, K=K, A=A, r=r, block_plan=plan, seed=seed + s, **extra)
        stage("validate")
        validation = validate_decomposition(pd, path)
        stage("build")
        runs.append((pd, validation))
        if not validation.passed:
            click.echo(f"   seed {seed + s}: violated {', '.join(validation.violated())}", err=True)
    files = [dump_decomposition(runs[0][0], out_dir / "decomposition.jsonl")] if runs else []

    stage("taylor")
    click.echo("📐 Taylor scaling study...")
    taylor = taylor_scaling_study(plan.n_blocks, mu.d, trials=int(opts.get("taylor_trials", 200)),
                                  A=A, seed=seed, threads=threads)

    stage("trace")
    kappa = float(opts.get("kappa", 1e-3))
    trace = trace_at_scale_lower(mu, kappa, r, seed=seed, threads=threads,
                                 **{k: opts[k] for k in ("grid_step",) if k in opts})

    stage("gaussian")
    click.echo("🔔 Gaussian check of the sampled measure...")
    cloud = sample_attractor(mu, int(opts.get("samples", 50_000)), seed,
                             kappa=float(opts.get("sample_kappa", 1e-6)), threads=threads)
    g_r = float(opts.get("gaussian_r", 0.05))
    gaussian = gaussian_dimension_check(cloud.points, C=float(opts.get("C", 2.0)), r=g_r,
                                        cell_side=opts.get("cell_side"), seed=seed, threads=threads)

    stage("report")
    sums = [variance_sum_achieved(pd) for pd, _ in runs]
    passed = sum(v.passed for _, v in runs)
    degenerate = all(m <= DecompositionConfig.DEGENERATE_TOL for pd, _ in runs for m in pd.m)
    if degenerate:
        logger.warning("Every floor m_i is zero: the decomposition carries no variance")
        click.echo("⚠️  Degenerate system: all m_i = 0", err=True)

    columns = ["seed", "total", "kappa", "realized_kappa", "passed"]
    files.append(write_rows_csv(out_dir / "variance_sums.csv", columns, [
        (seed + i, s.total, s.kappa, s.realized_kappa, v.passed) for i, (s, (_, v)) in enumerate(zip(sums, runs))
    ]))
    files.append(write_rows_csv(out_dir / "gaussian_frontier.csv", ["C", "mass_fraction"], gaussian.frontier))
    files.append(write_report(out_dir, "decompose", {
        "system": cfg.name,
        "block_plan": plan.to_dict(),
        "decompositions": [
            {"seed": seed + i, "variance_sum": s.to_dict(), "validation": v.to_dict()}
            for i, (s, (_, v)) in enumerate(zip(sums, runs))
        ],
        "degenerate": degenerate,
        "taylor": taylor.to_dict(),
        "trace": trace.to_dict(),
        "gaussian": gaussian.to_dict(),
    }))
    mean_sum = math.fsum(s.total for s in sums) / len(sums) if sums else 0.0
    files.append(write_summary(out_dir, f"Decomposition: {cfg.name}", cfg, seed, [
        ("Decompositions", [
            f"{passed} of {len(runs)} validate (A1-A9 and reconstruction)",
            f"mean variance sum {fmt(mean_sum)}",
        ] + (["degenerate: every m_i = 0"] if degenerate else [])),
        ("Taylor", [f"r = {fmt(rr)}: fitted C = {fmt(c, 4)}" for rr, c in zip(taylor.radii, taylor.fitted_C)]
         + [f"stable: {taylor.stable}"]),
        ("Trace", [f"tr(q; {fmt(r)}) >= {fmt(trace.t)} at kappa {fmt(kappa)}",
                   f"zeroed mass {fmt(trace.zeroed_mass, 3)}"]),
        ("Gaussian", [f"mass fraction {fmt(gaussian.mass_fraction, 3)} at C = {fmt(gaussian.C)}",
                      f"H(r|2r) = {fmt(gaussian.entropy_gap)} vs d log 2 = {fmt(gaussian.full_gap)}",
                      f"verdict: {gaussian.verdict}"]),
    ]))
    write_manifest(out_dir, "decompose", cfg, seed, files)

    click.echo(f"   {passed}/{len(runs)} decompositions validate, mean variance sum {mean_sum:.6g}")
    click.echo(f"✅ Wrote {out_dir}")


# =============================================================================
# Verify Command
# =============================================================================

@main.command()
@click.option("--config", "-c", "config_path", type=click.Path(path_type=Path), default=None,
              help="Optional system configuration, recorded in the manifest")
@_run_options
@click.option("--filter", "-f", "filters", multiple=True,
              help="Run only this suite (repeatable)")
@_guard("Verify")
def verify(config_path: Optional[Path], seed: Optional[int], threads: Optional[int],
           out: Optional[Path], filters: tuple) -> None:
    """
    Run the invariant suites on the built-in systems.

    Writes verify.json with per-check results; exits 4 if any suite fails.
    """
    from .verify import run_suites

    cfg = load_system_config(config_path) if config_path else None
    seed = _seed(seed, cfg)
    threads = resolve_threads(threads)
    out_dir = _out_dir(out, cfg, "verify")

    click.echo(f"🧪 Running {', '.join(filters) if filters else 'all'} suite(s)...")
    report = run_suites(list(filters) or None, seed=seed, threads=threads)
    for suite in report.suites:
        mark = "✓" if suite.passed else "✗"
        click.echo(f"   {mark} {suite.name}")
        for check in suite.checks:
            if not check.passed:
                click.echo(f"      failed: {check.name} ({check.detail})", err=True)
        if suite.error:
            click.echo(f"      error: {suite.error}", err=True)

    files = [write_report(out_dir, "verify", report.to_dict())]
    files.append(write_summary(out_dir, "Verification", cfg, seed, [
        (suite.name, [f"{'pass' if c.passed else 'FAIL'}: {c.name} {c.detail}".rstrip() for c in suite.checks]
         + ([f"error: {suite.error}"] if suite.error else []))
        for suite in report.suites
    ]))
    write_manifest(out_dir, "verify", cfg, seed, files)

    if not report.passed:
        raise SuiteFailure(f"failed suite(s): {', '.join(report.failed())}")
    click.echo("✅ All suites passed")


if __name__ == "__main__":
    main()
