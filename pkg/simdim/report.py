"""
Report writers for simdim.

Every command writes its results as JSON, tables as CSV, a Markdown summary
and a manifest with the config hash, seed and package versions. Nothing time
dependent goes into these files, so identical inputs give identical bytes.
"""

import csv
import platform
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

from . import __version__
from .config import SystemConfig
from .utils import ensure_dir, get_logger, write_json

logger = get_logger()

_VERSIONED = ("numpy", "scipy", "scikit-learn", "POT", "click")


def package_versions() -> dict:
    """Installed versions of simdim and its numerical stack."""
    out = {"simdim": __version__, "python": platform.python_version()}
    for name in _VERSIONED:
        try:
            out[name] = version(name)
        except PackageNotFoundError:
            out[name] = None
    return out


def write_manifest(
    out_dir: Path,
    command: str,
    cfg: Optional[SystemConfig],
    seed: int,
    files: Sequence[Path] = (),
) -> Path:
    """
    Write manifest.json next to a command's outputs.

    Args:
        out_dir: Output directory of the command
        command: Command name
        cfg: System configuration (None for config-free runs)
        seed: Effective seed
        files: Output files the command produced

    Returns:
        Path to the manifest
    """
    manifest = {
        "command": command,
        "config": str(cfg.source) if cfg and cfg.source else None,
        "config_sha256": cfg.sha256 if cfg else None,
        "system": cfg.name if cfg else None,
        "seed": seed,
        "versions": package_versions(),
        "files": sorted(Path(f).name for f in files),
    }
    path = write_json(out_dir / "manifest.json", manifest)
    logger.info(f"Wrote manifest: {path}")
    return path


def write_report(out_dir: Path, name: str, payload: Any) -> Path:
    """Write <name>.json with sorted keys."""
    path = write_json(out_dir / f"{name}.json", payload)
    logger.info(f"Wrote report: {path}")
    return path


def write_rows_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """CSV with floats in repr form (round-trips exactly)."""
    ensure_dir(path.parent)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    return path


def generate_markdown(title: str, cfg: Optional[SystemConfig], seed: int, sections: list[tuple[str, list[str]]]) -> str:
    """
    Markdown summary of one command run.

    Args:
        title: Page title
        cfg: System configuration
        seed: Effective seed
        sections: (heading, bullet lines) pairs

    Returns:
        Markdown content string
    """
    lines = [f"# {title}", ""]
    if cfg is not None:
        lines.append(f"**System:** {cfg.name} | **Dimension:** {cfg.dimension} | **Atoms:** {len(cfg.atoms)}")
        if cfg.sha256:
            lines.append(f"**Config SHA-256:** `{cfg.sha256[:16]}`")
    lines.extend([f"**Seed:** {seed}", ""])

    for heading, bullets in sections:
        lines.append(f"## {heading}")
        lines.append("")
        if not bullets:
            lines.append("*Nothing to report.*")
        for b in bullets:
            lines.append(f"- {b}")
        lines.append("")

    lines.extend(["---", "", f"Generated by simdim {__version__}."])
    return "\n".join(lines) + "\n"


def write_summary(out_dir: Path, title: str, cfg: Optional[SystemConfig], seed: int,
                  sections: list[tuple[str, list[str]]]) -> Path:
    """Write summary.md."""
    path = ensure_dir(out_dir) / "summary.md"
    with open(path, "w", encoding="utf-8") as f:
        f.write(generate_markdown(title, cfg, seed, sections))
    logger.info(f"Wrote summary: {path}")
    return path


def fmt(value: Any, digits: int = 6) -> str:
    """Compact number formatting for summaries."""
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.{digits}g}"
    return str(value)
