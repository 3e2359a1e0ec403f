"""
Report writer tests
"""

import io
import json
import sys
from pathlib import Path

# Fix encoding for Windows
if sys.platform == "win32":
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8')

from simdim import __version__
from simdim.config import CONFIG_DIR, load_system_config
from simdim.report import fmt, generate_markdown, package_versions, write_manifest, write_report, write_rows_csv


def test_manifest_is_deterministic(tmp_path):
    """Two manifests for the same run are byte-identical and carry the config hash"""
    cfg = load_system_config(CONFIG_DIR / "cantor.toml")
    a = write_manifest(tmp_path / "a", "analyze", cfg, 7, [Path("x/b.csv"), Path("a.json")])
    b = write_manifest(tmp_path / "b", "analyze", cfg, 7, [Path("a.json"), Path("x/b.csv")])
    assert a.read_bytes() == b.read_bytes()

    manifest = json.loads(a.read_text(encoding="utf-8"))
    assert manifest["config_sha256"] == cfg.sha256
    assert manifest["seed"] == 7
    assert manifest["files"] == ["a.json", "b.csv"]
    assert manifest["versions"]["simdim"] == __version__
    assert set(package_versions()) >= {"numpy", "scipy", "POT", "click"}

    print("✓ Manifest passed")


def test_rows_csv_round_trips_floats(tmp_path):
    """Floats are written in repr form, None as empty"""
    path = write_rows_csv(tmp_path / "t.csv", ["a", "b"], [(0.1, None), (1, 1 / 3)])
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines == ["a,b", "0.1,", f"1,{1 / 3!r}"]
    assert float(lines[2].split(",")[1]) == 1 / 3

    print("✓ CSV passed")


def test_report_and_markdown(tmp_path):
    """JSON keys are sorted; summaries list every section"""
    path = write_report(tmp_path, "demo", {"b": 1, "a": [1.5, None]})
    assert path.read_text(encoding="utf-8").index('"a"') < path.read_text(encoding="utf-8").index('"b"')

    md = generate_markdown("Title", None, 3, [("One", ["x"]), ("Empty", [])])
    assert md.startswith("# Title")
    assert "## One" in md and "- x" in md and "*Nothing to report.*" in md
    assert fmt(None) == "n/a" and fmt(0.1234567891, 3) == "0.123" and fmt(5) == "5"

    print("✓ Report and markdown passed")


if __name__ == "__main__":
    import tempfile

    print("Running report tests...\n")
    with tempfile.TemporaryDirectory() as tmp:
        test_manifest_is_deterministic(Path(tmp))
        test_rows_csv_round_trips_floats(Path(tmp))
        test_report_and_markdown(Path(tmp))
    print("\n✅ All report tests passed!")
