import hashlib
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
CACHE = ROOT / ".bench_cache"


def source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted((ROOT / "src" / "diresa").glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def cached_bench(config_path, tag: str) -> Path:
    """Run ``bench`` for a config once per (config, source) pair and reuse the directory."""
    from diresa.cli import cmd_bench
    from diresa.config import load_config

    cfg = load_config(config_path)
    key = hashlib.sha256((cfg.hash() + source_digest()).encode()).hexdigest()[:16]
    out = CACHE / f"{tag}-{key}"
    done = out / "manifest_bench.json"
    if not done.exists():
        cmd_bench(cfg, out)
    return out


@pytest.fixture(scope="session")
def acceptance_run():
    return cached_bench(ROOT / "configs" / "acceptance.toml", "acceptance")


CRITERIA = {}


def report_criterion(number: int, ok: bool, detail: str):
    """Record one acceptance criterion; printed in the terminal summary."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
