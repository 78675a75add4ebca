import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from gsocc import pipeline
from gsocc.gaussians import GaussianSet
from gsocc.grid import GridSpec

ROOT = Path(__file__).resolve().parents[1]


def random_gaussians(rng, n, n_classes, lo=0.0, hi=4.0, scale=(0.2, 1.0), positive=False):
    logits = rng.uniform(0, 2, (n, n_classes)) if positive else rng.normal(size=(n, n_classes))
    return GaussianSet(rng.uniform(lo, hi, (n, 3)), rng.normal(size=(n, 4)),
                       rng.uniform(*scale, (n, 3)), rng.uniform(0.05, 0.95, n), logits)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_grid():
    return GridSpec((0.0, 0.0, 0.0), (0.5, 0.5, 0.5), (8, 8, 8))


@pytest.fixture(scope="session")
def demo_scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo_scene")
    pipeline.cmd_synth(ROOT / "configs" / "demo_scene.cfg", out)
    return out


@pytest.fixture(scope="session")
def demo_fit(demo_scene_dir, tmp_path_factory):
    """One single-threaded 500-iteration fit of the demo scene, shared across modules."""
    out = tmp_path_factory.mktemp("demo_fit")
    cfg, _ = pipeline.fit_config_from_file(ROOT / "configs" / "demo_fit.cfg")
    with threadpool_limits(limits=1):
        start = time.perf_counter()
        result = pipeline.cmd_fit(demo_scene_dir, cfg, out)
        elapsed = time.perf_counter() - start
    return out, result, elapsed


def windows_non_increasing(losses, width=50):
    """Means of consecutive ``width``-iteration blocks never increase."""
    means = [np.mean(losses[i:i + width]) for i in range(0, len(losses) - width + 1, width)]
    return all(b <= a for a, b in zip(means, means[1:]))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def report(label: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  criterion {label}: {detail}")
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
