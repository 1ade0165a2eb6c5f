import os
from pathlib import Path

import numpy as np
import pytest

from distba.problem import BAProblem

DATA_DIR = Path(os.environ.get("BAL_DATA_DIR", Path(__file__).resolve().parent.parent / "data"))

BAL_FILES = {
    "ladybug-49": "problem-49-7776-pre.txt",
    "trafalgar-21": "problem-21-11315-pre.txt",
    "dubrovnik-16": "problem-16-22106-pre.txt",
    "trafalgar-257": "problem-257-65132-pre.txt",
}


def find_dataset(name: str) -> Path | None:
    """Locate a BAL file under ``BAL_DATA_DIR`` (plain, .bz2 or .gz)."""
    base = BAL_FILES[name]
    for suffix in ("", ".bz2", ".gz"):
        path = DATA_DIR / (base + suffix)
        if path.exists():
            return path
    return None


def random_problem(rng: np.random.Generator, m: int, n: int, obs_per_point: int = 2,
                   noise: float = 0.05) -> BAProblem:
    """Small well-posed problem: cameras looking down -z at points around the origin."""
    cams = np.zeros((m, 9))
    cams[:, 0:3] = rng.normal(0.0, 0.1, size=(m, 3))
    cams[:, 3:5] = rng.normal(0.0, 0.3, size=(m, 2))
    cams[:, 5] = -6.0 + rng.normal(0.0, 0.3, size=m)
    cams[:, 6] = rng.uniform(0.8, 1.5, size=m)
    cams[:, 7] = rng.normal(0.0, 0.01, size=m)
    cams[:, 8] = rng.normal(0.0, 0.001, size=m)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    q = min(obs_per_point, m)
    ci, pi = [], []
    for j in range(n):
        for c in rng.choice(m, size=q, replace=False):
            ci.append(int(c))
            pi.append(j)
    # Make sure every camera is referenced at least once.
    for c in range(m):
        if c not in ci:
            ci.append(c)
            pi.append(int(rng.integers(n)))
    ci, pi = np.array(ci), np.array(pi)
    from distba.problem import project

    pixels = project(cams[ci], pts[pi]) + rng.normal(0.0, noise, size=(len(ci), 2))
    return BAProblem.from_arrays(cams, pts, ci, pi, pixels)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_problem(rng):
    return random_problem(rng, 3, 4, obs_per_point=2)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(b)) if b.size else 0.0, 1e-300)
    return float(np.max(np.abs(a - b)) / scale) if a.size else 0.0


_CRITERIA: dict[int, list[tuple[str, str, str]]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marks = getattr(report, "criterion", None)
    if marks is None:
        return
    detail = dict(report.user_properties).get("detail", "")
    if report.failed and not detail:
        detail = str(report.longrepr).strip().splitlines()[-1][:160]
    _CRITERIA.setdefault(marks, []).append((report.nodeid.split("::")[-1], report.outcome, detail))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = mark.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        runs = _CRITERIA[n]
        ok = all(outcome == "passed" for _, outcome, _ in runs)
        notes = "; ".join(f"{name}: {outcome}{' - ' + d if d else ''}" for name, outcome, d in runs)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  [{notes}]")
