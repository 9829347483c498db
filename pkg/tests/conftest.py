import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from deepnose.model import DeepNoseConfig, build_model  # noqa: E402
from deepnose.rotation_grid import make_grid  # noqa: E402

DATA = Path(__file__).parent / "data"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_grid():
    """8 directions x 5 spins = 40 orientations."""
    return make_grid(8, 5, seed=0, iters=300)


@pytest.fixture(scope="session")
def tiny_grid():
    return make_grid(2, 2, seed=0, iters=50)


@pytest.fixture(scope="session")
def small_model():
    cfg = DeepNoseConfig(outputs=10, n_dirs=8, n_axial=5)
    return build_model(cfg, seed=3)


# -- acceptance reporting ------------------------------------------------------
# Tests marked ``criterion(n, title)`` get one PASS/FAIL/SKIP line in the
# terminal summary; ``measured`` attaches the numbers behind the verdict.

_ACCEPTANCE: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion check")


@pytest.fixture
def measured(request):
    notes = _ACCEPTANCE.setdefault(request.node.nodeid, {}).setdefault("notes", [])
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    entry = _ACCEPTANCE.setdefault(item.nodeid, {})
    entry["n"], entry["title"] = mark.args
    entry["name"] = item.name
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        entry["status"] = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        if rep.skipped and isinstance(rep.longrepr, tuple):
            entry.setdefault("notes", []).append(rep.longrepr[2])


def pytest_terminal_summary(terminalreporter):
    rows = [e for e in _ACCEPTANCE.values() if "status" in e]
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for e in sorted(rows, key=lambda e: (e["n"], e["name"])):
        line = f"criterion {e['n']:>2} {e['status']}: {e['title']} [{e['name']}]"
        if e.get("notes"):
            line += "  " + "; ".join(e["notes"])
        terminalreporter.write_line(line)
