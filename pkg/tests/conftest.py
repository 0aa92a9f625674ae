import os
from pathlib import Path

import hypothesis
import numpy as np
import pytest

from ltrdiff.synthetic import write_fold

hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

np.seterr(over="raise", invalid="raise", divide="raise")

DATA_ROOT = os.environ.get("LTR_DATA_ROOT")


def fold_dir(name: str) -> Path | None:
    """Fold 1 directory of a benchmark under $LTR_DATA_ROOT, if present."""
    if not DATA_ROOT:
        return None
    d = Path(DATA_ROOT) / name / "Fold1"
    return d if all((d / f"{s}.txt").is_file() for s in ("train", "vali", "test")) else None


@pytest.fixture(scope="session")
def toy_fold(tmp_path_factory):
    return write_fold(tmp_path_factory.mktemp("fold"), n_train=40, n_vali=12, n_test=12, seed=3)


# ----------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

_acceptance: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if call.when == "setup" and call.excinfo is not None:
        status = "SKIP" if call.excinfo.errisinstance(pytest.skip.Exception) else "FAIL"
        _acceptance[number] = (status, title)
    elif call.when == "call":
        if call.excinfo is None:
            status = "PASS"
        elif call.excinfo.errisinstance(pytest.skip.Exception):
            status = "SKIP"
        else:
            status = "FAIL"
        prev = _acceptance.get(number)
        # a criterion with several tests passes only if all of them pass
        if prev is None or prev[0] == "PASS":
            _acceptance[number] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        status, title = _acceptance[number]
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {title}")
