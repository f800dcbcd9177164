import numpy as np
import pytest
import torch

from distill_mil.model import FeatureExtractorSpec, build_model
from distill_mil.types import Bag

MICRO = FeatureExtractorSpec("micro", 1, (6, 6), (2,), (3,), (1,), (5, 4, 4))


@pytest.fixture
def micro_spec():
    return MICRO


@pytest.fixture
def micro_model():
    return build_model(MICRO, attention_dim=3, seed=0, dtype=torch.float64)


def random_bag(rng, k, shape=(1, 6, 6), label=None, with_labels=True):
    x = rng.uniform(0, 1, size=(k, *shape)).astype(np.float32)
    y = rng.integers(0, 2, size=k)
    lab = int(y.any()) if label is None else label
    return Bag(x, lab, f"b{k}", y if with_labels else None)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------------ acceptance summary

CRITERIA: dict = {}
NOTES: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    n, title = mark.args
    status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
    CRITERIA.setdefault(n, (title, []))[1].append(status)


@pytest.fixture
def note(request):
    """Attach a one-line measurement to this test's criterion in the summary."""
    mark = request.node.get_closest_marker("criterion")

    def add(text):
        NOTES.setdefault(mark.args[0], []).append(text)

    return add


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, statuses = CRITERIA[n]
        status = "FAIL" if "FAIL" in statuses else "PASS" if "PASS" in statuses else "SKIP"
        tr.write_line(f"criterion {n}: {status:4}  {title}")
        for text in NOTES.get(n, []):
            tr.write_line(f"              {text}")
