import numpy as np
import pytest

from hiclass_mil.gradcheck import TINY_DIMS, tiny_problem
from hiclass_mil.taxonomy import balanced, gastric


@pytest.fixture(scope="session")
def gastric_tax():
    return gastric()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    """(config, taxonomy, params, x, coarse, fine) on the 8/8/4/4/4 problem."""
    return tiny_problem(TINY_DIMS, seed=3)


@pytest.fixture(scope="session")
def one_coarse_tax():
    return balanced(14, 1)


@pytest.fixture(scope="session")
def small_split():
    """Bags of a quick 2/4 hierarchy, D=8, keyed by split."""
    from hiclass_mil.datagen import DatasetSpec, iter_bags

    spec = DatasetSpec(taxonomy=balanced(4, 2), dim=8, patches_min=2, patches_max=6,
                       slides_per_fine_class={"train": 3, "val": 2, "test": 2}, master_seed=5)
    out = {"train": [], "val": [], "test": []}
    for split, bag in iter_bags(spec):
        out[split].append(bag)
    return spec.taxonomy, out


@pytest.fixture(scope="session")
def small_model():
    from hiclass_mil.model import ModelConfig

    return ModelConfig(dim=8, n_coarse=2, n_fine=4, hidden=8, split=4, proj=4, attn=4)


_criteria: dict[int, list] = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "_acceptance", None)
    if marker is None:
        return
    number, title = marker
    entry = _criteria.setdefault(number, [title, True, False])
    if report.failed:
        entry[1] = False
    if report.when == "call":
        entry[2] = True


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        outcome.get_result()._acceptance = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok, ran = _criteria[number]
        status = "PASS" if ok and ran else ("FAIL" if not ok else "NOT RUN")
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
