import numpy as np
import pytest

from seagrid.dataset_io import GridSpec, LabeledImage, tile_image
from seagrid.synthetic import make_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth():
    return make_dataset(n_per_class=4, grid=GridSpec(2, 3), patch_size=(8, 8), seed=7)


@pytest.fixture
def labeled_image(rng):
    return LabeledImage(rng.uniform(0, 1, size=(20, 30, 3)), 2, "Rounded/x.png")


@pytest.fixture
def patch(labeled_image):
    return tile_image(labeled_image, GridSpec(2, 3))[0]


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1][len("test_criterion_"):]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if hasattr(report, "wasxfail"):
            status = "FAIL (expected, see reason)" if report.skipped else "PASS (unexpected)"
        else:
            status = "PASS" if report.passed else "FAIL"
        _ACCEPTANCE[name] = status


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {name}: {_ACCEPTANCE[name]}")
