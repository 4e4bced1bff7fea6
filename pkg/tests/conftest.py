import numpy as np
import pytest

from fusionvote.data import generate_synthetic_dataset
from fusionvote.model import ModelConfig

_criteria: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    names = [m.args[0] for m in getattr(report, "_criterion_marks", [])]
    for name in names:
        detail = "" if report.passed else str(report.longrepr).strip().splitlines()[-1][:160]
        _criteria.append((name, "PASS" if report.passed else "FAIL", detail))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    rep._criterion_marks = list(item.iter_markers("criterion"))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _criteria:
        terminalreporter.write_line(f"{status}  {name}" + (f"  ({detail})" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw) -> ModelConfig:
    """A fusion model small enough for finite differences and fast unit tests."""
    base = dict(num_classes=3, image_size=16, patch_size=4, embed_dim=8, depth=1, heads=2, width_factor=1 / 32,
                cnn_channels=4, stages=2, growth=2, dense_layers=2, aspp_branch_channels=2, aspp_channels=4,
                se_reduction=2, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic_dataset(3, 12, 16, seed=5)
