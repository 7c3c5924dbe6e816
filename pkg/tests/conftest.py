import numpy as np
import pytest

from perceiver import tensor as T
from perceiver.model import PerceiverConfig


@pytest.fixture(autouse=True)
def _reset_engine():
    T.set_default_dtype(np.float32)
    T.set_deterministic(False)
    yield
    T.set_default_dtype(np.float32)
    T.set_deterministic(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides) -> PerceiverConfig:
    base = dict(input_channels=6, num_cross_attends=2, self_attends_per_block=1, blocks_per_cross=1,
                latent_index=4, latent_channels=8, latent_heads=2, num_classes=3, dtype="float64")
    base.update(overrides)
    return PerceiverConfig(**base)


def param(data, dtype=np.float64):
    return T.Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion, printed at the end of the run."""
    number = request.node.get_closest_marker("criterion").args[0]
    notes: list[str] = []
    yield notes
    failed = getattr(request.node, "rep_call", None) is None or request.node.rep_call.failed
    line = f"criterion {number:>2}: {'FAIL' if failed else 'PASS'}  {request.node.name}"
    if notes:
        line += "  [" + "; ".join(notes) + "]"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call":
        item.rep_call = report


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
