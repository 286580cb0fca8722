import numpy as np
import pytest

from layerbudget.autodiff import SeededRng
from layerbudget.net import AdaptiveNet, BackboneSpec


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture
def small_spec():
    return BackboneSpec(layers=(3, 4), width=6, hidden=5, grid=(4, 4), embed_dim=4, dz=6, skip_hidden=5,
                        prune_hidden=4)


@pytest.fixture
def small_net(small_spec):
    return AdaptiveNet.create(small_spec, SeededRng(5))


@pytest.fixture
def small_patches(small_spec):
    return SeededRng(6).normal((3, small_spec.M, small_spec.n_tokens, 9))


def pytest_configure(config):
    np.set_printoptions(precision=6, suppress=True)


ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    """Store one acceptance line; printed in the terminal summary."""
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
