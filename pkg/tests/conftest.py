import numpy as np
import pytest

from dcffnet.config import TOY
from dcffnet.kernels import get_backend
from dcffnet.model import init_params


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    return get_backend(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_params64():
    return init_params(TOY, np.random.default_rng(0), np.float64)


@pytest.fixture(scope="session")
def trained_models():
    """Baseline and CF-double trackers after the closed-loop training, with training seconds."""
    from closed_loop import train_tracker

    out = {}
    for ablation in ("baseline", "cf-double"):
        out[ablation] = train_tracker(ablation)
    return out


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
