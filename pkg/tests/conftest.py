import numpy as np
import pytest

# One line per acceptance gate, printed as a summary section at the end
# of the run (see tests/test_acceptance.py).
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def central_diff(fn, x, eps=1e-5):
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = fn(x)
        flat[i] = old - eps
        lo = fn(x)
        flat[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return grad


def assert_grads_close(analytic, fd, rtol=1e-3, floor=1e-7, what=""):
    """Elementwise |a - f| <= rtol * max(|a|, |f|) + floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    tol = rtol * np.maximum(np.abs(analytic), np.abs(fd)) + floor
    bad = np.abs(analytic - fd) > tol
    assert not np.any(bad), (
        f"{what}: {bad.sum()} of {bad.size} gradient entries disagree; "
        f"worst analytic={analytic[bad].ravel()[:3]} fd={fd[bad].ravel()[:3]}"
    )
