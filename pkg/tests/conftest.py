import numpy as np
import pytest

from i2vtoy.tensor import Tensor


def numeric_grad(f, arr: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place)."""
    g = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))))


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


def f64(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def rel_err_norm(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Relative error of a whole gradient tensor: ``|a - n| / max(|a|, |n|, floor)`` in the 2-norm.

    The floor covers gradients that vanish analytically (e.g. a bias followed by a
    per-channel norm), where finite differences only return rounding noise.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
