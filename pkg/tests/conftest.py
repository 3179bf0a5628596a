import numpy as np
import pytest


def central_difference(f, arrays, step=1e-5, points=3):
    """Finite differences of scalar ``f()`` w.r.t. each array, perturbed in place.

    ``points=5`` uses the fourth-order stencil, which tolerates a larger step
    and so less roundoff when ``f`` is large.
    """
    offsets = {3: ((1, 0.5), (-1, -0.5)),
               5: ((-2, 1 / 12), (-1, -8 / 12), (1, 8 / 12), (2, -1 / 12))}[points]
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            total = 0.0
            for shift, weight in offsets:
                arr[idx] = orig + shift * step
                total += weight * f()
            arr[idx] = orig
            g[idx] = total / step
        grads.append(g)
    return grads


def max_rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
