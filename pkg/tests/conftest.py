import numpy as np
import pytest

from aqcompress.tensor_io import TensorArchive


def random_archive(rng, n_tensors=10, max_dim=5, max_rank=3):
    items = []
    for i in range(n_tensors):
        rank = int(rng.integers(1, max_rank + 1))
        shape = tuple(int(s) for s in rng.integers(1, max_dim + 1, size=rank))
        items.append((f"t{i}", rng.standard_normal(shape).astype(np.float32)))
    return TensorArchive.from_arrays(items)


def central_diff(f, x, h=1e-6):
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b, floor=1e-8):
    """Max abs difference over the larger max magnitude.

    ``floor`` keeps exactly-zero gradients (round-off vs 0) from reading as large
    relative errors; central differences carry ~1e-10 absolute noise anyway.
    """
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(module.RESULTS, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
