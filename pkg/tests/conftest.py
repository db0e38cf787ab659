import numpy as np
import pytest

from pcpoison import _kernels


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    # compile the numba kernels once so timed tests measure work, not JIT
    _kernels.warmup()


@pytest.fixture(scope="session")
def benchmark_data():
    from pcpoison.datasets import generate_benchmark

    return generate_benchmark(seed=7)


def brute_chamfer(a, b):
    """Independent double-loop oracle for the chamfer distance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    total_ab = 0.0
    for p in a:
        best = np.inf
        for q in b:
            d = float(((p - q) ** 2).sum())
            if d < best:
                best = d
        total_ab += best
    total_ba = 0.0
    for q in b:
        best = np.inf
        for p in a:
            d = float(((q - p) ** 2).sum())
            if d < best:
                best = d
        total_ba += best
    return total_ab / len(a) + total_ba / len(b)


def brute_hausdorff(a, b, variant="two-sided-sq"):
    """Independent double-loop oracle for the hausdorff variants."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)

    def directed(src, dst):
        worst = 0.0
        for p in src:
            best = np.inf
            for q in dst:
                d = float(((p - q) ** 2).sum())
                if d < best:
                    best = d
            worst = max(worst, best)
        return worst

    if variant == "two-sided-sq":
        return max(directed(a, b), directed(b, a))
    if variant == "one-sided-sq":
        return directed(b, a)
    if variant == "one-sided":
        return float(np.sqrt(directed(b, a)))
    raise ValueError(variant)
