"""Nearest-neighbour distance kernels (Chamfer / Hausdorff and gradients).

These scans are the hot inner loops of every regularized attack: O(n*n')
point pairs per sample per optimization step.  Two implementations are
provided, a numba @njit one and a pure-numpy one, selected at import time
by the PCPOISON_BACKEND environment variable:

    PCPOISON_BACKEND=auto   use numba when importable (default)
    PCPOISON_BACKEND=numba  require numba
    PCPOISON_BACKEND=numpy  force the vectorized numpy fallback

Both backends break nearest-neighbour ties toward the lowest index, so a
run is bit-reproducible within a backend.  Floating-point sums are taken
in different orders by the two backends, so cross-backend agreement is
~1e-12 relative, not bitwise.  See benchmarks/kernel_bench.py for a
side-by-side timing.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "backend",
    "chamfer_pair",
    "directed_stats",
    "chamfer_pair_grad",
    "chamfer_batch",
    "chamfer_batch_grad",
    "hausdorff_batch",
    "min_pairwise_dist",
]

_ENV_VALUE = os.environ.get("PCPOISON_BACKEND", "auto").strip().lower()
if _ENV_VALUE not in ("auto", "numba", "numpy"):
    raise RuntimeError(
        f"PCPOISON_BACKEND must be one of auto|numba|numpy, got {_ENV_VALUE!r}"
    )


# ---------------------------------------------------------------------------
# numpy implementations (always defined; also serve as the reference oracle
# target for the numba path)
# ---------------------------------------------------------------------------

def _sqdists(a, b):
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def directed_stats_np(a, b):
    """Sum and max over points of ``a`` of the squared distance to the
    nearest point of ``b``."""
    mins = _sqdists(a, b).min(axis=1)
    return float(mins.sum()), float(mins.max())


def chamfer_pair_np(a, b):
    sq = _sqdists(a, b)
    return float(sq.min(axis=1).mean() + sq.min(axis=0).mean())


def chamfer_pair_grad_np(a, b):
    """Chamfer value plus its gradient with respect to ``a``."""
    n = a.shape[0]
    m = b.shape[0]
    sq = _sqdists(a, b)
    j2k = sq.argmin(axis=1)
    k2j = sq.argmin(axis=0)
    value = float(sq[np.arange(n), j2k].mean() + sq[k2j, np.arange(m)].mean())
    grad = (2.0 / n) * (a - b[j2k])
    np.add.at(grad, k2j, (2.0 / m) * (a[k2j] - b))
    return value, grad


def min_pairwise_dist_np(a):
    sq = _sqdists(a, a)
    np.fill_diagonal(sq, np.inf)
    return float(np.sqrt(sq.min()))


def _batch_loop(fn):
    def run(A, B, *args):
        out = [fn(A[i], B[i], *args) for i in range(A.shape[0])]
        return out

    return run


def chamfer_batch_np(A, B):
    return np.array([chamfer_pair_np(A[i], B[i]) for i in range(A.shape[0])])


def chamfer_batch_grad_np(A, B):
    vals = np.empty(A.shape[0])
    grads = np.empty_like(A)
    for i in range(A.shape[0]):
        vals[i], grads[i] = chamfer_pair_grad_np(A[i], B[i])
    return vals, grads


def hausdorff_batch_np(A, B, two_sided):
    out = np.empty(A.shape[0])
    for i in range(A.shape[0]):
        sq = _sqdists(A[i], B[i])
        d_ba = float(sq.min(axis=0).max())
        if two_sided:
            out[i] = max(float(sq.min(axis=1).max()), d_ba)
        else:
            out[i] = d_ba
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

_numba_err = None
if _ENV_VALUE != "numpy":
    try:
        from numba import njit
    except ImportError as exc:  # pragma: no cover - env dependent
        njit = None
        _numba_err = exc
else:
    njit = None

if njit is not None:

    @njit(cache=True)
    def _directed_stats_nb(a, b):
        n = a.shape[0]
        m = b.shape[0]
        k = a.shape[1]
        total = 0.0
        worst = 0.0
        for j in range(n):
            best = np.inf
            for l in range(m):
                d = 0.0
                for c in range(k):
                    t = a[j, c] - b[l, c]
                    d += t * t
                if d < best:
                    best = d
            total += best
            if best > worst:
                worst = best
        return total, worst

    @njit(cache=True)
    def _chamfer_pair_nb(a, b):
        sa, _ = _directed_stats_nb(a, b)
        sb, _ = _directed_stats_nb(b, a)
        return sa / a.shape[0] + sb / b.shape[0]

    @njit(cache=True)
    def _chamfer_pair_grad_nb(a, b, grad):
        n = a.shape[0]
        m = b.shape[0]
        k = a.shape[1]
        value = 0.0
        for j in range(n):
            best = np.inf
            bi = 0
            for l in range(m):
                d = 0.0
                for c in range(k):
                    t = a[j, c] - b[l, c]
                    d += t * t
                if d < best:
                    best = d
                    bi = l
            value += best / n
            for c in range(k):
                grad[j, c] += (2.0 / n) * (a[j, c] - b[bi, c])
        for l in range(m):
            best = np.inf
            bj = 0
            for j in range(n):
                d = 0.0
                for c in range(k):
                    t = b[l, c] - a[j, c]
                    d += t * t
                if d < best:
                    best = d
                    bj = j
            value += best / m
            for c in range(k):
                grad[bj, c] += (2.0 / m) * (a[bj, c] - b[l, c])
        return value

    @njit(cache=True)
    def _chamfer_batch_nb(A, B):
        out = np.empty(A.shape[0])
        for i in range(A.shape[0]):
            out[i] = _chamfer_pair_nb(A[i], B[i])
        return out

    @njit(cache=True)
    def _chamfer_batch_grad_nb(A, B):
        vals = np.empty(A.shape[0])
        grads = np.zeros_like(A)
        for i in range(A.shape[0]):
            vals[i] = _chamfer_pair_grad_nb(A[i], B[i], grads[i])
        return vals, grads

    @njit(cache=True)
    def _hausdorff_batch_nb(A, B, two_sided):
        out = np.empty(A.shape[0])
        for i in range(A.shape[0]):
            sb, wb = _directed_stats_nb(B[i], A[i])
            if two_sided:
                sa, wa = _directed_stats_nb(A[i], B[i])
                out[i] = max(wa, wb)
            else:
                out[i] = wb
        return out

    @njit(cache=True)
    def _min_pairwise_dist_nb(a):
        n = a.shape[0]
        k = a.shape[1]
        best = np.inf
        for i in range(n):
            for j in range(i + 1, n):
                d = 0.0
                for c in range(k):
                    t = a[i, c] - a[j, c]
                    d += t * t
                if d < best:
                    best = d
        return np.sqrt(best)

    def directed_stats_nb(a, b):
        return _directed_stats_nb(a, b)

    def chamfer_pair_nb(a, b):
        return float(_chamfer_pair_nb(a, b))

    def chamfer_pair_grad_nb(a, b):
        grad = np.zeros_like(a)
        value = _chamfer_pair_grad_nb(a, b, grad)
        return float(value), grad

    def chamfer_batch_grad_nb(A, B):
        return _chamfer_batch_grad_nb(A, B)

    def hausdorff_batch_nb(A, B, two_sided):
        return _hausdorff_batch_nb(A, B, two_sided)

    def min_pairwise_dist_nb(a):
        return float(_min_pairwise_dist_nb(a))


if _ENV_VALUE == "numba" and njit is None:
    raise RuntimeError(f"PCPOISON_BACKEND=numba but numba is unavailable: {_numba_err}")

_USE_NUMBA = njit is not None

if _USE_NUMBA:
    directed_stats = directed_stats_nb
    chamfer_pair = chamfer_pair_nb
    chamfer_pair_grad = chamfer_pair_grad_nb
    chamfer_batch = lambda A, B: np.asarray(_chamfer_batch_nb(A, B))  # noqa: E731
    chamfer_batch_grad = chamfer_batch_grad_nb
    hausdorff_batch = hausdorff_batch_nb
    min_pairwise_dist = min_pairwise_dist_nb
else:
    directed_stats = directed_stats_np
    chamfer_pair = chamfer_pair_np
    chamfer_pair_grad = chamfer_pair_grad_np
    chamfer_batch = chamfer_batch_np
    chamfer_batch_grad = chamfer_batch_grad_np
    hausdorff_batch = hausdorff_batch_np
    min_pairwise_dist = min_pairwise_dist_np


def backend() -> str:
    """Name of the kernel backend selected at import time."""
    return "numba" if _USE_NUMBA else "numpy"


def warmup() -> None:
    """Trigger JIT compilation of every kernel on toy inputs."""
    a = np.zeros((2, 3))
    b = np.ones((3, 3))
    chamfer_pair(a, b)
    chamfer_pair_grad(a, b)
    chamfer_batch(a[None], a[None] + 1.0)
    chamfer_batch_grad(a[None], a[None] + 1.0)
    hausdorff_batch(a[None], a[None], True)
    hausdorff_batch(a[None], a[None], False)
    min_pairwise_dist(b)
    directed_stats(a, b)
