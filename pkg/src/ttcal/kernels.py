"""Kernel backend selection.

The compiled extension ``ttcal._kernels`` is preferred. Setting the
environment variable ``TTCAL_PURE_PYTHON=1`` before import forces the numpy
fallback; so does a missing or broken build.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("TTCAL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    return _impl.pairwise_distances(np.ascontiguousarray(x, dtype=np.float64))


def threshold_counts(dist: np.ndarray, positive: np.ndarray, grid: np.ndarray):
    """Count pairs against every grid threshold.

    Returns ``(pos_below, neg_above, n_pos, n_neg)`` where ``pos_below[g]`` is
    the number of positive pairs with distance strictly below ``grid[g]`` and
    ``neg_above[g]`` the number of negative pairs strictly above it.
    """
    return _impl.threshold_counts(
        np.ascontiguousarray(dist, dtype=np.float64),
        np.ascontiguousarray(positive, dtype=np.uint8),
        np.ascontiguousarray(grid, dtype=np.float64),
    )


def pava(y: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    y = np.ascontiguousarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.ascontiguousarray(w, dtype=np.float64)
    return _impl.pava(y, w)


def pair_mlp_forward(u: np.ndarray, v: np.ndarray, b1: np.ndarray, w2: np.ndarray,
                     b2: float) -> np.ndarray:
    """Pair logits ``w2 . relu(u[i] + v[j] + b1) + b2`` as an ``n x n`` matrix."""
    c = np.ascontiguousarray
    return _impl.pair_mlp_forward(c(u, dtype=np.float64), c(v, dtype=np.float64),
                                  c(b1, dtype=np.float64), c(w2, dtype=np.float64), float(b2))


def pair_mlp_backward(u, v, b1, w2, dlogit):
    """Returns ``(du, dv, db1, dw2)`` for upstream gradient ``dlogit``."""
    c = np.ascontiguousarray
    return _impl.pair_mlp_backward(c(u, dtype=np.float64), c(v, dtype=np.float64),
                                   c(b1, dtype=np.float64), c(w2, dtype=np.float64),
                                   c(dlogit, dtype=np.float64))
