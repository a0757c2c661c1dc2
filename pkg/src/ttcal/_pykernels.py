"""Pure numpy implementations of the compiled kernels.

Used when the extension is not built, or when ``TTCAL_PURE_PYTHON=1``.
"""

import numpy as np
from scipy.spatial.distance import pdist


def pairwise_distances(x):
    return np.minimum(pdist(np.asarray(x, dtype=np.float64), "euclidean"), 2.0)


def threshold_counts(dist, positive, grid):
    dist = np.asarray(dist, dtype=np.float64)
    positive = np.asarray(positive).astype(bool)
    grid = np.asarray(grid, dtype=np.float64)
    g = grid.shape[0]
    pos_d = dist[positive]
    neg_d = dist[~positive]
    # a positive at distance v counts for every grid point strictly above v
    hp = np.bincount(np.searchsorted(grid, pos_d, side="right"), minlength=g + 1)
    hn = np.bincount(np.searchsorted(grid, neg_d, side="left"), minlength=g + 1)
    n_pos = int(pos_d.shape[0])
    n_neg = int(neg_d.shape[0])
    pos_below = np.cumsum(hp[:g]).astype(np.int64)
    neg_above = (n_neg - np.cumsum(hn[:g])).astype(np.int64)
    return pos_below, neg_above, n_pos, n_neg


def pava(y, w):
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    vals: list[float] = []
    wts: list[float] = []
    ends: list[int] = []
    for i in range(y.shape[0]):
        vals.append(float(y[i]))
        wts.append(float(w[i]))
        ends.append(i)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            nw = wts[-2] + wts[-1]
            v = (wts[-2] * vals[-2] + wts[-1] * vals[-1]) / nw
            e = ends[-1]
            del vals[-1], wts[-1], ends[-1]
            vals[-1], wts[-1], ends[-1] = v, nw, e
    out = np.empty(y.shape[0], dtype=np.float64)
    start = 0
    for v, e in zip(vals, ends):
        out[start:e + 1] = v
        start = e + 1
    return out


def pair_mlp_forward(u, v, b1, w2, b2):
    hid = np.maximum(u[:, None, :] + v[None, :, :] + b1, 0.0)
    return hid @ w2 + b2


def pair_mlp_backward(u, v, b1, w2, dlogit):
    pre = u[:, None, :] + v[None, :, :] + b1
    dw2 = np.einsum("ij,ijm->m", dlogit, np.maximum(pre, 0.0))
    dpre = (dlogit[:, :, None] * w2) * (pre > 0)
    du = dpre.sum(axis=1)
    return du, dpre.sum(axis=0), du.sum(axis=0), dw2
