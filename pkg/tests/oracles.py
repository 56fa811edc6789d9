"""Independent reference implementations used as test oracles."""

import itertools

import numpy as np


def ncc_bruteforce(a, b, k, eps=1e-5):
    """Per-pixel loops over in-bounds window members."""
    h, w = a.shape
    r = k // 2
    cc = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            wa = a[max(i - r, 0):i + r + 1, max(j - r, 0):j + r + 1].ravel()
            wb = b[max(i - r, 0):i + r + 1, max(j - r, 0):j + r + 1].ravel()
            da, db = wa - wa.mean(), wb - wb.mean()
            cc[i, j] = (da @ db) ** 2 / ((da @ da) * (db @ db) + eps)
    return 1.0 - cc.mean()


def wilcoxon_enumerate(x, y):
    """Two-sided p by listing all 2^n sign patterns of the ranked differences."""
    d = np.asarray(x, float) - np.asarray(y, float)
    d = d[d != 0]
    n = len(d)
    a = np.abs(d)
    ranks = np.array([(a < v).sum() + ((a == v).sum() + 1) / 2 for v in a])
    w_obs = ranks[d > 0].sum()
    centre = ranks.sum() / 2
    dev = abs(w_obs - centre)
    hits = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = ranks[np.array(signs, bool)].sum()
        if abs(w - centre) >= dev - 1e-9:
            hits += 1
    return w_obs, hits / 2 ** n


def central_difference(f, x, idx, eps=1e-5):
    xp, xm = x.copy(), x.copy()
    xp[idx] += eps
    xm[idx] -= eps
    return (f(xp) - f(xm)) / (2 * eps)
