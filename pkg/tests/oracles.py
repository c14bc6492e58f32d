"""Independent reference computations shared by the tests.

Nothing here calls into the package under test.
"""

import itertools

import numpy as np


def grid_min_residue(anchors, ranges, weights=None, lo=-100.0, hi=100.0, step=0.1, chunk=200):
    """Minimum of sum_i w_i (|x - a_i| - r_i)^2 over a square grid, and its argmin."""
    anchors = np.asarray(anchors, dtype=float)
    ranges = np.asarray(ranges, dtype=float)
    weights = np.ones_like(ranges) if weights is None else np.asarray(weights, dtype=float)
    axis = np.arange(lo, hi + step / 2, step)
    best, arg = np.inf, None
    for start in range(0, len(axis), chunk):
        xs = axis[start : start + chunk][:, None]
        total = np.zeros((xs.shape[0], axis.size))
        for (ax, ay), r, w in zip(anchors, ranges, weights):
            total += w * (np.sqrt((xs - ax) ** 2 + (axis[None, :] - ay) ** 2) - r) ** 2
        i = np.unravel_index(np.argmin(total), total.shape)
        if total[i] < best:
            best, arg = float(total[i]), (float(xs[i[0], 0]), float(axis[i[1]]))
    return best, arg


def all_chains(num_bs, k):
    """Every measurement-index chain with the first BS's index fixed per target."""
    return list(itertools.product(range(k), repeat=num_bs))


def central_difference(f, x, h=1e-6):
    """Central finite-difference Jacobian of a vector function f at x."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    jac = np.zeros((f0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h * max(1.0, abs(x[j]))
        jac[:, j] = (np.asarray(f(x + e)) - np.asarray(f(x - e))).ravel() / (2 * e[j])
    return jac
