"""Position estimation from ranges to known anchors.

The solver minimizes ``sum_i w_i (model_i(x) - r_i)^2`` with Gauss-Newton
and step halving.  ``model_i`` is the distance to anchor ``i``, or the
sum of distances to two foci for bistatic (ellipse) observations.  All
arithmetic is elementwise over a leading batch axis so that many small
problems can be solved at once with identical per-problem results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene import Position

GRAD_TOL = 1e-10
MAX_ITER = 100
MAX_HALVINGS = 20
STEP_TOL = 1e-12
COLLINEAR_TOL = 1e-9


class CollinearAnchorsError(ValueError):
    """Anchors lie on a line; the solution is only known up to a mirror image."""

    def __init__(self, message: str, candidates: tuple = ()):
        super().__init__(message)
        self.candidates = candidates


@dataclass(frozen=True)
class AnchorObservation:
    anchor_position: Position
    range: float
    weight: float = 1.0

    def __post_init__(self):
        if not self.range >= 0:
            raise ValueError(f"range must be >= 0, got {self.range}")
        if not self.weight >= 0:
            raise ValueError(f"weight must be >= 0, got {self.weight}")


@dataclass(frozen=True)
class LocalizationResult:
    position: Position
    residue: float
    converged: bool
    iterations: int


def feasibility_threshold(range_std: float, num_anchors: int) -> float:
    """Per-target residue bound below which a range set counts as consistent."""
    if range_std <= 0:
        return 1e-6
    return (3.0 * range_std) ** 2 * num_anchors


# --------------------------------------------------------------------------
# batched core


def _model(x, anchors, second, curvature=False):
    """Model distances, their gradients and (optionally) second derivatives.

    x: (B, 2); anchors: (B, m, 2); second: (B, m, 2) with NaN rows for
    plain range observations.  Curvature comes back as the three
    distinct Hessian entries (xx, xy, yy), each of shape (B, m).
    """
    dx = x[:, None, 0] - anchors[:, :, 0]
    dy = x[:, None, 1] - anchors[:, :, 1]
    d = np.sqrt(dx * dx + dy * dy)
    inv = 1.0 / np.where(d > 0, d, 1.0)
    ux, uy = dx * inv, dy * inv
    if curvature:
        hxx, hxy, hyy = (1.0 - ux * ux) * inv, -ux * uy * inv, (1.0 - uy * uy) * inv
    if second is not None:
        has2 = ~np.isnan(second[:, :, 0])
        ex = np.where(has2, x[:, None, 0] - second[:, :, 0], 0.0)
        ey = np.where(has2, x[:, None, 1] - second[:, :, 1], 0.0)
        d2 = np.sqrt(ex * ex + ey * ey)
        inv2 = np.where(has2, 1.0 / np.where(d2 > 0, d2, 1.0), 0.0)
        vx, vy = ex * inv2, ey * inv2
        d = d + d2
        ux, uy = ux + vx, uy + vy
        if curvature:
            hxx = hxx + np.where(has2, (1.0 - vx * vx) * inv2, 0.0)
            hxy = hxy - vx * vy * inv2
            hyy = hyy + np.where(has2, (1.0 - vy * vy) * inv2, 0.0)
    if curvature:
        return d, ux, uy, (hxx, hxy, hyy)
    return d, ux, uy


def _residue(x, anchors, ranges, weights, second):
    d, _, _ = _model(x, anchors, second)
    r = d - ranges
    return (weights * r * r).sum(axis=1)


def linearized_init(anchors: np.ndarray, ranges: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form start from differenced squared-range equations.

    Subtracting the weighted mean equation removes ``|x|^2`` and leaves
    ``2 (a_i - a_bar) . x = (|a_i|^2 - r_i^2) - mean``.  Returns the
    solutions and the determinant of the 2x2 normal matrix (near zero for
    collinear anchors).
    """
    w = weights / np.sum(weights, axis=1, keepdims=True)
    a_bar = np.sum(w[:, :, None] * anchors, axis=1)
    b = np.sum(anchors * anchors, axis=2) - ranges * ranges
    b_bar = np.sum(w * b, axis=1)
    g = 2.0 * (anchors - a_bar[:, None, :])
    rhs = b - b_bar[:, None]
    a11 = np.sum(weights * g[:, :, 0] * g[:, :, 0], axis=1)
    a12 = np.sum(weights * g[:, :, 0] * g[:, :, 1], axis=1)
    a22 = np.sum(weights * g[:, :, 1] * g[:, :, 1], axis=1)
    r1 = np.sum(weights * g[:, :, 0] * rhs, axis=1)
    r2 = np.sum(weights * g[:, :, 1] * rhs, axis=1)
    det = a11 * a22 - a12 * a12
    safe = np.where(det != 0, det, 1.0)
    x = np.stack([(a22 * r1 - a12 * r2) / safe, (a11 * r2 - a12 * r1) / safe], axis=1)
    x = np.where((det != 0)[:, None], x, a_bar)
    return x, det


def gauss_newton(anchors, ranges, weights, x0, second=None, tol=GRAD_TOL, max_iter=MAX_ITER, stop_below=None):
    """Batched damped Gauss-Newton.

    Returns ``(x, residue, converged, iterations)`` arrays.  A problem
    converges when its gradient norm drops to ``tol`` or when no step
    larger than floating-point resolution of ``x`` lowers the residue.  The
    Gauss-Newton matrix gets the residual-curvature term added whenever
    the resulting full Hessian is positive definite, which keeps
    convergence fast on inconsistent (large-residue) data.  A step is
    halved up to ``MAX_HALVINGS`` times until the residue does not
    increase.  With ``stop_below`` set, problems whose residue drops to that level
    stop immediately (used for pure feasibility decisions).
    """
    anchors = np.asarray(anchors, dtype=float)
    ranges = np.asarray(ranges, dtype=float)
    weights = np.asarray(weights, dtype=float)
    x = np.array(x0, dtype=float)
    nb = x.shape[0]
    res = _residue(x, anchors, ranges, weights, second)
    iters = np.zeros(nb, dtype=int)
    converged = np.zeros(nb, dtype=bool)
    active = np.ones(nb, dtype=bool)
    if stop_below is not None:
        active &= res > stop_below

    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        a, rg, w = anchors[idx], ranges[idx], weights[idx]
        sec = None if second is None else second[idx]
        xi = x[idx]
        d, ux, uy, (cxx, cxy, cyy) = _model(xi, a, sec, curvature=True)
        r = d - rg
        wr = w * r
        gx = 2.0 * (wr * ux).sum(axis=1)
        gy = 2.0 * (wr * uy).sum(axis=1)
        gnorm = np.hypot(gx, gy)
        done = gnorm <= tol
        if np.any(done):
            converged[idx[done]] = True
            active[idx[done]] = False
            keep = ~done
            if not np.any(keep):
                break
            idx, a, rg, w, xi, r, wr = idx[keep], a[keep], rg[keep], w[keep], xi[keep], r[keep], wr[keep]
            sec = None if sec is None else sec[keep]
            ux, uy, cxx, cxy, cyy = ux[keep], uy[keep], cxx[keep], cxy[keep], cyy[keep]
            gx, gy, gnorm = gx[keep], gy[keep], gnorm[keep]

        h11 = (w * ux * ux).sum(axis=1)
        h12 = (w * ux * uy).sum(axis=1)
        h22 = (w * uy * uy).sum(axis=1)
        n11 = h11 + (wr * cxx).sum(axis=1)
        n12 = h12 + (wr * cxy).sum(axis=1)
        n22 = h22 + (wr * cyy).sum(axis=1)
        newton = (n11 > 0) & (n11 * n22 - n12 * n12 > 1e-12 * (n11 + n22) ** 2)
        h11 = np.where(newton, n11, h11)
        h12 = np.where(newton, n12, h12)
        h22 = np.where(newton, n22, h22)
        # tiny ridge keeps degenerate geometries solvable
        ridge = 1e-12 * (h11 + h22) + 1e-300
        h11, h22 = h11 + ridge, h22 + ridge
        det = h11 * h22 - h12 * h12
        step = -0.5 * np.stack([(h22 * gx - h12 * gy) / det, (h11 * gy - h12 * gx) / det], axis=1)

        # steps below floating-point resolution of x: stationary point reached
        snorm = np.hypot(step[:, 0], step[:, 1])
        floor = STEP_TOL * (1.0 + np.hypot(xi[:, 0], xi[:, 1]))
        base = res[idx]
        cand = xi + step
        cres = _residue(cand, a, rg, w, sec)
        accepted = cres <= base
        new_x = np.where(accepted[:, None], cand, xi)
        new_res = np.where(accepted, cres, base)
        alpha = 1.0
        for _h in range(MAX_HALVINGS):
            todo = np.flatnonzero(~accepted & (alpha * snorm > floor))
            if todo.size == 0:
                break
            alpha *= 0.5
            cand = xi[todo] + alpha * step[todo]
            cres = _residue(cand, a[todo], rg[todo], w[todo], None if sec is None else sec[todo])
            ok = cres <= base[todo]
            new_x[todo[ok]] = cand[ok]
            new_res[todo[ok]] = cres[ok]
            accepted[todo[ok]] = True
        x[idx] = new_x
        res[idx] = new_res
        iters[idx] += 1
        finished = ~accepted | (snorm <= floor)
        if np.any(finished):
            active[idx[finished]] = False
            converged[idx[finished]] = True
        if stop_below is not None:
            # a positive-definite Newton model that predicts a minimum far
            # above the bound settles the decision without full convergence
            predicted = 0.5 * (gx * step[:, 0] + gy * step[:, 1])
            hopeless = newton & (base + 4.0 * predicted > stop_below)
            active[idx[(new_res <= stop_below) | hopeless]] = False

    return x, res, converged, iters


def solve_batch(anchors, ranges, weights=None) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Trilaterate a batch of range-only problems.

    anchors: (B, m, 2); ranges: (B, m); weights: (B, m) or None.
    """
    anchors = np.asarray(anchors, dtype=float)
    ranges = np.asarray(ranges, dtype=float)
    weights = np.ones_like(ranges) if weights is None else np.asarray(weights, dtype=float)
    x0, _ = linearized_init(anchors, ranges, weights)
    return gauss_newton(anchors, ranges, weights, x0)


# --------------------------------------------------------------------------
# single-problem API


def _as_arrays(observations):
    anchors = np.array([o.anchor_position for o in observations], dtype=float)
    ranges = np.array([o.range for o in observations], dtype=float)
    weights = np.array([o.weight for o in observations], dtype=float)
    return anchors, ranges, weights


def is_collinear(anchors: np.ndarray) -> bool:
    centered = anchors - anchors.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return s.size < 2 or s[1] <= COLLINEAR_TOL * max(s[0], 1e-300)


def _mirror_candidates(anchors, ranges, weights):
    centered = anchors - anchors.mean(axis=0)
    _, s, vt = np.linalg.svd(centered)
    u = vt[0] if s[0] > 0 else np.array([1.0, 0.0])
    normal = np.array([-u[1], u[0]])
    origin = anchors.mean(axis=0)
    t = (anchors - origin) @ u
    # |x-a_i|^2 = (s - t_i)^2 + h^2, differenced against the weighted mean
    w = weights / weights.sum()
    lhs = -2.0 * (t - w @ t)
    rhs = ranges**2 - t**2 - (w @ (ranges**2 - t**2))
    denom = np.sum(weights * lhs * lhs)
    s_hat = float(np.sum(weights * lhs * rhs) / denom) if denom > 0 else float(w @ t)
    h2 = float(w @ (ranges**2 - (s_hat - t) ** 2))
    h = math.sqrt(max(h2, 0.0))
    cands = []
    for sign in (1.0, -1.0):
        x0 = origin + s_hat * u + sign * h * normal
        x, res, conv, it = gauss_newton(anchors[None], ranges[None], weights[None], x0[None])
        cands.append(LocalizationResult(Position(*map(float, x[0])), float(res[0]), bool(conv[0]), int(it[0])))
    return tuple(cands)


def trilaterate(observations) -> LocalizationResult:
    """Weighted nonlinear least-squares position from range observations."""
    observations = list(observations)
    if len(observations) < 3:
        raise ValueError(f"need at least 3 observations, got {len(observations)}")
    anchors, ranges, weights = _as_arrays(observations)
    if is_collinear(anchors):
        cands = _mirror_candidates(anchors, ranges, weights)
        raise CollinearAnchorsError("anchors are collinear; mirror-ambiguous solutions returned", cands)
    x, res, conv, it = solve_batch(anchors[None], ranges[None], weights[None])
    if not conv[0] and it[0] >= MAX_ITER:
        raise RuntimeError(f"Gauss-Newton did not converge in {MAX_ITER} iterations (residue {res[0]:.3g})")
    return LocalizationResult(Position(float(x[0, 0]), float(x[0, 1])), float(res[0]), bool(conv[0]), int(it[0]))


def residue_at(position, observations) -> float:
    anchors, ranges, weights = _as_arrays(list(observations))
    d = np.hypot(position[0] - anchors[:, 0], position[1] - anchors[:, 1])
    return float(np.sum(weights * (d - ranges) ** 2))


def range_jacobian(position, anchor_positions, second_positions=None) -> np.ndarray:
    """Jacobian (m, 2) of the model distances at ``position``."""
    anchors = np.asarray(anchor_positions, dtype=float)[None]
    second = None if second_positions is None else np.asarray(second_positions, dtype=float)[None]
    _, ux, uy = _model(np.asarray(position, dtype=float)[None], anchors, second)
    return np.stack([ux[0], uy[0]], axis=1)


def model_distances(position, anchor_positions, second_positions=None) -> np.ndarray:
    anchors = np.asarray(anchor_positions, dtype=float)[None]
    second = None if second_positions is None else np.asarray(second_positions, dtype=float)[None]
    d, _, _ = _model(np.asarray(position, dtype=float)[None], anchors, second)
    return d[0]
