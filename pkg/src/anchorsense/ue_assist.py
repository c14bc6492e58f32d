"""UE-assisted localization.

A BS illuminates a target and nearby UEs measure the BS->target->UE
delay.  Each UE's clock is offset from the BS by an unknown timing offset
(TO), and each UE only knows its own position approximately.  This module
removes the TOs (LOS calibration or joint maximum likelihood), localizes
the target from sum-range (ellipse) observations, and greedily drops UEs
whose reported positions are inconsistent with the rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scene import SPEED_OF_LIGHT, Position, Scene, distance, los_visible, require_los
from .trilateration import AnchorObservation, LocalizationResult, gauss_newton, linearized_init

GRAD_TOL = 1e-10
MAX_ITER = 100


class UnderdeterminedError(ValueError):
    """Fewer independent measurements than unknowns."""


class InsufficientAnchorsError(ValueError):
    """Not enough usable UEs to localize the target."""


@dataclass(frozen=True)
class BistaticMeasurement:
    bs_id: str
    ue_id: str
    measured_delay: float  # seconds, includes the UE's timing offset
    aoa_at_ue: float | None = None
    target_id: str | None = None


@dataclass(frozen=True)
class BistaticObservation:
    """Sum-range ``|x - bs| + |x - ue| = sum_range`` with a TO-free range."""

    ue_id: str
    bs_position: Position
    ue_position: Position
    sum_range: float
    weight: float = 1.0


@dataclass(frozen=True)
class AnchorSet:
    retained_ue_ids: tuple[str, ...]
    removal_trace: tuple[tuple[str, float, float], ...] = ()


@dataclass(frozen=True)
class JointMlResult:
    positions: dict
    timing_offsets: dict
    residue: float  # m^2, sum of squared sum-range residuals
    converged: bool
    iterations: int

    @property
    def position(self) -> Position:
        if len(self.positions) != 1:
            raise ValueError("result holds more than one target")
        return next(iter(self.positions.values()))


def _rng(seed):
    return np.random.default_rng(seed)


def measure_bistatic(
    scene: Scene,
    bs_id: str,
    ue_id: str,
    target_id: str,
    delay_noise_std: float = 0.0,
    seed=0,
    aoa_noise_std: float | None = None,
):
    """Delay of the BS->target->UE echo as the UE's clock sees it.

    With ``aoa_noise_std`` set, the UE also reports the global bearing to
    the target (counterclockwise from +x) with that much Gaussian noise.
    """
    require_los(scene, bs_id, target_id)
    require_los(scene, target_id, ue_id)
    ue = scene.node(ue_id)
    target = scene.node(target_id).position
    true_delay = (distance(scene.true_position(bs_id), target) + distance(target, ue.true_position)) / SPEED_OF_LIGHT
    rng = _rng(seed)
    noise = rng.normal(0.0, 1.0) * delay_noise_std
    aoa = None
    if aoa_noise_std is not None:
        bearing = math.atan2(target[1] - ue.true_position[1], target[0] - ue.true_position[0])
        aoa = float(_wrap(bearing + rng.normal(0.0, 1.0) * aoa_noise_std))
    return BistaticMeasurement(bs_id, ue_id, true_delay + ue.timing_offset + noise, aoa, target_id)


def measure_los_delay(scene: Scene, bs_id: str, ue_id: str, delay_noise_std: float = 0.0, seed=0) -> float:
    """Delay of the direct BS->UE path as the UE's clock sees it."""
    require_los(scene, bs_id, ue_id)
    ue = scene.node(ue_id)
    noise = _rng(seed).normal(0.0, 1.0) * delay_noise_std
    return distance(scene.true_position(bs_id), ue.true_position) / SPEED_OF_LIGHT + ue.timing_offset + noise


def calibrate_to_los(scene: Scene, bs_id: str, ue_id: str, measured_los_delay: float) -> float:
    """TO estimate: measured LOS delay minus the delay implied by known positions."""
    require_los(scene, bs_id, ue_id)
    expected = distance(scene.known_position(bs_id), scene.known_position(ue_id)) / SPEED_OF_LIGHT
    return measured_los_delay - expected


# --------------------------------------------------------------------------
# sum-range localization


def _stack(observations):
    """Arrays for the shared solver; plain ranges get NaN second foci."""
    anchors, second, ranges, weights = [], [], [], []
    for o in observations:
        if isinstance(o, BistaticObservation):
            anchors.append(o.bs_position)
            second.append(o.ue_position)
            ranges.append(o.sum_range)
        else:
            anchors.append(o.anchor_position)
            second.append((np.nan, np.nan))
            ranges.append(o.range)
        weights.append(o.weight)
    return (
        np.array(anchors, dtype=float),
        np.array(second, dtype=float),
        np.array(ranges, dtype=float),
        np.array(weights, dtype=float),
    )


def bistatic_init(bs, ue_positions, sum_ranges, weights) -> np.ndarray:
    """Closed-form start for sum-range problems sharing one transmitter.

    With ``rho = |x - bs|`` each ellipse becomes linear in ``(x, y, rho)``:
    ``-2 u_i . x + 2 s_i rho = s_i^2 - |u_i|^2`` in BS-centred coordinates.
    Batched: ``bs`` (B, 2), the rest (B, m[, 2]).
    """
    u = ue_positions - bs[:, None, :]
    s = sum_ranges
    a = np.concatenate([-2.0 * u, 2.0 * s[:, :, None]], axis=2)
    b = s * s - np.sum(u * u, axis=2)
    aw = a * weights[:, :, None]
    normal = np.einsum("bmi,bmj->bij", aw, a)
    rhs = np.einsum("bmi,bm->bi", aw, b)
    normal += 1e-12 * np.trace(normal, axis1=1, axis2=2)[:, None, None] * np.eye(3)
    try:
        sol = np.linalg.solve(normal, rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        sol = np.zeros((bs.shape[0], 3))
    return sol[:, :2] + bs


def _initial_guess(anchors, second, ranges, weights):
    """Starting points for a batch of (anchors, second, ranges, weights) arrays."""
    has2 = ~np.isnan(second[:, :, 0])
    if np.all(has2) and np.all(anchors == anchors[:, :1]):
        return bistatic_init(anchors[:, 0], second, ranges, weights)
    if not np.any(has2):
        return linearized_init(anchors, ranges, weights)[0]
    pts = np.where(has2[:, :, None], 0.5 * (anchors + second), anchors)
    return np.sum(pts * weights[:, :, None], axis=1) / np.sum(weights, axis=1)[:, None]


def _solve(anchors, second, ranges, weights):
    x0 = _initial_guess(anchors, second, ranges, weights)
    sec = second if np.any(~np.isnan(second)) else None
    return gauss_newton(anchors, ranges, weights, x0, second=sec)


def localize_sum_ranges(observations) -> LocalizationResult:
    """Weighted least squares from bistatic (and optionally plain) observations."""
    observations = list(observations)
    if len(observations) < 3:
        raise InsufficientAnchorsError(f"need at least 3 observations, got {len(observations)}")
    anchors, second, ranges, weights = _stack(observations)
    x, res, conv, it = _solve(anchors[None], second[None], ranges[None], weights[None])
    return LocalizationResult(Position(float(x[0, 0]), float(x[0, 1])), float(res[0]), bool(conv[0]), int(it[0]))


def sum_range_residue(position, observations) -> float:
    anchors, second, ranges, weights = _stack(list(observations))
    d = np.hypot(position[0] - anchors[:, 0], position[1] - anchors[:, 1])
    has2 = ~np.isnan(second[:, 0])
    d2 = np.hypot(position[0] - second[:, 0], position[1] - second[:, 1])
    model = d + np.where(has2, d2, 0.0)
    return float(np.sum(weights * (model - ranges) ** 2))


# --------------------------------------------------------------------------
# outlier-based UE selection


def select_ues_outlier(observations: dict, stopping_threshold: float, min_anchors: int = 3) -> AnchorSet:
    """Greedy leave-one-out removal of UEs with inconsistent positions.

    ``observations`` maps UE id to that UE's observations of the target.
    Each round localizes with every remaining UE (residue R) and with each
    UE left out (residue R_i); the UE with the smallest R_i is dropped if
    ``R - R_i`` exceeds ``stopping_threshold``.
    """
    if min_anchors < 3:
        raise ValueError("min_anchors must be >= 3 for planar localization")
    ue_ids = list(observations)
    flat = [(uid, o) for uid in ue_ids for o in observations[uid]]
    if len(ue_ids) < min_anchors + 1:
        return AnchorSet(tuple(ue_ids))
    anchors, second, ranges, base_w = _stack([o for _, o in flat])
    owner = np.array([ue_ids.index(uid) for uid, _ in flat])

    retained = list(range(len(ue_ids)))
    trace = []
    while len(retained) > min_anchors:
        # row 0: all retained UEs; row j+1: retained minus retained[j]
        masks = np.zeros((len(retained) + 1, len(ue_ids)), dtype=bool)
        masks[:, retained] = True
        for j, u in enumerate(retained):
            masks[j + 1, u] = False
        w = base_w[None, :] * masks[:, owner]
        nb = w.shape[0]
        _, res, _, _ = _solve(
            np.broadcast_to(anchors, (nb,) + anchors.shape),
            np.broadcast_to(second, (nb,) + second.shape),
            np.broadcast_to(ranges, (nb,) + ranges.shape),
            w,
        )
        full, loo = res[0], res[1:]
        best = min(range(len(retained)), key=lambda j: (loo[j], ue_ids[retained[j]]))
        if full - loo[best] <= stopping_threshold:
            break
        trace.append((ue_ids[retained[best]], float(full), float(loo[best])))
        retained.pop(best)
    return AnchorSet(tuple(ue_ids[u] for u in retained), tuple(trace))


# --------------------------------------------------------------------------
# joint ML over target positions and timing offsets


def _wrap(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def _joint_model(params, bs, ue_pos, tgt_idx, ue_idx, num_targets, has_aoa):
    """Model sum-ranges (meters, clock bias included), bearings and the Jacobian.

    Rows are the delay rows followed by one bearing row per measurement
    flagged in ``has_aoa``.
    """
    pts = params[: 2 * num_targets].reshape(num_targets, 2)
    bias = params[2 * num_targets :]
    p = pts[tgt_idx]
    v1 = p - bs
    v2 = p - ue_pos[ue_idx]
    d1 = np.hypot(v1[:, 0], v1[:, 1])
    d2 = np.hypot(v2[:, 0], v2[:, 1])
    n = len(tgt_idx)
    a_rows = np.flatnonzero(has_aoa)
    model = np.concatenate([d1 + d2 + bias[ue_idx], np.arctan2(v2[a_rows, 1], v2[a_rows, 0])])
    jac = np.zeros((n + a_rows.size, params.size))
    grad = v1 / np.where(d1 > 0, d1, 1.0)[:, None] + v2 / np.where(d2 > 0, d2, 1.0)[:, None]
    rows = np.arange(n)
    jac[rows, 2 * tgt_idx] = grad[:, 0]
    jac[rows, 2 * tgt_idx + 1] = grad[:, 1]
    jac[rows, 2 * num_targets + ue_idx] = 1.0
    # d atan2(vy, vx) = (-vy, vx) / |v|^2
    q = np.where(d2[a_rows] > 0, d2[a_rows] ** 2, 1.0)
    arow = n + np.arange(a_rows.size)
    jac[arow, 2 * tgt_idx[a_rows]] = -v2[a_rows, 1] / q
    jac[arow, 2 * tgt_idx[a_rows] + 1] = v2[a_rows, 0] / q
    return model, jac


def joint_jacobian(params, bs_position, ue_positions, pairs, num_targets, has_aoa=None):
    """Model and Jacobian of the joint problem; ``pairs`` lists (target index, UE index)."""
    tgt_idx = np.array([t for t, _ in pairs])
    ue_idx = np.array([u for _, u in pairs])
    if has_aoa is None:
        has_aoa = np.zeros(len(pairs), dtype=bool)
    return _joint_model(
        np.asarray(params, dtype=float),
        np.asarray(bs_position, dtype=float),
        np.asarray(ue_positions, dtype=float),
        tgt_idx,
        ue_idx,
        num_targets,
        np.asarray(has_aoa, dtype=bool),
    )


def _bearing_fix(points, bearings):
    """Least-squares intersection of bearing lines; None when they are parallel."""
    normal = np.column_stack([-np.sin(bearings), np.cos(bearings)])
    a = normal.T @ normal
    if np.linalg.cond(a) > 1e8:
        return None
    return np.linalg.solve(a, normal.T @ np.sum(normal * points, axis=1))


def joint_ml_localize(
    measurements,
    bs_position,
    ue_reported_positions: dict,
    delay_noise_std: float = 0.0,
    aoa_noise_std: float = 0.0,
) -> JointMlResult:
    """Jointly estimate target positions and per-UE timing offsets.

    With Gaussian noise the ML estimate is the least-squares fit of
    ``c * delay = |p_k - bs| + |p_k - ue_u| + c * TO_u`` (and, when UEs
    report ``aoa_at_ue``, of the bearing from the UE to the target), each
    residual scaled by its noise std.  An offset is shared by every
    measurement of one UE, so offsets become identifiable once UEs either
    see several targets or also report bearings: the number of distinct
    equations has to reach ``2 * targets + UEs``.

    ``aoa_at_ue`` is the global bearing from the UE to the target, counter-
    clockwise from the +x axis.  Zero noise stds fall back to 1 ns and
    1 mrad, which only sets the relative weight of the two kinds of rows.
    """
    measurements = list(measurements)
    ue_ids = sorted({m.ue_id for m in measurements})
    tgt_ids = sorted({m.target_id for m in measurements}, key=str)
    if len(ue_ids) < 3:
        raise UnderdeterminedError(f"need at least 3 UEs, got {len(ue_ids)}")
    delay_pairs = {(m.target_id, m.ue_id) for m in measurements}
    aoa_pairs = {(m.target_id, m.ue_id) for m in measurements if m.aoa_at_ue is not None}
    equations = len(delay_pairs) + len(aoa_pairs)
    unknowns = 2 * len(tgt_ids) + len(ue_ids)
    if equations < unknowns:
        raise UnderdeterminedError(
            f"{equations} independent equations for {unknowns} unknowns "
            f"({len(tgt_ids)} targets, {len(ue_ids)} timing offsets)"
        )
    c = SPEED_OF_LIGHT
    bs = np.asarray(bs_position, dtype=float)
    ue_pos = np.array([ue_reported_positions[u] for u in ue_ids], dtype=float)
    tgt_idx = np.array([tgt_ids.index(m.target_id) for m in measurements])
    ue_idx = np.array([ue_ids.index(m.ue_id) for m in measurements])
    has_aoa = np.array([m.aoa_at_ue is not None for m in measurements])
    obs = np.concatenate(
        [c * np.array([m.measured_delay for m in measurements]), [m.aoa_at_ue for m in measurements if m.aoa_at_ue is not None]]
    )
    n_delay = len(measurements)
    scale = np.concatenate(
        [
            np.full(n_delay, c * (delay_noise_std if delay_noise_std > 0 else 1e-9)),
            np.full(int(has_aoa.sum()), aoa_noise_std if aoa_noise_std > 0 else 1e-3),
        ]
    )
    k = len(tgt_ids)

    # start: bearing intersection when available, else TO = 0 ellipse fit
    start = []
    for t in range(k):
        rows = np.flatnonzero(tgt_idx == t)
        arows = rows[has_aoa[rows]]
        x = None
        if arows.size >= 2:
            x = _bearing_fix(ue_pos[ue_idx[arows]], np.array([measurements[i].aoa_at_ue for i in arows]))
        if x is None:
            if rows.size < 3:
                raise UnderdeterminedError(f"target {tgt_ids[t]!r} cannot be initialized from its measurements")
            anchors = np.broadcast_to(bs, (rows.size, 2))[None]
            xb, _, _, _ = _solve(anchors, ue_pos[ue_idx[rows]][None], obs[rows][None], np.ones((1, rows.size)))
            x = xb[0]
        start.append(x)
    params = np.concatenate([np.ravel(start), np.zeros(len(ue_ids))])
    model, _ = _joint_model(params, bs, ue_pos, tgt_idx, ue_idx, k, has_aoa)
    for u in range(len(ue_ids)):
        params[2 * k + u] = np.mean((obs[:n_delay] - model[:n_delay])[ue_idx == u])

    def whitened(p):
        m, j = _joint_model(p, bs, ue_pos, tgt_idx, ue_idx, k, has_aoa)
        r = obs - m
        r[n_delay:] = _wrap(r[n_delay:])
        return r / scale, j / scale[:, None]

    r, jac = whitened(params)
    res = float(r @ r)
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        grad = -2.0 * jac.T @ r
        if np.linalg.norm(grad) <= GRAD_TOL * (1.0 + res):
            converged = True
            break
        step, *_ = np.linalg.lstsq(jac, r, rcond=None)
        alpha, accepted = 1.0, False
        for _h in range(21):
            cand = params + alpha * step
            r_c, j_c = whitened(cand)
            if r_c @ r_c <= res:
                accepted = True
                break
            alpha *= 0.5
        small = np.linalg.norm(alpha * step) <= 1e-12 * (1.0 + np.linalg.norm(params))
        if accepted:
            params, r, res, jac = cand, r_c, float(r_c @ r_c), j_c
        if not accepted or small:
            converged = True
            break
    if not np.all(np.isfinite(params)):
        raise RuntimeError("joint ML diverged")

    pts = params[: 2 * k].reshape(k, 2)
    return JointMlResult(
        positions={tid: Position(float(pts[i, 0]), float(pts[i, 1])) for i, tid in enumerate(tgt_ids)},
        timing_offsets={uid: float(params[2 * k + i] / c) for i, uid in enumerate(ue_ids)},
        residue=res,
        converged=converged,
        iterations=it,
    )


# --------------------------------------------------------------------------
# end-to-end pipeline


@dataclass
class UeAssistConfig:
    delay_noise_std: float = 0.0  # seconds, on every delay measurement
    to_mode: str = "auto"  # auto | calibrate | joint | none
    selection: bool = True
    stopping_threshold: float | None = None  # m^2; default 9 (c sigma)^2
    min_anchors: int = 3
    weighting: str = "uniform"  # uniform | known_error
    aoa_noise_std: float | None = None  # radians; None: UEs report no bearings
    seed: int = 0

    def threshold(self) -> float:
        if self.stopping_threshold is not None:
            return self.stopping_threshold
        sigma = SPEED_OF_LIGHT * self.delay_noise_std
        return 9.0 * sigma**2 if sigma > 0 else 1e-6


@dataclass(frozen=True)
class UeAssistResult:
    localization: LocalizationResult
    anchor_set: AnchorSet
    timing_offsets: dict = field(default_factory=dict)

    @property
    def position(self) -> Position:
        return self.localization.position


def _timing_offsets(scene, bs_id, target_id, ues, config) -> dict:
    mode = config.to_mode
    if mode == "none":
        return {ue.id: 0.0 for ue in ues}
    if mode == "auto":
        mode = "calibrate" if all(los_visible(scene, bs_id, ue.id) for ue in ues) else "joint"
    if mode == "calibrate":
        out = {}
        for i, ue in enumerate(ues):
            los = measure_los_delay(scene, bs_id, ue.id, config.delay_noise_std, seed=[config.seed, i, 1])
            out[ue.id] = calibrate_to_los(scene, bs_id, ue.id, los)
        return out
    if mode == "joint":
        meas = []
        for i, ue in enumerate(ues):
            for j, tgt in enumerate(scene.targets):
                if los_visible(scene, bs_id, tgt.id) and los_visible(scene, tgt.id, ue.id):
                    seed = [config.seed, i, 2, j]
                    meas.append(
                        measure_bistatic(scene, bs_id, ue.id, tgt.id, config.delay_noise_std, seed, config.aoa_noise_std)
                    )
        result = joint_ml_localize(
            meas,
            scene.known_position(bs_id),
            {ue.id: ue.reported_position for ue in ues},
            config.delay_noise_std,
            config.aoa_noise_std or 0.0,
        )
        return result.timing_offsets
    raise ValueError(f"unknown to_mode {config.to_mode!r}")


def ue_assisted_localize(scene: Scene, bs_id: str, target_id: str, config: UeAssistConfig | None = None) -> UeAssistResult:
    """Measure, remove timing offsets, select UEs and localize one target."""
    config = config or UeAssistConfig()
    require_los(scene, bs_id, target_id)
    ues = [ue for ue in scene.user_equipments if los_visible(scene, target_id, ue.id)]
    if len(ues) < 3:
        raise InsufficientAnchorsError(f"only {len(ues)} UEs see target {target_id!r}")
    offsets = _timing_offsets(scene, bs_id, target_id, ues, config)
    bs_pos = scene.known_position(bs_id)
    c_sigma2 = (SPEED_OF_LIGHT * config.delay_noise_std) ** 2
    observations = {}
    for i, ue in enumerate(ues):
        m = measure_bistatic(scene, bs_id, ue.id, target_id, config.delay_noise_std, seed=[config.seed, i, 0])
        if config.weighting == "known_error":
            # error power of a sum-range: delay noise plus focus and TO-calibration shifts
            weight = 1.0 / max(c_sigma2 + 2.0 * ue.position_error_std**2, 1e-12)
        else:
            weight = 1.0
        sum_range = SPEED_OF_LIGHT * (m.measured_delay - offsets[ue.id])
        observations[ue.id] = [BistaticObservation(ue.id, bs_pos, ue.reported_position, sum_range, weight)]

    if config.selection:
        anchor_set = select_ues_outlier(observations, config.threshold(), config.min_anchors)
    else:
        anchor_set = AnchorSet(tuple(observations))
    if len(anchor_set.retained_ue_ids) < 3:
        raise InsufficientAnchorsError("fewer than 3 UEs left after selection")
    final = localize_sum_ranges(o for uid in anchor_set.retained_ue_ids for o in observations[uid])
    return UeAssistResult(final, anchor_set, offsets)


__all__ = [
    "AnchorObservation",
    "AnchorSet",
    "BistaticMeasurement",
    "BistaticObservation",
    "InsufficientAnchorsError",
    "JointMlResult",
    "UeAssistConfig",
    "UeAssistResult",
    "UnderdeterminedError",
    "calibrate_to_los",
    "joint_jacobian",
    "joint_ml_localize",
    "localize_sum_ranges",
    "measure_bistatic",
    "measure_los_delay",
    "select_ues_outlier",
    "sum_range_residue",
    "ue_assisted_localize",
]
