import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import central_difference

from anchorsense.harness import ExperimentConfig, NoiseConfig, ue_scene
from anchorsense.scene import SPEED_OF_LIGHT, BaseStation, MissingLosError, Position, RadioConfig, Scene, Target, UserEquipment
from anchorsense.ue_assist import (
    BistaticObservation,
    InsufficientAnchorsError,
    UeAssistConfig,
    UnderdeterminedError,
    calibrate_to_los,
    joint_jacobian,
    joint_ml_localize,
    localize_sum_ranges,
    measure_bistatic,
    measure_los_delay,
    select_ues_outlier,
    sum_range_residue,
    ue_assisted_localize,
)

C = SPEED_OF_LIGHT
RADIO = RadioConfig(28e9, 4e8, 64, 4, 2.74e-6)


def make_scene(ues, target=(30.0, 40.0), bs=(0.0, 0.0), los=None):
    nodes = ["bs", "t"] + [u.id for u in ues]
    if los is None:
        los = [(a, b) for i, a in enumerate(nodes) for b in nodes[i + 1 :]]
    return Scene(
        RADIO,
        (BaseStation("bs", Position(*bs)),),
        tuple(ues),
        (),
        (Target("t", Position(*target)),),
        frozenset(frozenset(p) for p in los),
    )


def ue(uid, p, to=0.0, reported=None, std=0.0):
    return UserEquipment(uid, Position(*p), Position(*(reported or p)), std, to)


def test_bistatic_delay_examples():
    scene = make_scene([ue("u", (60.0, 80.0)), ue("v", (60.0, 80.0), to=100e-9)])
    assert measure_bistatic(scene, "bs", "u", "t").measured_delay == pytest.approx(100 / C, rel=1e-15)
    assert measure_bistatic(scene, "bs", "u", "t").measured_delay == pytest.approx(333.333333e-9, rel=1e-8)
    assert measure_bistatic(scene, "bs", "v", "t").measured_delay == pytest.approx(433.333333e-9, rel=1e-8)


def test_bistatic_noise_std():
    scene = make_scene([ue("u", (60.0, 80.0))])
    draws = np.array([measure_bistatic(scene, "bs", "u", "t", 1e-9, seed=s).measured_delay for s in range(10_000)])
    assert abs(draws.std(ddof=1) - 1e-9) <= 0.05e-9
    again = measure_bistatic(scene, "bs", "u", "t", 1e-9, seed=17).measured_delay
    assert again == draws[17]


def test_bistatic_requires_los():
    scene = make_scene([ue("u", (60.0, 80.0))], los=[("bs", "t")])
    with pytest.raises(MissingLosError):
        measure_bistatic(scene, "bs", "u", "t")


def test_calibration_examples():
    scene = make_scene([ue("u", (300.0, 400.0))])
    assert calibrate_to_los(scene, "bs", "u", 2.0e-6) == pytest.approx(2.0e-6 - 500 / C, abs=1e-18)
    assert calibrate_to_los(scene, "bs", "u", 2.0e-6) * 1e6 == pytest.approx(0.333333, abs=1e-6)
    assert calibrate_to_los(scene, "bs", "u", 500 / C) == 0.0
    shifted = make_scene([ue("u", (300.0, 400.0), reported=(300.0 - 1.8, 400.0 - 2.4))])
    bias = calibrate_to_los(shifted, "bs", "u", 500 / C)
    assert bias == pytest.approx(3.0 / C, rel=1e-9)
    assert bias == pytest.approx(10e-9, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e-6, 1e-6), st.floats(-90, 90), st.floats(-90, 90))
def test_calibration_exact(to, x, y):
    scene = make_scene([ue("u", (x, y + 100.0), to=to)])
    est = calibrate_to_los(scene, "bs", "u", measure_los_delay(scene, "bs", "u"))
    assert abs(est - to) <= 1e-15


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e-6, 1e-6), st.integers(0, 1000))
def test_shift_covariance(delta, seed):
    base = ue("u", (60.0, 80.0), to=25e-9)
    a = measure_bistatic(make_scene([base]), "bs", "u", "t", 1e-9, seed).measured_delay
    b = measure_bistatic(make_scene([replace(base, timing_offset=25e-9 + delta)]), "bs", "u", "t", 1e-9, seed).measured_delay
    assert b - a == pytest.approx(delta, abs=1e-21)


UE4 = [(60.0, 80.0), (-50.0, 70.0), (80.0, -20.0), (-40.0, -30.0)]


def joint_scene(tos, targets=((30.0, 40.0),)):
    ues = [ue(f"u{i}", p, to) for i, (p, to) in enumerate(zip(UE4, tos))]
    nodes = ["bs"] + [f"t{k}" for k in range(len(targets))] + [u.id for u in ues]
    los = frozenset(frozenset((a, b)) for i, a in enumerate(nodes) for b in nodes[i + 1 :])
    tg = tuple(Target(f"t{k}", Position(*p)) for k, p in enumerate(targets))
    return Scene(RADIO, (BaseStation("bs", Position(0.0, 0.0)),), tuple(ues), (), tg, los)


def joint_measurements(scene, bearings=True):
    return [
        measure_bistatic(scene, "bs", u.id, t.id, aoa_noise_std=0.0 if bearings else None)
        for u in scene.user_equipments
        for t in scene.targets
    ]


def reported(scene):
    return {u.id: u.reported_position for u in scene.user_equipments}


def test_joint_ml_zero_offsets():
    scene = joint_scene([0.0] * 4)
    res = joint_ml_localize(joint_measurements(scene), Position(0, 0), reported(scene))
    assert math.dist(res.position, (30.0, 40.0)) <= 1e-6
    assert max(abs(v) for v in res.timing_offsets.values()) <= 1e-15


def _profile_residue_grid(scene, meas, step=0.05, half=20.0):
    """Residue over a grid around the target with each UE's offset profiled out.

    One delay per UE means the optimal offset zeroes its delay residual, so
    the profiled residue is the bearing misfit alone (1 mrad scaling).
    """
    axis = np.arange(-half, half + step / 2, step)
    gx, gy = np.meshgrid(30.0 + axis, 40.0 + axis, indexing="ij")
    total = np.zeros_like(gx)
    for m in meas:
        u = scene.node(m.ue_id).reported_position
        model = np.arctan2(gy - u[1], gx - u[0])
        err = (model - m.aoa_at_ue + np.pi) % (2 * np.pi) - np.pi
        total += (err / 1e-3) ** 2
    return gx, gy, total


def test_joint_ml_offsets_10_to_40_ns():
    tos = [10e-9, 20e-9, 30e-9, 40e-9]
    scene = joint_scene(tos)
    meas = joint_measurements(scene)
    res = joint_ml_localize(meas, Position(0, 0), reported(scene))
    assert math.dist(res.position, (30.0, 40.0)) <= 1e-6
    for i, to in enumerate(tos):
        assert abs(res.timing_offsets[f"u{i}"] - to) <= 1e-12
    # oracle: the profiled objective has a single basin at the truth
    gx, gy, total = _profile_residue_grid(scene, meas)
    i = np.unravel_index(np.argmin(total), total.shape)
    assert math.dist((gx[i], gy[i]), (30.0, 40.0)) <= 1e-9
    far = np.hypot(gx - 30.0, gy - 40.0) > 1.0
    assert total[far].min() > 1.0


def test_joint_ml_multi_target_without_bearings():
    tos = [10e-9, 20e-9, 30e-9, 40e-9]
    scene = joint_scene(tos, targets=((30.0, 40.0), (-20.0, 25.0), (15.0, -35.0)))
    res = joint_ml_localize(joint_measurements(scene, bearings=False), Position(0, 0), reported(scene))
    for t in scene.targets:
        assert math.dist(res.positions[t.id], t.position) <= 1e-6
    for i, to in enumerate(tos):
        assert abs(res.timing_offsets[f"u{i}"] - to) <= 1e-12


def test_joint_ml_underdetermined():
    scene = joint_scene([0.0] * 4)
    meas = [m for m in joint_measurements(scene, bearings=False) if m.ue_id in ("u0", "u1")]
    with pytest.raises(UnderdeterminedError):
        joint_ml_localize(meas, Position(0, 0), reported(scene))
    # three or four UEs, one delay each and no bearings: still too few equations
    with pytest.raises(UnderdeterminedError):
        joint_ml_localize(joint_measurements(scene, bearings=False), Position(0, 0), reported(scene))


def test_joint_jacobian_matches_finite_differences():
    rng = np.random.default_rng(8)
    for _ in range(100):
        k, u = 2, 4
        ue_pos = rng.uniform(-100, 100, (u, 2))
        pairs = [(t, j) for t in range(k) for j in range(u)]
        has_aoa = rng.random(len(pairs)) < 0.5
        params = np.concatenate([rng.uniform(-100, 100, 2 * k), rng.uniform(-30, 30, u)])
        bs = rng.uniform(-100, 100, 2)
        _, jac = joint_jacobian(params, bs, ue_pos, pairs, k, has_aoa)
        fd = central_difference(lambda p: joint_jacobian(p, bs, ue_pos, pairs, k, has_aoa)[0], params)
        assert np.linalg.norm(jac - fd) <= 1e-6 * np.linalg.norm(fd)


def sum_range_obs(ues, target=(30.0, 40.0), bs=(0.0, 0.0)):
    out = {}
    for uid, true, rep in ues:
        s = math.dist(target, bs) + math.dist(target, true)
        out[uid] = [BistaticObservation(uid, Position(*bs), Position(*rep), s)]
    return out


def test_localize_sum_ranges_exact():
    obs = sum_range_obs([(f"u{i}", p, p) for i, p in enumerate(UE4)])
    res = localize_sum_ranges(o for v in obs.values() for o in v)
    assert math.dist(res.position, (30.0, 40.0)) <= 1e-9
    assert sum_range_residue(Position(30.0, 40.0), [o for v in obs.values() for o in v]) == pytest.approx(0.0, abs=1e-20)


def test_selection_no_removals_when_consistent():
    pts = UE4 + [(10.0, 90.0), (-70.0, 0.0)]
    obs = sum_range_obs([(f"u{i}", p, p) for i, p in enumerate(pts)])
    result = select_ues_outlier(obs, 1e-6)
    assert result.retained_ue_ids == tuple(obs) and result.removal_trace == ()


def test_selection_removes_a_displaced_ue():
    pts = UE4 + [(10.0, 90.0), (-70.0, 0.0)]
    entries = [(f"u{i}", p, p) for i, p in enumerate(pts)]
    entries[2] = ("u2", pts[2], (pts[2][0] + 12.0, pts[2][1] - 7.0))
    result = select_ues_outlier(sum_range_obs(entries), 1e-6)
    assert result.removal_trace[0][0] == "u2"
    assert "u2" not in result.retained_ue_ids


def test_selection_degenerates_with_few_ues():
    entries = [(f"u{i}", p, p) for i, p in enumerate(UE4[:3])]
    result = select_ues_outlier(sum_range_obs(entries), 1e-6)
    assert result.retained_ue_ids == ("u0", "u1", "u2")
    with pytest.raises(ValueError):
        select_ues_outlier(sum_range_obs(entries), 1e-6, min_anchors=2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(4, 9), st.floats(0.0, 5.0))
def test_greedy_monotonicity_and_termination(seed, n, threshold):
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        p = rng.uniform(-100, 100, 2)
        std = 10.0 if rng.random() < 0.4 else 0.1
        entries.append((f"u{i}", tuple(p), tuple(p + rng.normal(0, std, 2))))
    result = select_ues_outlier(sum_range_obs(entries), threshold)
    assert len(result.removal_trace) <= n - 3
    assert len(result.retained_ue_ids) == n - len(result.removal_trace)
    for _, before, after in result.removal_trace:
        assert before - after > threshold
    befores = [b for _, b, _ in result.removal_trace]
    assert all(y < x for x, y in zip(befores, befores[1:]))


def _ue_cfg(k):
    return ExperimentConfig(experiment="ue_selection", num_accurate_ues=5, num_erroneous_ues=k, trials=1)


def test_erroneous_ue_removed_first():
    cfg = _ue_cfg(1)
    noise = cfg.noise.delay_noise_std
    first = 0
    for trial in range(500):
        scene, bad = ue_scene(cfg, np.random.default_rng([0, trial]))
        res = ue_assisted_localize(scene, "bs", "t", UeAssistConfig(delay_noise_std=noise, seed=trial))
        trace = res.anchor_set.removal_trace
        first += bool(trace) and trace[0][0] in bad
    assert first / 500 >= 0.95


def test_all_six_erroneous_removed_in_majority():
    cfg = _ue_cfg(6)
    noise = cfg.noise.delay_noise_std
    full = 0
    for trial in range(200):
        scene, bad = ue_scene(cfg, np.random.default_rng([1, trial]))
        res = ue_assisted_localize(scene, "bs", "t", UeAssistConfig(delay_noise_std=noise, seed=trial))
        full += not bad.intersection(res.anchor_set.retained_ue_ids)
    assert full / 200 > 0.5


def test_selection_beats_all_ues():
    cfg = _ue_cfg(3)
    noise = cfg.noise.delay_noise_std
    errors = {True: 0, False: 0}
    for trial in range(500):
        scene, _ = ue_scene(cfg, np.random.default_rng([2, trial]))
        for sel in (True, False):
            res = ue_assisted_localize(scene, "bs", "t", UeAssistConfig(delay_noise_std=noise, selection=sel, seed=trial))
            errors[sel] += math.dist(res.position, scene.node("t").position) > 1.0
    assert errors[True] < errors[False]


def test_pipeline_noiseless_exact():
    pts = UE4 + [(10.0, 90.0)]
    scene = make_scene([ue(f"u{i}", p) for i, p in enumerate(pts)])
    res = ue_assisted_localize(scene, "bs", "t", UeAssistConfig(to_mode="none"))
    assert math.dist(res.position, (30.0, 40.0)) <= 1e-6


def test_pipeline_with_calibrated_offsets():
    pts = UE4 + [(10.0, 90.0)]
    scene = make_scene([ue(f"u{i}", p, to=(i + 1) * 37e-9) for i, p in enumerate(pts)])
    res = ue_assisted_localize(scene, "bs", "t", UeAssistConfig(to_mode="calibrate"))
    assert math.dist(res.position, (30.0, 40.0)) <= 1e-6
    for i in range(5):
        assert res.timing_offsets[f"u{i}"] == pytest.approx((i + 1) * 37e-9, abs=1e-15)


def test_pipeline_joint_mode_without_bs_los():
    pts = UE4
    ues = [ue(f"u{i}", p, to=(i + 1) * 10e-9) for i, p in enumerate(pts)]
    los = [("bs", "t")] + [("t", u.id) for u in ues]
    scene = make_scene(ues, los=los)
    res = ue_assisted_localize(scene, "bs", "t", UeAssistConfig(aoa_noise_std=0.0))
    assert math.dist(res.position, (30.0, 40.0)) <= 1e-6


def test_pipeline_insufficient_anchors():
    ues = [ue(f"u{i}", p) for i, p in enumerate(UE4)]
    los = [("bs", "t"), ("t", "u0"), ("t", "u1")]
    with pytest.raises(InsufficientAnchorsError):
        ue_assisted_localize(make_scene(ues, los=los), "bs", "t")


def test_known_error_weighting_runs():
    cfg = _ue_cfg(2)
    scene, _ = ue_scene(cfg, np.random.default_rng([3, 0]))
    res = ue_assisted_localize(scene, "bs", "t", UeAssistConfig(delay_noise_std=1e-10, weighting="known_error", selection=False))
    assert math.dist(res.position, scene.node("t").position) < 5.0


def test_default_stopping_threshold():
    assert UeAssistConfig(delay_noise_std=1e-9).threshold() == pytest.approx(9 * 0.3**2)
    assert UeAssistConfig().threshold() == 1e-6
    assert NoiseConfig().delay_noise_std == 1e-10
