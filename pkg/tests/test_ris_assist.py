import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorsense.harness import EXAMPLE4_AOAS_DEG
from anchorsense.ris_assist import (
    IllConditionedScheduleError,
    ReflectionSchedule,
    RisConfig,
    RisObservationBlock,
    RisPolarFix,
    build_temporal_snapshots,
    estimate_aoa_at_ris,
    estimate_range_to_ris,
    fix_from_position,
    localize_via_ris,
    make_schedule,
    pilot_symbols,
    pseudospectrum_rows,
    ris_assisted_localize,
    synthesize_ris_uplink,
)
from anchorsense.scene import SPEED_OF_LIGHT, BaseStation, MissingLosError, Position, RadioConfig, Ris, Scene, Target

C = SPEED_OF_LIGHT


def ris_scene(points, n=16, bs=(-40.0, 30.0), orientation=0.0, los_targets=None):
    radio = RadioConfig(28e9, 4e8, 256, 1, 2.74e-6)
    targets = tuple(Target(f"t{i}", Position(*p)) for i, p in enumerate(points))
    los_targets = [t.id for t in targets] if los_targets is None else los_targets
    los = frozenset([frozenset(("ris", "bs"))] + [frozenset((t, "ris")) for t in los_targets])
    return Scene(radio, (BaseStation("bs", Position(*bs)),), (), (Ris("ris", Position(0.0, 0.0), n, 0.5, orientation),), targets, los)


def steering(n, theta, spacing=0.5):
    """Element n phase exp(j 2 pi spacing n sin(theta)), written out directly."""
    return np.array([np.exp(2j * np.pi * spacing * k * np.sin(theta)) for k in range(n)])


def at_aoa(deg, r=40.0):
    a = math.radians(deg)
    return (r * math.sin(a), r * math.cos(a))


def test_schedule_examples():
    s4 = make_schedule(4)
    assert np.linalg.cond(s4.coefficients) == pytest.approx(1.0)
    dft = np.array([[np.exp(-2j * np.pi * t * n / 4) for n in range(4)] for t in range(4)])
    assert np.allclose(s4.coefficients, dft)
    s64 = make_schedule(64, 64)
    assert np.linalg.matrix_rank(s64.coefficients) == 64
    assert np.max(np.abs(np.abs(s64.coefficients) - 1.0)) <= 1e-12
    with pytest.raises(ValueError):
        make_schedule(4, 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 20))
def test_schedule_unit_modulus(n, extra):
    s = make_schedule(n, n + extra)
    assert np.max(np.abs(np.abs(s.coefficients) - 1.0)) <= 1e-12
    assert np.linalg.matrix_rank(s.coefficients) == n


def test_schedule_validation():
    with pytest.raises(ValueError):
        ReflectionSchedule(np.full((4, 4), 0.5))
    with pytest.raises(ValueError):
        ReflectionSchedule(np.ones((4, 4)))  # rank one
    with pytest.raises(ValueError):
        ReflectionSchedule(np.eye(3))  # zeros without allow_off


def test_ill_conditioned_schedule():
    phi = np.exp(1j * np.array([[0.0, 0.0], [0.0, 1e-7]]))
    block = RisObservationBlock(np.zeros((2, 3)), ReflectionSchedule(phi), np.ones(2))
    with pytest.raises(IllConditionedScheduleError):
        build_temporal_snapshots(block)


def direct_model(scene, ids, snaps, seed):
    """Per-element snapshots sum_k alpha_k a(theta_k) s_k[b], built from geometry."""
    ris = scene.rises[0]
    lam = scene.radio.wavelength
    s = pilot_symbols(ids, snaps, seed)
    out = np.zeros((ris.num_elements, snaps), dtype=complex)
    for k, tid in enumerate(ids):
        p = scene.node(tid).position
        theta = math.atan2(p[0], p[1])  # broadside is +y, axis +x
        alpha = np.exp(-2j * np.pi * math.hypot(*p) / lam)
        out += alpha * np.outer(steering(ris.num_elements, theta), s[k])
    return out


def test_reconstruction_identity_random_scenes():
    rng = np.random.default_rng(10)
    for i in range(50):
        n = int(rng.integers(4, 33))
        k = int(rng.integers(1, 4))
        pts = [at_aoa(rng.uniform(-80, 80), rng.uniform(5, 80)) for _ in range(k)]
        scene = ris_scene(pts, n=n, bs=tuple(rng.uniform(-60, 60, 2)))
        ids = [t.id for t in scene.targets]
        block = synthesize_ris_uplink(scene, "ris", "bs", ids, make_schedule(n), 20, None, seed=i)
        z = build_temporal_snapshots(block)
        ref = direct_model(scene, ids, 20, i)
        assert np.linalg.norm(z - ref) <= 1e-9 * np.linalg.norm(ref)


def test_broadside_columns_all_in_phase():
    scene = ris_scene([(0.0, 30.0)], n=8)
    z = build_temporal_snapshots(synthesize_ris_uplink(scene, "ris", "bs", ["t0"], make_schedule(8), 5, None))
    ratios = z / z[0]
    assert np.allclose(ratios, 1.0, atol=1e-9)


def test_selector_schedule_gives_element_signals():
    scene = ris_scene([(10.0, 30.0), (-20.0, 15.0)], n=8)
    ids = ["t0", "t1"]
    block = synthesize_ris_uplink(scene, "ris", "bs", ids, ReflectionSchedule.selector(8), 6, None, seed=4)
    z = build_temporal_snapshots(block)
    ref = direct_model(scene, ids, 6, 4)
    assert np.allclose(z, ref, atol=1e-9)
    assert np.allclose(block.samples, ref * block.cascade_gains[:, None], atol=1e-9)


def test_noise_only_covariance():
    scene = ris_scene([(5.0, 30.0)], n=4)
    sched = make_schedule(4, 6)
    rng = np.random.default_rng(0)
    cascade = np.exp(2j * np.pi * rng.random(4)) * rng.uniform(0.5, 2.0, 4)
    block = synthesize_ris_uplink(scene, "ris", "bs", [], sched, 10_000, 0.0, seed=1, cascade=cascade)
    z = build_temporal_snapshots(block)
    empirical = z @ z.conj().T / z.shape[1]
    pinv = np.linalg.pinv(sched.coefficients)
    d = np.diag(1.0 / cascade)
    analytic = d @ pinv @ pinv.conj().T @ d.conj().T * block.noise_power
    assert np.linalg.norm(empirical - analytic) <= 0.1 * np.linalg.norm(analytic)


def test_zero_targets_is_pure_noise():
    scene = ris_scene([(5.0, 30.0)], n=4)
    block = synthesize_ris_uplink(scene, "ris", "bs", [], make_schedule(4), 10, None)
    assert np.all(block.samples == 0)


def test_single_broadside_aoa():
    scene = ris_scene([(0.0, 30.0)], n=16)
    z = build_temporal_snapshots(synthesize_ris_uplink(scene, "ris", "bs", ["t0"], make_schedule(16), 50, 20.0))
    est = estimate_aoa_at_ris(z, 1, math.radians(0.01))
    assert abs(math.degrees(est[0].angle)) <= 0.01


def _oracle_spectrum_peaks(z, k, step_deg=0.001, window=(-10.0, 20.0)):
    n = z.shape[0]
    r = z @ z.conj().T / z.shape[1]
    w, v = np.linalg.eigh(r)
    en = v[:, : n - k]
    grid = np.radians(np.arange(window[0], window[1], step_deg))
    a = np.stack([steering(n, g) for g in grid], axis=1)
    p = 1.0 / np.sum(np.abs(en.conj().T @ a) ** 2, axis=0)
    idx = [i for i in range(1, len(p) - 1) if p[i] > p[i - 1] and p[i] >= p[i + 1]]
    idx = sorted(idx, key=lambda i: -p[i])[:k]
    return np.sort(grid[idx])


def test_two_targets_five_degrees_apart():
    scene = ris_scene([at_aoa(0.0), at_aoa(5.0)], n=64)
    z = build_temporal_snapshots(synthesize_ris_uplink(scene, "ris", "bs", ["t0", "t1"], make_schedule(64), 200, 20.0, seed=3))
    est = estimate_aoa_at_ris(z, 2, math.radians(0.01))
    got = np.array([e.angle for e in est])
    assert np.degrees(np.abs(got - np.radians([0.0, 5.0]))).max() <= 0.3
    oracle = _oracle_spectrum_peaks(z, 2)
    assert np.degrees(np.abs(got - oracle)).max() <= 0.01


def test_example4_aoas(example4):
    ris = example4.rises[0]
    ids = [t.id for t in example4.targets]
    z = build_temporal_snapshots(
        synthesize_ris_uplink(example4, ris.id, "bs1", ids, make_schedule(64), 200, 20.0, seed=0)
    )
    est = estimate_aoa_at_ris(z, 4, math.radians(0.01))
    assert np.degrees([e.angle for e in est]) == pytest.approx(EXAMPLE4_AOAS_DEG, abs=0.3)


def test_range_to_ris_examples():
    ris, bs = Position(0, 0), Position(100, 0)
    assert estimate_range_to_ris(1e-6, ris, bs) == pytest.approx(200.0, abs=1e-9)
    assert estimate_range_to_ris(100 / C, ris, bs) == 0.0
    with pytest.raises(ValueError):
        estimate_range_to_ris(99 / C, ris, bs)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 500), st.floats(-200, 200), st.floats(-200, 200))
def test_range_to_ris_exact(r, bx, by):
    hop = math.hypot(bx, by)
    assert estimate_range_to_ris((r + hop) / C, Position(0, 0), Position(bx, by)) == pytest.approx(r, abs=1e-9 * (1 + r + hop))


def test_localize_via_ris_examples():
    ris = Ris("r", Position(0.0, 0.0), 8)
    p = localize_via_ris(RisPolarFix(100.0, math.radians(30.0)), ris)
    assert (p.x, p.y) == pytest.approx((50.0, 86.6025404), abs=1e-6)
    q = localize_via_ris(RisPolarFix(42.0, 0.0), ris)
    assert (q.x, q.y) == pytest.approx((0.0, 42.0), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(-80, 80), st.floats(1, 100), st.floats(-50, 50), st.floats(-50, 50))
def test_polar_round_trip(orient, aoa_deg, r, rx, ry):
    ris = Ris("r", Position(rx, ry), 8, 0.5, orient)
    normal = ris.normal
    axis = ris.axis
    a = math.radians(aoa_deg)
    point = (rx + r * (math.cos(a) * normal[0] + math.sin(a) * axis[0]), ry + r * (math.cos(a) * normal[1] + math.sin(a) * axis[1]))
    back = localize_via_ris(fix_from_position(point, ris), ris)
    assert math.dist(back, point) <= 1e-9


def test_polar_fix_validation():
    with pytest.raises(ValueError):
        RisPolarFix(-1.0, 0.0)
    with pytest.raises(ValueError):
        RisPolarFix(1.0, 2.0)


@settings(max_examples=20, deadline=None)
@given(st.complex_numbers(min_magnitude=1e-2, max_magnitude=1e2))
def test_cascade_scale_invariance(scale):
    scene = ris_scene([at_aoa(-20.0), at_aoa(35.0)], n=16)
    ids = ["t0", "t1"]
    base = synthesize_ris_uplink(scene, "ris", "bs", ids, make_schedule(16), 60, 15.0, seed=2)
    # a common cascade scalar scales the whole observation, noise included
    scaled = RisObservationBlock(base.samples * scale, base.schedule, base.cascade_gains * scale, base.noise_power)
    a = estimate_aoa_at_ris(build_temporal_snapshots(base), 2, math.radians(0.01))
    b = estimate_aoa_at_ris(build_temporal_snapshots(scaled), 2, math.radians(0.01))
    assert [e.angle for e in a] == pytest.approx([e.angle for e in b], abs=1e-12)
    # noiseless: the reconstructed snapshots do not depend on the scalar at all
    clean = synthesize_ris_uplink(scene, "ris", "bs", ids, make_schedule(16), 10, None, seed=2)
    clean_scaled = synthesize_ris_uplink(scene, "ris", "bs", ids, make_schedule(16), 10, None, seed=2, cascade=clean.cascade_gains * scale)
    assert np.allclose(build_temporal_snapshots(clean), build_temporal_snapshots(clean_scaled), atol=1e-9)


def test_single_target_exact_noiseless():
    pt = at_aoa(23.0, 37.0)
    scene = ris_scene([pt], n=16)
    out = ris_assisted_localize(scene, "ris", "bs", ["t0"], RisConfig(num_snapshots=20, snr_db=None))
    assert len(out) == 1
    assert math.dist(out[0].position, pt) <= 0.05
    assert out[0].fix.range_to_ris == pytest.approx(37.0, abs=0.05)


def test_example4_end_to_end(example4):
    ids = [t.id for t in example4.targets]
    out = ris_assisted_localize(example4, "ris1", "bs1", ids, RisConfig(snr_db=None, num_snapshots=50))
    truths = sorted((t.position for t in example4.targets), key=lambda p: math.atan2(p[0], p[1]))
    for est, truth in zip(out, truths):
        assert math.dist(est.position, truth) <= 0.5


def test_permutation_invariance():
    pts = [at_aoa(-30.0, 20.0), at_aoa(10.0, 45.0), at_aoa(50.0, 30.0)]
    scene = ris_scene(pts, n=32)
    cfg = RisConfig(num_snapshots=100, snr_db=20.0, seed=5)
    a = ris_assisted_localize(scene, "ris", "bs", ["t0", "t1", "t2"], cfg)
    b = ris_assisted_localize(scene, "ris", "bs", ["t2", "t0", "t1"], cfg)
    # identical draws; only floating-point summation order may differ
    for x, y in zip(a, b):
        assert x.fix.range_to_ris == pytest.approx(y.fix.range_to_ris, abs=1e-12)
        assert x.fix.aoa_at_ris == pytest.approx(y.fix.aoa_at_ris, abs=1e-12)


def test_missing_los():
    scene = ris_scene([at_aoa(0.0), at_aoa(20.0)], n=8, los_targets=["t0"])
    with pytest.raises(MissingLosError):
        ris_assisted_localize(scene, "ris", "bs", ["t0", "t1"])
    with pytest.raises(MissingLosError):
        synthesize_ris_uplink(scene, "ris", "bs", ["t1"], make_schedule(8), 5, None)


def test_pseudospectrum_rows_normalized():
    grid = np.radians([-1.0, 0.0, 1.0])
    rows = pseudospectrum_rows(grid, np.array([1.0, 4.0, 2.0]))
    assert rows == [(pytest.approx(-1.0), 0.25), (pytest.approx(0.0), 1.0), (pytest.approx(1.0), 0.5)]
