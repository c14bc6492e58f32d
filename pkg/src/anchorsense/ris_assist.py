"""RIS-assisted localization with the RIS as a passive anchor.

Active targets transmit; their signals reach the BS only through the RIS.
Changing the RIS reflection coefficients slot by slot turns the single BS
observation into a temporal vector that, after inverting the known schedule
and RIS->BS cascade, looks like the signal an N-element array at the RIS
would have received.  MUSIC on it gives the target AOAs at the RIS; delays
on the target-RIS-BS path minus the known RIS-BS delay give ranges.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .estimation import DEFAULT_GRID_STEP, AoaEstimate, estimate_ranges, music_doa
from .scene import SPEED_OF_LIGHT, Position, Ris, Scene, distance, require_los
from .waveform import CsiTensor, angle_from_broadside, ula_steering

MAX_CONDITION = 1e6
RANGE_TOLERANCE = 1e-6  # meters of slack for "path shorter than the RIS-BS hop"


class IllConditionedScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ReflectionSchedule:
    """Reflection coefficients ``coefficients[t, n]`` for slot t, element n.

    Entries must have unit modulus.  ``allow_off`` additionally admits
    exact zeros (element switched off), which selector-style schedules use.
    """

    coefficients: np.ndarray
    allow_off: bool = False

    def __post_init__(self):
        phi = np.asarray(self.coefficients, dtype=complex)
        object.__setattr__(self, "coefficients", phi)
        if phi.ndim != 2:
            raise ValueError(f"schedule must be 2-D, got shape {phi.shape}")
        t, n = phi.shape
        if t < n:
            raise ValueError(f"need at least as many slots as elements, got T={t} < N={n}")
        mag = np.abs(phi)
        ok = np.abs(mag - 1.0) <= 1e-12
        if self.allow_off:
            ok |= mag == 0
        if not np.all(ok):
            raise ValueError("reflection coefficients must have unit modulus")
        if np.linalg.matrix_rank(phi) < n:
            raise ValueError("schedule does not have full column rank")

    @property
    def num_slots(self) -> int:
        return self.coefficients.shape[0]

    @property
    def num_elements(self) -> int:
        return self.coefficients.shape[1]

    @classmethod
    def selector(cls, num_elements: int) -> ReflectionSchedule:
        """One element on per slot."""
        return cls(np.eye(num_elements, dtype=complex), allow_off=True)


@dataclass(frozen=True)
class RisObservationBlock:
    """BS samples ``samples[t, b]`` for slot t and snapshot b."""

    samples: np.ndarray
    schedule: ReflectionSchedule
    cascade_gains: np.ndarray
    noise_power: float = 0.0

    def __post_init__(self):
        y = np.asarray(self.samples, dtype=complex)
        c = np.asarray(self.cascade_gains, dtype=complex)
        object.__setattr__(self, "samples", y)
        object.__setattr__(self, "cascade_gains", c)
        if y.ndim != 2 or y.shape[0] != self.schedule.num_slots:
            raise ValueError(f"samples shape {y.shape} does not match {self.schedule.num_slots} slots")
        if c.shape != (self.schedule.num_elements,):
            raise ValueError(f"need {self.schedule.num_elements} cascade gains, got shape {c.shape}")
        if np.any(c == 0):
            raise ValueError("cascade gains must be nonzero")


@dataclass(frozen=True)
class RisPolarFix:
    range_to_ris: float
    aoa_at_ris: float

    def __post_init__(self):
        if not self.range_to_ris >= 0:
            raise ValueError(f"range must be >= 0, got {self.range_to_ris}")
        if not abs(self.aoa_at_ris) <= math.pi / 2 + 1e-12:
            raise ValueError(f"AOA must lie within +-90 degrees, got {math.degrees(self.aoa_at_ris)}")


def make_schedule(num_elements: int, num_slots: int | None = None) -> ReflectionSchedule:
    """First ``num_elements`` columns of a ``num_slots``-point DFT matrix."""
    num_slots = num_elements if num_slots is None else num_slots
    if num_elements < 1:
        raise ValueError("num_elements must be >= 1")
    if num_slots < num_elements:
        raise ValueError(f"need T >= N, got T={num_slots} < N={num_elements}")
    t = np.arange(num_slots)[:, None]
    n = np.arange(num_elements)[None, :]
    return ReflectionSchedule(np.exp(-2j * np.pi * t * n / num_slots))


# --------------------------------------------------------------------------
# geometry


def element_positions(ris: Ris, wavelength: float) -> np.ndarray:
    """Element n sits ``n * spacing`` wavelengths along the axis from the RIS position."""
    n = np.arange(ris.num_elements)[:, None]
    return np.asarray(ris.position, dtype=float) + n * ris.element_spacing * wavelength * np.asarray(ris.axis)


def cascade_gains(scene: Scene, ris_id: str, bs_id: str) -> np.ndarray:
    """Known per-element RIS->BS channel, unit modulus with phase from the path length."""
    require_los(scene, ris_id, bs_id)
    ris = scene.node(ris_id)
    lam = scene.radio.wavelength
    d = np.linalg.norm(element_positions(ris, lam) - np.asarray(scene.known_position(bs_id)), axis=1)
    return np.exp(-2j * np.pi * d / lam)


def aoa_at_ris(ris: Ris, point) -> float:
    return angle_from_broadside(ris.position, ris.orientation, point)


def _target_geometry(scene, ris_id, target_ids):
    ris = scene.node(ris_id)
    lam = scene.radio.wavelength
    angles, dists = [], []
    for tid in target_ids:
        require_los(scene, tid, ris_id)
        p = scene.node(tid).position
        angles.append(aoa_at_ris(ris, p))
        dists.append(distance(p, ris.position))
    return ris, lam, np.array(angles), np.array(dists)


def _pilot_rng(seed, target_id):
    # keyed by target id so that reordering targets leaves every draw unchanged
    return np.random.default_rng([seed, 1, zlib.crc32(str(target_id).encode())])


def pilot_symbols(target_ids, num_snapshots: int, seed) -> np.ndarray:
    """I.i.d. unit-power complex Gaussian pilots, shape (targets, snapshots)."""
    out = np.zeros((len(target_ids), num_snapshots), dtype=complex)
    for k, tid in enumerate(target_ids):
        rng = _pilot_rng(seed, tid)
        out[k] = (rng.standard_normal(num_snapshots) + 1j * rng.standard_normal(num_snapshots)) / math.sqrt(2.0)
    return out


def ris_element_signals(scene: Scene, ris_id: str, target_ids, symbols: np.ndarray) -> np.ndarray:
    """What each RIS element receives: ``sum_k alpha_k a(theta_k) s_k[b]``."""
    ris, lam, angles, dists = _target_geometry(scene, ris_id, list(target_ids))
    if len(angles) == 0:
        return np.zeros((ris.num_elements, symbols.shape[1]), dtype=complex)
    a = ula_steering(ris.num_elements, angles, ris.element_spacing)
    alpha = np.exp(-2j * np.pi * dists / lam)
    return a @ (alpha[:, None] * symbols)


def noise_power_for(schedule: ReflectionSchedule, snr_db: float) -> float:
    """BS noise power giving ``snr_db`` per element after schedule inversion.

    SNR is that of one unit-gain target at one RIS element in the
    reconstructed snapshots.
    """
    phi = schedule.coefficients
    gain = float(np.mean(np.real(np.diag(np.linalg.inv(phi.conj().T @ phi)))))
    return 10.0 ** (-snr_db / 10.0) / gain


def _complex_noise(rng, shape, power):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * math.sqrt(power / 2.0)


def synthesize_ris_uplink(
    scene: Scene,
    ris_id: str,
    bs_id: str,
    target_ids,
    schedule: ReflectionSchedule,
    num_snapshots: int,
    snr_db: float | None,
    seed=0,
    cascade: np.ndarray | None = None,
) -> RisObservationBlock:
    """BS samples ``y[t, b] = sum_n c_n phi[t, n] x_n[b] + noise``.

    ``snr_db=None`` means noiseless.  ``cascade`` overrides the geometric
    RIS->BS gains (the estimator is told the same values).
    """
    target_ids = list(target_ids)
    ris = scene.node(ris_id)
    if schedule.num_elements != ris.num_elements:
        raise ValueError(f"schedule has {schedule.num_elements} elements, RIS has {ris.num_elements}")
    c = cascade_gains(scene, ris_id, bs_id) if cascade is None else np.asarray(cascade, dtype=complex)
    x = ris_element_signals(scene, ris_id, target_ids, pilot_symbols(target_ids, num_snapshots, seed))
    y = schedule.coefficients @ (c[:, None] * x)
    power = 0.0
    if snr_db is not None:
        power = noise_power_for(schedule, snr_db)
        y = y + _complex_noise(np.random.default_rng([seed, 2]), y.shape, power)
    return RisObservationBlock(y, schedule, c, power)


def build_temporal_snapshots(block: RisObservationBlock) -> np.ndarray:
    """Element-domain snapshots ``Z = diag(c)^-1 pinv(phi) y``, shape (N, B)."""
    phi = block.schedule.coefficients
    cond = np.linalg.cond(phi)
    if not cond <= MAX_CONDITION:
        raise IllConditionedScheduleError(f"schedule condition number {cond:.3g} exceeds {MAX_CONDITION:g}")
    return np.linalg.pinv(phi) @ block.samples / block.cascade_gains[:, None]


def estimate_aoa_at_ris(
    snapshots: np.ndarray,
    num_targets: int,
    grid_step: float = DEFAULT_GRID_STEP,
    spacing: float = 0.5,
    return_spectrum: bool = False,
):
    """MUSIC over the RIS manifold; angles sorted ascending."""
    return music_doa(snapshots, num_targets, grid_step, spacing, return_spectrum)


def estimate_range_to_ris(total_path_delay: float, ris_position, bs_position) -> float:
    """Target-RIS distance from the target-RIS-BS delay and the known RIS-BS hop."""
    hop = distance(ris_position, bs_position)
    r = SPEED_OF_LIGHT * total_path_delay - hop
    if r < -RANGE_TOLERANCE:
        raise ValueError(f"path delay implies a negative target-RIS range ({r:.6g} m)")
    return max(r, 0.0)


def localize_via_ris(fix: RisPolarFix, ris: Ris) -> Position:
    """Polar (range, AOA from broadside) in the RIS frame to global coordinates."""
    s, c = math.sin(fix.aoa_at_ris), math.cos(fix.aoa_at_ris)
    ax, ay = ris.axis
    nx, ny = ris.normal
    r = fix.range_to_ris
    return Position(float(ris.position[0] + r * (s * ax + c * nx)), float(ris.position[1] + r * (s * ay + c * ny)))


def fix_from_position(point, ris: Ris) -> RisPolarFix:
    return RisPolarFix(distance(point, ris.position), aoa_at_ris(ris, point))


# --------------------------------------------------------------------------
# wideband ranging through the RIS


def synthesize_ris_wideband(
    scene: Scene,
    ris_id: str,
    bs_id: str,
    target_ids,
    schedule: ReflectionSchedule,
    snr_db: float | None,
    seed=0,
) -> np.ndarray:
    """OFDM pilot seen at the BS per slot and subcarrier, shape (T, subcarriers).

    Each target sends a unit pilot on every subcarrier, time-aligned with
    the BS; subcarrier n picks up the phase ``exp(-j 2 pi n df tau_k)`` of
    the whole target-RIS-BS delay.
    """
    target_ids = list(target_ids)
    ris, lam, angles, dists = _target_geometry(scene, ris_id, target_ids)
    radio = scene.radio
    c = cascade_gains(scene, ris_id, bs_id)
    hop = distance(ris.position, scene.known_position(bs_id))
    n = np.arange(radio.num_subcarriers)
    x = np.zeros((ris.num_elements, radio.num_subcarriers), dtype=complex)
    if target_ids:
        a = ula_steering(ris.num_elements, angles, ris.element_spacing)
        alpha = np.exp(-2j * np.pi * dists / lam)
        tau = (dists + hop) / SPEED_OF_LIGHT
        freq = np.exp(-2j * np.pi * radio.subcarrier_spacing * np.outer(tau, n))
        x = a @ (alpha[:, None] * freq)
    y = schedule.coefficients @ (c[:, None] * x)
    if snr_db is not None:
        y = y + _complex_noise(np.random.default_rng([seed, 3]), y.shape, noise_power_for(schedule, snr_db))
    return y


def separate_targets(element_signals: np.ndarray, angles, spacing: float = 0.5) -> np.ndarray:
    """Zero-forcing beams towards ``angles``; row k keeps only target k."""
    a = ula_steering(element_signals.shape[0], np.asarray(angles), spacing)
    return np.linalg.pinv(a) @ element_signals


@dataclass
class RisConfig:
    num_snapshots: int = 200
    snr_db: float | None = 20.0  # None: noiseless
    grid_step: float = DEFAULT_GRID_STEP
    num_slots: int | None = None  # default: one slot per element
    seed: int = 0


@dataclass(frozen=True)
class RisLocalization:
    position: Position
    fix: RisPolarFix
    aoa: AoaEstimate
    extras: dict = field(default_factory=dict)


def ris_assisted_localize(scene: Scene, ris_id: str, bs_id: str, target_ids, config: RisConfig | None = None):
    """AOAs by temporal MUSIC, ranges by delay difference, positions in the RIS frame.

    Each AOA is paired with a range by steering a zero-forcing beam at it
    and ranging the separated wideband response.  Results are sorted by AOA.
    """
    config = config or RisConfig()
    target_ids = list(target_ids)
    k = len(target_ids)
    if k < 1:
        raise ValueError("need at least one target")
    ris = scene.node(ris_id)
    if not isinstance(ris, Ris):
        raise ValueError(f"{ris_id!r} is not a RIS")
    require_los(scene, ris_id, bs_id)
    for tid in target_ids:
        require_los(scene, tid, ris_id)
    schedule = make_schedule(ris.num_elements, config.num_slots)

    block = synthesize_ris_uplink(scene, ris_id, bs_id, target_ids, schedule, config.num_snapshots, config.snr_db, config.seed)
    z = build_temporal_snapshots(block)
    aoas = estimate_aoa_at_ris(z, k, config.grid_step, ris.element_spacing)
    if aoas.shortfall:
        raise ValueError(f"only {len(aoas)} of {k} AOAs resolvable")

    wide = synthesize_ris_wideband(scene, ris_id, bs_id, target_ids, schedule, config.snr_db, config.seed)
    zw = np.linalg.pinv(schedule.coefficients) @ wide / block.cascade_gains[:, None]
    beams = separate_targets(zw, [e.angle for e in aoas], ris.element_spacing)
    radio1 = scene.radio.replace(num_symbols=1)
    hop_pos = scene.known_position(bs_id)

    out = []
    for est, beam in zip(aoas, beams):
        ranged = estimate_ranges(CsiTensor(beam[None, :, None], radio1), 1, monostatic=False)
        if ranged.shortfall:
            raise ValueError("target range unresolvable")
        delay = ranged[0].range / SPEED_OF_LIGHT
        fix = RisPolarFix(estimate_range_to_ris(delay, ris.position, hop_pos), est.angle)
        out.append(RisLocalization(localize_via_ris(fix, ris), fix, est))
    return out


def pseudospectrum_rows(grid: np.ndarray, spectrum: np.ndarray):
    """(angle in degrees, power normalized to a unit peak) pairs."""
    norm = spectrum / np.max(spectrum)
    return [(math.degrees(a), float(p)) for a, p in zip(grid, norm)]
