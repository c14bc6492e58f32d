"""Range, angle and Doppler extraction from CSI tensors.

Range and Doppler come from zero-padded periodograms over the subcarrier
and symbol axes (noncoherent power averaging over the remaining axes).
Angles come from spatial MUSIC on the antenna axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene import SPEED_OF_LIGHT
from .waveform import CsiTensor, ula_steering

ZERO_PAD = 8
DEFAULT_GRID_STEP = math.radians(0.01)


@dataclass(frozen=True)
class RangeEstimate:
    range: float
    peak_power: float


@dataclass(frozen=True)
class AoaEstimate:
    angle: float
    pseudospectrum_peak: float


class Estimates(list):
    """Sorted list of estimates; ``shortfall`` counts requested peaks not found."""

    shortfall: int = 0

    def __init__(self, items=(), shortfall: int = 0):
        super().__init__(items)
        self.shortfall = shortfall


def pick_peaks(spectrum: np.ndarray, count: int, min_separation: int = 1, circular: bool = False) -> list[int]:
    """Indices of the ``count`` strongest local maxima.

    Maxima closer than ``min_separation`` samples to an already accepted,
    stronger one are merged into it.  Ties go to the higher power, then the
    lower index.
    """
    p = np.asarray(spectrum, dtype=float)
    n = p.size
    if circular:
        left, right = np.roll(p, 1), np.roll(p, -1)
    else:
        left = np.concatenate(([-np.inf], p[:-1]))
        right = np.concatenate((p[1:], [-np.inf]))
    # ">" on the left side keeps a single index per flat top
    candidates = np.flatnonzero((p > left) & (p >= right))
    order = sorted(candidates, key=lambda i: (-p[i], i))
    chosen: list[int] = []
    for i in order:
        if len(chosen) == count:
            break
        if circular:
            close = any(min(abs(i - j), n - abs(i - j)) < min_separation for j in chosen)
        else:
            close = any(abs(i - j) < min_separation for j in chosen)
        if not close:
            chosen.append(int(i))
    return chosen


def parabolic_offset(y_left: float, y_mid: float, y_right: float) -> float:
    """Vertex offset, in samples, of the parabola through three points."""
    denom = y_left - 2.0 * y_mid + y_right
    if denom >= 0 or not np.isfinite(denom):
        return 0.0
    return float(np.clip(0.5 * (y_left - y_right) / denom, -0.5, 0.5))


def delay_profile(csi: CsiTensor, pad: int = ZERO_PAD) -> tuple[np.ndarray, np.ndarray]:
    """Delay axis (seconds) and averaged power of the subcarrier-axis IDFT."""
    n_sc = csi.config.num_subcarriers
    n_fft = pad * n_sc
    # H ~ exp(-j 2 pi n df tau): the inverse DFT peaks at bin tau * df * n_fft
    spec = np.fft.ifft(csi.values, n=n_fft, axis=1) * n_fft / n_sc
    power = np.mean(np.abs(spec) ** 2, axis=(0, 2))
    delays = np.arange(n_fft) / (n_fft * csi.config.subcarrier_spacing)
    return delays, power


def estimate_ranges(
    csi: CsiTensor,
    num_targets: int,
    refine: bool = True,
    monostatic: bool = True,
    floor_db: float | None = None,
) -> Estimates:
    """The ``num_targets`` strongest range peaks, sorted by range.

    Monostatic ranges are half the round-trip path length; with
    ``monostatic=False`` the total path length is returned.  Peaks more
    than ``floor_db`` below the strongest one are discarded (and counted
    in ``shortfall``), which keeps sidelobes of merged targets out.
    """
    if num_targets < 1:
        raise ValueError("num_targets must be >= 1")
    n_sc = csi.config.num_subcarriers
    if num_targets >= n_sc / 2:
        raise ValueError(f"num_targets={num_targets} is not below num_subcarriers/2")
    delays, power = delay_profile(csi)
    n_fft = power.size
    step = delays[1]
    peaks = pick_peaks(power, num_targets, min_separation=ZERO_PAD, circular=True)
    if floor_db is not None and peaks:
        floor = power[peaks[0]] * 10.0 ** (-floor_db / 10.0)
        peaks = [k for k in peaks if power[k] >= floor]
    amp = np.sqrt(power)
    scale = SPEED_OF_LIGHT / (2.0 if monostatic else 1.0)
    out = []
    for k in peaks:
        offset = 0.0
        if refine:
            offset = parabolic_offset(amp[(k - 1) % n_fft], amp[k], amp[(k + 1) % n_fft])
        tau = (k + offset) * step
        if tau > delays[-1] + step / 2:
            tau -= n_fft * step
        out.append(RangeEstimate(max(0.0, tau * scale), float(power[k])))
    out.sort(key=lambda e: e.range)
    return Estimates(out, shortfall=num_targets - len(out))


def wrap_doppler(doppler: float, symbol_duration: float) -> float:
    """Alias of a Doppler shift into the unambiguous band [-1/2T, 1/2T)."""
    fs = 1.0 / symbol_duration
    return (doppler + fs / 2.0) % fs - fs / 2.0


def estimate_dopplers(csi: CsiTensor, num_targets: int, refine: bool = True) -> list[float]:
    """Doppler peaks (Hz) from the symbol-axis periodogram, sorted ascending."""
    n_sym = csi.config.num_symbols
    if num_targets < 1 or n_sym < 2 * num_targets:
        raise ValueError(f"need num_symbols >= 2K, got {n_sym} symbols for K={num_targets}")
    n_fft = ZERO_PAD * n_sym
    spec = np.fft.fft(csi.values, n=n_fft, axis=2)
    power = np.mean(np.abs(spec) ** 2, axis=(0, 1))
    freqs = np.fft.fftfreq(n_fft, d=csi.config.symbol_duration)
    peaks = pick_peaks(power, num_targets, min_separation=ZERO_PAD, circular=True)
    if len(peaks) < num_targets:
        raise ValueError(f"only {len(peaks)} Doppler peaks resolvable, {num_targets} requested")
    amp = np.sqrt(power)
    df = freqs[1]
    out = []
    for k in peaks:
        offset = parabolic_offset(amp[k - 1], amp[k], amp[(k + 1) % n_fft]) if refine else 0.0
        out.append(wrap_doppler(freqs[k] + offset * df, csi.config.symbol_duration))
    return sorted(out)


# --------------------------------------------------------------------------
# MUSIC


def sample_covariance(snapshots: np.ndarray) -> np.ndarray:
    x = np.asarray(snapshots)
    return x @ x.conj().T / x.shape[1]


def noise_subspace(covariance: np.ndarray, num_sources: int) -> tuple[np.ndarray, np.ndarray]:
    """(signal subspace, noise subspace) from the eigendecomposition."""
    eigval, eigvec = np.linalg.eigh(covariance)
    order = np.argsort(eigval)[::-1]
    eigval, eigvec = eigval[order], eigvec[:, order]
    if eigval[0] <= 0 or eigval[num_sources - 1] <= 1e-10 * eigval[0]:
        raise np.linalg.LinAlgError(
            f"covariance has fewer than {num_sources} significant eigenvalues; sources are coherent or missing"
        )
    return eigvec[:, :num_sources], eigvec[:, num_sources:]


def music_spectrum(snapshots: np.ndarray, num_sources: int, angles: np.ndarray, spacing: float = 0.5) -> np.ndarray:
    """MUSIC pseudospectrum ``1 / ||E_n^H a||^2`` with unit-norm steering vectors."""
    m = snapshots.shape[0]
    es, _ = noise_subspace(sample_covariance(snapshots), num_sources)
    # ||E_n^H a||^2 = ||a||^2 - ||E_s^H a||^2 for orthonormal [E_s E_n]
    a = ula_steering(m, angles, spacing) / math.sqrt(m)
    proj = np.sum(np.abs(es.conj().T @ a) ** 2, axis=0)
    return 1.0 / np.maximum(1.0 - proj, 1e-300)


def angle_grid(grid_step: float) -> np.ndarray:
    n = int(round(math.pi / grid_step))
    return np.linspace(-math.pi / 2, math.pi / 2, n + 1)


def music_doa(
    snapshots: np.ndarray,
    num_sources: int,
    grid_step: float = DEFAULT_GRID_STEP,
    spacing: float = 0.5,
    return_spectrum: bool = False,
):
    """Angle estimates from a snapshot matrix (elements x snapshots)."""
    x = np.asarray(snapshots)
    m, s = x.shape
    if not 1 <= num_sources < m:
        raise ValueError(f"need 1 <= K < number of elements ({m}), got K={num_sources}")
    if s < 2 * num_sources:
        raise ValueError(f"need at least 2K={2 * num_sources} snapshots, got {s}")
    grid = angle_grid(grid_step)
    spectrum = music_spectrum(x, num_sources, grid, spacing)
    log_spec = np.log(spectrum)
    peaks = pick_peaks(log_spec, num_sources)
    out = []
    for k in peaks:
        angle = grid[k]
        if 0 < k < grid.size - 1:
            angle += parabolic_offset(log_spec[k - 1], log_spec[k], log_spec[k + 1]) * (grid[1] - grid[0])
        out.append(AoaEstimate(float(np.clip(angle, -math.pi / 2, math.pi / 2)), float(spectrum[k])))
    out.sort(key=lambda e: e.angle)
    result = Estimates(out, shortfall=num_sources - len(out))
    if return_spectrum:
        return result, grid, spectrum
    return result


def estimate_aoas(csi: CsiTensor, num_sources: int, grid_step: float = DEFAULT_GRID_STEP) -> Estimates:
    """Spatial MUSIC over the receive antennas (half-wavelength ULA)."""
    return music_doa(csi.snapshots, num_sources, grid_step)
