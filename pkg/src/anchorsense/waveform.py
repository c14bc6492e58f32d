"""Frequency-domain CSI synthesis for monostatic and bistatic target paths."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import SPEED_OF_LIGHT, BaseStation, RadioConfig, Ris, Scene, UserEquipment, require_los


@dataclass(frozen=True)
class PathParams:
    delay: float  # seconds
    aoa: float  # radians from the receive array broadside
    doppler: float  # Hz
    complex_gain: complex


@dataclass
class CsiTensor:
    """Complex channel observations indexed ``[antenna, subcarrier, symbol]``."""

    values: np.ndarray
    config: RadioConfig

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.ndim != 3:
            raise ValueError(f"CSI tensor must be 3-D, got shape {self.values.shape}")
        _, n_sc, n_sym = self.values.shape
        if n_sc != self.config.num_subcarriers or n_sym != self.config.num_symbols:
            raise ValueError(
                f"CSI shape {self.values.shape} does not match radio config "
                f"({self.config.num_subcarriers} subcarriers, {self.config.num_symbols} symbols)"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("CSI tensor has non-finite entries")

    @property
    def num_antennas(self) -> int:
        return self.values.shape[0]

    @property
    def snapshots(self) -> np.ndarray:
        """Spatial snapshots, one column per (subcarrier, symbol) slice."""
        return self.values.reshape(self.num_antennas, -1)


def array_orientation(node) -> float:
    if isinstance(node, BaseStation):
        return node.array_orientation
    if isinstance(node, Ris):
        return node.orientation
    return 0.0


def angle_from_broadside(origin, orientation: float, point) -> float:
    """Angle of ``point`` seen from a linear array at ``origin``.

    Measured from broadside towards the array axis.  A linear array cannot
    tell front from back, so points behind the array fold onto the front
    half-plane and the result always lies in [-pi/2, pi/2].
    """
    dx, dy = point[0] - origin[0], point[1] - origin[1]
    along = dx * math.cos(orientation) + dy * math.sin(orientation)
    across = -dx * math.sin(orientation) + dy * math.cos(orientation)
    return math.atan2(along, abs(across))


def ula_steering(num_elements: int, angles, spacing: float = 0.5) -> np.ndarray:
    """ULA manifold ``exp(j 2 pi spacing n sin(theta))``, shape (elements, angles)."""
    n = np.arange(num_elements)[:, None]
    return np.exp(2j * np.pi * spacing * n * np.sin(np.atleast_1d(angles))[None, :])


def _num_rx_antennas(node) -> int:
    if isinstance(node, BaseStation):
        return node.num_antennas
    if isinstance(node, Ris):
        return node.num_elements
    return 1


def path_params_for(scene: Scene, tx: str, rx: str, target: str) -> PathParams:
    require_los(scene, tx, target)
    if rx != tx:
        require_los(scene, target, rx)
    p_tx = np.asarray(scene.true_position(tx), dtype=float)
    p_rx = np.asarray(scene.true_position(rx), dtype=float)
    tgt = scene.node(target)
    p_t = np.asarray(tgt.position, dtype=float)
    v = np.asarray(tgt.velocity, dtype=float)

    d_tx = np.linalg.norm(p_t - p_tx)
    d_rx = np.linalg.norm(p_t - p_rx)
    delay = (d_tx + d_rx) / SPEED_OF_LIGHT

    # d(path length)/dt; approaching targets shorten the path -> positive Doppler
    rate = 0.0
    for d, p in ((d_tx, p_tx), (d_rx, p_rx)):
        if d > 0:
            rate += float(v @ (p_t - p)) / d
    doppler = -rate * scene.radio.carrier_frequency / SPEED_OF_LIGHT

    aoa = angle_from_broadside(p_rx, array_orientation(scene.node(rx)), p_t)
    return PathParams(delay, aoa, doppler, scene.reflection_gain(target, tx, rx))


def csi_from_paths(paths, num_antennas: int, radio: RadioConfig, noise_power: float, seed) -> np.ndarray:
    """Sum of path exponentials plus circular Gaussian noise.

    The noise realization depends only on ``seed`` and the tensor shape, so
    the same seed yields the same noise whatever the set of paths.
    """
    n_sc, n_sym = radio.num_subcarriers, radio.num_symbols
    shape = (num_antennas, n_sc, n_sym)
    rng = np.random.default_rng(seed)
    noise = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * math.sqrt(noise_power / 2.0)
    values = np.zeros(shape, dtype=complex)
    m = np.arange(num_antennas)
    n = np.arange(n_sc)
    ell = np.arange(n_sym)
    for p in paths:
        spatial = np.exp(1j * np.pi * m * math.sin(p.aoa))
        freq = np.exp(-2j * np.pi * n * radio.subcarrier_spacing * p.delay)
        slow = np.exp(2j * np.pi * p.doppler * ell * radio.symbol_duration)
        values += p.complex_gain * spatial[:, None, None] * freq[None, :, None] * slow[None, None, :]
    return values + noise


def synthesize_csi(
    scene: Scene,
    tx: str,
    rx: str,
    targets,
    noise_power: float | None = None,
    seed: int = 0,
) -> CsiTensor:
    if noise_power is None:
        noise_power = scene.radio.noise_power
    paths = [path_params_for(scene, tx, rx, t) for t in targets]
    n_ant = _num_rx_antennas(scene.node(rx))
    return CsiTensor(csi_from_paths(paths, n_ant, scene.radio, noise_power, seed), scene.radio)


def write_csi(csi: CsiTensor, path) -> None:
    """Debug dump: int32 LE dims header then complex64 LE values (C order)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3i", *csi.values.shape))
        fh.write(csi.values.astype("<c8").tobytes(order="C"))


def read_csi(path, config: RadioConfig) -> CsiTensor:
    raw = Path(path).read_bytes()
    dims = struct.unpack("<3i", raw[:12])
    values = np.frombuffer(raw[12:], dtype="<c8").reshape(dims)
    return CsiTensor(values.astype(complex), config)
