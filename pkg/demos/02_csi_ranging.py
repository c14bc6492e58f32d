"""
Ranges and angles from OFDM channel estimates
=============================================

A monostatic BS sees each target as one complex exponential across
subcarriers (delay), symbols (Doppler) and antennas (angle).
"""

import math

import numpy as np

from anchorsense.estimation import estimate_aoas, estimate_dopplers, estimate_ranges, music_spectrum
from anchorsense.scene import BaseStation, Position, RadioConfig, Scene, Target
from anchorsense.waveform import synthesize_csi

# %% A BS with 8 antennas and two moving targets
radio = RadioConfig(28e9, 4e8, 256, 256, 2.74e-6, noise_power=0.01)
bs = BaseStation("bs", Position(0.0, 0.0), 8)
targets = (Target("a", Position(20.0, 35.0), velocity=(30.0, 0.0)), Target("b", Position(-30.0, 25.0)))
los = frozenset(frozenset(("bs", t.id)) for t in targets)
scene = Scene(radio, (bs,), (), (), targets, los)
csi = synthesize_csi(scene, "bs", "bs", ["a", "b"], seed=0)
print("CSI tensor", csi.values.shape, "range resolution", radio.range_resolution, "m")

# %% Range: zero-padded periodogram over subcarriers
for est in estimate_ranges(csi, 2):
    print(f"range {est.range:.3f} m")
print("true", [round(math.hypot(*t.position), 3) for t in targets])

# %% Doppler: 2 v_radial / wavelength, resolved to 1 / (symbols * duration)
print("doppler resolution", round(1 / (radio.num_symbols * radio.symbol_duration), 1), "Hz")
print("doppler (Hz)", np.round(estimate_dopplers(csi, 2), 1))
v_radial = 30.0 * 20.0 / math.hypot(20.0, 35.0)
print("expected |doppler| of target a", round(2 * v_radial / radio.wavelength, 1), "Hz; target b is static")

# %% Angle
for est in estimate_aoas(csi, 2):
    print(f"AOA {math.degrees(est.angle):.2f} deg")

# %% The MUSIC pseudospectrum itself, on a coarse grid
grid = np.radians(np.arange(-90, 90.5, 0.5))
snaps = csi.values.reshape(csi.values.shape[0], -1)
spec = music_spectrum(snaps, 2, grid)
print("peak at", np.degrees(grid[np.argmax(spec)]), "deg")
