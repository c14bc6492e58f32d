"""
UEs as anchors: timing offsets and bad position reports
=======================================================

UEs receive the BS's echoes and report bistatic delays, but their clocks
are offset and some report positions that are meters off.
"""

import math

import numpy as np

from anchorsense.harness import ExperimentConfig, ue_scene
from anchorsense.ue_assist import UeAssistConfig, calibrate_to_los, measure_los_delay, ue_assisted_localize

# %% One BS, one target, five accurate UEs and two with 10 m position errors
cfg = ExperimentConfig(experiment="ue_selection", num_accurate_ues=5, num_erroneous_ues=2)
scene, bad = ue_scene(cfg, np.random.default_rng(3))
print("erroneous:", sorted(bad))

# %% Timing offsets from the direct BS-UE path
for ue in scene.user_equipments[:3]:
    est = calibrate_to_los(scene, "bs", ue.id, measure_los_delay(scene, "bs", ue.id))
    print(ue.id, f"TO {ue.timing_offset * 1e9:.3f} ns, estimated {est * 1e9:.3f} ns")

# %% Localize with every UE, then with greedy leave-one-out selection
truth = scene.node("t").position
for selection in (False, True):
    res = ue_assisted_localize(scene, "bs", "t", UeAssistConfig(delay_noise_std=1e-10, selection=selection))
    print(f"selection={selection}: error {math.dist(res.position, truth):.3f} m")
    for uid, before, after in res.anchor_set.removal_trace:
        print(f"  removed {uid}: residue {before:.3g} -> {after:.3g} m^2")
