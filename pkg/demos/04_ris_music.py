"""
A RIS as a passive anchor
=========================

The RIS cannot sample its elements, but changing its reflection
coefficients slot by slot lets the BS undo the mixing and run MUSIC on
what the elements saw.
"""

import math

import numpy as np

from anchorsense.harness import EXAMPLE4_AOAS_DEG
from anchorsense.ris_assist import RisConfig, build_temporal_snapshots, estimate_aoa_at_ris, make_schedule, ris_assisted_localize, synthesize_ris_uplink
from anchorsense.scene import bundled_scene_path, load_scene

# %% 64 elements, four active targets
scene = load_scene(bundled_scene_path("example4"))
ris = scene.rises[0]
ids = [t.id for t in scene.targets]
schedule = make_schedule(ris.num_elements)
print("schedule condition number", np.linalg.cond(schedule.coefficients))

# %% BS samples, one per slot; invert the schedule and the known cascade
block = synthesize_ris_uplink(scene, ris.id, "bs1", ids, schedule, 200, 20.0, seed=0)
z = build_temporal_snapshots(block)
est, grid, spec = estimate_aoa_at_ris(z, 4, math.radians(0.01), return_spectrum=True)
for e, ref in zip(est, EXAMPLE4_AOAS_DEG):
    print(f"AOA {math.degrees(e.angle):.4f} deg (reference {ref})")

# %% Ranges from the delay difference, then positions in the RIS frame
for r in ris_assisted_localize(scene, ris.id, "bs1", ids, RisConfig()):
    print(f"range {r.fix.range_to_ris:.3f} m -> ({r.position.x:.3f}, {r.position.y:.3f})")
