"""
Ghost targets in networked sensing
==================================

Three base stations each measure two unlabeled ranges.  Every way of
matching measurements to targets is an association hypothesis; only
geometrically consistent ones survive trilateration.
"""

import numpy as np

from anchorsense import assoc
from anchorsense.harness import noise_free_profiles
from anchorsense.scene import bundled_scene_path, load_scene
from anchorsense.trilateration import feasibility_threshold

# %% The first scene: targets at (30, 30) and (-30, -30)
scene = load_scene(bundled_scene_path("example1"))
profiles, positions = noise_free_profiles(scene)
for p in profiles:
    print(p.bs_id, "squared ranges", np.round(np.square(p.ranges), 6))

# %% Brute force over (K!)^(M-1) hypotheses
eps = feasibility_threshold(0.0, len(profiles))
solutions = assoc.solve_association(profiles, positions, eps)
for s in solutions:
    print(s.hypothesis.assignment, [(round(p.x, 6), round(p.y, 6)) for p in s.positions])

# two hypotheses fit exactly; one of them places targets where there are none
part = assoc.classify_ghosts(solutions, [t.position for t in scene.targets])
print("ghosts:", [(round(p.x, 6), round(p.y, 6)) for p in part.ghosts])

# %% Move one target to (30, 20): the mirrored solution disappears
scene2 = load_scene(bundled_scene_path("example2"))
profiles2, positions2 = noise_free_profiles(scene2)
print(len(assoc.solve_association(profiles2, positions2, eps)), "feasible solution")

# %% The pruned search returns the same set with far fewer trilaterations
rng = np.random.default_rng(1)
bs = rng.uniform(-50, 50, (5, 2))
targets = rng.uniform(-50, 50, (4, 2))
d = np.linalg.norm(bs[:, None] - targets[None], axis=2)
noisy = [assoc.DistanceProfile(f"bs{i}", rng.permutation(d[i] + rng.normal(0, 0.05, 4))) for i in range(5)]
pruned = assoc.solve_association_pruned(noisy, [tuple(b) for b in bs], feasibility_threshold(0.05, 5))
print(assoc.hypothesis_count(5, 4), "hypotheses,", len(pruned), "feasible")
