"""Command line entry point: ``anchorsense <command> ...``.

Exit status is 0 on success, 1 when a canned example misses its expected
outcome, 2 on usage, scene or configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from collections import Counter
from dataclasses import replace

import numpy as np

from . import assoc, harness
from .ris_assist import build_temporal_snapshots, estimate_aoa_at_ris, make_schedule, pseudospectrum_rows, synthesize_ris_uplink
from .scene import MissingLosError, SceneError, distance, draw_reported_position, load_scene, los_visible
from .trilateration import feasibility_threshold
from .ue_assist import InsufficientAnchorsError, UeAssistConfig, ue_assisted_localize

EXIT_OK, EXIT_EXPECTATION, EXIT_USAGE = 0, 1, 2


def _cmd_example(args) -> int:
    report = harness.run_example(args.n, trials=args.trials)
    print(report)
    return EXIT_OK if report.passed else EXIT_EXPECTATION


def _cmd_montecarlo(args) -> int:
    cfg = harness.load_config(args.config)
    if args.timing:
        cfg = replace(cfg, record_runtime=True)
    if args.workers:
        cfg = replace(cfg, workers=args.workers)
    rows = harness.run_montecarlo(cfg, args.out)
    sys.stdout.write(harness.format_csv(rows))
    return EXIT_OK


def _cmd_associate(args) -> int:
    scene = load_scene(args.scene)
    profiles, positions = harness.noise_free_profiles(scene, shuffle_seed=args.shuffle)
    m, k = len(profiles), len(profiles[0].ranges)
    eps = args.epsilon if args.epsilon is not None else feasibility_threshold(0.0, m)
    if args.pruned:
        sols = assoc.solve_association_pruned(profiles, positions, eps)
    else:
        print(f"{assoc.hypothesis_count(m, k)} hypotheses")
        sols = assoc.solve_association(profiles, positions, eps)
    print(f"{len(sols)} feasible solution(s) at epsilon {eps:g} m^2")
    for s in sols:
        pts = "  ".join(f"({p.x:.6f}, {p.y:.6f})" for p in s.positions)
        print(f"  {s.hypothesis.assignment}  residue {s.total_residue:.3g}  {pts}")
    part = assoc.classify_ghosts(sols, [t.position for t in scene.targets])
    print("true detections: " + ("  ".join(f"({p.x:.4f}, {p.y:.4f})" for p in part.true_detections) or "none"))
    print("ghosts: " + ("  ".join(f"({p.x:.4f}, {p.y:.4f})" for p in part.ghosts) or "none"))
    return EXIT_OK


def _cmd_ue_select(args) -> int:
    scene = load_scene(args.scene)
    bs = args.bs or scene.base_stations[0].id
    target = args.target or scene.targets[0].id
    truth = scene.node(target).position
    removed, errors, failed = Counter(), 0, 0
    for trial in range(args.trials):
        rng = np.random.default_rng([args.seed, trial])
        ues = tuple(
            replace(u, reported_position=draw_reported_position(u.true_position, u.position_error_std, rng))
            for u in scene.user_equipments
        )
        trial_scene = replace(scene, user_equipments=ues)
        cfg = UeAssistConfig(delay_noise_std=args.delay_noise, selection=not args.no_selection, seed=args.seed * 1_000_003 + trial)
        try:
            result = ue_assisted_localize(trial_scene, bs, target, cfg)
        except InsufficientAnchorsError as exc:
            print(f"trial {trial}: {exc}")
            failed += 1
            continue
        err = distance(result.position, truth)
        errors += err > args.radius
        for uid, _, _ in result.anchor_set.removal_trace:
            removed[uid] += 1
        if args.trials <= 20:
            trace = ", ".join(f"{u} ({a:.3g} -> {b:.3g})" for u, a, b in result.anchor_set.removal_trace) or "none"
            print(f"trial {trial}: position ({result.position.x:.3f}, {result.position.y:.3f}) error {err:.3f} m; removed: {trace}")
    print(f"detection error probability {errors / args.trials:.4f} over {args.trials} trials ({failed} without enough anchors)")
    for ue in scene.user_equipments:
        print(f"  {ue.id}: reported-position std {ue.position_error_std:g} m, removed in {removed[ue.id]} trial(s)")
    return EXIT_OK


def _cmd_ris_music(args) -> int:
    scene = load_scene(args.scene)
    if not scene.rises or not scene.base_stations:
        raise SceneError("scene needs at least one RIS and one BS")
    ris = scene.node(args.ris) if args.ris else scene.rises[0]
    bs = args.bs or scene.base_stations[0].id
    targets = [t.id for t in scene.targets if los_visible(scene, t.id, ris.id)]
    if not targets:
        raise MissingLosError(f"no target has LOS to {ris.id!r}")
    schedule = make_schedule(ris.num_elements)
    snr = None if args.snr == "inf" else float(args.snr)
    block = synthesize_ris_uplink(scene, ris.id, bs, targets, schedule, args.snapshots, snr, args.seed)
    z = build_temporal_snapshots(block)
    est, grid, spectrum = estimate_aoa_at_ris(
        z, len(targets), math.radians(args.grid_step), ris.element_spacing, return_spectrum=True
    )
    for e in est:
        print(f"AOA {math.degrees(e.angle):.4f} deg")
    if args.spectrum_out:
        with open(args.spectrum_out, "w", newline="", encoding="ascii") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["angle_deg", "normalized_power"])
            for a, p in pseudospectrum_rows(grid, spectrum):
                w.writerow([repr(a), repr(p)])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anchorsense", description="Multi-anchor ISAC sensing simulations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("example", help="run a canned example (1-4)")
    p.add_argument("n", type=int, choices=(1, 2, 3, 4))
    p.add_argument("--trials", type=int, default=100, help="trials per point for example 3")
    p.set_defaults(func=_cmd_example)

    p = sub.add_parser("montecarlo", help="run a Monte-Carlo sweep and write CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--timing", action="store_true", help="record mean runtime (output no longer byte-reproducible)")
    p.add_argument("--workers", type=int, default=0, help="worker processes (overrides the config)")
    p.set_defaults(func=_cmd_montecarlo)

    p = sub.add_parser("associate", help="data association on a scene's exact ranges")
    p.add_argument("--scene", required=True)
    p.add_argument("--pruned", action="store_true", help="branch-and-bound instead of brute force")
    p.add_argument("--epsilon", type=float, default=None, help="feasibility threshold in m^2")
    p.add_argument("--shuffle", type=int, default=None, help="shuffle each profile with this seed")
    p.set_defaults(func=_cmd_associate)

    p = sub.add_parser("ue-select", help="UE-assisted localization with outlier-based UE selection")
    p.add_argument("--scene", required=True)
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--bs", default=None)
    p.add_argument("--target", default=None)
    p.add_argument("--delay-noise", type=float, default=harness.NoiseConfig.delay_noise_std, help="seconds")
    p.add_argument("--radius", type=float, default=1.0, help="detection radius in meters")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-selection", action="store_true", help="use every UE as an anchor")
    p.set_defaults(func=_cmd_ue_select)

    p = sub.add_parser("ris-music", help="temporal MUSIC through a RIS; dump the pseudospectrum")
    p.add_argument("--scene", required=True)
    p.add_argument("--spectrum-out", default=None)
    p.add_argument("--ris", default=None)
    p.add_argument("--bs", default=None)
    p.add_argument("--snr", default="20", help="dB per element, or 'inf' for noiseless")
    p.add_argument("--snapshots", type=int, default=200)
    p.add_argument("--grid-step", type=float, default=0.01, help="degrees")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_ris_music)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "trials", 1) is not None and getattr(args, "trials", 1) < 1:
        parser.error("--trials must be >= 1")
    try:
        return args.func(args)
    except (ValueError, OSError, np.linalg.LinAlgError) as exc:
        # scene, config and LOS errors are all ValueErrors
        print(f"anchorsense: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
