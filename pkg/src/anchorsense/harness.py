"""Monte-Carlo experiments, canned examples and CSV output.

Every trial draws from its own generator ``default_rng([seed, trial])``,
so rows for different sweep values share geometry and noise draws
(common random numbers) and adding trials never changes earlier ones.

Noise defaults here are modelling choices, picked so that the
experiments have something to resolve and are documented in the README.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import assoc
from .estimation import estimate_ranges
from .ris_assist import RisConfig, ris_assisted_localize
from .scene import (
    SPEED_OF_LIGHT,
    BaseStation,
    Position,
    RadioConfig,
    Scene,
    Target,
    UserEquipment,
    bundled_scene_path,
    distance,
    load_scene,
    los_visible,
)
from .trilateration import feasibility_threshold
from .ue_assist import UeAssistConfig, ue_assisted_localize
from .waveform import synthesize_csi

CSV_HEADER = ("sweep", "det_err_prob", "ghost_rate", "mean_runtime_s")
SWEEP_VARIABLES = ("bandwidth", "num_targets", "num_erroneous_ues")
EXAMPLE4_AOAS_DEG = (12.6728, 27.8523, 53.8847, 75.7906)
CSI_PEAK_FLOOR_DB = 10.0  # below the -13 dB first sidelobe of a rectangular window


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class NoiseConfig:
    range_std: float | None = None  # fast mode, meters; None: range resolution / 6
    snr_db: float = 10.0  # CSI mode, per path and sample
    delay_noise_std: float = 1e-10  # UE experiments, seconds
    accurate_ue_std: float = 0.1  # meters
    erroneous_ue_std: float = 10.0  # meters
    max_timing_offset: float = 1e-6  # UE clocks, uniform in [0, max)


@dataclass
class ExperimentConfig:
    experiment: str = "networked"  # networked | ue_selection
    mode: str = "csi"  # networked only: csi | fast
    scene: str | None = None  # fixes the anchors; targets are still drawn
    region: tuple[float, float, float, float] = (-50.0, 50.0, -50.0, 50.0)
    num_bs: int = 5
    num_targets: int = 3
    num_accurate_ues: int = 5
    num_erroneous_ues: int = 1
    bandwidth: float = 4e8
    carrier_frequency: float = 28e9
    num_subcarriers: int = 1024
    num_symbols: int = 4
    num_antennas: int = 4
    sweep_variable: str = "bandwidth"
    sweep_values: tuple = (1e8, 2e8, 3e8, 4e8)
    trials: int = 1000
    seed: int = 0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    detection_radius: float = 1.0
    selection: bool = True
    record_runtime: bool = False  # off keeps CSV output byte-reproducible
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = _build(NoiseConfig, self.noise, "noise")
        self.region = tuple(float(v) for v in self.region)
        self.sweep_values = tuple(self.sweep_values)
        validate_config(self)

    def with_value(self, value) -> ExperimentConfig:
        """Copy with the sweep variable set to ``value``."""
        data = asdict(self)
        data[self.sweep_variable] = value
        return ExperimentConfig(**data)


def _build(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return cls(**data)


def validate_config(cfg: ExperimentConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.experiment in ("networked", "ue_selection"), f"experiment: unknown value {cfg.experiment!r}")
    need(cfg.mode in ("fast", "csi"), f"mode: unknown value {cfg.mode!r}")
    need(isinstance(cfg.trials, int) and cfg.trials >= 1, f"trials: must be a positive integer, got {cfg.trials!r}")
    need(isinstance(cfg.seed, int) and cfg.seed >= 0, f"seed: must be an integer >= 0, got {cfg.seed!r}")
    need(cfg.sweep_variable in SWEEP_VARIABLES, f"sweep_variable: must be one of {SWEEP_VARIABLES}")
    need(len(cfg.sweep_values) > 0, "sweep_values: must be non-empty")
    need(len(cfg.region) == 4 and cfg.region[0] < cfg.region[1] and cfg.region[2] < cfg.region[3], "region: need [xmin, xmax, ymin, ymax]")
    need(cfg.num_bs >= 3, "num_bs: need at least 3")
    need(cfg.num_targets >= 1, "num_targets: need at least 1")
    need(cfg.num_accurate_ues + cfg.num_erroneous_ues >= 3, "UE counts: need at least 3 UEs")
    need(cfg.num_erroneous_ues >= 0 and cfg.num_accurate_ues >= 0, "UE counts: must be >= 0")
    need(cfg.bandwidth > 0, "bandwidth: must be > 0")
    need(cfg.detection_radius > 0, "detection_radius: must be > 0")
    need(cfg.workers >= 1, "workers: must be >= 1")
    if cfg.sweep_variable == "bandwidth":
        need(all(v > 0 for v in cfg.sweep_values), "sweep_values: bandwidths must be > 0")
    else:
        need(all(isinstance(v, int) and v >= 0 for v in cfg.sweep_values), "sweep_values: counts must be integers >= 0")


def config_from_dict(data: dict, env=None) -> ExperimentConfig:
    """Build a config; ``ANCHORSENSE_SEED`` in ``env`` overrides the seed."""
    data = dict(data)
    sweep = data.pop("sweep", None)
    if sweep is not None:
        if not isinstance(sweep, dict) or "variable" not in sweep or "values" not in sweep:
            raise ConfigError('sweep: expected {"variable": ..., "values": [...]}')
        data["sweep_variable"] = sweep["variable"]
        data["sweep_values"] = sweep["values"]
    env = os.environ if env is None else env
    if env.get("ANCHORSENSE_SEED"):
        try:
            data["seed"] = int(env["ANCHORSENSE_SEED"])
        except ValueError:
            raise ConfigError(f"ANCHORSENSE_SEED: not an integer: {env['ANCHORSENSE_SEED']!r}") from None
    try:
        return _build(ExperimentConfig, data, "config")
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, env=None) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(data, env)


@dataclass(frozen=True)
class ResultRow:
    sweep: float
    detection_error_probability: float
    ghost_rate: float
    mean_runtime: float
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("detection_error_probability", "ghost_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class TrialOutcome:
    detection_error: bool
    ghost: bool
    runtime: float = 0.0
    full_removal: bool = True


# --------------------------------------------------------------------------
# trials


def _uniform_points(rng, region, count):
    xmin, xmax, ymin, ymax = region
    return np.column_stack([rng.uniform(xmin, xmax, count), rng.uniform(ymin, ymax, count)])


def _anchor_scene(cfg):
    return load_scene(cfg.scene) if cfg.scene else None


def _detection_error(estimates, truths, radius) -> bool:
    _, _, unmatched = assoc.greedy_match(estimates, truths, radius)
    return bool(unmatched) or len(estimates) < len(truths)


def _radio(cfg, bandwidth):
    return RadioConfig(
        carrier_frequency=cfg.carrier_frequency,
        bandwidth=bandwidth,
        num_subcarriers=cfg.num_subcarriers,
        num_symbols=cfg.num_symbols,
        symbol_duration=(1.0 + 1.0 / 8) * cfg.num_subcarriers / bandwidth,  # with cyclic prefix
        noise_power=10.0 ** (-cfg.noise.snr_db / 10.0),
    )


def networked_trial(cfg: ExperimentConfig, trial: int) -> TrialOutcome:
    """Random targets, per-BS unlabeled ranges, association and localization."""
    rng = np.random.default_rng([cfg.seed, trial])
    base = _anchor_scene(cfg)
    if base is not None:
        bs = np.array([b.position for b in base.base_stations], dtype=float)
    else:
        bs = _uniform_points(rng, cfg.region, cfg.num_bs)
    k = cfg.num_targets
    targets = _uniform_points(rng, cfg.region, k)
    m = bs.shape[0]
    dr = SPEED_OF_LIGHT / (2.0 * cfg.bandwidth)
    z = rng.standard_normal((m, k))
    perms = [rng.permutation(k) for _ in range(m)]
    truths = [Position(*t) for t in targets]

    if cfg.mode == "fast":
        sigma = cfg.noise.range_std if cfg.noise.range_std is not None else dr / 6.0
        true_d = np.linalg.norm(bs[:, None, :] - targets[None, :, :], axis=2)
        # a measured range is never negative, even for a target next to a BS
        meas = np.maximum(true_d + sigma * z, 0.0)
        profiles = [assoc.DistanceProfile(f"bs{i}", meas[i][perms[i]]) for i in range(m)]
    else:
        sigma = dr / 6.0
        radio = _radio(cfg, cfg.bandwidth)
        stations = tuple(BaseStation(f"bs{i}", Position(*p), cfg.num_antennas) for i, p in enumerate(bs))
        tgts = tuple(Target(f"t{j}", Position(*p)) for j, p in enumerate(targets))
        los = frozenset(frozenset((b.id, t.id)) for b in stations for t in tgts)
        scene = Scene(radio, stations, (), (), tgts, los, seed=int(rng.integers(2**31)))
        profiles = []
        for i, b in enumerate(stations):
            csi = synthesize_csi(scene, b.id, b.id, [t.id for t in tgts], seed=[cfg.seed, trial, i])
            est = estimate_ranges(csi, k, floor_db=CSI_PEAK_FLOOR_DB)
            if est.shortfall:
                return TrialOutcome(True, False)
            profiles.append(assoc.DistanceProfile(b.id, [e.range for e in est]))

    eps = feasibility_threshold(sigma, m)
    sols = assoc.solve_association_pruned(profiles, [tuple(p) for p in bs], eps)
    if not sols:
        return TrialOutcome(True, False)
    return TrialOutcome(_detection_error(sols[0].positions, truths, cfg.detection_radius), len(sols) > 1)


def ue_scene(cfg: ExperimentConfig, rng) -> tuple[Scene, set]:
    """One BS, one target, accurate and erroneous UEs, everything in LOS."""
    base = _anchor_scene(cfg)
    if base is not None:
        bs_pos = np.asarray(base.base_stations[0].position, dtype=float)
        radio = base.radio
    else:
        bs_pos = _uniform_points(rng, cfg.region, 1)[0]
        radio = _radio(cfg, cfg.bandwidth)
    target = _uniform_points(rng, cfg.region, 1)[0]
    ues, bad = [], set()
    for i in range(cfg.num_accurate_ues + cfg.num_erroneous_ues):
        p = _uniform_points(rng, cfg.region, 1)[0]
        erroneous = i >= cfg.num_accurate_ues
        std = cfg.noise.erroneous_ue_std if erroneous else cfg.noise.accurate_ue_std
        reported = p + rng.normal(0.0, std, 2)
        offset = rng.uniform(0.0, cfg.noise.max_timing_offset)
        uid = f"ue{i}"
        if erroneous:
            bad.add(uid)
        ues.append(UserEquipment(uid, Position(*p), Position(*reported), std, offset))
    ids = ["bs", "t"] + [u.id for u in ues]
    los = frozenset(frozenset((a, b)) for i, a in enumerate(ids) for b in ids[i + 1 :])
    scene = Scene(radio, (BaseStation("bs", Position(*bs_pos), 1),), tuple(ues), (), (Target("t", Position(*target)),), los)
    return scene, bad


def ue_selection_trial(cfg: ExperimentConfig, trial: int) -> TrialOutcome:
    rng = np.random.default_rng([cfg.seed, trial])
    scene, bad = ue_scene(cfg, rng)
    ue_cfg = UeAssistConfig(delay_noise_std=cfg.noise.delay_noise_std, selection=cfg.selection, seed=cfg.seed * 1_000_003 + trial)
    result = ue_assisted_localize(scene, "bs", "t", ue_cfg)
    retained_bad = bad.intersection(result.anchor_set.retained_ue_ids)
    truth = [scene.node("t").position]
    err = _detection_error([result.position], truth, cfg.detection_radius)
    return TrialOutcome(err, bool(retained_bad), full_removal=not retained_bad)


_TRIALS = {"networked": networked_trial, "ue_selection": ue_selection_trial}


def _timed(args):
    cfg, trial = args
    t0 = time.perf_counter()
    out = _TRIALS[cfg.experiment](cfg, trial)
    return TrialOutcome(out.detection_error, out.ghost, time.perf_counter() - t0, out.full_removal)


def simulate(cfg: ExperimentConfig, value) -> ResultRow:
    """All trials for one sweep value."""
    point = cfg.with_value(value)
    jobs = [(point, t) for t in range(cfg.trials)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            outcomes = list(pool.map(_timed, jobs, chunksize=max(1, len(jobs) // (4 * cfg.workers))))
    else:
        outcomes = [_timed(j) for j in jobs]
    n = len(outcomes)
    runtime = sum(o.runtime for o in outcomes) / n if cfg.record_runtime else 0.0
    return ResultRow(
        value,
        sum(o.detection_error for o in outcomes) / n,
        sum(o.ghost for o in outcomes) / n,
        runtime,
        {"full_removal_rate": sum(o.full_removal for o in outcomes) / n, "trials": n},
    )


def run_montecarlo(cfg: ExperimentConfig, out=None) -> list[ResultRow]:
    """One row per sweep value, in sweep order; optionally written as CSV."""
    rows = [simulate(cfg, v) for v in cfg.sweep_values]
    if out is not None:
        emit_csv(rows, out)
    return rows


# --------------------------------------------------------------------------
# CSV


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def format_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([_fmt(r.sweep), _fmt(r.detection_error_probability), _fmt(r.ghost_rate), _fmt(r.mean_runtime)])
    return buf.getvalue()


def emit_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        fh.write(format_csv(rows))


def _parse_number(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def read_csv(path) -> list[ResultRow]:
    with open(path, newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        return [ResultRow(_parse_number(a), float(b), float(c), float(d)) for a, b, c, d in reader]


# --------------------------------------------------------------------------
# canned examples


@dataclass
class ExampleReport:
    number: int
    lines: list = field(default_factory=list)
    passed: bool = True

    def check(self, cond: bool, label: str) -> None:
        self.lines.append(f"[{'PASS' if cond else 'FAIL'}] {label}")
        self.passed &= bool(cond)

    def __str__(self) -> str:
        return "\n".join([f"example {self.number}"] + self.lines)


def noise_free_profiles(scene: Scene, shuffle_seed: int | None = None):
    """Exact BS-to-target distances per BS, optionally in shuffled order."""
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    profiles, positions = [], []
    for b in scene.base_stations:
        ranges = []
        for t in scene.targets:
            if not los_visible(scene, b.id, t.id):
                raise ValueError(f"BS {b.id!r} has no LOS to target {t.id!r}")
            ranges.append(distance(b.position, t.position))
        if rng is not None:
            ranges = list(np.asarray(ranges)[rng.permutation(len(ranges))])
        profiles.append(assoc.DistanceProfile(b.id, ranges))
        positions.append(b.position)
    return profiles, positions


def _same_points(found, expected, tol) -> bool:
    if len(found) != len(expected):
        return False
    matched, _, _ = assoc.greedy_match(found, expected, tol)
    return len(matched) == len(expected)


def _association_example(n: int, expected_sets) -> ExampleReport:
    report = ExampleReport(n)
    scene = load_scene(bundled_scene_path(f"example{n}"))
    profiles, positions = noise_free_profiles(scene)
    m, k = len(profiles), len(profiles[0].ranges)
    report.lines.append(f"{assoc.hypothesis_count(m, k)} association hypotheses over {m} BSs and {k} targets")
    sols = assoc.solve_association(profiles, positions, feasibility_threshold(0.0, m))
    for s in sols:
        pts = ", ".join(f"({p.x:.4f}, {p.y:.4f})" for p in s.positions)
        report.lines.append(f"feasible {s.hypothesis.assignment}: {pts}  residue {s.total_residue:.3g} m^2")
    part = assoc.classify_ghosts(sols, [t.position for t in scene.targets])
    report.lines.append("ghosts: " + (", ".join(f"({p.x:.4f}, {p.y:.4f})" for p in part.ghosts) or "none"))
    report.check(len(sols) == len(expected_sets), f"{len(expected_sets)} feasible solution(s), found {len(sols)}")
    found = [s.positions for s in sols]
    for exp in expected_sets:
        ok = any(_same_points(f, exp, 1e-6) for f in found)
        report.check(ok, "solution " + ", ".join(f"({x:g}, {y:g})" for x, y in exp))
    return report


def run_example(n: int, trials: int = 100) -> ExampleReport:
    if n == 1:
        return _association_example(1, [[(30, 30), (-30, -30)], [(30, -30), (-30, 30)]])
    if n == 2:
        return _association_example(2, [[(30, 20), (-30, -30)]])
    if n == 3:
        report = ExampleReport(3)
        cfg = ExperimentConfig(mode="fast", trials=trials, sweep_variable="bandwidth", sweep_values=(1e8, 2e8, 3e8, 4e8))
        report.lines.append("K   " + "  ".join(f"{v / 1e6:>7.0f}MHz" for v in cfg.sweep_values))
        for k in range(2, 8):
            cfg = dataclasses.replace(cfg, num_targets=k)
            probs = [r.detection_error_probability for r in run_montecarlo(cfg)]
            report.lines.append(f"{k}   " + "  ".join(f"{p:>10.3f}" for p in probs))
            report.check(all(a >= b for a, b in zip(probs, probs[1:])), f"K={k}: error non-increasing in bandwidth")
            if k <= 4:
                report.check(probs[-1] < 0.05, f"K={k}: error below 5% at 400 MHz")
        return report
    if n == 4:
        report = ExampleReport(4)
        scene = load_scene(bundled_scene_path("example4"))
        ris, bs = scene.rises[0], scene.base_stations[0]
        fixes = ris_assisted_localize(scene, ris.id, bs.id, [t.id for t in scene.targets], RisConfig())
        got = [math.degrees(f.fix.aoa_at_ris) for f in fixes]
        for exp, f, g in zip(EXAMPLE4_AOAS_DEG, fixes, got):
            report.lines.append(
                f"AOA {g:8.4f} deg (reference {exp:.4f}), range {f.fix.range_to_ris:7.3f} m, "
                f"position ({f.position.x:.3f}, {f.position.y:.3f})"
            )
        report.check(
            len(got) == 4 and all(abs(a - b) <= 0.3 for a, b in zip(got, EXAMPLE4_AOAS_DEG)),
            "all 4 AOAs within 0.3 deg of the reference values",
        )
        return report
    raise ValueError(f"no example {n}; choose 1, 2, 3 or 4")
