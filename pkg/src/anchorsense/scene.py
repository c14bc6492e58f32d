"""Geometric and radio scene model.

A scene holds the anchors (base stations, UEs, RISs), the targets, the
declared line-of-sight pairs and the radio configuration.  Scenes are
immutable once built; :func:`load_scene` and :func:`save_scene` move them
to and from the JSON schema described in the README.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

SPEED_OF_LIGHT = 3.0e8


class SceneError(ValueError):
    """Malformed scene file or violated scene invariant."""


class MissingLosError(ValueError):
    """A required node pair has no declared line-of-sight path."""


class Position(NamedTuple):
    x: float
    y: float


def distance(a, b) -> float:
    """Euclidean distance between two planar points."""
    return math.hypot(a[0] - b[0], a[1] - b[1])


@dataclass(frozen=True)
class BaseStation:
    id: str
    position: Position
    num_antennas: int = 1
    array_orientation: float = 0.0  # radians, direction of the array axis


@dataclass(frozen=True)
class UserEquipment:
    id: str
    true_position: Position
    reported_position: Position
    position_error_std: float = 0.0
    timing_offset: float = 0.0


@dataclass(frozen=True)
class Ris:
    id: str
    position: Position
    num_elements: int
    element_spacing: float = 0.5  # in carrier wavelengths
    orientation: float = 0.0  # radians, direction of the array axis

    @property
    def axis(self) -> np.ndarray:
        return np.array([math.cos(self.orientation), math.sin(self.orientation)])

    @property
    def normal(self) -> np.ndarray:
        """Broadside direction (array axis rotated by +90 degrees)."""
        return np.array([-math.sin(self.orientation), math.cos(self.orientation)])


@dataclass(frozen=True)
class Target:
    id: str
    position: Position
    velocity: tuple[float, float] = (0.0, 0.0)
    # explicit complex gains keyed by (tx id, rx id); missing pairs get a
    # deterministic unit-modulus default, see Scene.reflection_gain
    reflection_gains: dict = field(default_factory=dict, compare=True)


@dataclass(frozen=True)
class RadioConfig:
    carrier_frequency: float
    bandwidth: float
    num_subcarriers: int
    num_symbols: int
    symbol_duration: float
    noise_power: float = 0.0

    @property
    def speed_of_light(self) -> float:
        return SPEED_OF_LIGHT

    @property
    def subcarrier_spacing(self) -> float:
        return self.bandwidth / self.num_subcarriers

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def range_resolution(self) -> float:
        """Monostatic range resolution c / 2B."""
        return SPEED_OF_LIGHT / (2.0 * self.bandwidth)

    def replace(self, **changes) -> RadioConfig:
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class Scene:
    radio: RadioConfig
    base_stations: tuple[BaseStation, ...] = ()
    user_equipments: tuple[UserEquipment, ...] = ()
    rises: tuple[Ris, ...] = ()
    targets: tuple[Target, ...] = ()
    los_visibility: frozenset = frozenset()
    seed: int = 0

    def __post_init__(self):
        validate_scene(self)

    @property
    def nodes(self) -> dict:
        out = {}
        for group in (self.base_stations, self.user_equipments, self.rises, self.targets):
            for node in group:
                out[node.id] = node
        return out

    def node(self, node_id: str):
        try:
            return self.nodes[node_id]
        except KeyError:
            raise KeyError(f"unknown node id {node_id!r}") from None

    def true_position(self, node_id: str) -> Position:
        """Physical position, used for signal synthesis only."""
        node = self.node(node_id)
        if isinstance(node, UserEquipment):
            return node.true_position
        return node.position

    def known_position(self, node_id: str) -> Position:
        """Position as seen by estimators (reported position for UEs)."""
        node = self.node(node_id)
        if isinstance(node, UserEquipment):
            return node.reported_position
        return node.position

    def reflection_gain(self, target_id: str, tx: str, rx: str) -> complex:
        target = self.node(target_id)
        gains = target.reflection_gains
        for key in ((tx, rx), (rx, tx)):
            if key in gains:
                return complex(gains[key])
        # unordered pair so that reciprocal paths share a gain
        a, b = sorted((tx, rx))
        key = f"{self.seed}|{target_id}|{a}|{b}".encode()
        phase = np.random.default_rng(zlib.crc32(key)).uniform(0.0, 2 * math.pi)
        return complex(math.cos(phase), math.sin(phase))


def validate_scene(scene: Scene) -> None:
    radio = scene.radio
    for name in ("carrier_frequency", "bandwidth", "symbol_duration"):
        value = getattr(radio, name)
        if not (math.isfinite(value) and value > 0):
            raise SceneError(f"radio.{name}: must be finite and > 0, got {value!r}")
    for name in ("num_subcarriers", "num_symbols"):
        if int(getattr(radio, name)) < 1:
            raise SceneError(f"radio.{name}: must be a positive integer")
    if not (math.isfinite(radio.noise_power) and radio.noise_power >= 0):
        raise SceneError("radio.noise_power: must be finite and >= 0")

    seen = set()
    groups = {
        "base_stations": scene.base_stations,
        "user_equipments": scene.user_equipments,
        "rises": scene.rises,
        "targets": scene.targets,
    }
    for group, items in groups.items():
        for i, node in enumerate(items):
            where = f"{group}[{i}]"
            if node.id in seen:
                raise SceneError(f"{where}.id: duplicate id {node.id!r}")
            seen.add(node.id)
            for attr in ("position", "true_position", "reported_position"):
                if hasattr(node, attr):
                    p = getattr(node, attr)
                    if len(p) != 2 or not all(math.isfinite(v) for v in p):
                        raise SceneError(f"{where}.{attr}: must be two finite numbers")
    for i, bs in enumerate(scene.base_stations):
        if bs.num_antennas < 1:
            raise SceneError(f"base_stations[{i}].num_antennas: must be >= 1")
    for i, ue in enumerate(scene.user_equipments):
        if not ue.position_error_std >= 0:
            raise SceneError(f"user_equipments[{i}].position_error_std: must be >= 0")
        if not math.isfinite(ue.timing_offset):
            raise SceneError(f"user_equipments[{i}].timing_offset: must be finite")
    for i, ris in enumerate(scene.rises):
        if ris.num_elements < 2:
            raise SceneError(f"rises[{i}].num_elements: must be >= 2")
        if not ris.element_spacing > 0:
            raise SceneError(f"rises[{i}].element_spacing: must be > 0")
    for i, target in enumerate(scene.targets):
        if len(target.velocity) != 2 or not all(math.isfinite(v) for v in target.velocity):
            raise SceneError(f"targets[{i}].velocity: must be two finite numbers")
        for pair, gain in target.reflection_gains.items():
            if not (np.isfinite(abs(gain)) and abs(gain) > 0):
                raise SceneError(f"targets[{i}].reflection_gains{list(pair)}: magnitude must be finite and > 0")
    for pair in scene.los_visibility:
        if len(pair) != 2:
            raise SceneError(f"los_pairs: {sorted(pair)} is not a pair of distinct ids")
        for node_id in pair:
            if node_id not in seen:
                raise SceneError(f"los_pairs: unknown id {node_id!r}")


def los_visible(scene: Scene, a: str, b: str) -> bool:
    if a == b:
        raise ValueError(f"self-pair ({a!r}, {b!r}) has no line-of-sight meaning")
    nodes = scene.nodes
    for node_id in (a, b):
        if node_id not in nodes:
            raise KeyError(f"unknown node id {node_id!r}")
    return frozenset((a, b)) in scene.los_visibility


def require_los(scene: Scene, a: str, b: str) -> None:
    if not los_visible(scene, a, b):
        raise MissingLosError(f"no line-of-sight between {a!r} and {b!r}")


def draw_reported_position(true_position, error_std: float, rng: np.random.Generator) -> Position:
    """Isotropic Gaussian perturbation of a true position."""
    dx, dy = rng.normal(0.0, 1.0, size=2) * error_std
    return Position(float(true_position[0] + dx), float(true_position[1] + dy))


# --------------------------------------------------------------------------
# JSON schema

_RADIO_KEYS = ("carrier_frequency", "bandwidth", "num_subcarriers", "num_symbols", "symbol_duration", "noise_power")


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict):
        raise SceneError(f"{where}: expected an object")
    if key not in obj:
        raise SceneError(f"{where}.{key}: missing mandatory field")
    return obj[key]


def _position(value, where: str) -> Position:
    try:
        x, y = value
        p = Position(float(x), float(y))
    except (TypeError, ValueError):
        raise SceneError(f"{where}: expected [x, y] in meters, got {value!r}") from None
    if not all(math.isfinite(v) for v in p):
        raise SceneError(f"{where}: coordinates must be finite")
    return p


def _number(obj: dict, key: str, where: str, kind=float):
    value = _require(obj, key, where)
    try:
        if kind is int:
            if isinstance(value, bool) or float(value) != int(value):
                raise ValueError
            return int(value)
        return float(value)
    except (TypeError, ValueError):
        raise SceneError(f"{where}.{key}: expected a number, got {value!r}") from None


def scene_from_dict(data: dict, seed: int | None = None) -> Scene:
    """Build a validated :class:`Scene` from parsed JSON.

    UEs without an explicit ``reported_position`` get one drawn from
    ``position_error_std``; the draw is seeded by ``seed`` (or the file's
    ``seed`` key, default 0) and the UE's index.
    """
    if not isinstance(data, dict):
        raise SceneError("top level: expected an object")
    for key in ("radio", "base_stations", "user_equipments", "rises", "targets", "los_pairs"):
        _require(data, key, "scene")
    if seed is None:
        seed = int(data.get("seed", 0))

    r = data["radio"]
    radio = RadioConfig(
        carrier_frequency=_number(r, "carrier_frequency", "radio"),
        bandwidth=_number(r, "bandwidth", "radio"),
        num_subcarriers=_number(r, "num_subcarriers", "radio", int),
        num_symbols=_number(r, "num_symbols", "radio", int),
        symbol_duration=_number(r, "symbol_duration", "radio"),
        noise_power=_number(r, "noise_power", "radio"),
    )

    bss = []
    for i, b in enumerate(data["base_stations"]):
        where = f"base_stations[{i}]"
        bss.append(
            BaseStation(
                id=str(_require(b, "id", where)),
                position=_position(_require(b, "position", where), f"{where}.position"),
                num_antennas=_number(b, "num_antennas", where, int),
                array_orientation=math.radians(_number(b, "array_orientation", where)),
            )
        )

    ues = []
    for i, u in enumerate(data["user_equipments"]):
        where = f"user_equipments[{i}]"
        true_pos = _position(_require(u, "position", where), f"{where}.position")
        std = _number(u, "position_error_std", where)
        if "reported_position" in u:
            reported = _position(u["reported_position"], f"{where}.reported_position")
        else:
            rng = np.random.default_rng([seed, 7919, i])
            reported = draw_reported_position(true_pos, max(std, 0.0), rng)
        ues.append(
            UserEquipment(
                id=str(_require(u, "id", where)),
                true_position=true_pos,
                reported_position=reported,
                position_error_std=std,
                timing_offset=float(u.get("timing_offset", 0.0)),
            )
        )

    rises = []
    for i, s in enumerate(data["rises"]):
        where = f"rises[{i}]"
        rises.append(
            Ris(
                id=str(_require(s, "id", where)),
                position=_position(_require(s, "position", where), f"{where}.position"),
                num_elements=_number(s, "num_elements", where, int),
                element_spacing=_number(s, "element_spacing", where),
                orientation=math.radians(_number(s, "orientation", where)),
            )
        )

    targets = []
    for i, t in enumerate(data["targets"]):
        where = f"targets[{i}]"
        gains = {}
        for j, g in enumerate(t.get("reflection_gains", [])):
            gw = f"{where}.reflection_gains[{j}]"
            re, im = _require(g, "gain", gw)
            gains[(str(_require(g, "tx", gw)), str(_require(g, "rx", gw)))] = complex(float(re), float(im))
        vel = _position(t.get("velocity", [0.0, 0.0]), f"{where}.velocity")
        targets.append(
            Target(
                id=str(_require(t, "id", where)),
                position=_position(_require(t, "position", where), f"{where}.position"),
                velocity=(vel.x, vel.y),
                reflection_gains=gains,
            )
        )

    pairs = set()
    for i, pair in enumerate(data["los_pairs"]):
        if not isinstance(pair, (list, tuple)) or len(pair) != 2 or pair[0] == pair[1]:
            raise SceneError(f"los_pairs[{i}]: expected two distinct ids, got {pair!r}")
        pairs.add(frozenset((str(pair[0]), str(pair[1]))))

    return Scene(
        radio=radio,
        base_stations=tuple(bss),
        user_equipments=tuple(ues),
        rises=tuple(rises),
        targets=tuple(targets),
        los_visibility=frozenset(pairs),
        seed=seed,
    )


def load_scene(path, seed: int | None = None) -> Scene:
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno - 1 < len(text.splitlines()) else ""
        raise SceneError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}") from None
    return scene_from_dict(data, seed=seed)


def scene_to_dict(scene: Scene) -> dict:
    r = scene.radio
    return {
        "seed": scene.seed,
        "radio": {k: getattr(r, k) for k in _RADIO_KEYS},
        "base_stations": [
            {
                "id": b.id,
                "position": list(b.position),
                "num_antennas": b.num_antennas,
                "array_orientation": math.degrees(b.array_orientation),
            }
            for b in scene.base_stations
        ],
        "user_equipments": [
            {
                "id": u.id,
                "position": list(u.true_position),
                "reported_position": list(u.reported_position),
                "position_error_std": u.position_error_std,
                "timing_offset": u.timing_offset,
            }
            for u in scene.user_equipments
        ],
        "rises": [
            {
                "id": s.id,
                "position": list(s.position),
                "num_elements": s.num_elements,
                "element_spacing": s.element_spacing,
                "orientation": math.degrees(s.orientation),
            }
            for s in scene.rises
        ],
        "targets": [
            {
                "id": t.id,
                "position": list(t.position),
                "velocity": list(t.velocity),
                "reflection_gains": [
                    {"tx": tx, "rx": rx, "gain": [g.real, g.imag]} for (tx, rx), g in t.reflection_gains.items()
                ],
            }
            for t in scene.targets
        ],
        "los_pairs": sorted(sorted(p) for p in scene.los_visibility),
    }


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=2) + "\n")


def bundled_scene_path(name: str) -> Path:
    """Path of one of the canned scenes shipped with the package."""
    if not name.endswith(".json"):
        name += ".json"
    return Path(__file__).parent / "data" / name
