import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorsense.scene import (
    BaseStation,
    MissingLosError,
    Position,
    RadioConfig,
    Scene,
    SceneError,
    Target,
    distance,
    load_scene,
    los_visible,
    save_scene,
    scene_from_dict,
    scene_to_dict,
)

coord = st.floats(-1e4, 1e4, allow_nan=False)
point = st.tuples(coord, coord)


def test_distance_examples():
    assert distance((-35, 0), (30, 30)) == pytest.approx(math.sqrt(5125))
    assert distance((-35, 0), (30, 30)) == pytest.approx(71.5891, abs=1e-4)
    assert distance((50, 0), (30, 20)) == pytest.approx(28.2843, abs=1e-4)
    assert distance((7, 7), (7, 7)) == 0.0


@given(point, point)
def test_distance_symmetric(a, b):
    assert distance(a, b) == distance(b, a)
    assert (distance(a, b) == 0) == (a == b)


@given(point, point, point)
def test_triangle_inequality(a, b, c):
    assert distance(a, c) <= distance(a, b) + distance(b, c) + 1e-9 * (1 + distance(a, c))


def test_example1_scene(example1):
    assert len(example1.base_stations) == 3
    assert len(example1.targets) == 2
    sq = sorted(round(distance(b.position, t.position) ** 2) for b in example1.base_stations for t in example1.targets)
    assert sq == sorted([5125, 925, 1300, 7300, 6525, 1125])


def test_example4_scene(example4):
    assert len(example4.base_stations) == 1
    assert len(example4.rises) == 1 and example4.rises[0].num_elements == 64
    assert len(example4.targets) == 4


def test_los_lookup(example4):
    assert los_visible(example4, "ris1", "t1")
    assert not los_visible(example4, "bs1", "t1")
    with pytest.raises(ValueError):
        los_visible(example4, "bs1", "bs1")
    with pytest.raises(KeyError):
        los_visible(example4, "bs1", "nobody")


def _scene_dict(example1):
    return scene_to_dict(example1)


def test_duplicate_ids_rejected(example1, tmp_path):
    data = _scene_dict(example1)
    data["targets"][1]["id"] = data["base_stations"][0]["id"]
    path = tmp_path / "dup.json"
    path.write_text(json.dumps(data))
    with pytest.raises(SceneError, match="bs1"):
        load_scene(path)


def test_invariant_error_names_field(example1):
    data = _scene_dict(example1)
    data["base_stations"][1]["num_antennas"] = 0
    with pytest.raises(SceneError, match=r"base_stations\[1\]\.num_antennas"):
        scene_from_dict(data)


def test_parse_error_has_line_context(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "radio": {\n    "bandwidth": 4e8,,\n  }\n}\n')
    with pytest.raises(SceneError) as info:
        load_scene(path)
    assert "bad.json:3:" in str(info.value)
    assert '"bandwidth": 4e8,,' in str(info.value)


def test_los_pair_with_unknown_id(example1):
    data = _scene_dict(example1)
    data["los_pairs"].append(["bs1", "ghost"])
    with pytest.raises(SceneError, match="ghost"):
        scene_from_dict(data)


def test_round_trip(example1, example4, tmp_path):
    for scene in (example1, example4):
        path = tmp_path / "s.json"
        save_scene(scene, path)
        again = load_scene(path)
        assert again.radio == scene.radio
        assert again.base_stations == scene.base_stations
        assert again.rises == scene.rises
        assert again.targets == scene.targets
        assert again.los_visibility == scene.los_visibility


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=1, max_size=4),
    st.floats(0, 5),
    st.integers(0, 2**31 - 1),
)
def test_round_trip_with_ues(tmp_path_factory, ue_points, std, seed):
    radio = RadioConfig(28e9, 4e8, 64, 4, 2.74e-6)
    data = {
        "seed": seed,
        "radio": {k: getattr(radio, k) for k in ("carrier_frequency", "bandwidth", "num_subcarriers", "num_symbols", "symbol_duration", "noise_power")},
        "base_stations": [{"id": "bs", "position": [0, 0], "num_antennas": 2, "array_orientation": 10.0}],
        "user_equipments": [
            {"id": f"u{i}", "position": list(p), "position_error_std": std, "timing_offset": 1e-9 * i} for i, p in enumerate(ue_points)
        ],
        "rises": [],
        "targets": [{"id": "t", "position": [5, 5], "velocity": [1, -2]}],
        "los_pairs": [["bs", "t"]],
    }
    scene = scene_from_dict(data)
    path = tmp_path_factory.mktemp("rt") / "s.json"
    save_scene(scene, path)
    assert load_scene(path) == scene


def test_reported_position_seeded(example1):
    data = {
        "radio": scene_to_dict(example1)["radio"],
        "base_stations": [],
        "user_equipments": [{"id": "u", "position": [1, 2], "position_error_std": 3.0}],
        "rises": [],
        "targets": [],
        "los_pairs": [],
    }
    a = scene_from_dict(data, seed=5).user_equipments[0].reported_position
    b = scene_from_dict(data, seed=5).user_equipments[0].reported_position
    c = scene_from_dict(data, seed=6).user_equipments[0].reported_position
    assert a == b and a != c


def test_reported_position_std_matches():
    data_base = {
        "radio": {"carrier_frequency": 28e9, "bandwidth": 4e8, "num_subcarriers": 64, "num_symbols": 4, "symbol_duration": 1e-6, "noise_power": 0},
        "base_stations": [],
        "rises": [],
        "targets": [],
        "los_pairs": [],
    }
    ues = [{"id": f"u{i}", "position": [0, 0], "position_error_std": 2.0} for i in range(4000)]
    scene = scene_from_dict(dict(data_base, user_equipments=ues), seed=1)
    rng_points = np.array([u.reported_position for u in scene.user_equipments])
    assert np.std(rng_points[:, 0]) == pytest.approx(2.0, rel=0.05)
    assert np.std(rng_points[:, 1]) == pytest.approx(2.0, rel=0.05)


def test_reflection_gain_default_unit_modulus(example1):
    g = example1.reflection_gain("t1", "bs1", "bs2")
    assert abs(g) == pytest.approx(1.0)
    assert g == example1.reflection_gain("t1", "bs2", "bs1")
    assert g != example1.reflection_gain("t1", "bs1", "bs3")


def test_scene_rejects_bad_radio():
    with pytest.raises(SceneError):
        Scene(RadioConfig(28e9, 0.0, 64, 4, 1e-6), (), (), (), (), frozenset())


def test_missing_los_is_value_error():
    radio = RadioConfig(28e9, 4e8, 64, 4, 1e-6)
    scene = Scene(radio, (BaseStation("b", Position(0, 0)),), (), (), (Target("t", Position(1, 1)),), frozenset())
    from anchorsense.scene import require_los

    with pytest.raises(MissingLosError):
        require_los(scene, "b", "t")
    assert issubclass(MissingLosError, ValueError)
    assert replace(scene, seed=3).seed == 3
