import numpy as np
import pytest
from hypothesis import given, strategies as st

from maskseg3d.errors import FormatError
from maskseg3d.evaluation import InstancePrediction
from maskseg3d.predictions import PredictionsFile, format_predictions, parse_predictions, read_predictions, write_predictions


def sample(n=6):
    return PredictionsFile("scene_0000.m3ds", n, [
        InstancePrediction(np.array([1, 1, 0, 0, 0, 1], bool)[:n], 2, 0.123456789012345),
        InstancePrediction(np.zeros(n, bool), 0, 1e-300),
    ], "0123456789abcdef")


def test_layout():
    text = format_predictions(sample())
    assert text.splitlines() == [
        "maskseg3d-predictions 1",
        "config_hash 0123456789abcdef",
        "scene scene_0000.m3ds",
        "num_points 6",
        "num_instances 2",
        "instance 2 0.123456789012345 3 0 1 5",
        "instance 0 1e-300 0",
    ]


def test_file_round_trip(tmp_path):
    write_predictions(tmp_path / "p.txt", sample())
    back = read_predictions(tmp_path / "p.txt")
    assert back.scene == "scene_0000.m3ds" and back.num_points == 6 and back.config_hash == "0123456789abcdef"
    for a, b in zip(back.instances, sample().instances):
        assert np.array_equal(a.point_mask, b.point_mask) and a.class_id == b.class_id
        assert a.confidence == b.confidence


def test_missing_hash_is_dash():
    pf = PredictionsFile("s", 1, [], None)
    assert "config_hash -" in format_predictions(pf)
    assert parse_predictions(format_predictions(pf)).config_hash is None


@given(st.lists(st.tuples(st.integers(0, 5), st.floats(0, 1), st.lists(st.booleans(), min_size=9, max_size=9)),
                max_size=5))
def test_round_trip_property(items):
    pf = PredictionsFile("x", 9, [InstancePrediction(np.array(m), c, f) for c, f, m in items])
    back = parse_predictions(format_predictions(pf))
    assert [(p.class_id, p.confidence, p.point_mask.tolist()) for p in back.instances] == \
           [(c, f, m) for c, f, m in items]


@pytest.mark.parametrize("mutate", [
    lambda t: t.replace("maskseg3d-predictions 1", "maskseg3d-predictions 2"),
    lambda t: t.replace("maskseg3d-predictions", "other"),
    lambda t: t.replace("num_instances 2", "num_instances 3"),
    lambda t: t.replace("num_points 6", "num_points six"),
    lambda t: t.replace(" 3 0 1 5", " 4 0 1 5"),
    lambda t: t.replace(" 0 1 5", " 0 1 6"),
    lambda t: t.replace("instance 0 1e-300", "inst 0 1e-300"),
    lambda t: t.replace("scene scene", "name scene"),
    lambda t: "\n".join(t.splitlines()[:3]),
])
def test_malformed(mutate):
    with pytest.raises(FormatError):
        parse_predictions(mutate(format_predictions(sample())))


def test_unreadable(tmp_path):
    with pytest.raises(FormatError):
        read_predictions(tmp_path / "nope.txt")
