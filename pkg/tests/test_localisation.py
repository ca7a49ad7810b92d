import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spatial_llm.foa import IntensityFrames
from spatial_llm.localisation import (
    Direction,
    NoValidFramesError,
    aggregate_ssl,
    angular_distance,
    azimuth_error,
    doa_from_iv,
    elevation_error,
    wrap_azimuth,
)

azimuths = st.floats(-720.0, 720.0, allow_nan=False)
elevations = st.floats(-90.0, 90.0, allow_nan=False)
directions = st.builds(Direction, azimuths, elevations)


def frames(rows):
    rows = np.asarray(rows, dtype=float)
    return IntensityFrames(rows, np.linalg.norm(rows, axis=1) > 0)


def test_direction_wraps_and_validates():
    assert Direction(190, 0).azimuth == -170
    assert Direction(-180, 0).azimuth == 180
    with pytest.raises(ValueError):
        Direction(0, 91)
    assert wrap_azimuth(540) == 180


def test_doa_examples():
    assert doa_from_iv(frames([[1, 0, 0]] * 4)) == Direction(0, 0)
    pole = doa_from_iv(frames([[0, 0, 1]] * 3))
    assert (pole.azimuth, pole.elevation) == (0.0, 90.0)
    half = doa_from_iv(frames([[1, 0, 0], [0, 1, 0]]))
    assert half.azimuth == pytest.approx(45.0, abs=1e-12)
    assert half.elevation == 0.0


def test_doa_ignores_invalid_rows():
    f = IntensityFrames(np.array([[1.0, 0, 0], [0, 0, 0]]), np.array([True, False]))
    assert doa_from_iv(f) == Direction(0, 0)
    with pytest.raises(NoValidFramesError):
        doa_from_iv(IntensityFrames(np.zeros((3, 3)), np.zeros(3, bool)))


@pytest.mark.parametrize("a, b, expected", [(0, 0, 0), (170, -170, 20), (90, -90, 180), (179, -179, 2)])
def test_azimuth_error_examples(a, b, expected):
    assert azimuth_error(a, b) == expected


@pytest.mark.parametrize("a, b, expected", [(30, 30, 0), (-30, 30, 60), (90, -90, 180)])
def test_elevation_error_examples(a, b, expected):
    assert elevation_error(a, b) == expected


def test_elevation_error_range():
    with pytest.raises(ValueError):
        elevation_error(100, 0)


@pytest.mark.parametrize(
    "d1, d2, expected",
    [
        ((20, 30), (20, 30), 0),
        ((0, 0), (90, 0), 90),
        ((179, 0), (-179, 0), 2),
        ((10, 90), (120, 90), 0),
    ],
)
def test_angular_distance_examples(d1, d2, expected):
    assert angular_distance(Direction(*d1), Direction(*d2)) == expected


def test_angular_distance_matches_acos_form(rng):
    for _ in range(200):
        a, b = (Direction(rng.uniform(-180, 180), rng.uniform(-90, 90)) for _ in range(2))
        t1, t2 = math.radians(a.elevation), math.radians(b.elevation)
        c = math.sin(t1) * math.sin(t2) + math.cos(t1) * math.cos(t2) * math.cos(math.radians(a.azimuth - b.azimuth))
        ref = math.degrees(math.acos(max(-1.0, min(1.0, c))))
        assert angular_distance(a, b) == pytest.approx(ref, abs=1e-6)


@given(directions, directions)
def test_angular_distance_metric_properties(a, b):
    d = angular_distance(a, b)
    assert 0 <= d <= 180
    assert d == angular_distance(b, a)
    assert angular_distance(a, a) == 0


@given(azimuths, azimuths, st.integers(-5, 5))
def test_azimuth_error_periodic(a, b, k):
    assert azimuth_error(a + 360 * k, b) == pytest.approx(azimuth_error(a, b), abs=1e-9)


@given(azimuths, azimuths)
def test_equator_distance_is_azimuth_error(a, b):
    d1, d2 = Direction(a, 0), Direction(b, 0)
    assert angular_distance(d1, d2) == azimuth_error(d1.azimuth, d2.azimuth)


def test_aggregate_examples():
    d = Direction(10, 0)
    assert aggregate_ssl([d], [d]) == aggregate_ssl([d], [d]).__class__(0, 0, 0, n=1)
    errs = aggregate_ssl([Direction(0, 0), Direction(10, 0)], [Direction(0, 0), Direction(0, 0)])
    assert errs.delta_d == 5
    with pytest.raises(ValueError):
        aggregate_ssl([d], [])
    with pytest.raises(ValueError):
        aggregate_ssl([], [])


def test_constant_predictor_chance_level(rng):
    truths = [Direction(a, 0) for a in rng.uniform(-180, 180, 20000)]
    errs = aggregate_ssl([Direction(0, 0)] * len(truths), truths)
    assert errs.delta_a == pytest.approx(90, abs=1.5)
