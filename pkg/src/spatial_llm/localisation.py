"""Direction arithmetic, the intensity-vector DoA oracle and SSL error metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .foa import IntensityFrames


class NoValidFramesError(ValueError):
    """Raised when a DoA is requested from frames that carry no direction."""


def wrap_azimuth(azimuth: float) -> float:
    """Wrap an azimuth in degrees onto (-180, 180]."""
    a = math.fmod(float(azimuth), 360.0)
    if a <= -180.0:
        a += 360.0
    elif a > 180.0:
        a -= 360.0
    return a


@dataclass(frozen=True)
class Direction:
    """Direction of arrival in degrees.

    Azimuth is measured counter-clockwise from the +x axis (positive = left),
    elevation upwards from the horizontal plane.
    """

    azimuth: float
    elevation: float

    def __post_init__(self) -> None:
        el = float(self.elevation)
        if not -90.0 <= el <= 90.0 or not math.isfinite(el):
            raise ValueError(f"elevation {el} outside [-90, 90]")
        object.__setattr__(self, "elevation", el)
        object.__setattr__(self, "azimuth", wrap_azimuth(self.azimuth))

    def unit_vector(self) -> np.ndarray:
        az = math.radians(self.azimuth)
        el = math.radians(self.elevation)
        return np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
        )

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "Direction":
        x, y, z = (float(c) for c in v)
        horiz = math.hypot(x, y)
        if horiz == 0.0 and z == 0.0:
            raise ValueError("zero vector has no direction")
        az = 0.0 if horiz == 0.0 else math.degrees(math.atan2(y, x))
        el = math.degrees(math.atan2(z, horiz))
        return cls(az, max(-90.0, min(90.0, el)))

    def as_dict(self) -> dict:
        return {"azimuth": self.azimuth, "elevation": self.elevation}


@dataclass(frozen=True)
class SslErrors:
    delta_a: float
    delta_e: float
    delta_d: float
    n: int = 0
    unparseable_rate: float = 0.0


def doa_from_iv(frames: "IntensityFrames") -> Direction:
    """Mean direction of the valid unit intensity vectors.

    At the poles (zero horizontal component) the azimuth is reported as 0.
    """
    valid = np.asarray(frames.valid, dtype=bool)
    if not valid.any():
        raise NoValidFramesError("no valid intensity frames")
    mean = np.asarray(frames.vectors)[valid].mean(axis=0)
    return Direction.from_vector(mean)


def azimuth_error(a: float, b: float) -> float:
    d = abs(float(a) - float(b)) % 360.0
    return min(d, 360.0 - d)


def elevation_error(a: float, b: float) -> float:
    for v in (a, b):
        if not -90.0 <= v <= 90.0:
            raise ValueError(f"elevation {v} outside [-90, 90]")
    return abs(float(a) - float(b))


def _cos_sin(elevation: float) -> tuple[float, float]:
    if abs(elevation) == 90.0:
        return 0.0, math.copysign(1.0, elevation)
    t = math.radians(elevation)
    return math.cos(t), math.sin(t)


def angular_distance(d1: Direction, d2: Direction) -> float:
    """Great-circle distance between two directions, in degrees.

    Evaluated in the atan2 form, which equals
    ``acos(sin t1 sin t2 + cos t1 cos t2 cos dphi)`` but stays accurate for
    nearly coincident points. On the horizontal plane the wrapped azimuth
    difference is returned directly.
    """
    if d1.elevation == 0.0 and d2.elevation == 0.0:
        return azimuth_error(d1.azimuth, d2.azimuth)
    if (d1.elevation, d1.azimuth) > (d2.elevation, d2.azimuth):
        d1, d2 = d2, d1  # exact symmetry
    c1, s1 = _cos_sin(d1.elevation)
    c2, s2 = _cos_sin(d2.elevation)
    dphi = math.radians(d1.azimuth - d2.azimuth)
    cd, sd = math.cos(dphi), math.sin(dphi)
    num = math.hypot(c2 * sd, c1 * s2 - s1 * c2 * cd)
    den = s1 * s2 + c1 * c2 * cd
    return min(180.0, math.degrees(math.atan2(num, den)))


def aggregate_ssl(
    preds: Sequence[Direction], truths: Sequence[Direction]
) -> SslErrors:
    if len(preds) != len(truths):
        raise ValueError(f"length mismatch: {len(preds)} predictions, {len(truths)} truths")
    if not preds:
        raise ValueError("cannot aggregate empty lists")
    da = [azimuth_error(p.azimuth, t.azimuth) for p, t in zip(preds, truths)]
    de = [elevation_error(p.elevation, t.elevation) for p, t in zip(preds, truths)]
    dd = [angular_distance(p, t) for p, t in zip(preds, truths)]
    n = len(preds)
    return SslErrors(sum(da) / n, sum(de) / n, sum(dd) / n, n=n)
