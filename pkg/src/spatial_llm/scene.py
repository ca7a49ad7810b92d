"""Shoebox image-source FOA simulation, source placement, overlap mixing and dataset emission."""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.signal import fftconvolve

from .foa import SAMPLE_RATE, FoaClip, save_foa_wav
from .localisation import Direction

SPEED_OF_SOUND = 343.0
MIN_SOURCE_DISTANCE = 0.5
WALL_MARGIN = 0.1
DISTANCE_FLOOR = 0.3
SINC_TAPS = 16
MAX_PLACEMENT_ATTEMPTS = 1000

TONE_BASE_HZ = 400.0
TONE_STEP_HZ = 150.0
SYMBOL_SECONDS = 0.1
RAMP_SECONDS = 0.01
TONE_AMPLITUDE = 0.5

# (azimuth range, elevation range) in degrees; positive azimuth is left.
LEFT_WINDOW = ((60.0, 120.0), (-30.0, 30.0))
RIGHT_WINDOW = ((-120.0, -60.0), (-30.0, 30.0))
RANDOM_ELEVATION = 60.0

MODES = ("left_right", "random")
ACTIVATIONS = ("sequential", "simultaneous")


class PlacementError(RuntimeError):
    """No admissible source position found within the attempt budget."""


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class RoomSpec:
    dims: tuple[float, float, float]
    absorption: tuple[float, ...] = (0.6,) * 6
    max_order: int = 3

    def __post_init__(self) -> None:
        dims = tuple(float(d) for d in self.dims)
        if len(dims) != 3 or not all(2.0 <= d <= 15.0 for d in dims):
            raise GeometryError(f"room dims {dims} outside [2, 15] m")
        absorption = self.absorption
        if np.isscalar(absorption):
            absorption = (float(absorption),) * 6
        absorption = tuple(float(a) for a in absorption)
        if len(absorption) != 6 or not all(0.0 < a <= 1.0 for a in absorption):
            raise GeometryError(f"absorption {absorption} must be six values in (0, 1]")
        if self.max_order < 0:
            raise GeometryError("max_order must be >= 0")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "absorption", absorption)

    def contains(self, p: Sequence[float], margin: float = 0.0) -> bool:
        return all(margin < c < d - margin for c, d in zip(p, self.dims))

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "absorption": list(self.absorption), "max_order": self.max_order}

    @classmethod
    def from_dict(cls, d: dict) -> "RoomSpec":
        return cls(tuple(d["dims"]), tuple(d["absorption"]), int(d["max_order"]))


@dataclass(frozen=True)
class SourcePlacement:
    position: tuple[float, float, float]
    direction_from_receiver: Direction
    distance: float

    def to_dict(self) -> dict:
        return {
            "position": list(self.position),
            "direction_from_receiver": self.direction_from_receiver.as_dict(),
            "distance": self.distance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SourcePlacement":
        dd = d["direction_from_receiver"]
        return cls(tuple(d["position"]), Direction(dd["azimuth"], dd["elevation"]), float(d["distance"]))


@dataclass
class FoaRir:
    taps: NDArray[np.float64]
    sample_rate: int = SAMPLE_RATE
    direct_delay: float = 0.0

    def __len__(self) -> int:
        return self.taps.shape[1]


# ------------------------------------------------------------------ utterances


def symbol_frequency(k: int) -> float:
    return TONE_BASE_HZ + TONE_STEP_HZ * k


def render_symbols(symbols: Sequence[int]) -> NDArray[np.float64]:
    n = int(round(SYMBOL_SECONDS * SAMPLE_RATE))
    n_ramp = int(round(RAMP_SECONDS * SAMPLE_RATE))
    env = np.ones(n)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(n_ramp) / n_ramp)
    env[:n_ramp] = ramp
    env[-n_ramp:] = ramp[::-1]
    t = np.arange(n) / SAMPLE_RATE
    segments = [TONE_AMPLITUDE * env * np.sin(2 * np.pi * symbol_frequency(k) * t) for k in symbols]
    return np.concatenate(segments)


def gen_toy_utterance(
    rng: np.random.Generator, lexicon_size: int = 16, len_range: tuple[int, int] = (5, 12)
) -> tuple[NDArray[np.float64], str]:
    """Random tone-coded utterance and its transcript (symbols 'a', 'b', ... separated by spaces)."""
    if not 1 <= lexicon_size <= 26:
        raise ValueError("lexicon_size must be in [1, 26]")
    length = int(rng.integers(len_range[0], len_range[1] + 1))
    symbols = rng.integers(0, lexicon_size, size=length)
    transcript = " ".join(chr(ord("a") + int(k)) for k in symbols)
    return render_symbols(symbols), transcript


# ------------------------------------------------------------------ placement


def direction_between(src: Sequence[float], rcv: Sequence[float]) -> Direction:
    return Direction.from_vector(np.subtract(src, rcv))


def sample_direction(mode: str, rng: np.random.Generator, side: str | None = None) -> Direction:
    if mode == "left_right":
        (az_lo, az_hi), (el_lo, el_hi) = LEFT_WINDOW if side == "left" else RIGHT_WINDOW
        if side not in ("left", "right"):
            raise ValueError("left_right mode needs side='left' or 'right'")
        return Direction(rng.uniform(az_lo, az_hi), rng.uniform(el_lo, el_hi))
    if mode == "random":
        # uniform in solid angle over the elevation band
        s = math.sin(math.radians(RANDOM_ELEVATION))
        el = math.degrees(math.asin(rng.uniform(-s, s)))
        return Direction(rng.uniform(-180.0, 180.0), el)
    raise ValueError(f"unknown placement mode {mode!r}")


def _max_distance(room: RoomSpec, receiver: NDArray, unit: NDArray) -> float:
    """Distance along ``unit`` from the receiver to the margin-shrunk room box."""
    limits = []
    for c, u, dim in zip(receiver, unit, room.dims):
        if u > 1e-12:
            limits.append((dim - WALL_MARGIN - c) / u)
        elif u < -1e-12:
            limits.append((WALL_MARGIN - c) / u)
    return min(limits)


def place_source(
    direction: Direction, rng: np.random.Generator, room: RoomSpec, receiver: Sequence[float]
) -> SourcePlacement | None:
    rcv = np.asarray(receiver, dtype=float)
    unit = direction.unit_vector()
    d_max = _max_distance(room, rcv, unit)
    if d_max <= MIN_SOURCE_DISTANCE:
        return None
    dist = rng.uniform(MIN_SOURCE_DISTANCE, d_max)
    pos = rcv + dist * unit
    if not room.contains(pos):
        return None
    return SourcePlacement(tuple(float(c) for c in pos), direction_between(pos, rcv), float(dist))


def _check_receiver(room: RoomSpec, receiver: Sequence[float]) -> None:
    if not room.contains(receiver, margin=0.5 - 1e-9):
        raise GeometryError(f"receiver {tuple(receiver)} needs 0.5 m wall clearance in {room.dims}")


def sample_single_placement(
    mode: str, rng: np.random.Generator, room: RoomSpec, receiver: Sequence[float]
) -> SourcePlacement:
    _check_receiver(room, receiver)
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        side = ("left", "right")[int(rng.integers(2))] if mode == "left_right" else None
        p = place_source(sample_direction(mode, rng, side), rng, room, receiver)
        if p is not None:
            return p
    raise PlacementError(f"no admissible source position in room {room.dims}")


def sample_placement(
    mode: str, rng: np.random.Generator, room: RoomSpec, receiver: Sequence[float]
) -> tuple[SourcePlacement, SourcePlacement]:
    """Two source placements around ``receiver``.

    ``left_right`` returns (left source, right source); ``random`` draws both
    directions uniformly over the elevation band.
    """
    _check_receiver(room, receiver)
    sides = ("left", "right") if mode == "left_right" else (None, None)
    if mode not in MODES:
        raise ValueError(f"unknown placement mode {mode!r}")
    out = []
    for side in sides:
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            p = place_source(sample_direction(mode, rng, side), rng, room, receiver)
            if p is not None:
                out.append(p)
                break
        else:
            raise PlacementError(f"no admissible source position in room {room.dims}")
    return out[0], out[1]


# ------------------------------------------------------------------ image sources


def _axis_images(src: float, length: float, order: int) -> list[tuple[float, int, int]]:
    """(image coordinate, hits on the low wall, hits on the high wall) along one axis."""
    out = []
    for m in range(-order, order + 1):
        for q in (0, 1):
            low, high = abs(m - q), abs(m)
            if low + high <= order:
                out.append(((1 - 2 * q) * src + 2 * m * length, low, high))
    return out


def image_sources(room: RoomSpec, src: Sequence[float]) -> tuple[NDArray, NDArray, NDArray]:
    """Image positions (K, 3), reflection counts (K,) and amplitude factors (K,)."""
    axes = [_axis_images(s, d, room.max_order) for s, d in zip(src, room.dims)]
    refl = 1.0 - np.asarray(room.absorption)
    positions, counts, gains = [], [], []
    for ix in axes[0]:
        for iy in axes[1]:
            for iz in axes[2]:
                hits = (ix[1], ix[2], iy[1], iy[2], iz[1], iz[2])
                positions.append((ix[0], iy[0], iz[0]))
                counts.append(sum(hits))
                gains.append(float(np.prod(refl ** np.asarray(hits))))
    return np.asarray(positions), np.asarray(counts), np.asarray(gains)


def _sinc_kernel(frac_delays: NDArray) -> tuple[NDArray, NDArray]:
    """Hann-windowed sinc taps for each delay; returns (integer offsets, weights)."""
    half = SINC_TAPS // 2
    base = np.floor(frac_delays).astype(int)
    offsets = np.arange(-half + 1, half + 1)
    idx = base[:, None] + offsets[None, :]
    x = idx - frac_delays[:, None]
    window = 0.5 + 0.5 * np.cos(np.pi * x / half)
    return idx, np.sinc(x) * window


def image_source_rir(room: RoomSpec, src: Sequence[float], rcv: Sequence[float]) -> FoaRir:
    """First-order ambisonic room impulse response of a shoebox room.

    Every image source contributes ``gain / max(d, 0.3)`` at delay ``d / c``,
    interpolated with a 16-tap windowed sinc and encoded at its arrival
    direction. The tail is cut where the remaining energy falls below 1e-6 of
    the total.
    """
    src = np.asarray(src, dtype=float)
    rcv = np.asarray(rcv, dtype=float)
    if not room.contains(src) or not room.contains(rcv):
        raise GeometryError("source and receiver must lie strictly inside the room")
    if np.allclose(src, rcv):
        raise GeometryError("source and receiver coincide")
    positions, _, gains = image_sources(room, src)
    keep = gains > 0
    positions, gains = positions[keep], gains[keep]
    vec = positions - rcv
    dist = np.linalg.norm(vec, axis=1)
    amp = gains / np.maximum(dist, DISTANCE_FLOOR)
    unit = vec / dist[:, None]
    delay = dist / SPEED_OF_SOUND * SAMPLE_RATE
    idx, kern = _sinc_kernel(delay)
    # negative indices only occur for sub-8-sample delays; fold them away
    shift = max(0, -int(idx.min()))
    length = int(idx.max()) + 1 + shift
    flat_idx = (idx + shift).ravel()
    taps = np.empty((4, length))
    gains4 = np.concatenate([np.ones((len(amp), 1)), unit], axis=1) * amp[:, None]
    for c in range(4):
        weights = (kern * gains4[:, c : c + 1]).ravel()
        taps[c] = np.bincount(flat_idx, weights=weights, minlength=length)
    if shift:
        taps = taps[:, shift:]
    energy = np.cumsum((taps**2).sum(axis=0)[::-1])[::-1]
    tail = np.nonzero(energy >= 1e-6 * energy[0])[0]
    taps = taps[:, : int(tail[-1]) + 1]
    direct = float(np.linalg.norm(src - rcv) / SPEED_OF_SOUND * SAMPLE_RATE)
    return FoaRir(taps, SAMPLE_RATE, direct)


def convolve_foa(mono: NDArray, rir: FoaRir) -> FoaClip:
    s = np.asarray(mono, dtype=np.float64)
    if s.size == 0 or len(rir) == 0:
        raise ValueError("convolution inputs must be nonempty")
    return FoaClip(fftconvolve(s[None, :], rir.taps, axes=1))


def first_arrival_doa(rir: FoaRir, window_ms: float = 5.0) -> Direction:
    """DoA from the time-domain intensity of the taps in the first ``window_ms``."""
    w = rir.taps[0]
    start = int(np.argmax(np.abs(w) >= 0.5 * np.abs(w).max()))
    lo = max(0, start - SINC_TAPS // 2)
    hi = start + int(round(window_ms * 1e-3 * SAMPLE_RATE))
    seg = rir.taps[:, lo:hi]
    return Direction.from_vector((seg[0] * seg[1:]).sum(axis=1))


# ------------------------------------------------------------------ mixing


@dataclass
class MixResult:
    clip: FoaClip
    onsets: tuple[int, int]
    gain: float


def overlap_onset(len1: int, len2: int, ratio: float) -> int:
    return len1 - int(round(ratio * min(len1, len2)))


def mix_scene(
    wet1: FoaClip, wet2: FoaClip, overlap_ratio: float | None = 0.0, simultaneous: bool = False
) -> MixResult:
    """Sum two wet clips with the second onset chosen by ``overlap_ratio``.

    The ratio is the overlapped fraction of the shorter clip, so 0 means strict
    concatenation. ``simultaneous`` starts both clips at sample 0. The mixture
    is scaled to a 0.9 peak only if it would otherwise clip.
    """
    len1, len2 = len(wet1), len(wet2)
    if simultaneous:
        onset2 = 0
    else:
        if overlap_ratio is None or not 0.0 <= overlap_ratio <= 1.0:
            raise ValueError("overlap_ratio must lie in [0, 1]")
        onset2 = overlap_onset(len1, len2, overlap_ratio)
    total = max(len1, onset2 + len2)
    out = np.zeros((4, total))
    out[:, :len1] += wet1.samples
    out[:, onset2 : onset2 + len2] += wet2.samples
    peak = float(np.abs(out).max())
    gain = 0.9 / peak if peak > 1.0 else 1.0
    if gain != 1.0:
        out *= gain
    return MixResult(FoaClip(out), (0, onset2), gain)


def co_active_span(len1: int, len2: int, onsets: Sequence[int]) -> int:
    lo = max(onsets[0], onsets[1])
    hi = min(onsets[0] + len1, onsets[1] + len2)
    return max(0, hi - lo)


# ------------------------------------------------------------------ manifest + datasets


@dataclass
class SceneManifest:
    scene_id: str
    room: dict
    receiver: list
    placements: list
    transcripts: list
    onsets: list
    overlap_ratio: float
    mode: str
    activation: str
    audio_path: str | None = None
    gain: float = 1.0

    def directions(self) -> list[Direction]:
        return [SourcePlacement.from_dict(p).direction_from_receiver for p in self.placements]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "SceneManifest":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class DatasetConfig:
    """Generation knobs; serialised as ``key=value`` lines.

    Keys: mode, n_scenes, count_sources, overlap_ratio, simultaneous, seed,
    prefix, room_min, room_max (comma-separated x,y,z metres), absorption_min,
    absorption_max, max_order, lexicon_size, len_min, len_max, pcm16.
    """

    mode: str = "left_right"
    n_scenes: int = 100
    count_sources: int = 2
    overlap_ratio: float = 0.0
    simultaneous: bool = False
    seed: int = 0
    prefix: str = "scene"
    room_min: tuple[float, float, float] = (4.0, 4.0, 2.5)
    room_max: tuple[float, float, float] = (8.0, 8.0, 3.5)
    absorption_min: float = 0.9
    absorption_max: float = 0.99
    max_order: int = 3
    lexicon_size: int = 16
    len_min: int = 5
    len_max: int = 12
    pcm16: bool = False

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.count_sources not in (1, 2):
            raise ValueError("count_sources must be 1 or 2")
        if not 0.0 <= self.overlap_ratio <= 1.0:
            raise ValueError("overlap_ratio must lie in [0, 1]")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(f"{x:g}" for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs: dict = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            kind = str(kinds[key])
            if kind.startswith("tuple"):
                kwargs[key] = tuple(float(x) for x in value.split(","))
            elif kind == "bool":
                kwargs[key] = value.lower() in ("1", "true", "yes")
            elif kind == "int":
                kwargs[key] = int(value)
            elif kind == "float":
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


def scene_rng(global_seed: int, scene_id: str) -> np.random.Generator:
    """Per-scene generator keyed on (seed, scene id), independent of generation order."""
    return np.random.default_rng(np.random.SeedSequence([global_seed, zlib.crc32(scene_id.encode())]))


@dataclass
class Scene:
    manifest: SceneManifest
    mixture: FoaClip
    wet: list[FoaClip] = field(default_factory=list)


def simulate_scene(cfg: DatasetConfig, index: int) -> Scene:
    scene_id = f"{cfg.prefix}-{index:06d}"
    rng = scene_rng(cfg.seed, scene_id)
    dims = tuple(rng.uniform(lo, hi) for lo, hi in zip(cfg.room_min, cfg.room_max))
    room = RoomSpec(dims, float(rng.uniform(cfg.absorption_min, cfg.absorption_max)), cfg.max_order)
    receiver = tuple(float(rng.uniform(0.5 + 1e-6, d - 0.5 - 1e-6)) for d in dims)
    if cfg.count_sources == 1:
        placements = [sample_single_placement(cfg.mode, rng, room, receiver)]
    else:
        placements = list(sample_placement(cfg.mode, rng, room, receiver))
        # which side speaks first must not be predictable
        if rng.random() < 0.5:
            placements.reverse()
    utterances = [gen_toy_utterance(rng, cfg.lexicon_size, (cfg.len_min, cfg.len_max)) for _ in placements]
    wet = [
        convolve_foa(sig, image_source_rir(room, p.position, receiver))
        for (sig, _), p in zip(utterances, placements)
    ]
    if len(wet) == 1:
        mix = wet[0]
        peak = float(np.abs(mix.samples).max())
        gain = 0.9 / peak if peak > 1.0 else 1.0
        mixture, onsets = FoaClip(mix.samples * gain) if gain != 1.0 else mix, [0]
        ratio, activation = 0.0, "sequential"
    else:
        res = mix_scene(wet[0], wet[1], cfg.overlap_ratio, cfg.simultaneous)
        mixture, onsets, gain = res.clip, list(res.onsets), res.gain
        ratio = 1.0 if cfg.simultaneous else cfg.overlap_ratio
        activation = "simultaneous" if cfg.simultaneous else "sequential"
    manifest = SceneManifest(
        scene_id=scene_id,
        room=room.to_dict(),
        receiver=list(receiver),
        placements=[p.to_dict() for p in placements],
        transcripts=[t for _, t in utterances],
        onsets=onsets,
        overlap_ratio=ratio,
        mode=cfg.mode,
        activation=activation,
        gain=gain,
    )
    return Scene(manifest, mixture, wet)


def iter_scenes(cfg: DatasetConfig) -> Iterator[Scene]:
    for i in range(cfg.n_scenes):
        yield simulate_scene(cfg, i)


def build_dataset(cfg: DatasetConfig, out_dir: str | os.PathLike) -> Path:
    """Write ``config.txt``, ``manifest.jsonl`` and one WAV per scene; returns the manifest path."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    manifest_path = out / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        for scene in iter_scenes(cfg):
            rel = f"audio/{scene.manifest.scene_id}.wav"
            save_foa_wav(out / rel, scene.mixture, pcm16=cfg.pcm16)
            scene.manifest.audio_path = rel
            fh.write(scene.manifest.to_json() + "\n")
    return manifest_path


def read_manifest(path: str | os.PathLike) -> list[SceneManifest]:
    with open(path) as fh:
        return [SceneManifest.from_dict(json.loads(line)) for line in fh if line.strip()]
