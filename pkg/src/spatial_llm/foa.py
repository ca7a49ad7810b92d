"""B-format audio I/O, STFT, log-mel features, plane-wave encoding and intensity vectors.

Channel order is always (W, X, Y, Z) with unit gain on W. A plane wave from
azimuth ``phi`` and elevation ``theta`` is encoded as::

    W = s, X = s cos(theta) cos(phi), Y = s cos(theta) sin(phi), Z = s sin(theta)
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.typing import NDArray
from scipy.io import wavfile

from .localisation import Direction

SAMPLE_RATE = 16000
IV_EPS = 1e-8
LOG_FLOOR = 1e-10


class WavFormatError(ValueError):
    """Base class for rejected WAV files."""


class NotFourChannelsError(WavFormatError):
    pass


class WrongSampleRateError(WavFormatError):
    pass


class MalformedWavError(WavFormatError):
    pass


@dataclass
class FoaClip:
    samples: NDArray[np.float64]
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] != 4:
            raise ValueError(f"FOA clip needs shape (4, N), got {s.shape}")
        if not np.isfinite(s).all():
            raise ValueError("FOA clip contains non-finite samples")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        self.samples = s

    @property
    def omni(self) -> NDArray[np.float64]:
        return self.samples[0]

    def __len__(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 800
    hop_len: int = 320

    def __post_init__(self) -> None:
        if not 0 < self.hop_len <= self.window_len:
            raise ValueError("need 0 < hop_len <= window_len")

    @property
    def frame_rate(self) -> float:
        return SAMPLE_RATE / self.hop_len

    @property
    def n_bins(self) -> int:
        return self.window_len // 2 + 1


@dataclass
class ComplexSpectrogram:
    bins: NDArray[np.complex128]
    frame_rate: float
    window_len: int = 800


@dataclass
class IntensityFrames:
    vectors: NDArray[np.float64]
    valid: NDArray[np.bool_]
    frame_rate: float = 50.0

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class MelFrames:
    features: NDArray[np.float64]
    frame_rate: float = 50.0

    def __len__(self) -> int:
        return self.features.shape[0]


# --------------------------------------------------------------------------- I/O


def save_foa_wav(path: str | os.PathLike, clip: FoaClip, pcm16: bool = False) -> None:
    """Write a clip as a 4-channel WAV, 32-bit float unless ``pcm16``."""
    data = clip.samples.T
    if pcm16:
        data = np.round(np.clip(data, -1.0, 1.0) * 32767.0).astype("<i2")
    else:
        data = data.astype("<f4")
    wavfile.write(os.fspath(path), clip.sample_rate, data)


def save_mono_wav(path: str | os.PathLike, signal: NDArray) -> None:
    wavfile.write(os.fspath(path), SAMPLE_RATE, np.asarray(signal, dtype="<f4"))


def _read_wav(path: str | os.PathLike) -> tuple[int, np.ndarray]:
    try:
        rate, data = wavfile.read(os.fspath(path))
    except (ValueError, EOFError, IndexError) as exc:
        raise MalformedWavError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        data = data.astype(np.float64)
    else:
        raise MalformedWavError(f"{path}: unsupported sample format {data.dtype}")
    return rate, data


def load_foa_wav(path: str | os.PathLike) -> FoaClip:
    rate, data = _read_wav(path)
    channels = 1 if data.ndim == 1 else data.shape[1]
    if channels != 4:
        raise NotFourChannelsError(f"{path}: expected 4 channels, found {channels}")
    if rate != SAMPLE_RATE:
        raise WrongSampleRateError(f"{path}: expected {SAMPLE_RATE} Hz, found {rate}")
    return FoaClip(data.T.copy(), rate)


def load_mono_wav(path: str | os.PathLike) -> NDArray[np.float64]:
    rate, data = _read_wav(path)
    if data.ndim != 1:
        raise WavFormatError(f"{path}: expected mono, found {data.shape[1]} channels")
    if rate != SAMPLE_RATE:
        raise WrongSampleRateError(f"{path}: expected {SAMPLE_RATE} Hz, found {rate}")
    return data


def dump_array(path: str | os.PathLike, array: NDArray, frame_rate: float) -> None:
    """Raw little-endian float32 dump plus a one-line ``.txt`` sidecar header."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    path = os.fspath(path)
    arr.tofile(path)
    shape = "x".join(str(d) for d in arr.shape)
    with open(path + ".txt", "w") as fh:
        fh.write(f"shape={shape} frame_rate={frame_rate:g} dtype=float32le\n")


def load_array(path: str | os.PathLike) -> tuple[NDArray[np.float32], float]:
    path = os.fspath(path)
    with open(path + ".txt") as fh:
        fields = dict(tok.split("=", 1) for tok in fh.readline().split())
    shape = tuple(int(d) for d in fields["shape"].split("x"))
    data = np.fromfile(path, dtype="<f4").reshape(shape)
    return data, float(fields["frame_rate"])


# ------------------------------------------------------------------ transforms


@lru_cache(maxsize=8)
def hann_window(n: int) -> NDArray[np.float64]:
    # Sampled at sample centres so no tap is exactly zero.
    k = np.arange(n) + 0.5
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


def frame_count(n_samples: int, cfg: StftConfig) -> int:
    if n_samples < cfg.window_len:
        return 0
    return (n_samples - cfg.window_len) // cfg.hop_len + 1


def stft(mono: NDArray, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    """Hann-windowed STFT without centre padding; frame ``t`` starts at ``t * hop``."""
    x = np.asarray(mono, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("stft expects a 1-D signal")
    n_frames = frame_count(len(x), cfg)
    if n_frames == 0:
        raise ValueError(f"signal of {len(x)} samples is shorter than one window ({cfg.window_len})")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_len)[:: cfg.hop_len]
    frames = frames[:n_frames] * hann_window(cfg.window_len)
    return ComplexSpectrogram(np.fft.rfft(frames, axis=-1), cfg.frame_rate, cfg.window_len)


def _stft_multi(samples: NDArray, cfg: StftConfig) -> NDArray[np.complex128]:
    """STFT of every row of a (C, N) array, shape (C, T, F)."""
    n_frames = frame_count(samples.shape[1], cfg)
    if n_frames == 0:
        raise ValueError("clip is shorter than one window")
    frames = np.lib.stride_tricks.sliding_window_view(samples, cfg.window_len, axis=1)
    frames = frames[:, :: cfg.hop_len][:, :n_frames] * hann_window(cfg.window_len)
    return np.fft.rfft(frames, axis=-1)


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(bands: int, window_len: int = 800, fmax: float = 8000.0) -> NDArray[np.float64]:
    """Triangular HTK-mel filterbank, shape (bands, window_len // 2 + 1)."""
    freqs = np.arange(window_len // 2 + 1) * SAMPLE_RATE / window_len
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(fmax), bands + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (centre - lower)
    falling = (upper - freqs) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def log_mel(spec: ComplexSpectrogram, bands: int = 80) -> MelFrames:
    if bands < 1:
        raise ValueError("bands must be >= 1")
    power = np.abs(spec.bins) ** 2
    mel = power @ mel_filterbank(bands, spec.window_len).T
    return MelFrames(np.log(np.maximum(mel, LOG_FLOOR)), spec.frame_rate)


def encode_plane_wave(mono: NDArray, direction: Direction) -> FoaClip:
    s = np.asarray(mono, dtype=np.float64)
    gains = np.concatenate([[1.0], direction.unit_vector()])
    return FoaClip(gains[:, None] * s[None, :])


def intensity_vectors(clip: FoaClip, cfg: StftConfig = StftConfig()) -> IntensityFrames:
    """Frame-wise active intensity ``sum_f Re{conj(W) (X, Y, Z)}``, unit-normalised.

    Frames whose summed intensity has norm below ``IV_EPS`` are marked invalid
    and left as zero rows.
    """
    spec = _stft_multi(clip.samples, cfg)
    w = np.conj(spec[0])
    raw = np.stack([np.real(w * spec[c]).sum(axis=-1) for c in (1, 2, 3)], axis=-1)
    norms = np.linalg.norm(raw, axis=-1)
    valid = norms >= IV_EPS
    vectors = np.zeros_like(raw)
    vectors[valid] = raw[valid] / norms[valid, None]
    return IntensityFrames(vectors, valid, cfg.frame_rate)


def clip_features(
    clip: FoaClip, cfg: StftConfig = StftConfig(), bands: int = 80
) -> tuple[MelFrames, IntensityFrames]:
    """Log-mel of the omni channel and intensity vectors, same frame grid."""
    return log_mel(stft(clip.omni, cfg), bands), intensity_vectors(clip, cfg)
