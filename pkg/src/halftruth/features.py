"""MFCC, LFCC and Chroma-STFT feature matrices for 4 s clips, plus augmentation and caching.

All three features share one power spectrogram: periodic Hann window,
n_fft=512, hop=256, centred frames with reflect padding. At 16 kHz that
gives 257 bins spaced 31.25 Hz apart and 251 frames per 64,000-sample clip.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view

from .corpus import CLIP_SAMPLES, SAMPLE_RATE, atomic_write_bytes

N_FFT = 512
HOP = 256
N_BINS = N_FFT // 2 + 1
N_FRAMES = 1 + CLIP_SAMPLES // HOP
N_CEPS = 40
LOG_FLOOR = 1e-10
STD_EPS = 1e-8
C1_HZ = 32.7032


@dataclass
class FeatureSet:
    mfcc: np.ndarray
    lfcc: np.ndarray
    chroma: np.ndarray

    def __post_init__(self):
        for name, rows in (("mfcc", N_CEPS), ("lfcc", N_CEPS), ("chroma", 12)):
            m = getattr(self, name)
            if m.shape != (rows, N_FRAMES):
                raise ValueError(f"{name} must be {rows}x{N_FRAMES}, got {m.shape}")

    def as_tuple(self):
        return self.mfcc, self.lfcc, self.chroma

    def copy(self) -> "FeatureSet":
        return FeatureSet(self.mfcc.copy(), self.lfcc.copy(), self.chroma.copy())


@dataclass
class Filterbank:
    weights: np.ndarray  # [n_filters, N_BINS]
    centres: np.ndarray  # Hz


def bin_frequencies(n_fft: int = N_FFT, sr: int = SAMPLE_RATE) -> np.ndarray:
    return np.arange(n_fft // 2 + 1) * sr / n_fft


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(clip: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Power spectrogram, shape ``[n_fft // 2 + 1, 1 + len // hop]``."""
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 1 or len(clip) != CLIP_SAMPLES:
        raise ValueError(f"expected a {CLIP_SAMPLES}-sample clip, got shape {clip.shape}")
    padded = np.pad(clip, n_fft // 2, mode="reflect")
    frames = sliding_window_view(padded, n_fft)[::hop]
    spec = np.fft.rfft(frames * hann_periodic(n_fft), axis=1)
    return (spec.real**2 + spec.imag**2).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _triangles(edges_hz: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    lower, centre, upper = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    rising = (freqs[None, :] - lower) / (centre - lower)
    falling = (upper - freqs[None, :]) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


def _filterbank(edges_hz, n_filters, f_max, sr):
    if n_filters < 1:
        raise ValueError("n_filters must be >= 1")
    if f_max > sr / 2:
        raise ValueError(f"f_max {f_max} above Nyquist {sr / 2}")
    weights = _triangles(edges_hz, bin_frequencies(N_FFT, sr))
    if np.any(weights.max(axis=1) <= 0):
        raise ValueError("filterbank has an empty filter; use fewer filters or a wider band")
    return Filterbank(weights, edges_hz[1:-1].copy())


def mel_filterbank(n_filters: int = N_CEPS, f_min: float = 0.0, f_max: float = 8000.0, sr: int = SAMPLE_RATE):
    """Unnormalised triangles with centres equally spaced on the mel scale."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_filters + 2))
    return _filterbank(edges, n_filters, f_max, sr)


def linear_filterbank(n_filters: int = N_CEPS, f_min: float = 0.0, f_max: float = 8000.0, sr: int = SAMPLE_RATE):
    """Same triangles with centres equally spaced in Hz (the LFCC filterbank)."""
    edges = np.linspace(f_min, f_max, n_filters + 2)
    return _filterbank(edges, n_filters, f_max, sr)


def log_energies(power: np.ndarray, filterbank: Filterbank) -> np.ndarray:
    return np.log(filterbank.weights @ power + LOG_FLOOR)


def dct_ii_orthonormal(matrix: np.ndarray, n_coeff: int = N_CEPS) -> np.ndarray:
    """Orthonormal DCT-II down each column; keeps the first ``n_coeff`` rows."""
    if n_coeff > matrix.shape[0]:
        raise ValueError(f"n_coeff {n_coeff} exceeds {matrix.shape[0]} input rows")
    return scipy.fft.dct(matrix, type=2, norm="ortho", axis=0)[:n_coeff]


def standardise(m: np.ndarray) -> np.ndarray:
    return (m - m.mean()) / np.sqrt(m.var() + STD_EPS)


_MEL = None
_LIN = None


def _banks():
    global _MEL, _LIN
    if _MEL is None:
        _MEL, _LIN = mel_filterbank(), linear_filterbank()
    return _MEL, _LIN


def _cepstra(power, bank, standardize):
    c = dct_ii_orthonormal(log_energies(power, bank), N_CEPS)
    return standardise(c) if standardize else c


def mfcc(clip, standardize: bool = True, power: np.ndarray | None = None) -> np.ndarray:
    power = stft_power(clip) if power is None else power
    return _cepstra(power, _banks()[0], standardize)


def lfcc(clip, standardize: bool = True, power: np.ndarray | None = None) -> np.ndarray:
    power = stft_power(clip) if power is None else power
    return _cepstra(power, _banks()[1], standardize)


def chroma_classes(freqs: np.ndarray) -> np.ndarray:
    """Pitch class per bin (0 = C); -1 for bins below 27.5 Hz."""
    out = np.full(len(freqs), -1, dtype=np.int64)
    ok = freqs >= 27.5
    out[ok] = np.round(12.0 * np.log2(freqs[ok] / C1_HZ)).astype(np.int64) % 12
    return out


def chroma_stft(clip, power: np.ndarray | None = None) -> np.ndarray:
    power = stft_power(clip) if power is None else power
    classes = chroma_classes(bin_frequencies())
    fold = np.zeros((12, power.shape[0]))
    valid = classes >= 0
    fold[classes[valid], np.flatnonzero(valid)] = 1.0
    chroma = fold @ power
    peak = chroma.max(axis=0, keepdims=True)
    return np.where(peak >= LOG_FLOOR, chroma / np.where(peak >= LOG_FLOOR, peak, 1.0), 0.0)


def extract_features(clip) -> FeatureSet:
    power = stft_power(clip)
    return FeatureSet(
        mfcc(clip, power=power).astype(np.float32),
        lfcc(clip, power=power).astype(np.float32),
        chroma_stft(clip, power=power).astype(np.float32),
    )


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    time_mask: tuple[int, int, float] = (10, 30, 0.3)
    freq_mask: tuple[int, int, float] = (2, 8, 0.3)
    noise: tuple[float, float] = (0.01, 0.15)

    def __post_init__(self):
        for lo, hi, p in (self.time_mask, self.freq_mask):
            if lo > hi or not 0.0 <= p <= 1.0:
                raise ValueError("mask ranges need min <= max and p in [0, 1]")
        if not 0.0 <= self.noise[1] <= 1.0:
            raise ValueError("noise probability must be in [0, 1]")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls((10, 30, 0.0), (2, 8, 0.0), (0.01, 0.0))


def augment(features: FeatureSet, rng: np.random.Generator, config: AugmentConfig | None = None) -> FeatureSet:
    """Time mask, then frequency mask (cepstra only), then Gaussian noise.

    Each transform fires independently with its own probability. The input
    is never modified.
    """
    config = config or AugmentConfig()
    out = features.copy()
    lo, hi, p = config.time_mask
    if rng.random() < p:
        width = int(rng.integers(lo, hi + 1))
        t0 = int(rng.integers(0, N_FRAMES - width + 1))
        for m in out.as_tuple():
            m[:, t0 : t0 + width] = 0.0
    lo, hi, p = config.freq_mask
    if rng.random() < p:
        width = int(rng.integers(lo, hi + 1))
        r0 = int(rng.integers(0, N_CEPS - width + 1))
        out.mfcc[r0 : r0 + width] = 0.0
        out.lfcc[r0 : r0 + width] = 0.0
    sigma, p = config.noise
    if rng.random() < p:
        for m in out.as_tuple():
            m += (sigma * rng.standard_normal(m.shape)).astype(m.dtype)
    return out


# ---------------------------------------------------------------------------
# cache

CACHE_MAGIC = b"CAFF"
CACHE_VERSION = 1
_BLOCKS = (("mfcc", N_CEPS), ("lfcc", N_CEPS), ("chroma", 12))


def cache_bytes(features: FeatureSet) -> bytes:
    parts = [CACHE_MAGIC, struct.pack("<H", CACHE_VERSION)]
    for name, _ in _BLOCKS:
        m = np.ascontiguousarray(getattr(features, name), dtype="<f4")
        parts.append(struct.pack("<B", len(name)) + name.encode("ascii"))
        parts.append(struct.pack("<II", *m.shape))
        parts.append(m.tobytes())
    return b"".join(parts)


def write_cache(features: FeatureSet, path) -> None:
    atomic_write_bytes(path, cache_bytes(features))


def read_cache(path) -> FeatureSet:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 6:
        raise ValueError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    pos = 6
    blocks = {}
    for name, rows in _BLOCKS:
        try:
            (n,) = struct.unpack_from("<B", data, pos)
            got = data[pos + 1 : pos + 1 + n].decode("ascii")
            pos += 1 + n
            r, c = struct.unpack_from("<II", data, pos)
            pos += 8
        except struct.error as exc:
            raise ValueError(f"{path}: truncated file") from exc
        if got != name:
            raise ValueError(f"{path}: expected block {name!r}, found {got!r}")
        if (r, c) != (rows, N_FRAMES):
            raise ValueError(f"{path}: block {name} has shape {(r, c)}, expected {(rows, N_FRAMES)}")
        nbytes = 4 * r * c
        if pos + nbytes > len(data):
            raise ValueError(f"{path}: truncated file")
        blocks[name] = np.frombuffer(data, dtype="<f4", count=r * c, offset=pos).reshape(r, c).astype(np.float32)
        pos += nbytes
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return FeatureSet(**blocks)
