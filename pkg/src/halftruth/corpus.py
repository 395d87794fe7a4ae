"""Synthetic real / fully-fake / half-truth audio, WAV I/O and dataset manifests.

Every clip is 4 s of 16 kHz mono audio. Generation is a pure function of a
per-clip seed derived from ``(master_seed, split, index)``, so corpora are
reproducible bit-for-bit regardless of generation order or parallelism.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
import wave
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import signal

SAMPLE_RATE = 16000
CLIP_SECONDS = 4.0
CLIP_SAMPLES = 64000
PEAK = 0.9

SPLITS = ("train", "val", "test")
_SPLIT_CODES = {"train": 1, "val": 2, "test": 3}
_MASK64 = (1 << 64) - 1


class Label(IntEnum):
    REAL = 0
    FAKE = 1
    HALF_TRUTH = 2


@dataclass(frozen=True)
class ClipLabel:
    cls: Label
    boundaries: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "cls", Label(int(self.cls)))
        if (self.cls == Label.HALF_TRUTH) != (self.boundaries is not None):
            raise ValueError("boundaries must be given iff the class is HalfTruth")
        if self.boundaries is not None:
            start, end = self.boundaries
            if not 0.0 <= start < end <= 1.0:
                raise ValueError(f"invalid boundaries {self.boundaries}")


@dataclass
class Manifest:
    entries: list[tuple[str, ClipLabel]]
    split: str = "train"
    master_seed: int = 0

    def __post_init__(self):
        paths = [p for p, _ in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be unique")

    def __len__(self):
        return len(self.entries)

    def labels(self) -> np.ndarray:
        return np.array([int(lab.cls) for _, lab in self.entries], dtype=np.int64)

    def boundaries(self) -> np.ndarray:
        """[N, 2] normalised boundaries; NaN rows for clips without a splice."""
        out = np.full((len(self.entries), 2), np.nan)
        for i, (_, lab) in enumerate(self.entries):
            if lab.boundaries is not None:
                out[i] = lab.boundaries
        return out

    def class_counts(self) -> dict[str, int]:
        labels = self.labels()
        return {lab.name: int(np.sum(labels == lab)) for lab in Label}


@dataclass
class SynthesisConfig:
    """Knobs of the synthetic corpus.

    The voice parameters describe the pseudo-speech source; the artefact
    parameters control what separates "fake" audio from "real" audio.
    """

    n_clips: dict[str, int] = field(default_factory=lambda: {"train": 1500, "val": 300, "test": 300})
    ratios: tuple[float, float, float] = (0.17, 0.34, 0.49)
    splice_range: tuple[float, float] = (0.8, 1.2)
    f0_range: tuple[float, float] = (90.0, 220.0)
    formant_ranges: tuple[tuple[float, float], ...] = ((300.0, 800.0), (900.0, 2200.0), (2300.0, 3200.0))
    am_rate_range: tuple[float, float] = (3.0, 6.0)
    noise_floor: float = 1e-3
    artefact_strength: float = 1.0
    quant_bits: int = 3
    phase_jitter: float = 0.5
    comb_band: tuple[float, float] = (6000.0, 7800.0)
    comb_level: float = 0.02
    real_comb_band: tuple[float, float] = (6200.0, 7600.0)
    real_comb_level: float = 0.0
    master_seed: int = 42

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        self.splice_range = tuple(float(s) for s in self.splice_range)
        self.formant_ranges = tuple(tuple(float(v) for v in fr) for fr in self.formant_ranges)
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ValueError("ratios must be three non-negative numbers")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {sum(self.ratios)}")
        lo, hi = self.splice_range
        if not 0.0 < lo <= hi < CLIP_SECONDS:
            raise ValueError(f"splice range {self.splice_range} must lie within (0, 4)")
        if not 2 <= len(self.formant_ranges) <= 3:
            raise ValueError("need 2 or 3 formants")
        if self.f0_range[0] < 90.0 or self.f0_range[1] > 300.0 or self.f0_range[0] > self.f0_range[1]:
            raise ValueError("f0 range must lie within [90, 300] Hz")
        if self.artefact_strength < 0:
            raise ValueError("artefact_strength must be >= 0")
        if self.quant_bits < 1:
            raise ValueError("quant_bits must be >= 1")
        for split, n in self.n_clips.items():
            if split not in SPLITS or n < 0:
                raise ValueError(f"bad n_clips entry {split}={n}")


def domain_b_config(**overrides) -> SynthesisConfig:
    """A second, differently parameterised synthetic domain.

    Higher voices, shifted formants, a high-band tone comb on *genuine*
    recordings (as if from the capture chain) and fakes marked by a mid-band
    comb instead. A model trained on the default domain inverts its
    high-band cue here.
    """
    params = dict(
        f0_range=(150.0, 300.0),
        formant_ranges=((400.0, 1000.0), (1200.0, 2600.0), (2600.0, 3400.0)),
        am_rate_range=(4.0, 7.0),
        comb_band=(3600.0, 5000.0),
        comb_level=0.02,
        real_comb_level=0.02,
        quant_bits=4,
    )
    params.update(overrides)
    return SynthesisConfig(**params)


# ---------------------------------------------------------------------------
# seeds


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def mix_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed with the splitmix64 finaliser."""
    h = 0
    for p in parts:
        h = _splitmix64(h ^ (int(p) & _MASK64))
    return h


def clip_seed(master_seed: int, split: str, index: int) -> int:
    return mix_seed(master_seed, _SPLIT_CODES[split], index)


# ---------------------------------------------------------------------------
# WAV I/O


def load_wav(path) -> np.ndarray:
    """Read a PCM16 WAV as float64 mono at 16 kHz in [-1, 1]."""
    try:
        with wave.open(str(path), "rb") as w:
            n_channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            n_frames = w.getnframes()
            raw = w.readframes(n_frames)
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"{path}: malformed WAV ({exc})") from exc
    if width != 2:
        raise ValueError(f"{path}: unsupported encoding, expected PCM16 got {8 * width}-bit")
    if n_channels not in (1, 2):
        raise ValueError(f"{path}: unsupported channel count {n_channels}")
    data = np.frombuffer(raw, dtype="<i2")
    if data.size == 0 or n_frames == 0:
        raise ValueError(f"{path}: zero-length audio")
    if data.size % n_channels:
        raise ValueError(f"{path}: truncated frame data")
    x = data.reshape(-1, n_channels).astype(np.float64) / 32768.0
    x = x.mean(axis=1)
    return resample_linear(x, rate)


def resample_linear(x: np.ndarray, rate: int, target: int = SAMPLE_RATE) -> np.ndarray:
    if rate == target:
        return x
    if rate <= 0:
        raise ValueError(f"bad sample rate {rate}")
    n_out = int(np.floor((len(x) - 1) * target / rate)) + 1
    t_out = np.arange(n_out) / target
    t_in = np.arange(len(x)) / rate
    return np.interp(t_out, t_in, x)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def wav_bytes(samples: np.ndarray, rate: int = SAMPLE_RATE) -> bytes:
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(to_pcm16(samples).tobytes())
    return buf.getvalue()


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_wav(path, samples: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    atomic_write_bytes(path, wav_bytes(samples, rate))


def pad_or_trim(clip: np.ndarray, n: int = CLIP_SAMPLES) -> np.ndarray:
    clip = np.asarray(clip)
    if clip.size == 0:
        raise ValueError("cannot pad an empty clip")
    if len(clip) >= n:
        return clip[:n].copy()
    out = np.zeros(n, dtype=clip.dtype)
    out[: len(clip)] = clip
    return out


# ---------------------------------------------------------------------------
# synthesis


def _resonator(x, freq, bandwidth):
    r = np.exp(-np.pi * bandwidth / SAMPLE_RATE)
    a = [1.0, -2.0 * r * np.cos(2.0 * np.pi * freq / SAMPLE_RATE), r * r]
    return signal.lfilter([1.0 - r], a, x)


def _tone_comb(rng, band, n_tones, t):
    freqs = np.linspace(band[0], band[1], n_tones)
    phases = rng.uniform(0.0, 2.0 * np.pi, n_tones)
    return np.sin(2.0 * np.pi * freqs[:, None] * t[None, :] + phases[:, None]).sum(axis=0) / n_tones


def _voice(seed: int, cfg: SynthesisConfig) -> np.ndarray:
    """Unnormalised pseudo-speech: harmonic source, formants, syllabic envelope."""
    rng = np.random.default_rng(mix_seed(seed, 0x5EED))
    t = np.arange(CLIP_SAMPLES) / SAMPLE_RATE

    f0_base = rng.uniform(*cfg.f0_range)
    r1, r2 = rng.uniform(0.3, 1.0), rng.uniform(1.5, 3.0)
    p1, p2 = rng.uniform(0.0, 2.0 * np.pi, 2)
    f0 = f0_base * (1.0 + 0.15 * np.sin(2 * np.pi * r1 * t + p1) + 0.06 * np.sin(2 * np.pi * r2 * t + p2))
    f0 = np.clip(f0, 90.0, 300.0)
    phase = 2.0 * np.pi * np.cumsum(f0) / SAMPLE_RATE

    source = np.zeros(CLIP_SAMPLES)
    unit = np.exp(1j * phase)
    harmonic = unit.copy()
    for h in range(1, 51):
        # fade harmonics out between 3.5 and 4.5 kHz
        gain = np.clip((4500.0 - h * f0) / 1000.0, 0.0, 1.0)
        if not gain.any():
            break
        source += gain * harmonic.imag / h
        harmonic *= unit
    source += 0.05 * rng.standard_normal(CLIP_SAMPLES)

    voiced = np.zeros(CLIP_SAMPLES)
    for k, (lo, hi) in enumerate(cfg.formant_ranges):
        fc = rng.uniform(lo, hi)
        bw = rng.uniform(80.0, 160.0)
        voiced += (0.8 ** k) * _resonator(source, fc, bw)

    rate = rng.uniform(*cfg.am_rate_range)
    am_phase = rng.uniform(0.0, 2.0 * np.pi)
    env = 0.08 + 0.92 * (0.5 + 0.5 * np.sin(2 * np.pi * rate * t + am_phase)) ** 1.5
    y = voiced * env
    y /= np.max(np.abs(y))
    y += cfg.noise_floor * rng.standard_normal(CLIP_SAMPLES)
    if cfg.real_comb_level > 0:
        y += cfg.real_comb_level * _tone_comb(rng, cfg.real_comb_band, 6, t)
    return y


def _normalise(y: np.ndarray) -> np.ndarray:
    return PEAK * y / np.max(np.abs(y))


def synth_real(seed: int, config: SynthesisConfig) -> np.ndarray:
    return _normalise(_voice(seed, config))


def synth_fake(seed: int, config: SynthesisConfig) -> np.ndarray:
    """The `synth_real` voice for the same seed, pushed through vocoder-like damage.

    Artefacts: magnitude quantisation to ``2**quant_bits`` levels per frame,
    per-frame phase jitter, and a weak tone comb in ``comb_band``. With
    ``artefact_strength == 0`` the result is exactly ``synth_real``.
    """
    y = _voice(seed, config)
    s = config.artefact_strength
    if s == 0:
        return _normalise(y)
    rng = np.random.default_rng(mix_seed(seed, 0xFA4E))
    _, _, z = signal.stft(y, nperseg=512, noverlap=256, boundary="even", padded=True)
    mag, ang = np.abs(z), np.angle(z)
    ref = mag.max(axis=0, keepdims=True) + 1e-12
    levels = 2 ** config.quant_bits - 1
    mag_q = np.round(mag / ref * levels) / levels * ref
    mag = (1.0 - min(s, 1.0)) * mag + min(s, 1.0) * mag_q
    ang = ang + s * config.phase_jitter * rng.uniform(-np.pi, np.pi, size=ang.shape)
    _, y_hat = signal.istft(mag * np.exp(1j * ang), nperseg=512, noverlap=256, boundary=True)
    y_hat = y_hat[:CLIP_SAMPLES]
    if len(y_hat) < CLIP_SAMPLES:
        y_hat = pad_or_trim(y_hat)
    t = np.arange(CLIP_SAMPLES) / SAMPLE_RATE
    y_hat = y_hat / np.max(np.abs(y_hat))
    y_hat += s * config.comb_level * _tone_comb(rng, config.comb_band, 5, t)
    return _normalise(y_hat)


def make_half_truth(real: np.ndarray, fake: np.ndarray, start_s: float, dur_s: float):
    """Replace ``[start_s, start_s + dur_s)`` of ``real`` with ``fake``.

    Returns ``(clip, (start_norm, end_norm))`` with boundaries normalised by
    the 4 s clip length. The splice is sample-exact with no crossfade.
    """
    if len(real) != CLIP_SAMPLES or len(fake) != CLIP_SAMPLES:
        raise ValueError("both clips must be exactly 64000 samples")
    if start_s < 0 or dur_s <= 0 or start_s + dur_s > CLIP_SECONDS + 1e-12:
        raise ValueError(f"segment [{start_s}, {start_s + dur_s}) outside the clip")
    i0 = int(round(start_s * SAMPLE_RATE))
    i1 = min(int(round((start_s + dur_s) * SAMPLE_RATE)), CLIP_SAMPLES)
    out = np.array(real, copy=True)
    out[i0:i1] = fake[i0:i1]
    return out, (start_s / CLIP_SECONDS, min((start_s + dur_s) / CLIP_SECONDS, 1.0))


def class_counts(n: int, ratios) -> list[int]:
    """Largest-remainder apportionment of ``n`` clips over the class ratios."""
    raw = [n * r for r in ratios]
    counts = [int(np.floor(v + 1e-9)) for v in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    for c, r in zip(counts, ratios):
        if r > 0 and c == 0 and n > 0:
            raise ValueError(f"ratios {tuple(ratios)} infeasible for n_clips={n}")
    return counts


def _splice_params(seed: int, cfg: SynthesisConfig) -> tuple[int, int]:
    """Sample-grid splice start and length for a half-truth clip."""
    rng = np.random.default_rng(mix_seed(seed, 0x5B11CE))
    dur = rng.uniform(*cfg.splice_range)
    n_dur = int(round(dur * SAMPLE_RATE))
    start = rng.uniform(0.0, CLIP_SECONDS - n_dur / SAMPLE_RATE)
    n_start = min(int(round(start * SAMPLE_RATE)), CLIP_SAMPLES - n_dur)
    return n_start, n_dur


def render_clip(seed: int, label: Label, cfg: SynthesisConfig):
    """Generate one clip and its ``ClipLabel`` from a clip seed."""
    label = Label(label)
    if label == Label.REAL:
        return synth_real(seed, cfg), ClipLabel(label)
    if label == Label.FAKE:
        return synth_fake(seed, cfg), ClipLabel(label)
    n_start, n_dur = _splice_params(seed, cfg)
    clip, bounds = make_half_truth(
        synth_real(seed, cfg), synth_fake(seed, cfg), n_start / SAMPLE_RATE, n_dur / SAMPLE_RATE
    )
    return clip, ClipLabel(label, bounds)


def _split_labels(cfg: SynthesisConfig, split: str) -> list[Label]:
    n = cfg.n_clips.get(split, 0)
    counts = class_counts(n, cfg.ratios)
    labels = np.repeat(np.arange(3), counts)
    rng = np.random.default_rng(mix_seed(cfg.master_seed, _SPLIT_CODES[split], 0x1AB))
    return [Label(int(v)) for v in rng.permutation(labels)]


def generate_corpus(config: SynthesisConfig, out_dir, workers: int = 1) -> dict[str, Manifest]:
    """Write WAVs under ``out_dir/<split>/`` and one ``<split>.csv`` manifest per split."""
    out_dir = Path(out_dir)
    manifests = {}
    for split in SPLITS:
        if config.n_clips.get(split, 0) == 0:
            continue
        labels = _split_labels(config, split)
        (out_dir / split).mkdir(parents=True, exist_ok=True)

        def work(i, split=split, labels=labels):
            lab = labels[i]
            clip, clip_label = render_clip(clip_seed(config.master_seed, split, i), lab, config)
            rel = f"{split}/{split}_{i:05d}.wav"
            save_wav(out_dir / rel, clip)
            return rel, clip_label

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                entries = list(pool.map(work, range(len(labels))))
        else:
            entries = [work(i) for i in range(len(labels))]
        manifest = Manifest(entries, split=split, master_seed=config.master_seed)
        write_manifest(manifest, out_dir / f"{split}.csv")
        manifests[split] = manifest
    meta = asdict(config)
    atomic_write_bytes(out_dir / "corpus.json", (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    return manifests


def recover_boundaries(clip: np.ndarray, real: np.ndarray, tol: float = 0.0):
    """Locate the region where ``clip`` departs from ``real``; normalised (start, end)."""
    diff = np.flatnonzero(np.abs(np.asarray(clip) - np.asarray(real)) > tol)
    if diff.size == 0:
        return None
    return diff[0] / CLIP_SAMPLES, (diff[-1] + 1) / CLIP_SAMPLES


# ---------------------------------------------------------------------------
# manifests

MANIFEST_HEADER = ["path", "label", "start_norm", "end_norm"]


def write_manifest(manifest: Manifest, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for rel, lab in manifest.entries:
        if lab.boundaries is None:
            writer.writerow([rel, int(lab.cls), "", ""])
        else:
            writer.writerow([rel, int(lab.cls), repr(float(lab.boundaries[0])), repr(float(lab.boundaries[1]))])
    path = Path(path)
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))
    sidecar = {"split": manifest.split, "master_seed": manifest.master_seed}
    atomic_write_bytes(path.with_suffix(".json"), (json.dumps(sidecar) + "\n").encode())


def read_manifest(path) -> Manifest:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}: expected header {','.join(MANIFEST_HEADER)}, got {header}")
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            rel, label, start, end = row
            cls = Label(int(label))
            if cls == Label.HALF_TRUTH:
                if not start or not end:
                    raise ValueError(f"{path}:{lineno}: HalfTruth row needs boundaries")
                s, e = float(start), float(end)
                if s >= e:
                    raise ValueError(f"{path}:{lineno}: start {s} >= end {e}")
                entries.append((rel, ClipLabel(cls, (s, e))))
            else:
                if start or end:
                    raise ValueError(f"{path}:{lineno}: boundaries on a non-HalfTruth row")
                entries.append((rel, ClipLabel(cls)))
    split, master_seed = path.stem if path.stem in SPLITS else "train", 0
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        split, master_seed = meta.get("split", split), int(meta.get("master_seed", 0))
    return Manifest(entries, split=split, master_seed=master_seed)
