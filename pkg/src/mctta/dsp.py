"""Log-mel frontend and raw waveform storage.

Framing uses no padding, so a clip of ``n`` samples yields
``(n - window) // hop + 1`` frames.  The mel scale is HTK
(``2595 * log10(1 + f / 700)``) and compression is the natural log with a
floor.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputTooShort, SchemaMismatch

MANIFEST_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 44100

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 44100
    n_mels: int = 64
    hop: int = 320
    window: int = 1024
    f_min: float = 50.0
    f_max: float = 8000.0
    log_floor: float = 1e-10

    def validate(self) -> "MelConfig":
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.n_mels < 2:
            raise ConfigError(f"n_mels must be >= 2, got {self.n_mels}")
        if not 0 < self.hop <= self.window:
            raise ConfigError(f"need 0 < hop <= window, got hop={self.hop} window={self.window}")
        if not 0 <= self.f_min < self.f_max:
            raise ConfigError(f"need f_min < f_max, got {self.f_min}, {self.f_max}")
        if self.f_max > self.sample_rate / 2:
            raise ConfigError(f"f_max {self.f_max} exceeds Nyquist {self.sample_rate / 2}")
        if not self.log_floor > 0:
            raise ConfigError("log_floor must be positive")
        return self


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg: MelConfig) -> np.ndarray:
    """``n_mels + 2`` edge frequencies in Hz; band ``k`` peaks at ``edges[k + 1]``."""
    return mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters with unit peak, shape ``(n_fft // 2 + 1, n_mels)``."""
    edges = mel_band_edges(cfg)
    freqs = np.fft.rfftfreq(cfg.window, d=1.0 / cfg.sample_rate)
    lo, mid, hi = edges[:-2], edges[1:-1], edges[2:]
    up = (freqs[:, None] - lo) / (mid - lo)
    down = (hi - freqs[:, None]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def frame_count(n_samples: int, cfg: MelConfig) -> int:
    if n_samples < cfg.window:
        raise InputTooShort(f"{n_samples} samples is shorter than one window ({cfg.window})")
    return (n_samples - cfg.window) // cfg.hop + 1


def mel_power(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Pre-log filterbank energies, shape ``(T, n_mels)``."""
    x = np.asarray(samples, dtype=np.float64)
    n_frames = frame_count(len(x), cfg)
    idx = np.arange(cfg.window)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(cfg.window + 1)[:-1]  # periodic Hann
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    return power @ mel_filterbank(cfg)


def compute_mel(w: Waveform | np.ndarray, cfg: MelConfig | None = None) -> np.ndarray:
    """Log-mel spectrogram of ``w`` as a ``(T, n_mels)`` float64 matrix."""
    cfg = (cfg or MelConfig()).validate()
    if isinstance(w, Waveform):
        if w.sample_rate != cfg.sample_rate:
            raise ConfigError(f"waveform is {w.sample_rate} Hz but config expects {cfg.sample_rate} Hz")
        samples = w.samples
    else:
        samples = w
    return np.log(np.maximum(mel_power(samples, cfg), cfg.log_floor))


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, n_mels: int) -> "NormStats":
        return cls(np.zeros(n_mels), np.ones(n_mels))

    @classmethod
    def fit(cls, mels: Sequence[np.ndarray]) -> "NormStats":
        stacked = np.concatenate([np.asarray(m) for m in mels], axis=0)
        return cls(stacked.mean(axis=0), stacked.std(axis=0))


def normalize(m: np.ndarray, stats: NormStats) -> np.ndarray:
    std = np.asarray(stats.std, dtype=np.float64)
    if np.any(std <= 0):
        raise ConfigError("normalization std must be strictly positive in every bin")
    return (m - stats.mean) / std


# -- raw f32 waveform sets ----------------------------------------------------


def write_waveform_set(
    directory: str | Path,
    waveforms: Sequence[Waveform],
    labels: Sequence[int | None] | None = None,
    extra: dict | None = None,
) -> Path:
    """Write ``manifest.json`` plus one raw little-endian f32 file per clip."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    labels = list(labels) if labels is not None else [None] * len(waveforms)
    clips = []
    for i, (w, y) in enumerate(zip(waveforms, labels)):
        name = f"clip_{i:05d}.f32"
        np.asarray(w.samples, dtype="<f4").tofile(directory / name)
        entry = {"path": name, "sample_rate": int(w.sample_rate)}
        if y is not None:
            entry["label"] = int(y)
        clips.append(entry)
    manifest = {"schema_version": MANIFEST_SCHEMA_VERSION, "clips": clips, **(extra or {})}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_waveform_set(directory: str | Path) -> tuple[list[Waveform], list[int | None], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise SchemaMismatch(
            f"manifest schema_version {manifest.get('schema_version')!r}, expected {MANIFEST_SCHEMA_VERSION}"
        )
    waves, labels = [], []
    for clip in manifest["clips"]:
        samples = np.fromfile(directory / clip["path"], dtype="<f4")
        waves.append(Waveform(samples, int(clip["sample_rate"])))
        labels.append(clip.get("label"))
    return waves, labels, manifest


def config_dict(cfg: MelConfig) -> dict:
    return asdict(cfg)
