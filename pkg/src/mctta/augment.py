"""SpecAugment-style views of a log-mel spectrogram.

Masks fill with the mean of the *input* matrix.  View parameters come from
a Philox generator keyed by the config seed with the view index as counter,
so any view can be regenerated on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputTooShort, MaskRangeError

OPERATORS = ("TM", "FM", "TFM", "TR")


@dataclass(frozen=True)
class AugmentConfig:
    n_views: int = 8
    max_time_mask: int = 20
    max_freq_mask: int = 8
    seed: int = 0

    def validate(self, shape: tuple[int, int] | None = None) -> "AugmentConfig":
        if self.n_views < 1:
            raise ConfigError(f"n_views must be >= 1, got {self.n_views}")
        if self.max_time_mask < 1 or self.max_freq_mask < 1:
            raise ConfigError("mask maxima must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")
        if shape is not None:
            t, f = shape
            if self.n_views > 1 and self.max_time_mask >= t:
                raise ConfigError(f"max_time_mask {self.max_time_mask} must be < T={t}")
            if self.n_views > 1 and self.max_freq_mask >= f:
                raise ConfigError(f"max_freq_mask {self.max_freq_mask} must be < F={f}")
        return self


@dataclass
class ViewSet:
    views: np.ndarray  # (M, T, F)
    provenance: list[dict] = field(default_factory=list)

    @property
    def tags(self) -> list[str]:
        return [p["op"] for p in self.provenance]

    def __len__(self) -> int:
        return len(self.views)


def _check_window(start: int, width: int, size: int, axis: str) -> None:
    if width < 0 or start < 0 or start + width > size:
        raise MaskRangeError(f"{axis} mask [{start}, {start + width}) outside [0, {size})")


def time_mask(x: np.ndarray, start: int, width: int, fill: float | None = None) -> np.ndarray:
    _check_window(start, width, x.shape[0], "time")
    out = x.copy()
    if width:
        out[start : start + width, :] = x.mean() if fill is None else fill
    return out


def freq_mask(x: np.ndarray, start: int, width: int, fill: float | None = None) -> np.ndarray:
    _check_window(start, width, x.shape[1], "frequency")
    out = x.copy()
    if width:
        out[:, start : start + width] = x.mean() if fill is None else fill
    return out


def time_freq_mask(x: np.ndarray, t_start: int, t_width: int, f_start: int, f_width: int) -> np.ndarray:
    _check_window(t_start, t_width, x.shape[0], "time")
    _check_window(f_start, f_width, x.shape[1], "frequency")
    fill = x.mean()
    return freq_mask(time_mask(x, t_start, t_width, fill), f_start, f_width, fill)


def time_reorder(x: np.ndarray) -> np.ndarray:
    """Swap the two temporal halves; the split is at ``T // 2``."""
    t = x.shape[0]
    if t < 2:
        raise InputTooShort(f"time_reorder needs T >= 2, got {t}")
    k = t // 2
    return np.concatenate([x[k:], x[:k]], axis=0)


def _draw(rng: np.random.Generator, size: int, max_width: int) -> tuple[int, int]:
    width = int(rng.integers(1, max_width + 1))
    start = int(rng.integers(0, size - width + 1))
    return start, width


def view_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed, counter=index))


def apply_view(x: np.ndarray, index: int, cfg: AugmentConfig) -> tuple[np.ndarray, dict]:
    """Build view ``index`` of ``x`` (index 0 is the untouched input)."""
    if index == 0:
        return x.copy(), {"op": "ID"}
    op = OPERATORS[(index - 1) % len(OPERATORS)]
    rng = view_rng(cfg.seed, index)
    t, f = x.shape
    if op == "TM":
        s, w = _draw(rng, t, cfg.max_time_mask)
        return time_mask(x, s, w), {"op": op, "t_start": s, "t_width": w}
    if op == "FM":
        s, w = _draw(rng, f, cfg.max_freq_mask)
        return freq_mask(x, s, w), {"op": op, "f_start": s, "f_width": w}
    if op == "TFM":
        ts, tw = _draw(rng, t, cfg.max_time_mask)
        fs, fw = _draw(rng, f, cfg.max_freq_mask)
        prov = {"op": op, "t_start": ts, "t_width": tw, "f_start": fs, "f_width": fw}
        return time_freq_mask(x, ts, tw, fs, fw), prov
    return time_reorder(x), {"op": "TR", "split": t // 2}


def make_views(x: np.ndarray, cfg: AugmentConfig) -> ViewSet:
    cfg.validate(x.shape)
    built = [apply_view(x, i, cfg) for i in range(cfg.n_views)]
    return ViewSet(np.stack([v for v, _ in built]), [p for _, p in built])
