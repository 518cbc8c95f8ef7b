"""Synthetic datasets, domain shifts and evaluation reports.

Each class is a pair of tones (one from a low band, one from a high band)
under a class-specific amplitude-modulation rate.  Domain shifts are
applied to test waveforms only.  Labels are consumed here, never by the
adaptation engine.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dsp import MelConfig, NormStats, Waveform, compute_mel, normalize, read_waveform_set, write_waveform_set
from .engine import (
    AdaptConfig,
    AdaptRun,
    build_views,
    derive_seed,
    embed_views,
    forward_embeddings,
    initial_state,
    predict,
    run,
)
from .errors import ConfigError, SchemaMismatch
from .prompt_nets import PromptState
from .toy_alm import PretrainConfig, ToyALM, pretrain_toy, zero_shot_probs

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
ABLATION_VARIANTS = {
    "full": {},
    "no_cnet": {"disable_cnet": True},
    "no_dnet": {"disable_dnet": True},
    "no_contrastive": {"disable_contrastive": True},
    "no_entropy": {"disable_entropy": True},
}
ABLATION_DEPTHS = (1, 2, 3, 4)
ABLATION_WIDTHS = (1, 2)


# -- datasets -----------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    n_classes: int = 8
    samples_per_class: int = 40
    clip_seconds: float = 1.0
    sample_rate: int = 44100
    base_snr_db: float = 30.0
    snr_spread_db: float = 0.0
    tilt_spread: float = 0.0
    f_low: float = 300.0
    f_high: float = 4000.0
    am_rates: tuple[float, ...] = (3.0, 40.0)
    bandwidth: float = 0.04
    prompt_prefix: int = 2
    seed: int = 0

    def validate(self, mel: MelConfig | None = None) -> "SyntheticDatasetSpec":
        mel = mel or MelConfig(sample_rate=self.sample_rate)
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if not mel.f_min <= self.f_low < self.f_high <= mel.f_max:
            raise ConfigError(
                f"tone range [{self.f_low}, {self.f_high}] must lie inside [{mel.f_min}, {mel.f_max}]"
            )
        if not self.am_rates or any(r <= 0 for r in self.am_rates):
            raise ConfigError("am_rates must be a non-empty list of positive rates")
        if self.clip_seconds * self.sample_rate < mel.window:
            raise ConfigError("clips shorter than one analysis window")
        return self


@dataclass(frozen=True)
class ClassSignature:
    tones: tuple[float, float]
    am_rate: float


@dataclass
class SyntheticDataset:
    waveforms: list[Waveform]
    labels: np.ndarray
    class_prompts: list[list[int]]
    signatures: list[ClassSignature] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.waveforms)


def class_signatures(spec: SyntheticDatasetSpec) -> list[ClassSignature]:
    """Classes cycle through ``am_rates`` and share a tone pair per cycle.

    With the default two rates, classes 2k and 2k+1 have the same tones and
    differ only in modulation rate, which is what additive noise obscures.
    """
    n, r = spec.n_classes, len(spec.am_rates)
    n_pairs = -(-n // r)
    grid = np.geomspace(spec.f_low, spec.f_high, 2 * n_pairs)
    sigs = []
    for c in range(n):
        k = c // r
        sigs.append(ClassSignature((float(grid[k]), float(grid[n_pairs + k])), float(spec.am_rates[c % r])))
    return sigs


def class_prompt_ids(n_classes: int, prefix: int = 2) -> list[list[int]]:
    """``prefix`` shared template tokens followed by one class-identity token."""
    return [list(range(prefix)) + [prefix + c] for c in range(n_classes)]


def _band_tone(f: float, rel_bw: float, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.normal(size=n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec *= np.abs(freqs - f) <= rel_bw * f / 2
    x = np.fft.irfft(spec, n=n)
    return x / np.sqrt(np.mean(x**2))


def _render(sig: ClassSignature, spec: SyntheticDatasetSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    sr = spec.sample_rate
    t = np.arange(n) / sr
    f1, f2 = (f * (1.0 + rng.uniform(-0.03, 0.03)) for f in sig.tones)
    x = _band_tone(f1, spec.bandwidth, n, sr, rng)
    x += rng.uniform(0.4, 1.0) * _band_tone(f2, spec.bandwidth, n, sr, rng)
    rate = sig.am_rate * (1.0 + rng.uniform(-0.1, 0.1))
    depth = rng.uniform(0.7, 0.95)
    x *= 1.0 - depth * 0.5 * (1.0 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    snr = spec.base_snr_db + rng.uniform(-1.0, 1.0) * spec.snr_spread_db
    x += rng.normal(size=n) * np.sqrt(np.mean(x**2) / 10 ** (snr / 10))
    if spec.tilt_spread:
        x = _tilt(x, sr, rng.uniform(-1.0, 1.0) * spec.tilt_spread)
    x *= rng.uniform(0.1, 0.5) / np.max(np.abs(x))
    return x.astype(np.float32)


def gen_dataset(spec: SyntheticDatasetSpec, mel: MelConfig | None = None) -> SyntheticDataset:
    """Deterministic labeled clips, ordered by a seeded shuffle."""
    spec.validate(mel)
    sigs = class_signatures(spec)
    n = int(round(spec.clip_seconds * spec.sample_rate))
    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    labels = labels[np.random.default_rng(derive_seed(spec.seed, "order")).permutation(len(labels))]
    waves = []
    for i, y in enumerate(labels):
        rng = np.random.default_rng(derive_seed(spec.seed, "clip", i))
        waves.append(Waveform(_render(sigs[y], spec, n, rng), spec.sample_rate))
    return SyntheticDataset(waves, labels, class_prompt_ids(spec.n_classes, spec.prompt_prefix), sigs)


# -- domain shifts ------------------------------------------------------------

SHIFT_KINDS = ("none", "additive_noise", "spectral_tilt", "gain", "combined")


@dataclass(frozen=True)
class DomainShiftSpec:
    kind: str = "combined"
    snr_db: float | None = 5.0
    tilt_db_per_octave: float = -3.0
    gain_db: float = 0.0
    seed: int = 0

    def validate(self) -> "DomainShiftSpec":
        if self.kind not in SHIFT_KINDS:
            raise ConfigError(f"unknown shift kind {self.kind!r}; expected one of {SHIFT_KINDS}")
        for v in (self.snr_db, self.tilt_db_per_octave, self.gain_db):
            if v is not None and not np.isfinite(v):
                raise ConfigError("shift parameters must be finite")
        if self.kind == "additive_noise" and self.snr_db is None:
            raise ConfigError("additive_noise needs snr_db")
        return self

    @property
    def name(self) -> str:
        if self.kind == "none":
            return "clean"
        if self.kind == "additive_noise":
            return f"noise{self.snr_db:g}dB"
        if self.kind == "spectral_tilt":
            return f"tilt{self.tilt_db_per_octave:g}"
        if self.kind == "gain":
            return f"gain{self.gain_db:g}dB"
        parts = []
        if self.snr_db is not None:
            parts.append(f"noise{self.snr_db:g}dB")
        if self.tilt_db_per_octave:
            parts.append(f"tilt{self.tilt_db_per_octave:g}")
        if self.gain_db:
            parts.append(f"gain{self.gain_db:g}dB")
        return "+".join(parts) or "clean"

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "DomainShiftSpec":
        """``none``, ``additive_noise:SNR``, ``spectral_tilt:DB``, ``gain:DB`` or ``combined:SNR:TILT[:GAIN]``."""
        kind, *args = text.strip().split(":")
        try:
            vals = [float(a) for a in args]
        except ValueError as exc:
            raise ConfigError(f"bad shift {text!r}") from exc
        if kind == "none":
            return cls("none", None, 0.0, 0.0, seed).validate()
        if kind == "additive_noise" and len(vals) == 1:
            return cls(kind, vals[0], 0.0, 0.0, seed).validate()
        if kind == "spectral_tilt" and len(vals) == 1:
            return cls(kind, None, vals[0], 0.0, seed).validate()
        if kind == "gain" and len(vals) == 1:
            return cls(kind, None, 0.0, vals[0], seed).validate()
        if kind == "combined" and len(vals) in (2, 3):
            return cls(kind, vals[0], vals[1], vals[2] if len(vals) == 3 else 0.0, seed).validate()
        raise ConfigError(f"bad shift {text!r}")


def _tilt(x: np.ndarray, sr: int, db_per_octave: float, f_ref: float = 1000.0) -> np.ndarray:
    spec = np.fft.rfft(x)
    freqs = np.maximum(np.fft.rfftfreq(len(x), 1.0 / sr), 20.0)
    spec *= 10.0 ** (db_per_octave * np.log2(freqs / f_ref) / 20.0)
    return np.fft.irfft(spec, n=len(x))


def shift_waveform(x: np.ndarray, sr: int, shift: DomainShiftSpec, rng: np.random.Generator) -> np.ndarray:
    kind = shift.kind
    if kind == "none":
        return x.copy()
    y = np.asarray(x, dtype=np.float64)
    if kind in ("additive_noise", "combined") and shift.snr_db is not None:
        power = np.mean(y**2)
        y = y + rng.normal(size=len(y)) * np.sqrt(power / 10 ** (shift.snr_db / 10))
    if kind in ("spectral_tilt", "combined") and shift.tilt_db_per_octave:
        y = _tilt(y, sr, shift.tilt_db_per_octave)
    if kind in ("gain", "combined") and shift.gain_db:
        y = y * 10 ** (shift.gain_db / 20)
    peak = np.max(np.abs(y))
    if peak > 1.0:
        y = y / peak
    return y.astype(np.float32)


def apply_shift(dataset: SyntheticDataset, shift: DomainShiftSpec) -> SyntheticDataset:
    shift.validate()
    waves = []
    for i, w in enumerate(dataset.waveforms):
        rng = np.random.default_rng(derive_seed(shift.seed, "shift", i))
        waves.append(Waveform(shift_waveform(w.samples, w.sample_rate, shift, rng), w.sample_rate))
    return SyntheticDataset(waves, dataset.labels.copy(), dataset.class_prompts, dataset.signatures)


def save_dataset(directory: str | Path, dataset: SyntheticDataset, extra: dict | None = None) -> Path:
    meta = {"class_prompts": dataset.class_prompts, **(extra or {})}
    return write_waveform_set(directory, dataset.waveforms, [int(y) for y in dataset.labels], meta)


def load_dataset(directory: str | Path) -> SyntheticDataset:
    waves, labels, manifest = read_waveform_set(directory)
    prompts = manifest.get("class_prompts") or []
    labs = np.array([-1 if y is None else y for y in labels])
    return SyntheticDataset(waves, labs, prompts)


# -- features & model ---------------------------------------------------------


def log_mels(waveforms: Sequence[Waveform], mel: MelConfig) -> list[np.ndarray]:
    return [compute_mel(w, mel) for w in waveforms]


def features(waveforms: Sequence[Waveform], model: ToyALM) -> list[np.ndarray]:
    """Normalized log-mels with the model's frozen statistics."""
    return [normalize(m, model.stats) for m in log_mels(waveforms, model.mel)]


def build_model(
    spec: SyntheticDatasetSpec,
    mel: MelConfig | None = None,
    pcfg: PretrainConfig = PretrainConfig(),
    seed: int = 0,
    train_per_class: int = 64,
    heldout_per_class: int = 16,
) -> tuple[ToyALM, float]:
    """Generate clean train/held-out sets and pretrain a frozen toy model."""
    mel = mel or MelConfig(sample_rate=spec.sample_rate)
    train = gen_dataset(replace(spec, samples_per_class=train_per_class, seed=derive_seed(seed, "pretrain-train")), mel)
    held = gen_dataset(replace(spec, samples_per_class=heldout_per_class, seed=derive_seed(seed, "pretrain-heldout")), mel)
    train_mels = log_mels(train.waveforms, mel)
    stats = NormStats.fit(train_mels)
    train_n = [normalize(m, stats) for m in train_mels]
    held_n = [normalize(m, stats) for m in log_mels(held.waveforms, mel)]
    return pretrain_toy(
        train_n, train.labels, held_n, held.labels, train.class_prompts, stats, pcfg,
        seed=derive_seed(seed, "pretrain"), mel=mel,
    )


# -- metrics ------------------------------------------------------------------


@dataclass
class Metrics:
    accuracy: float
    per_class: list[float]
    n_correct: int
    n_total: int

    @classmethod
    def from_predictions(cls, predictions: Sequence[int], labels: Sequence[int], n_classes: int) -> "Metrics":
        pred = np.asarray(predictions)
        lab = np.asarray(labels)
        correct = pred == lab
        per_class = [float(correct[lab == c].mean()) if np.any(lab == c) else float("nan") for c in range(n_classes)]
        n_correct = int(correct.sum())
        return cls(n_correct / len(lab), per_class, n_correct, len(lab))


def evaluate_zero_shot(mels: Sequence[np.ndarray], labels, model: ToyALM) -> Metrics:
    """Accuracy of plain class prompts on the unaugmented spectrograms."""
    probs = zero_shot_probs(np.stack(mels), model)
    return Metrics.from_predictions(predict(probs), labels, model.n_classes)


@dataclass
class RunReport:
    config: dict
    config_hash: str
    seed: int
    zero_shot: Metrics
    adapted: Metrics
    losses: dict
    run: AdaptRun | None = None

    @property
    def delta(self) -> float:
        return self.adapted.accuracy - self.zero_shot.accuracy

    def row(self, **extra) -> dict:
        out = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "config_hash": self.config_hash,
            "seed": self.seed,
            **extra,
            "zero_shot_acc": self.zero_shot.accuracy,
            "adapted_acc": self.adapted.accuracy,
            "delta": self.delta,
            "final_consistency": self.losses.get("consistency", ""),
            "final_contrastive": self.losses.get("contrastive", ""),
            "final_loss": self.losses.get("final", ""),
        }
        return out


def config_hash(config: dict) -> str:
    """sha256 of the canonical JSON form of ``config``."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _loss_summary(r: AdaptRun) -> dict:
    keys = ("consistency", "contrastive", "final")
    out = {}
    for k in keys:
        vals = [b[k] for b in r.batch_reports if k in b]
        if vals:
            out[k] = float(np.mean(vals))
    return out


def evaluate_tta(
    mels: Sequence[np.ndarray],
    labels,
    model: ToyALM,
    cfg: AdaptConfig,
    *,
    embeddings: np.ndarray | None = None,
    zero_shot: Metrics | None = None,
    echo: dict | None = None,
    state: PromptState | None = None,
) -> RunReport:
    cfg = cfg.validate()
    zs = zero_shot or evaluate_zero_shot(mels, labels, model)
    # the engine sees waveform features only
    r = run(mels, model, cfg, state=state, embeddings=embeddings)
    adapted = Metrics.from_predictions(r.predictions, labels, model.n_classes)
    echo = echo if echo is not None else hashable_config(cfg)
    return RunReport(echo, config_hash(echo), cfg.seed, zs, adapted, _loss_summary(r), r)


def hashable_config(cfg: AdaptConfig, **extra) -> dict:
    d = asdict(cfg.effective())
    d.pop("seed")
    d.update(extra)
    return d


def ablation_cells() -> list[tuple[str, int, int]]:
    return [(v, d, w) for v in ABLATION_VARIANTS for d in ABLATION_DEPTHS for w in ABLATION_WIDTHS]


def _ablation_cell(args):
    mels, labels, model, cfg, embeddings, zs, echo, variant, depth, width = args
    rep = evaluate_tta(mels, labels, model, cfg, embeddings=embeddings, zero_shot=zs, echo=echo)
    return rep.row(variant=variant, depth=depth, width_mult=width), rep


def ablation_matrix(
    mels: Sequence[np.ndarray],
    labels,
    model: ToyALM,
    base: AdaptConfig,
    echo: dict | None = None,
    jobs: int = 1,
) -> list[tuple[dict, RunReport]]:
    """Every variant x MLP depth x width cell, in a fixed order."""
    base = base.effective().validate()
    zs = evaluate_zero_shot(mels, labels, model)
    embeddings = embed_views(build_views(mels, base), model)
    echo = echo if echo is not None else hashable_config(base)
    tasks = []
    for variant, depth, width in ablation_cells():
        overrides = {"depth": depth, "width_mult": width, **ABLATION_VARIANTS[variant]}
        cfg = replace(base, **overrides)
        cell_echo = {**echo, **overrides}
        tasks.append((mels, labels, model, cfg, embeddings, zs, cell_echo, variant, depth, width))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_ablation_cell, tasks))
    return [_ablation_cell(t) for t in tasks]


def predict_frozen(embeddings: np.ndarray, state: PromptState, model: ToyALM, conditioning: str) -> np.ndarray:
    dist, _ = forward_embeddings(embeddings, state, model, conditioning)
    return predict(dist.g_avg)


@dataclass
class CrossDomainResult:
    shifts: list[str]
    zero_shot: list[float]  # per adapt shift (in-domain zero-shot accuracy)
    accuracy: np.ndarray  # [adapt shift, test shift]
    zero_shot_test: list[float]  # per test shift

    def rows(self) -> list[dict]:
        out = []
        for i, a in enumerate(self.shifts):
            row = {"adapt_shift": a, "zero_shot": self.zero_shot[i]}
            for j, b in enumerate(self.shifts):
                row[b] = float(self.accuracy[i, j])
            row["avg"] = float(self.accuracy[i].mean())
            row["avg_delta"] = float(np.mean(self.accuracy[i] - np.asarray(self.zero_shot_test)))
            row["diag_delta"] = float(self.accuracy[i, i] - self.zero_shot_test[i])
            out.append(row)
        return out


def cross_domain_matrix(
    clean: SyntheticDataset,
    shifts: Sequence[DomainShiftSpec],
    model: ToyALM,
    cfg: AdaptConfig,
) -> CrossDomainResult:
    """Adapt online on each shift's unlabeled stream, then test frozen on every shift."""
    if len(shifts) < 2:
        raise ConfigError("cross-domain evaluation needs at least two shifts")
    cfg = replace(cfg.effective(), mode="online").validate()
    sets = [apply_shift(clean, s) for s in shifts]
    mels = [features(ds.waveforms, model) for ds in sets]
    embs = [embed_views(build_views(m, cfg), model) for m in mels]
    zs = [evaluate_zero_shot(m, ds.labels, model).accuracy for m, ds in zip(mels, sets)]
    acc = np.zeros((len(shifts), len(shifts)))
    for i in range(len(shifts)):
        r = run(mels[i], model, cfg, embeddings=embs[i])
        state = initial_state(model, cfg).with_theta(r.final_theta)
        for j in range(len(shifts)):
            pred = predict_frozen(embs[j], state, model, cfg.conditioning)
            acc[i, j] = float(np.mean(pred == sets[j].labels))
    return CrossDomainResult([s.name for s in shifts], zs, acc, zs)


# -- report files -------------------------------------------------------------


def write_csv(path: str | Path, rows: Sequence[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        version = r.get("schema_version")
        if version is None or int(version) != REPORT_SCHEMA_VERSION:
            raise SchemaMismatch(f"{path}: schema_version {version!r}, expected {REPORT_SCHEMA_VERSION}")
    return rows


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, default=str) + "\n")


NUMERIC_COLUMNS = ("zero_shot_acc", "adapted_acc", "delta", "final_consistency", "final_contrastive", "final_loss")


def summarize(rows: Sequence[dict]) -> list[dict]:
    """One row per config hash with per-seed means of the numeric columns."""
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r["config_hash"], []).append(r)
    out = []
    for h, grp in groups.items():
        row = {"schema_version": REPORT_SCHEMA_VERSION, "config_hash": h, "n_seeds": len({g["seed"] for g in grp})}
        for k in ("variant", "depth", "width_mult"):
            if k in grp[0]:
                row[k] = grp[0][k]
        for col in NUMERIC_COLUMNS:
            vals = [float(g[col]) for g in grp if g.get(col) not in (None, "")]
            row[f"mean_{col}"] = float(np.mean(vals)) if vals else ""
        out.append(row)
    return out


# -- end-to-end ---------------------------------------------------------------


@dataclass
class EndToEndResult:
    seed: int
    clean_accuracy: float
    zero_shot: float
    adapted: float

    @property
    def delta(self) -> float:
        return self.adapted - self.zero_shot


def end_to_end(
    seed: int,
    cfg: AdaptConfig,
    shift: DomainShiftSpec,
    spec: SyntheticDatasetSpec = SyntheticDatasetSpec(),
    pcfg: PretrainConfig = PretrainConfig(),
) -> EndToEndResult:
    """Pretrain, shift a fresh test set, and compare zero-shot with adapted accuracy."""
    model, clean = build_model(spec, pcfg=pcfg, seed=seed)
    test = gen_dataset(replace(spec, seed=derive_seed(seed, "test")), model.mel)
    shifted = apply_shift(test, replace(shift, seed=derive_seed(seed, "shift")))
    mels = features(shifted.waveforms, model)
    rep = evaluate_tta(mels, shifted.labels, model, replace(cfg, seed=derive_seed(seed, "adapt")))
    return EndToEndResult(seed, clean, rep.zero_shot.accuracy, rep.adapted.accuracy)
