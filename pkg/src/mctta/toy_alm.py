"""A small frozen contrastive audio-text model.

Audio path: per-bin time mean and std of a normalized log-mel (``2F``
inputs) -> tanh MLP -> L2 normalization.

Text path: token vectors plus positional embeddings -> residual per-token
block ``h + tanh(h W1 + b1) W2 + b2`` -> mean over tokens -> affine
projection -> L2 normalization.  The text path has a hand-written
vector-Jacobian product so prompt networks can be trained through it.

Every text function accepts arbitrary leading batch dimensions:
``tokens[..., L, d_text] -> embeddings[..., d]``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import binfmt
from .dsp import MelConfig, NormStats
from .errors import LengthError, NumericalError, PretrainDivergence, SchemaMismatch, ShapeError
from .optim import AdamWState, adamw_step

logger = logging.getLogger(__name__)

MODEL_KIND = "mctta-toy-alm"
TEXT_KEYS = ("pos", "t_w1", "t_b1", "t_w2", "t_b2", "t_wp", "t_bp")
AUDIO_KEYS = ("a_w1", "a_b1", "a_w2", "a_b2")


@dataclass
class ToyALM:
    params: dict[str, np.ndarray]
    stats: NormStats
    class_prompts: list[list[int]]
    tau: float = 0.07
    mel: MelConfig = field(default_factory=MelConfig)

    @property
    def d(self) -> int:
        return self.params["t_wp"].shape[1]

    @property
    def d_text(self) -> int:
        return self.params["tok"].shape[1]

    @property
    def max_len(self) -> int:
        return self.params["pos"].shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_prompts)

    def p_origin(self) -> np.ndarray:
        """Class prompt token vectors, shape ``(N, L_c, d_text)``."""
        return self.params["tok"][np.asarray(self.class_prompts)]

    def header(self) -> dict:
        return {
            "kind": MODEL_KIND,
            "tau": self.tau,
            "dims": {
                "d": self.d,
                "d_text": self.d_text,
                "max_len": self.max_len,
                "vocab": int(self.params["tok"].shape[0]),
                "text_hidden": int(self.params["t_w1"].shape[1]),
                "audio_hidden": int(self.params["a_w1"].shape[1]),
            },
            "norm_mean": [float(x) for x in self.stats.mean],
            "norm_std": [float(x) for x in self.stats.std],
            "class_prompts": self.class_prompts,
            "mel": {
                "sample_rate": self.mel.sample_rate,
                "n_mels": self.mel.n_mels,
                "hop": self.mel.hop,
                "window": self.mel.window,
                "f_min": self.mel.f_min,
                "f_max": self.mel.f_max,
                "log_floor": self.mel.log_floor,
            },
        }

    def to_bytes(self) -> bytes:
        return binfmt.pack(self.header(), self.params)

    def save(self, path: str | Path) -> str:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @property
    def model_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ToyALM":
        header, blocks = binfmt.unpack(data)
        if header.get("kind") != MODEL_KIND:
            raise SchemaMismatch(f"not a toy model checkpoint: kind={header.get('kind')!r}")
        return cls(
            params=blocks,
            stats=NormStats(np.array(header["norm_mean"]), np.array(header["norm_std"])),
            class_prompts=[list(map(int, p)) for p in header["class_prompts"]],
            tau=float(header["tau"]),
            mel=MelConfig(**header["mel"]),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ToyALM":
        return cls.from_bytes(Path(path).read_bytes())


def init_params(
    rng: np.random.Generator,
    vocab: int,
    n_mels: int = 64,
    d: int = 64,
    d_text: int = 64,
    max_len: int = 16,
    text_hidden: int = 64,
    audio_hidden: int = 128,
    pos_scale: float = 0.1,
) -> dict[str, np.ndarray]:
    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

    return {
        "tok": rng.normal(0.0, 1.0, size=(vocab, d_text)),
        "pos": rng.normal(0.0, pos_scale, size=(max_len, d_text)),
        "t_w1": dense(d_text, text_hidden),
        "t_b1": np.zeros(text_hidden),
        "t_w2": dense(text_hidden, d_text),
        "t_b2": np.zeros(d_text),
        "t_wp": dense(d_text, d),
        "t_bp": np.zeros(d),
        "a_w1": dense(2 * n_mels, audio_hidden),
        "a_b1": np.zeros(audio_hidden),
        "a_w2": dense(audio_hidden, d),
        "a_b2": np.zeros(d),
    }


def _l2n(e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(e, axis=-1, keepdims=True)
    return e / norm, norm


def _l2n_backward(out: np.ndarray, norm: np.ndarray, g: np.ndarray) -> np.ndarray:
    return (g - np.sum(g * out, axis=-1, keepdims=True) * out) / norm


# -- audio --------------------------------------------------------------------


def pool_mel(m: np.ndarray) -> np.ndarray:
    """Time-pooled statistics: ``[mean over T, std over T]`` per bin."""
    m = np.asarray(m, dtype=np.float64)
    return np.concatenate([m.mean(axis=-2), m.std(axis=-2)], axis=-1)


def _audio_forward(pooled: np.ndarray, p: dict[str, np.ndarray]):
    a = pooled @ p["a_w1"] + p["a_b1"]
    h = np.tanh(a)
    e = h @ p["a_w2"] + p["a_b2"]
    out, norm = _l2n(e)
    return out, (pooled, h, out, norm)


def _audio_backward(cache, g: np.ndarray, p: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    pooled, h, out, norm = cache
    ge = _l2n_backward(out, norm, g)
    gh = ge @ p["a_w2"].T
    ga = gh * (1.0 - h * h)
    flat = lambda x: x.reshape(-1, x.shape[-1])  # noqa: E731
    return {
        "a_w2": flat(h).T @ flat(ge),
        "a_b2": flat(ge).sum(axis=0),
        "a_w1": flat(pooled).T @ flat(ga),
        "a_b1": flat(ga).sum(axis=0),
    }


def encode_audio(m: np.ndarray, model: ToyALM) -> np.ndarray:
    """Unit-norm embedding of a normalized mel ``(..., T, F) -> (..., d)``."""
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise NumericalError("non-finite values in mel spectrogram")
    out, _ = _audio_forward(pool_mel(m), model.params)
    return out


# -- text ---------------------------------------------------------------------


def _check_tokens(tokens: np.ndarray, model: ToyALM) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim < 2 or tokens.shape[-1] != model.d_text:
        raise ShapeError(f"tokens must be (..., L, {model.d_text}), got {tokens.shape}")
    length = tokens.shape[-2]
    if not 1 <= length <= model.max_len:
        raise LengthError(f"token sequence length {length} outside [1, {model.max_len}]")
    return tokens


def text_forward(tokens: np.ndarray, p: dict[str, np.ndarray]):
    length = tokens.shape[-2]
    h = tokens + p["pos"][:length]
    z = np.tanh(h @ p["t_w1"] + p["t_b1"])
    y = h + z @ p["t_w2"] + p["t_b2"]
    s = y.mean(axis=-2)
    e = s @ p["t_wp"] + p["t_bp"]
    out, norm = _l2n(e)
    return out, (h, z, s, out, norm)


def text_backward(cache, g: np.ndarray, p: dict[str, np.ndarray], param_grads: bool = False):
    """Backprop ``g = dL/d(out)`` to the input tokens (and optionally params)."""
    h, z, s, out, norm = cache
    length = h.shape[-2]
    ge = _l2n_backward(out, norm, g)
    gs = ge @ p["t_wp"].T
    gy = np.broadcast_to((gs / length)[..., None, :], h.shape)
    ga = (gy @ p["t_w2"].T) * (1.0 - z * z)
    gh = gy + ga @ p["t_w1"].T
    if not param_grads:
        return gh, {}
    flat = lambda x: x.reshape(-1, x.shape[-1])  # noqa: E731
    grads = {
        "t_wp": flat(s).T @ flat(ge),
        "t_bp": flat(ge).sum(axis=0),
        "t_w2": flat(z).T @ flat(gy),
        "t_b2": flat(gy).sum(axis=0),
        "t_w1": flat(h).T @ flat(ga),
        "t_b1": flat(ga).sum(axis=0),
    }
    gpos = np.zeros_like(p["pos"])
    gpos[:length] = gh.reshape(-1, length, gh.shape[-1]).sum(axis=0)
    grads["pos"] = gpos
    return gh, grads


def encode_text(tokens: np.ndarray, model: ToyALM) -> np.ndarray:
    tokens = _check_tokens(tokens, model)
    out, _ = text_forward(tokens, model.params)
    return out


def encode_text_vjp(tokens: np.ndarray, model: ToyALM, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``<upstream, encode_text(tokens)>`` w.r.t. each token vector."""
    tokens = _check_tokens(tokens, model)
    _, cache = text_forward(tokens, model.params)
    gh, _ = text_backward(cache, np.asarray(upstream, dtype=np.float64), model.params)
    return gh


def class_text_embeddings(model: ToyALM) -> np.ndarray:
    """Plain zero-shot text embeddings, shape ``(N, d)``."""
    return encode_text(model.p_origin(), model)


# -- similarity ---------------------------------------------------------------


def logits(v: np.ndarray, u: np.ndarray, tau: float) -> np.ndarray:
    """Scaled cosine scores.

    ``v`` is ``(M, d)``; ``u`` is ``(N, d)`` (shared text embeddings) or
    ``(M, N, d)`` (one text embedding set per view).  Returns ``(M, N)``.
    """
    v = np.asarray(v, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"v must be (M, d), got {v.shape}")
    if u.ndim == 2:
        if u.shape[1] != v.shape[1]:
            raise ShapeError(f"embedding dims differ: {v.shape} vs {u.shape}")
        return v @ u.T / tau
    if u.ndim == 3:
        if u.shape[0] != v.shape[0] or u.shape[2] != v.shape[1]:
            raise ShapeError(f"per-view text embeddings {u.shape} do not match v {v.shape}")
        return np.einsum("md,mnd->mn", v, u) / tau
    raise ShapeError(f"u must be 2-D or 3-D, got {u.ndim}-D")


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def zero_shot_probs(mels: np.ndarray, model: ToyALM) -> np.ndarray:
    """Class distributions from plain prompts, ``(..., T, F) -> (..., N)``."""
    v = encode_audio(mels, model)
    u = class_text_embeddings(model)
    return softmax(v @ u.T / model.tau)


# -- pretraining --------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 150
    groups_per_step: int = 8
    lr: float = 3e-3
    weight_decay: float = 1e-4
    target_accuracy: float = 0.6
    early_stop: bool = False
    max_prefix: int = 4  # zero-token prefixes seen during training
    d: int = 64
    text_hidden: int = 64
    audio_hidden: int = 128
    max_len: int = 16
    tau: float = 0.07


def _prefixed(prompts: np.ndarray, n_prefix: int) -> np.ndarray:
    if n_prefix == 0:
        return prompts
    pad = np.zeros(prompts.shape[:-2] + (n_prefix, prompts.shape[-1]))
    return np.concatenate([pad, prompts], axis=-2)


def contrastive_step_grads(
    params: dict[str, np.ndarray],
    pooled: np.ndarray,
    class_prompts: np.ndarray,
    tau: float,
    n_prefix: int = 0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Symmetric InfoNCE loss and gradients for one step.

    ``pooled`` is ``(K, N, 2F)``: K groups holding one clip of every class,
    so row ``c`` of each group is paired with class prompt ``c``.
    """
    k, n, _ = pooled.shape
    tok_ids = np.asarray(class_prompts)
    prompts = _prefixed(params["tok"][tok_ids], n_prefix)
    t_out, t_cache = text_forward(prompts, params)
    a_out, a_cache = _audio_forward(pooled, params)

    s = np.einsum("knd,cd->knc", a_out, t_out) / tau
    p_row = softmax(s, axis=2)  # audio -> text
    p_col = softmax(s, axis=1)  # text -> audio
    idx = np.arange(n)
    loss = -0.5 * (np.log(p_row[:, idx, idx]).mean() + np.log(p_col[:, idx, idx]).mean())
    eye = np.eye(n)
    gs = 0.5 * ((p_row - eye) + (p_col - eye)) / (k * n)

    g_audio = np.einsum("knc,cd->knd", gs, t_out) / tau
    g_text = np.einsum("knc,knd->cd", gs, a_out) / tau

    grads = _audio_backward(a_cache, g_audio, params)
    g_tokens, t_grads = text_backward(t_cache, g_text, params, param_grads=True)
    grads.update(t_grads)
    g_tok = np.zeros_like(params["tok"])
    np.add.at(g_tok, tok_ids, g_tokens[:, n_prefix:])
    grads["tok"] = g_tok
    return float(loss), grads


def zero_shot_accuracy(pooled: np.ndarray, labels: np.ndarray, params, class_prompts, tau) -> float:
    t_out, _ = text_forward(params["tok"][np.asarray(class_prompts)], params)
    a_out, _ = _audio_forward(pooled, params)
    pred = np.argmax(a_out @ t_out.T, axis=-1)
    return float(np.mean(pred == np.asarray(labels)))


def pretrain_toy(
    train_mels: Sequence[np.ndarray],
    train_labels: Sequence[int],
    heldout_mels: Sequence[np.ndarray],
    heldout_labels: Sequence[int],
    class_prompts: list[list[int]],
    stats: NormStats,
    cfg: PretrainConfig = PretrainConfig(),
    seed: int = 0,
    mel: MelConfig | None = None,
) -> tuple[ToyALM, float]:
    """Contrastively train the toy model; returns it with held-out accuracy.

    Mels must already be normalized with ``stats``.  Raises
    :class:`PretrainDivergence` if the held-out zero-shot accuracy stays below
    ``cfg.target_accuracy``.
    """
    train_labels = np.asarray(train_labels)
    n_classes = len(class_prompts)
    if n_classes < 2:
        raise PretrainDivergence("need at least two classes")
    rng = np.random.default_rng(seed)
    vocab = int(np.max(class_prompts)) + 1
    n_mels = np.asarray(train_mels[0]).shape[-1]
    params = init_params(
        rng, vocab, n_mels=n_mels, d=cfg.d, d_text=cfg.d, max_len=cfg.max_len,
        text_hidden=cfg.text_hidden, audio_hidden=cfg.audio_hidden,
    )
    pooled = np.stack([pool_mel(m) for m in train_mels])
    held = np.stack([pool_mel(m) for m in heldout_mels])
    by_class = [np.flatnonzero(train_labels == c) for c in range(n_classes)]
    if any(len(ix) == 0 for ix in by_class):
        raise PretrainDivergence("every class needs at least one training clip")
    steps_per_epoch = max(1, min(len(ix) for ix in by_class) // cfg.groups_per_step)

    state = AdamWState.zeros_like(params, weight_decay=cfg.weight_decay)
    acc = 0.0
    for epoch in range(cfg.epochs):
        perms = [rng.permutation(ix) for ix in by_class]
        for step in range(steps_per_epoch):
            sl = slice(step * cfg.groups_per_step, (step + 1) * cfg.groups_per_step)
            batch = np.stack([pooled[perm[sl]] for perm in perms], axis=1)  # (K, N, 2F)
            n_prefix = int(rng.integers(0, cfg.max_prefix + 1)) if cfg.max_prefix else 0
            loss, grads = contrastive_step_grads(params, batch, class_prompts, cfg.tau, n_prefix)
            if not np.isfinite(loss):
                raise PretrainDivergence(f"loss became non-finite at epoch {epoch}")
            params, state = adamw_step(params, grads, state, cfg.lr)
        if cfg.early_stop or epoch == cfg.epochs - 1:
            acc = zero_shot_accuracy(held, heldout_labels, params, class_prompts, cfg.tau)
            logger.debug("epoch %d loss %.4f heldout acc %.3f", epoch, loss, acc)
            if cfg.early_stop and acc >= cfg.target_accuracy:
                break
    if acc < cfg.target_accuracy:
        raise PretrainDivergence(
            f"held-out zero-shot accuracy {acc:.3f} below target {cfg.target_accuracy:.3f}"
        )
    model = ToyALM(params, stats, [list(map(int, p)) for p in class_prompts], cfg.tau, mel or MelConfig())
    return model, acc
