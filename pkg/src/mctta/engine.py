"""Test-time prompt adaptation loop.

For every test clip, ``M`` augmented views are embedded by the frozen audio
encoder.  Prompt networks turn each view embedding into a context offset and
domain tokens, the composed class prompts are encoded, and per-view class
distributions are averaged into ``g_avg``.  The objective is

    L = mean_b H(g_avg[b]) - lam * mean_{pairs k<l} MSE(g_avg[k], g_avg[l])

and only the prompt-network parameters are updated (AdamW).
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import binfmt
from .augment import AugmentConfig, make_views
from .errors import ConfigError, NumericalError, SchemaMismatch
from .optim import AdamWState, adamw_step
from .prompt_nets import (
    PromptState,
    c_net_forward,
    compose_all,
    d_net_forward,
    init_prompt_state,
    prompt_vjp,
)
from .toy_alm import ToyALM, encode_audio, softmax, text_backward, text_forward

logger = logging.getLogger(__name__)

EPS_LOG = 1e-12
RUN_KIND = "mctta-run"
RUN_SCHEMA_VERSION = 1
FULL_SCALE_LR = 1e-6
FULL_SCALE_VIEWS = 50


def derive_seed(seed: int, *keys: int | str) -> int:
    """Independent 64-bit seed for a named subsystem of a master seed."""
    ints = [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys]
    return int(np.random.SeedSequence([int(seed), *ints]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class AdaptConfig:
    lr: float = 1e-3
    steps_per_batch: int = 1
    batch_size: int = 5
    lambda_contrastive: float = 1.0
    mode: str = "episodic"
    disable_cnet: bool = False
    disable_dnet: bool = False
    disable_contrastive: bool = False
    disable_entropy: bool = False
    n_views: int = 8
    max_time_mask: int = 20
    max_freq_mask: int = 8
    conditioning: str = "per_view"
    depth: int = 3
    width_mult: int = 1
    n_domain: int = 4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    full_scale: bool = False
    seed: int = 0

    def validate(self) -> "AdaptConfig":
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps_per_batch < 0:
            raise ConfigError("steps_per_batch must be >= 0")
        if self.lambda_contrastive < 0:
            raise ConfigError("lambda_contrastive must be >= 0")
        if self.mode not in ("episodic", "online"):
            raise ConfigError(f"mode must be 'episodic' or 'online', got {self.mode!r}")
        if self.conditioning not in ("per_view", "mean"):
            raise ConfigError(f"conditioning must be 'per_view' or 'mean', got {self.conditioning!r}")
        if self.disable_cnet and self.disable_dnet:
            raise ConfigError("both prompt networks disabled: nothing to adapt")
        if self.disable_contrastive and self.disable_entropy:
            raise ConfigError("both losses disabled")
        if self.width_mult not in (1, 2):
            raise ConfigError("width_mult must be 1 or 2")
        if not 1 <= self.depth <= 4:
            raise ConfigError("depth must be in [1, 4]")
        return self

    def effective(self) -> "AdaptConfig":
        """Config with the full-scale overrides (lr 1e-6, 50 views) applied."""
        if self.full_scale:
            return replace(self, lr=FULL_SCALE_LR, n_views=FULL_SCALE_VIEWS)
        return self

    def augment(self, seed: int) -> AugmentConfig:
        return AugmentConfig(self.n_views, self.max_time_mask, self.max_freq_mask, seed)


# -- forward ------------------------------------------------------------------


@dataclass
class DistributionSet:
    g: np.ndarray  # (B, M, N) per-view class probabilities
    g_avg: np.ndarray  # (B, N)

    def check(self, atol: float = 1e-6) -> None:
        if not np.all(np.isfinite(self.g)):
            raise NumericalError("non-finite class probabilities")
        if np.max(np.abs(self.g.sum(-1) - 1.0)) > atol or np.max(np.abs(self.g_avg.sum(-1) - 1.0)) > atol:
            raise NumericalError("class distributions do not sum to one")


@dataclass
class _ForwardCache:
    v: np.ndarray
    cond: np.ndarray
    c_acts: object
    d_acts: object
    t_cache: tuple
    u: np.ndarray


def _conditioning(v: np.ndarray, how: str) -> np.ndarray:
    if how == "per_view":
        return v
    mean = v.mean(axis=1)
    return mean / np.linalg.norm(mean, axis=-1, keepdims=True)


def forward_embeddings(
    v: np.ndarray, state: PromptState, model: ToyALM, conditioning: str = "per_view"
) -> tuple[DistributionSet, _ForwardCache]:
    """Class distributions from view embeddings ``v`` of shape ``(B, M, d)``."""
    cond = _conditioning(v, conditioning)
    offset, c_acts = c_net_forward(state, cond)
    domain, d_acts = d_net_forward(state, cond)
    prompts = compose_all(state, offset, domain)
    u, t_cache = text_forward(prompts, model.params)
    if conditioning == "per_view":
        z = np.einsum("bmd,bmnd->bmn", v, u) / model.tau
    else:
        z = np.einsum("bmd,bnd->bmn", v, u) / model.tau
    g = softmax(z)
    dist = DistributionSet(g, g.mean(axis=1))
    return dist, _ForwardCache(v, cond, c_acts, d_acts, t_cache, u)


def embed_views(views: Sequence[np.ndarray] | np.ndarray, model: ToyALM) -> np.ndarray:
    """``B`` view stacks of shape ``(M, T, F)`` -> ``(B, M, d)``."""
    return np.stack([encode_audio(np.asarray(vs), model) for vs in views])


def forward_batch(views, state: PromptState, model: ToyALM, conditioning: str = "per_view") -> DistributionSet:
    """Distributions for a batch of view stacks (``ViewSet`` or ``(M, T, F)`` arrays)."""
    arrays = [getattr(vs, "views", vs) for vs in views]
    dist, _ = forward_embeddings(embed_views(arrays, model), state, model, conditioning)
    return dist


# -- losses -------------------------------------------------------------------


def consistency_loss(g_avg: np.ndarray) -> float:
    g_avg = np.atleast_2d(np.asarray(g_avg, dtype=np.float64))
    return float(np.mean(-np.sum(g_avg * np.log(g_avg + EPS_LOG), axis=-1)))


def _consistency_grad(g_avg: np.ndarray) -> np.ndarray:
    return -(np.log(g_avg + EPS_LOG) + g_avg / (g_avg + EPS_LOG)) / g_avg.shape[0]


def contrastive_loss(g_avg: np.ndarray) -> float:
    """Negative mean over unordered sample pairs of the per-class MSE."""
    g_avg = np.atleast_2d(np.asarray(g_avg, dtype=np.float64))
    b, n = g_avg.shape
    if b < 2:
        warnings.warn("contrastive loss needs at least two samples; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    diff = g_avg[:, None, :] - g_avg[None, :, :]
    pair_mse = np.sum(diff**2, axis=-1) / n
    n_pairs = b * (b - 1) / 2
    return float(-np.sum(np.triu(pair_mse, k=1)) / n_pairs)


def _contrastive_grad(g_avg: np.ndarray) -> np.ndarray:
    b, n = g_avg.shape
    if b < 2:
        return np.zeros_like(g_avg)
    n_pairs = b * (b - 1) / 2
    # d/dg_k of -(1/P) sum_{k<l} |g_k - g_l|^2 / N
    return -(2.0 / (n_pairs * n)) * (b * g_avg - g_avg.sum(axis=0))


@dataclass
class LossReport:
    consistency: float | None
    contrastive: float | None
    final: float

    def as_dict(self) -> dict:
        out = {"final": self.final}
        if self.consistency is not None:
            out["consistency"] = self.consistency
        if self.contrastive is not None:
            out["contrastive"] = self.contrastive
        return out


def final_loss(consistency: float | None, contrastive: float | None, lam: float) -> float:
    if consistency is None and contrastive is None:
        raise ConfigError("both losses disabled")
    total = consistency or 0.0
    if contrastive is not None:
        total += lam * contrastive
    return float(total)


def loss_and_grad(g_avg: np.ndarray, cfg: AdaptConfig) -> tuple[LossReport, np.ndarray]:
    """Loss report and ``dL/dg_avg`` honoring the loss ablation flags."""
    if cfg.disable_entropy and cfg.disable_contrastive:
        raise ConfigError("both losses disabled")
    grad = np.zeros_like(g_avg)
    cons = contr = None
    if not cfg.disable_entropy:
        cons = consistency_loss(g_avg)
        grad += _consistency_grad(g_avg)
    if not cfg.disable_contrastive:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            contr = contrastive_loss(g_avg)
        grad += cfg.lambda_contrastive * _contrastive_grad(g_avg)
    return LossReport(cons, contr, final_loss(cons, contr, cfg.lambda_contrastive)), grad


def check_loss_bounds(report: LossReport, n_classes: int, tol: float = 1e-9) -> None:
    if report.consistency is not None and not -tol <= report.consistency <= np.log(n_classes) + tol:
        raise NumericalError(f"consistency loss {report.consistency} outside [0, ln N]")
    if report.contrastive is not None and not -2.0 / n_classes - tol <= report.contrastive <= tol:
        raise NumericalError(f"contrastive loss {report.contrastive} outside [-2/N, 0]")


# -- backward -----------------------------------------------------------------


def backward_embeddings(
    dist: DistributionSet,
    cache: _ForwardCache,
    g_avg_grad: np.ndarray,
    state: PromptState,
    model: ToyALM,
    conditioning: str = "per_view",
) -> dict[str, np.ndarray]:
    """Exact gradient of the loss w.r.t. the prompt-network parameters."""
    m = dist.g.shape[1]
    dg = np.broadcast_to(g_avg_grad[:, None, :] / m, dist.g.shape)
    dz = dist.g * (dg - np.sum(dg * dist.g, axis=-1, keepdims=True))
    if conditioning == "per_view":
        du = dz[..., None] * cache.v[:, :, None, :] / model.tau
    else:
        du = np.einsum("bmn,bmd->bnd", dz, cache.v) / model.tau
    token_grads, _ = text_backward(cache.t_cache, du, model.params)
    grads = prompt_vjp(state, cache.cond, token_grads, (cache.c_acts, cache.d_acts))
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    return grads


def loss_gradient(v: np.ndarray, state: PromptState, model: ToyALM, cfg: AdaptConfig):
    """Forward + backward on view embeddings; returns ``(report, grads, dist)``."""
    dist, cache = forward_embeddings(v, state, model, cfg.conditioning)
    report, g_avg_grad = loss_and_grad(dist.g_avg, cfg)
    grads = backward_embeddings(dist, cache, g_avg_grad, state, model, cfg.conditioning)
    return report, grads, dist


def backward_batch(views, state: PromptState, model: ToyALM, cfg: AdaptConfig) -> dict[str, np.ndarray]:
    arrays = [getattr(vs, "views", vs) for vs in views]
    _, grads, _ = loss_gradient(embed_views(arrays, model), state, model, cfg)
    return grads


# -- adaptation ---------------------------------------------------------------


def predict(g_avg: np.ndarray) -> np.ndarray:
    """Argmax per sample; ``np.argmax`` resolves ties to the lowest index."""
    return np.argmax(g_avg, axis=-1)


@dataclass
class BatchResult:
    predictions: np.ndarray
    trace: list[LossReport]
    final_report: LossReport
    dist: DistributionSet
    state: PromptState
    opt: AdamWState


def adapt_batch(
    v: np.ndarray, state: PromptState, opt: AdamWState, model: ToyALM, cfg: AdaptConfig
) -> BatchResult:
    """``steps_per_batch`` AdamW steps on one batch, then predict with the final parameters."""
    trace = []
    n = state.n_classes
    for _ in range(cfg.steps_per_batch):
        report, grads, dist = loss_gradient(v, state, model, cfg)
        dist.check()
        check_loss_bounds(report, n)
        trace.append(report)
        theta, opt = adamw_step(state.theta, grads, opt, cfg.lr)
        state = state.with_theta(theta)
    dist, _ = forward_embeddings(v, state, model, cfg.conditioning)
    dist.check()
    final_report, _ = loss_and_grad(dist.g_avg, cfg)
    check_loss_bounds(final_report, n)
    return BatchResult(predict(dist.g_avg), trace, final_report, dist, state, opt)


@dataclass
class AdaptRun:
    config: AdaptConfig
    model_hash: str
    initial_theta: dict[str, np.ndarray]
    final_theta: dict[str, np.ndarray]
    optimizer: AdamWState
    predictions: np.ndarray
    g_avg: np.ndarray
    trace: list[dict] = field(default_factory=list)
    batch_reports: list[dict] = field(default_factory=list)
    resets: list[int] = field(default_factory=list)
    theta_digests: list[str] = field(default_factory=list)


def clip_seed(seed: int, mel: np.ndarray) -> int:
    """View seed keyed by clip content, so views do not depend on stream position."""
    digest = hashlib.sha256(np.ascontiguousarray(mel, dtype="<f8").tobytes()).digest()
    return derive_seed(seed, "views", int.from_bytes(digest[:8], "little"))


def build_views(mels: Sequence[np.ndarray], cfg: AdaptConfig) -> list[np.ndarray]:
    return [make_views(m, cfg.augment(clip_seed(cfg.seed, m))).views for m in mels]


def initial_state(model: ToyALM, cfg: AdaptConfig) -> PromptState:
    return init_prompt_state(
        model.p_origin(),
        model.d,
        depth=cfg.depth,
        width_mult=cfg.width_mult,
        n_domain=cfg.n_domain,
        use_cnet=not cfg.disable_cnet,
        use_dnet=not cfg.disable_dnet,
        max_len=model.max_len,
        seed=derive_seed(cfg.seed, "prompt-init"),
    )


def run(
    mels: Sequence[np.ndarray],
    model: ToyALM,
    cfg: AdaptConfig,
    state: PromptState | None = None,
    embeddings: np.ndarray | None = None,
) -> AdaptRun:
    """Adapt over a label-free stream of normalized mels, batch by batch.

    Episodic mode restores the initial parameters and optimizer moments before
    every batch; online mode carries them through the whole stream.
    """
    cfg = cfg.effective().validate()
    if len(mels) == 0 and embeddings is None:
        raise ConfigError("empty dataset")
    if embeddings is None:
        embeddings = embed_views(build_views(mels, cfg), model)
    if state is None:
        state = initial_state(model, cfg)
    init_theta = state.snapshot()
    fresh_opt = AdamWState.zeros_like(
        init_theta, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay
    )
    opt = fresh_opt.copy()

    preds, g_avgs, trace, batch_reports, resets, digests = [], [], [], [], [], []
    total = len(embeddings)
    for bi, start in enumerate(range(0, total, cfg.batch_size)):
        if cfg.mode == "episodic" and bi > 0:
            state = state.with_theta({k: a.copy() for k, a in init_theta.items()})
            opt = fresh_opt.copy()
            resets.append(bi)
        digests.append(binfmt.digest_arrays(state.theta))
        res = adapt_batch(embeddings[start : start + cfg.batch_size], state, opt, model, cfg)
        state, opt = res.state, res.opt
        preds.append(res.predictions)
        g_avgs.append(res.dist.g_avg)
        for step, rep in enumerate(res.trace):
            trace.append({"batch": bi, "step": step, **rep.as_dict()})
        batch_reports.append({"batch": bi, "size": len(res.predictions), **res.final_report.as_dict()})

    return AdaptRun(
        config=cfg,
        model_hash=model.model_hash,
        initial_theta=init_theta,
        final_theta=state.snapshot(),
        optimizer=opt,
        predictions=np.concatenate(preds),
        g_avg=np.concatenate(g_avgs),
        trace=trace,
        batch_reports=batch_reports,
        resets=resets,
        theta_digests=digests,
    )


# -- persistence --------------------------------------------------------------


def save_run(path: str | Path, run_: AdaptRun) -> bytes:
    blocks = {}
    for k, a in run_.final_theta.items():
        blocks[f"theta/{k}"] = a
    for k, a in run_.optimizer.m.items():
        blocks[f"adam_m/{k}"] = a
    for k, a in run_.optimizer.v.items():
        blocks[f"adam_v/{k}"] = a
    header = {
        "kind": RUN_KIND,
        "schema_version": RUN_SCHEMA_VERSION,
        "config": asdict(run_.config),
        "seed": run_.config.seed,
        "model_hash": run_.model_hash,
        "optimizer_step": run_.optimizer.step,
    }
    return binfmt.write(path, header, blocks)


def load_run(path: str | Path) -> tuple[dict, dict[str, np.ndarray], AdamWState]:
    header, blocks = binfmt.read(path)
    if header.get("kind") != RUN_KIND or header.get("schema_version") != RUN_SCHEMA_VERSION:
        raise SchemaMismatch(f"not a v{RUN_SCHEMA_VERSION} run checkpoint")
    cfg = header["config"]
    theta = {k.split("/", 1)[1]: a for k, a in blocks.items() if k.startswith("theta/")}
    opt = AdamWState(
        m={k.split("/", 1)[1]: a for k, a in blocks.items() if k.startswith("adam_m/")},
        v={k.split("/", 1)[1]: a for k, a in blocks.items() if k.startswith("adam_v/")},
        step=int(header["optimizer_step"]),
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        eps=cfg["eps"],
        weight_decay=cfg["weight_decay"],
    )
    return header, theta, opt


def write_trace(path: str | Path, run_: AdaptRun, extra: Iterable[dict] = ()) -> None:
    """JSON lines: one ``step`` record per optimizer step, one ``prediction`` per sample."""
    with open(path, "w") as fh:
        for rec in run_.trace:
            fh.write(json.dumps({"type": "step", **rec}, sort_keys=True) + "\n")
        for i, (p, g) in enumerate(zip(run_.predictions, run_.g_avg)):
            rec = {"type": "prediction", "index": i, "prediction": int(p), "g_avg": [float(x) for x in g]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        for rec in extra:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
