"""Central finite-difference check of the full adaptation gradient."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dsp import MelConfig, NormStats
from .engine import AdaptConfig, forward_embeddings, loss_and_grad, loss_gradient
from .prompt_nets import PromptState, init_prompt_state
from .toy_alm import ToyALM, init_params


@dataclass
class GradCheckResult:
    seed: int
    max_rel_error: float
    n_params: int
    worst: str


def random_instance(
    seed: int,
    n_classes: int = 3,
    n_views: int = 3,
    batch: int = 2,
    prompt_len: int = 2,
    n_domain: int = 1,
    dim: int = 8,
    depth: int = 3,
    tau: float = 0.07,
    use_cnet: bool = True,
    use_dnet: bool = True,
):
    """Random model, view embeddings and fully random prompt-network parameters."""
    rng = np.random.default_rng(seed)
    vocab = prompt_len + n_classes
    params = init_params(rng, vocab, n_mels=4, d=dim, d_text=dim, max_len=8, text_hidden=dim, audio_hidden=dim)
    params["pos"] = rng.normal(0.0, 0.5, params["pos"].shape)
    for k in ("t_b1", "t_b2", "t_bp"):
        params[k] = rng.normal(0.0, 0.3, params[k].shape)
    prompts = [list(range(prompt_len - 1)) + [prompt_len - 1 + c] for c in range(n_classes)]
    model = ToyALM(params, NormStats.identity(4), prompts, tau, MelConfig())
    state = init_prompt_state(
        model.p_origin(), dim, depth=depth, n_domain=n_domain, max_len=8,
        use_cnet=use_cnet, use_dnet=use_dnet, seed=seed,
    )
    # randomize every layer so no gradient is structurally zero
    theta = {k: rng.normal(0.0, 0.5, a.shape) for k, a in state.theta.items()}
    state = state.with_theta(theta)
    v = rng.normal(size=(batch, n_views, dim))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return model, state, v


def finite_difference(v, state: PromptState, model: ToyALM, cfg: AdaptConfig, h: float = 1e-5):
    def loss_at(theta):
        dist, _ = forward_embeddings(v, state.with_theta(theta), model, cfg.conditioning)
        return loss_and_grad(dist.g_avg, cfg)[0].final

    fd = {}
    for name, arr in state.theta.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus = {k: a.copy() for k, a in state.theta.items()}
            minus = {k: a.copy() for k, a in state.theta.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            g[idx] = (loss_at(plus) - loss_at(minus)) / (2 * h)
        fd[name] = g
    return fd


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_instance(seed: int, cfg: AdaptConfig | None = None, h: float = 1e-5, **kw) -> GradCheckResult:
    cfg = cfg or AdaptConfig(lambda_contrastive=0.7)
    model, state, v = random_instance(seed, use_cnet=not cfg.disable_cnet, use_dnet=not cfg.disable_dnet, **kw)
    _, analytic, _ = loss_gradient(v, state, model, cfg)
    numeric = finite_difference(v, state, model, cfg, h)
    worst, worst_name, count = 0.0, "", 0
    for name in analytic:
        err = relative_error(analytic[name], numeric[name])
        count += err.size
        if err.size and err.max() > worst:
            worst, worst_name = float(err.max()), name
    return GradCheckResult(seed, worst, count, worst_name)


def run_suite(n_instances: int = 20, seed: int = 0, cfg: AdaptConfig | None = None) -> list[GradCheckResult]:
    base = cfg or AdaptConfig(lambda_contrastive=0.7)
    return [check_instance(seed + i, replace(base)) for i in range(n_instances)]
