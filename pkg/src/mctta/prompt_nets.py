"""Conditional prompt networks and prompt composition.

The context network maps an audio embedding to one offset vector that is
added to every class-prompt token.  The domain network maps the same
embedding to ``n_domain`` tokens that are prepended to the prompt:

    prompt_c = [domain_0, ..., domain_{L_d-1}, origin_c0 + offset, ..., origin_c{L_c-1} + offset]

Both are tanh MLPs whose last layer starts at zero, so before adaptation
the offset and the domain tokens are exactly zero.  Their parameters live
in one flat dict (``cnet.w0``, ``cnet.b0``, ..., ``dnet.w0``, ...), which is
what the optimizer sees.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LengthError


def init_mlp(
    rng: np.random.Generator, prefix: str, n_in: int, n_out: int, depth: int, width: int
) -> dict[str, np.ndarray]:
    if not 1 <= depth <= 4:
        raise ConfigError(f"MLP depth must be in [1, 4], got {depth}")
    sizes = [n_in] + [width] * (depth - 1) + [n_out]
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == depth - 1
        params[f"{prefix}.w{i}"] = np.zeros((a, b)) if last else rng.normal(0.0, 1.0 / np.sqrt(a), (a, b))
        params[f"{prefix}.b{i}"] = np.zeros(b)
    return params


def mlp_depth(params: dict[str, np.ndarray], prefix: str) -> int:
    return sum(1 for k in params if k.startswith(f"{prefix}.w"))


def mlp_forward(params: dict[str, np.ndarray], prefix: str, x: np.ndarray):
    depth = mlp_depth(params, prefix)
    acts = [x]
    h = x
    for i in range(depth):
        h = h @ params[f"{prefix}.w{i}"] + params[f"{prefix}.b{i}"]
        if i < depth - 1:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def mlp_backward(params: dict[str, np.ndarray], prefix: str, acts, g: np.ndarray) -> dict[str, np.ndarray]:
    depth = mlp_depth(params, prefix)
    grads = {}
    flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
    for i in reversed(range(depth)):
        if i < depth - 1:
            g = g * (1.0 - acts[i + 1] ** 2)
        grads[f"{prefix}.w{i}"] = flat(acts[i]).T @ flat(g)
        grads[f"{prefix}.b{i}"] = flat(g).sum(axis=0)
        if i > 0:
            g = g @ params[f"{prefix}.w{i}"].T
    return grads


@dataclass
class PromptState:
    p_origin: np.ndarray  # (N, L_c, d_text), frozen
    theta: dict[str, np.ndarray]
    n_domain: int = 4
    use_cnet: bool = True
    use_dnet: bool = True
    max_len: int = 16
    meta: dict = field(default_factory=dict)

    @property
    def d_text(self) -> int:
        return self.p_origin.shape[-1]

    @property
    def n_classes(self) -> int:
        return self.p_origin.shape[0]

    @property
    def domain_len(self) -> int:
        return self.n_domain if self.use_dnet else 0

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.theta.items()}

    def with_theta(self, theta: dict[str, np.ndarray]) -> "PromptState":
        return PromptState(self.p_origin, theta, self.n_domain, self.use_cnet, self.use_dnet, self.max_len, self.meta)


def init_prompt_state(
    p_origin: np.ndarray,
    d: int,
    *,
    depth: int = 3,
    width_mult: int = 1,
    n_domain: int = 4,
    use_cnet: bool = True,
    use_dnet: bool = True,
    max_len: int = 16,
    seed: int = 0,
) -> PromptState:
    """Fresh networks with hidden width ``d * width_mult`` and zeroed final layers."""
    if not (use_cnet or use_dnet):
        raise ConfigError("both prompt networks disabled: nothing to adapt")
    p_origin = np.asarray(p_origin, dtype=np.float64)
    d_text = p_origin.shape[-1]
    if (n_domain if use_dnet else 0) + p_origin.shape[1] > max_len:
        raise LengthError(f"{n_domain} domain + {p_origin.shape[1]} class tokens exceed max length {max_len}")
    rng = np.random.default_rng(seed)
    width = d * width_mult
    theta = {}
    theta.update(init_mlp(rng, "cnet", d, d_text, depth, width))
    theta.update(init_mlp(rng, "dnet", d, n_domain * d_text, depth, width))
    meta = {"depth": depth, "width_mult": width_mult}
    return PromptState(p_origin, theta, n_domain, use_cnet, use_dnet, max_len, meta)


def c_net_forward(state: PromptState, v: np.ndarray):
    """Context offset ``(..., d_text)`` and the cache needed for backprop."""
    if not state.use_cnet:
        return np.zeros(np.shape(v)[:-1] + (state.d_text,)), None
    return mlp_forward(state.theta, "cnet", v)


def d_net_forward(state: PromptState, v: np.ndarray):
    """Domain tokens ``(..., n_domain, d_text)``; zero-length when disabled."""
    lead = np.shape(v)[:-1]
    if not state.use_dnet:
        return np.zeros(lead + (0, state.d_text)), None
    out, acts = mlp_forward(state.theta, "dnet", v)
    return out.reshape(lead + (state.n_domain, state.d_text)), acts


def compose_prompt(state: PromptState, c: int, offset: np.ndarray, domain_tokens: np.ndarray) -> np.ndarray:
    """Single prompt for class ``c``: domain tokens, then offset origin tokens."""
    origin = state.p_origin[c]
    domain_tokens = np.asarray(domain_tokens).reshape(-1, state.d_text)
    if len(domain_tokens) + len(origin) > state.max_len:
        raise LengthError(f"prompt length {len(domain_tokens) + len(origin)} exceeds {state.max_len}")
    return np.concatenate([domain_tokens, origin + offset], axis=0)


def compose_all(state: PromptState, offset: np.ndarray, domain_tokens: np.ndarray) -> np.ndarray:
    """Prompts for every class: ``(..., d_text), (..., L_d, d_text) -> (..., N, L_d + L_c, d_text)``."""
    n = state.n_classes
    lead = offset.shape[:-1]
    origin = state.p_origin + offset[..., None, None, :]  # (..., N, L_c, d_text)
    dom = np.broadcast_to(domain_tokens[..., None, :, :], lead + (n,) + domain_tokens.shape[-2:])
    if dom.shape[-2] + origin.shape[-2] > state.max_len:
        raise LengthError(f"prompt length {dom.shape[-2] + origin.shape[-2]} exceeds {state.max_len}")
    return np.concatenate([dom, origin], axis=-2)


def prompt_vjp(state: PromptState, v: np.ndarray, token_grads: np.ndarray, caches=None) -> dict[str, np.ndarray]:
    """Route per-token gradients of composed prompts into the network parameters.

    ``token_grads`` has shape ``(..., N, L_d + L_c, d_text)`` matching
    :func:`compose_all` for conditioning embeddings ``v`` of shape
    ``(..., d)``.  The offset is broadcast over every class and origin slot,
    so its gradient is the sum over those; the domain tokens are shared by
    all classes, so theirs is the sum over classes of the first ``L_d``
    slots.  Gradients of disabled networks are exact zeros.
    """
    if caches is None:
        _, c_acts = c_net_forward(state, v)
        _, d_acts = d_net_forward(state, v)
    else:
        c_acts, d_acts = caches
    l_d = state.domain_len
    grads = {k: np.zeros_like(p) for k, p in state.theta.items()}
    if state.use_cnet:
        g_offset = token_grads[..., l_d:, :].sum(axis=(-3, -2))
        grads.update(mlp_backward(state.theta, "cnet", c_acts, g_offset))
    if state.use_dnet:
        g_dom = token_grads[..., :l_d, :].sum(axis=-3)
        g_dom = g_dom.reshape(g_dom.shape[:-2] + (l_d * state.d_text,))
        grads.update(mlp_backward(state.theta, "dnet", d_acts, g_dom))
    return grads
