"""AdamW over a flat ``{name: ndarray}`` parameter dict."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **hyper) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **hyper,
        )

    def copy(self) -> "AdamWState":
        return AdamWState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=self.weight_decay,
        )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One bias-corrected Adam step with decoupled weight decay.

    ``w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)``

    Returns new arrays; the inputs are left untouched.
    """
    b1, b2 = state.beta1, state.beta2
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {w.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r}")
        m = b1 * state.m.get(name, np.zeros_like(w)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(w)) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        new_params[name] = w - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * w)
        new_m[name], new_v[name] = m, v
    out = AdamWState(new_m, new_v, step, b1, b2, state.eps, state.weight_decay)
    return new_params, out
