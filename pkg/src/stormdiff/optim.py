"""Adam, cosine-annealing learning rate, EMA shadow weights, context masking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidRangeError, ShapeMismatchError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
EMA_DECAY = 0.995


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def init(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(_data(p)) for k, p in params.items()},
            v={k: np.zeros_like(_data(p)) for k, p in params.items()},
        )


@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    decay: float = EMA_DECAY

    @classmethod
    def init(cls, params: dict, decay: float = EMA_DECAY) -> "EmaState":
        # shadow starts as a copy of the parameters: no cold-start bias to zero
        return cls(shadow={k: _data(p).copy() for k, p in params.items()},
                   decay=decay)


def _data(p) -> np.ndarray:
    return p.data if hasattr(p, "data") else p


def adam_step(params: dict, grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> None:
    """One bias-corrected Adam update, in place over params and state."""
    if lr <= 0:
        raise InvalidRangeError(f"learning rate must be > 0, got {lr}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        theta = _data(p)
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ShapeMismatchError(
                f"gradient shape {g.shape} != parameter {name!r} shape {theta.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        theta -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(theta.dtype)


def cosine_lr(epoch: int, T_max: int, eta_max: float, eta_min: float) -> float:
    """eta_min + (eta_max - eta_min) (1 + cos(pi epoch / T_max)) / 2."""
    if not 0 <= epoch <= T_max:
        raise InvalidRangeError(f"epoch {epoch} outside 0..{T_max}")
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + np.cos(np.pi * epoch / T_max))


def ema_update(ema: EmaState, params: dict) -> None:
    """shadow <- decay * shadow + (1 - decay) * theta, elementwise."""
    d = ema.decay
    for name, p in params.items():
        theta = _data(p)
        s = ema.shadow[name]
        if s.shape != theta.shape:
            raise ShapeMismatchError(
                f"shadow shape {s.shape} != parameter {name!r} shape {theta.shape}"
            )
        s *= s.dtype.type(d)
        s += s.dtype.type(1.0 - d) * theta


def mask_context(context: np.ndarray, keep_prob: float = 0.9,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Zero whole context rows independently with probability 1 - keep_prob."""
    if not 0.0 <= keep_prob <= 1.0:
        raise InvalidRangeError(f"keep_prob must be in [0, 1], got {keep_prob}")
    context = np.asarray(context)
    if keep_prob == 1.0:
        return context.copy()
    if rng is None:
        rng = np.random.default_rng()
    keep = rng.random(context.shape[0]) < keep_prob
    return context * keep[:, None].astype(context.dtype)
