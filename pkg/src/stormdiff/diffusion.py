"""Closed-form forward perturbation and the stochastic reverse sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidRangeError, ShapeMismatchError
from .schedule import Schedule


def _per_item_coeff(values: np.ndarray, t, batch: int, ndim: int) -> np.ndarray:
    """Gather values[t] and shape for broadcasting over (B, C, H, W)."""
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,))
    if t_arr.min() < 1 or t_arr.max() >= values.shape[0]:
        raise InvalidRangeError(
            f"timestep outside 1..{values.shape[0] - 1}: "
            f"[{t_arr.min()}, {t_arr.max()}]"
        )
    c = values[t_arr]
    return c.reshape((batch,) + (1,) * (ndim - 1))


def perturb_input(x0: np.ndarray, t, eps: np.ndarray, schedule: Schedule) -> np.ndarray:
    """One-shot forward noising: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeMismatchError(
            f"x0 shape {x0.shape} != eps shape {eps.shape}"
        )
    a = _per_item_coeff(schedule.sqrt_alpha_bar, t, x0.shape[0], x0.ndim)
    b = _per_item_coeff(schedule.sqrt_one_minus_alpha_bar, t, x0.shape[0], x0.ndim)
    return (a * x0 + b * eps).astype(x0.dtype, copy=False)


def posterior_mean(x_t: np.ndarray, t, eps_pred: np.ndarray,
                   schedule: Schedule) -> np.ndarray:
    """Expected previous state: (x_t - beta_t/sqrt(1-ab_t) * eps) / sqrt(a_t)."""
    x_t = np.asarray(x_t)
    eps_pred = np.asarray(eps_pred)
    if x_t.shape != eps_pred.shape:
        raise ShapeMismatchError(
            f"x_t shape {x_t.shape} != eps_pred shape {eps_pred.shape}"
        )
    B, nd = x_t.shape[0], x_t.ndim
    # beta/alpha are indexed 0..T-1; alpha_bar carries the leading 1
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    if t_arr.min() < 1 or t_arr.max() > schedule.T:
        raise InvalidRangeError(
            f"timestep outside 1..{schedule.T}: [{t_arr.min()}, {t_arr.max()}]"
        )
    shape = (B,) + (1,) * (nd - 1)
    beta = schedule.beta[t_arr - 1].reshape(shape)
    inv_sqrt_alpha = (1.0 / np.sqrt(schedule.alpha[t_arr - 1])).reshape(shape)
    som = schedule.sqrt_one_minus_alpha_bar[t_arr].reshape(shape)
    out = inv_sqrt_alpha * (x_t - (beta / som) * eps_pred)
    return out.astype(x_t.dtype, copy=False)


def denoise_add_noise(x_t: np.ndarray, t, eps_pred: np.ndarray, z,
                      schedule: Schedule) -> np.ndarray:
    """One reverse step: posterior mean plus sqrt(beta_t) z.

    z must be identically zero when t == 1 (deterministic final step).
    """
    x_t = np.asarray(x_t)
    B, nd = x_t.shape[0], x_t.ndim
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    z_arr = np.asarray(z) if not np.isscalar(z) else np.asarray(float(z))
    at_final = t_arr == 1
    if at_final.any():
        z_sel = z_arr[at_final] if z_arr.ndim == nd else z_arr
        if np.any(z_sel != 0):
            raise InvalidRangeError("z must be zero at t=1 (final step)")
    mu = posterior_mean(x_t, t, eps_pred, schedule)
    sb = np.sqrt(schedule.beta[t_arr - 1]).reshape((B,) + (1,) * (nd - 1))
    return (mu + sb * z_arr).astype(x_t.dtype, copy=False)


@dataclass
class SampleRequest:
    n_samples: int
    context: np.ndarray | None = None  # one-hot row applied to all samples,
    # or a (n_samples, n_cfeat) array
    guidance_weight: float = 0.0
    seed: int = 0
    clamp: bool = True  # expose the pre-clamp output for moment oracles

    def __post_init__(self):
        if self.n_samples < 1:
            raise InvalidRangeError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.guidance_weight < 0:
            raise InvalidRangeError(
                f"guidance_weight must be >= 0, got {self.guidance_weight}"
            )


def sample(model, schedule: Schedule, req: SampleRequest) -> np.ndarray:
    """Generate req.n_samples fields by iterating the reverse chain T..1.

    ``model(x, t_norm, context) -> eps`` is any noise predictor; guidance
    weight w > 0 blends (1+w) * conditional - w * unconditional predictions,
    the unconditional pass using an all-zero context.  Output is clamped to
    [-1, 1] unless req.clamp is False.
    """
    cfg = getattr(model, "cfg", None)
    if cfg is not None and (cfg.height, cfg.width) != (16, 16):
        raise InvalidRangeError(
            f"model resolution {cfg.height}x{cfg.width} != 16x16"
        )
    n = req.n_samples
    shape = (n, cfg.in_channels, cfg.height, cfg.width) if cfg is not None else (
        n, 1, 16, 16)
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([req.seed & 0xFFFFFFFF, 23]))
    )
    ctx = None
    if req.context is not None:
        ctx = np.asarray(req.context, dtype=np.float32)
        if ctx.ndim == 1:
            ctx = np.broadcast_to(ctx, (n, ctx.shape[0])).copy()
        elif ctx.shape[0] != n:
            raise ShapeMismatchError(
                f"context rows {ctx.shape[0]} != n_samples {n}"
            )

    x = rng.standard_normal(shape, dtype=np.float32)
    w = req.guidance_weight
    for i in range(schedule.T, 0, -1):
        t_norm = i / schedule.T
        eps = model(x, t_norm, ctx)
        if w > 0.0:
            eps_uncond = model(x, t_norm, None)
            eps = (1.0 + w) * eps - w * eps_uncond
        z = (
            rng.standard_normal(shape, dtype=np.float32)
            if i > 1
            else np.zeros(shape, dtype=np.float32)
        )
        x = denoise_add_noise(x, i, eps, z, schedule)
    if req.clamp:
        x = np.clip(x, -1.0, 1.0)
    return x
