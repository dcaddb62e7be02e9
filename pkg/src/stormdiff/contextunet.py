"""Conditional noise-prediction network for 16x16 single-channel fields.

Layout (F = n_feat, K = n_cfeat, D = time_embed_dim):

    init   residual conv block 1 -> F                 @ 16x16
    down1  conv block F -> F, then 2x max-pool        -> 8x8
    down2  conv block F -> 2F, then 2x max-pool       -> 4x4
    to_vec 4x4 average-pool + SiLU                    -> (2F, 1, 1)
    up0    transposed conv k4/s4, group-norm, SiLU    -> (2F, 4, 4)
    film1  h = cemb1 * h + temb1, concat down2 skip   (4F, 4, 4)
    up1    transposed conv k2/s2 + conv block         -> (F, 8, 8)
    film2  h = cemb2 * h + temb2, concat down1 skip   (2F, 8, 8)
    up2    transposed conv k2/s2 + conv block         -> (F, 16, 16)
    head   concat init skip, conv 2F->F, GN, SiLU, conv F->1

Each conv block is two (3x3 conv, group-norm, SiLU) stages; the init block
adds its two stage outputs and rescales by 1/sqrt(2).  The normalized
timestep feeds a sinusoidal embedding and two 2-layer MLPs (additive, 2F- and
F-dim); the one-hot context feeds two parallel bias-free 2-layer MLPs
(multiplicative gates).  Bias-free context MLPs make a fully-masked context
contribute exactly nothing: the gate is zero and every context weight
receives an exactly-zero gradient.

Initialization is uniform in +/- sqrt(2 / fan_in) with zero biases and
identity group-norm affines, except the final output conv whose bound is
scaled by 1/16 so an untrained network predicts near-zero noise (keeping the
untrained MSE against unit-variance targets at ~1.0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InvalidRangeError, ShapeMismatchError

GN_GROUPS = 8
HEAD_INIT_SCALE = 1.0 / 16.0


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    n_feat: int = 64
    n_cfeat: int = 10
    height: int = 16
    width: int = 16
    time_embed_dim: int = 64

    def __post_init__(self):
        if self.height % 4 or self.width % 4:
            raise InvalidRangeError(
                f"height/width must be divisible by 4, got "
                f"{self.height}x{self.width}"
            )
        if self.n_feat % GN_GROUPS:
            raise InvalidRangeError(
                f"n_feat must be divisible by {GN_GROUPS}, got {self.n_feat}"
            )
        if self.time_embed_dim % 2:
            raise InvalidRangeError(
                f"time_embed_dim must be even, got {self.time_embed_dim}"
            )


def sinusoidal_embed(t_norm: float, d: int) -> np.ndarray:
    """Sinusoidal embedding of a normalized timestep in (0, 1].

    Element 2i is sin(t / 10000^(2i/d)) and element 2i+1 is the matching
    cosine, for i = 0 .. d/2 - 1.
    """
    if d % 2:
        raise InvalidRangeError(f"embedding dim must be even, got {d}")
    return _embed_batch(np.asarray([t_norm], dtype=np.float64), d)[0]


def _embed_batch(t_norm: np.ndarray, d: int) -> np.ndarray:
    i = np.arange(d // 2, dtype=np.float64)
    freq = 10000.0 ** (2.0 * i / d)
    arg = t_norm[:, None] / freq[None, :]
    out = np.empty((t_norm.shape[0], d), dtype=np.float64)
    out[:, 0::2] = np.sin(arg)
    out[:, 1::2] = np.cos(arg)
    return out


def _conv_block_shapes(prefix: str, cin: int, cout: int) -> dict:
    return {
        f"{prefix}.conv1.w": (cout, cin, 3, 3),
        f"{prefix}.conv1.b": (cout,),
        f"{prefix}.gn1.g": (cout,),
        f"{prefix}.gn1.b": (cout,),
        f"{prefix}.conv2.w": (cout, cout, 3, 3),
        f"{prefix}.conv2.b": (cout,),
        f"{prefix}.gn2.g": (cout,),
        f"{prefix}.gn2.b": (cout,),
    }


def param_shape_table(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter tensor, in initialization order."""
    F = cfg.n_feat
    K = cfg.n_cfeat
    D = cfg.time_embed_dim
    table: dict[str, tuple[int, ...]] = {}
    table.update(_conv_block_shapes("init", cfg.in_channels, F))
    table.update(_conv_block_shapes("down1", F, F))
    table.update(_conv_block_shapes("down2", F, 2 * F))
    table.update({
        "temb1.fc1.w": (2 * F, D), "temb1.fc1.b": (2 * F,),
        "temb1.fc2.w": (2 * F, 2 * F), "temb1.fc2.b": (2 * F,),
        "temb2.fc1.w": (F, D), "temb2.fc1.b": (F,),
        "temb2.fc2.w": (F, F), "temb2.fc2.b": (F,),
        "cemb1.fc1.w": (2 * F, K), "cemb1.fc2.w": (2 * F, 2 * F),
        "cemb2.fc1.w": (F, K), "cemb2.fc2.w": (F, F),
        "up0.convt.w": (2 * F, 2 * F, 4, 4), "up0.convt.b": (2 * F,),
        "up0.gn.g": (2 * F,), "up0.gn.b": (2 * F,),
        "up1.convt.w": (F, 4 * F, 2, 2), "up1.convt.b": (F,),
    })
    table.update(_conv_block_shapes("up1", F, F))
    table.update({"up2.convt.w": (F, 2 * F, 2, 2), "up2.convt.b": (F,)})
    table.update(_conv_block_shapes("up2", F, F))
    table.update({
        "head.conv1.w": (F, 2 * F, 3, 3), "head.conv1.b": (F,),
        "head.gn.g": (F,), "head.gn.b": (F,),
        "head.conv2.w": (1, F, 3, 3), "head.conv2.b": (1,),
    })
    return table


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if "convt" in name:
        # kernel == stride: each output pixel sees one input pixel per channel
        return shape[1]
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[1]


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, ad.Tensor]:
    """Deterministic parameter tensors per the shape table."""
    table = param_shape_table(cfg)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 11])))
    params: dict[str, ad.Tensor] = {}
    for name, shape in table.items():
        if name.endswith(".b") and ".gn" not in name:
            data = np.zeros(shape, dtype=dtype)
        elif name.endswith(".g"):  # group-norm gain
            data = np.ones(shape, dtype=dtype)
        elif ".gn" in name and name.endswith(".b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            bound = np.sqrt(2.0 / _fan_in(name, shape))
            if name == "head.conv2.w":
                bound *= HEAD_INIT_SCALE
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[name] = ad.Tensor(data, requires_grad=True)
    return params


def param_count(params: dict[str, ad.Tensor]) -> int:
    return sum(int(p.data.size) for p in params.values())


def _conv_block(tape, p, prefix, x, residual=False):
    h1 = ad.conv2d(tape, x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"])
    h1 = ad.group_norm(tape, h1, p[f"{prefix}.gn1.g"], p[f"{prefix}.gn1.b"], GN_GROUPS)
    h1 = ad.silu(tape, h1)
    h2 = ad.conv2d(tape, h1, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"])
    h2 = ad.group_norm(tape, h2, p[f"{prefix}.gn2.g"], p[f"{prefix}.gn2.b"], GN_GROUPS)
    h2 = ad.silu(tape, h2)
    if residual:
        return ad.scale(tape, ad.add(tape, h1, h2), 2**-0.5)
    return h2


def _embed_mlp(tape, p, prefix, x, biased=True):
    if biased:
        h = ad.linear(tape, x, p[f"{prefix}.fc1.w"], p[f"{prefix}.fc1.b"])
        h = ad.silu(tape, h)
        return ad.linear(tape, h, p[f"{prefix}.fc2.w"], p[f"{prefix}.fc2.b"])
    h = ad.linear(tape, x, p[f"{prefix}.fc1.w"])
    h = ad.silu(tape, h)
    return ad.linear(tape, h, p[f"{prefix}.fc2.w"])


def _validate_context(context: np.ndarray, n_cfeat: int):
    if context.ndim != 2 or context.shape[1] != n_cfeat:
        raise ShapeMismatchError(
            f"context shape {context.shape} != (batch, {n_cfeat})"
        )
    vals_ok = np.all((context == 0) | (context == 1))
    rows_ok = np.all(np.isin(context.sum(axis=1), (0, 1)))
    if not (vals_ok and rows_ok):
        raise ValueError("context rows must be one-hot or all-zero")


def forward(
    params: dict[str, ad.Tensor],
    cfg: ModelConfig,
    x_t: np.ndarray,
    t_norm,
    context: np.ndarray | None = None,
    mask=1.0,
    tape: ad.Tape | None = None,
) -> ad.Tensor:
    """Predict the noise component of x_t.

    t_norm is a scalar or per-item vector in (0, 1]; context rows are one-hot
    (or all-zero) and are multiplied by the per-item 0/1 mask before
    embedding.  Returns a Tensor shaped like x_t.
    """
    x_np = x_t.data if isinstance(x_t, ad.Tensor) else np.asarray(x_t)
    B = x_np.shape[0]
    expected = (B, cfg.in_channels, cfg.height, cfg.width)
    if x_np.shape != expected:
        raise ShapeMismatchError(f"x_t shape {x_np.shape} != {expected}")
    dtype = params["init.conv1.w"].dtype

    t_arr = np.broadcast_to(np.asarray(t_norm, dtype=np.float64), (B,))
    temb_in = ad.Tensor(_embed_batch(t_arr, cfg.time_embed_dim).astype(dtype))

    if context is None:
        ctx = np.zeros((B, cfg.n_cfeat), dtype=dtype)
    else:
        ctx = np.asarray(context, dtype=dtype)
    mask_arr = np.broadcast_to(np.asarray(mask, dtype=dtype), (B,))
    ctx = ctx * mask_arr[:, None]
    _validate_context(ctx, cfg.n_cfeat)
    ctx_in = ad.Tensor(ctx)

    x = x_t if isinstance(x_t, ad.Tensor) else ad.Tensor(x_np.astype(dtype, copy=False))
    p = params
    F = cfg.n_feat

    init_out = _conv_block(tape, p, "init", x, residual=True)
    d1 = ad.maxpool2d(tape, _conv_block(tape, p, "down1", init_out), 2)
    d2 = ad.maxpool2d(tape, _conv_block(tape, p, "down2", d1), 2)
    hidden = ad.silu(tape, ad.avgpool2d(tape, d2, cfg.height // 4))

    temb1 = ad.reshape(tape, _embed_mlp(tape, p, "temb1", temb_in), (B, 2 * F, 1, 1))
    temb2 = ad.reshape(tape, _embed_mlp(tape, p, "temb2", temb_in), (B, F, 1, 1))
    cemb1 = ad.reshape(
        tape, _embed_mlp(tape, p, "cemb1", ctx_in, biased=False), (B, 2 * F, 1, 1)
    )
    cemb2 = ad.reshape(
        tape, _embed_mlp(tape, p, "cemb2", ctx_in, biased=False), (B, F, 1, 1)
    )

    u0 = ad.conv_transpose2d(tape, hidden, p["up0.convt.w"], p["up0.convt.b"])
    u0 = ad.silu(tape, ad.group_norm(tape, u0, p["up0.gn.g"], p["up0.gn.b"], GN_GROUPS))

    h1 = ad.add(tape, ad.mul(tape, cemb1, u0), temb1)
    u1 = ad.conv_transpose2d(
        tape, ad.concat(tape, (h1, d2)), p["up1.convt.w"], p["up1.convt.b"]
    )
    u1 = _conv_block(tape, p, "up1", u1)

    h2 = ad.add(tape, ad.mul(tape, cemb2, u1), temb2)
    u2 = ad.conv_transpose2d(
        tape, ad.concat(tape, (h2, d1)), p["up2.convt.w"], p["up2.convt.b"]
    )
    u2 = _conv_block(tape, p, "up2", u2)

    h = ad.conv2d(tape, ad.concat(tape, (u2, init_out)), p["head.conv1.w"],
                  p["head.conv1.b"])
    h = ad.silu(tape, ad.group_norm(tape, h, p["head.gn.g"], p["head.gn.b"], GN_GROUPS))
    return ad.conv2d(tape, h, p["head.conv2.w"], p["head.conv2.b"])


class ContextUnet:
    """Config + parameters bundle with a no-grad predict interface."""

    def __init__(self, cfg: ModelConfig, params: dict[str, ad.Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int, dtype=np.float32) -> "ContextUnet":
        return cls(cfg, init_params(cfg, seed, dtype))

    def forward(self, x_t, t_norm, context=None, mask=1.0, tape=None) -> ad.Tensor:
        return forward(self.params, self.cfg, x_t, t_norm, context, mask, tape)

    def __call__(self, x_t: np.ndarray, t_norm, context=None) -> np.ndarray:
        """Pure-forward noise prediction used by the sampler."""
        return self.forward(x_t, t_norm, context, mask=1.0, tape=None).data

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}
