"""Minimal reverse-mode autodiff over numpy arrays.

Primitives are exactly the set the noise-prediction network and its MSE loss
need: conv2d (stride 1, symmetric padding), transposed conv with kernel ==
stride, linear, group norm, SiLU, max/average pooling, channel concat,
elementwise add / sub / mul with broadcasting, scalar scale, reshape, and
sum / mean reductions.

Design notes:

* A ``Tape`` records primitive applications in execution order; ``backward``
  walks it once in reverse, accumulating gradients additively across fan-out.
  Saved activations live in per-node closures.
* Passing ``tape=None`` (or using only tensors without ``requires_grad``)
  runs a pure forward pass with nothing recorded.
* Convolutions lower to im2col + BLAS matmul; the input gradient reuses the
  same correlation kernel with a flipped, transposed filter.
* Max-pool gradient routes to the first maximal element of each window in
  row-major scan order on ties.
* Group-norm epsilon is 1e-5 with population (biased) variance.
* float32 is the training dtype; tests run the same code at float64.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatchError

GN_EPS = 1e-5


class Tensor:
    """Shaped numeric buffer, optionally tracking a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None  # set when produced by a recorded primitive

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[_Node] = []

    def __len__(self):
        return len(self.records)


def apply_primitive(tape, op: str, inputs, attrs=None) -> Tensor:
    """Run primitive ``op`` on Tensor inputs, recording it on tape if any
    input participates in differentiation."""
    fwd = _PRIMITIVES.get(op)
    if fwd is None:
        raise KeyError(f"unknown primitive {op!r}")
    out_data, backward_fn = fwd(*[t.data for t in inputs], **(attrs or {}))
    out = Tensor(out_data)
    if tape is not None and any(
        t.requires_grad or t.node is not None for t in inputs
    ):
        node = _Node(op, tuple(inputs), out, backward_fn)
        out.node = node
        tape.records.append(node)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise ShapeMismatchError(
            f"loss must be scalar, got shape {loss.data.shape}"
        )
    if not tape.records:
        raise ValueError("tape is empty; nothing to differentiate")
    pending: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)
    }
    for node in reversed(tape.records):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            if t.requires_grad:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            if t.node is not None:
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi


# ---------------------------------------------------------------------------
# primitive forward/backward implementations
# each returns (out_data, backward_fn) where backward_fn(g) yields one
# gradient per input (None for non-differentiable inputs)
# ---------------------------------------------------------------------------


def _require(cond: bool, msg: str):
    if not cond:
        raise ShapeMismatchError(msg)


# correlation works on batch chunks sized so the lowered matrix stays
# cache-resident; the fused (row * padded-width + col) frame turns the 2-d
# window gather into long contiguous runs
_CORR_CHUNK_BYTES = 6 << 20


def _corr_geometry(shape, kshape, pad):
    B, C, H, W = shape
    _, _, kh, kw = kshape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    M = (Ho - 1) * Wp + Wo  # fused-frame span of one image
    bc = max(1, min(B, _CORR_CHUNK_BYTES // (C * kh * kw * M * 4)))
    return Hp, Wp, Ho, Wo, M, bc


def _chunk_frames(x_chunk: np.ndarray, pad: int):
    """(C, bc, Hp*Wp) contiguous channel-major view of the padded chunk."""
    if pad:
        x_chunk = np.pad(x_chunk, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    bc, C = x_chunk.shape[0], x_chunk.shape[1]
    return np.ascontiguousarray(x_chunk.transpose(1, 0, 2, 3)).reshape(C, bc, -1)


def _chunk_rhs(xt3: np.ndarray, kh: int, kw: int, Wp: int, M: int) -> np.ndarray:
    """Lowered matrix (C*kh*kw, bc*M) for one chunk (rows grouped by c)."""
    C, bc, _ = xt3.shape
    s0, s1, s2 = xt3.strides
    v = np.lib.stride_tricks.as_strided(
        xt3, shape=(C, kh, kw, bc, M), strides=(s0, Wp * s2, s2, s1, s2)
    )
    return v.reshape(C * kh * kw, bc * M)


def _unfuse(res: np.ndarray, O: int, bc: int, Ho: int, Wo: int, Wp: int,
            M: int) -> np.ndarray:
    """(O, bc*M) fused gemm result -> (bc, O, Ho, Wo)."""
    frame = np.empty((O, bc, Ho * Wp), dtype=res.dtype)
    frame[:, :, :M] = res.reshape(O, bc, M)
    return frame.reshape(O, bc, Ho, Wp)[:, :, :, :Wo].transpose(1, 0, 2, 3)


def _corr(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    """Stride-1 cross-correlation of (B,C,H,W) with (O,C,kh,kw)."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Hp, Wp, Ho, Wo, M, bc = _corr_geometry(x.shape, w.shape, pad)
    lhs = np.ascontiguousarray(w.transpose(1, 2, 3, 0).reshape(C * kh * kw, O))
    out = np.empty((B, O, Ho, Wo), dtype=x.dtype)
    for start in range(0, B, bc):
        chunk = x[start:start + bc]
        n = chunk.shape[0]
        xt3 = _chunk_frames(chunk, pad)
        rhs = _chunk_rhs(xt3, kh, kw, Wp, M)
        res = lhs.T @ rhs
        out[start:start + n] = _unfuse(res, O, n, Ho, Wo, Wp, M)
    return out


def _corr_dw(x: np.ndarray, g: np.ndarray, kshape, pad: int) -> np.ndarray:
    """Kernel gradient: correlate input windows with the output gradient."""
    B, C, H, W = x.shape
    O, _, kh, kw = kshape
    Hp, Wp, Ho, Wo, M, bc = _corr_geometry(x.shape, kshape, pad)
    dw_flat = np.zeros((O, C * kh * kw), dtype=x.dtype)
    for start in range(0, B, bc):
        chunk = x[start:start + bc]
        gchunk = g[start:start + chunk.shape[0]]
        n = chunk.shape[0]
        xt3 = _chunk_frames(chunk, pad)
        rhs = _chunk_rhs(xt3, kh, kw, Wp, M)
        gframe = np.zeros((O, n, Ho, Wp), dtype=x.dtype)
        gframe[:, :, :, :Wo] = gchunk.transpose(1, 0, 2, 3)
        ge = np.ascontiguousarray(gframe.reshape(O, n, Ho * Wp)[:, :, :M]).reshape(
            O, n * M
        )
        dw_flat += ge @ rhs.T
    return dw_flat.reshape(O, C, kh, kw)


def _conv2d(x, w, b, pad=1):
    _require(x.ndim == 4 and w.ndim == 4, f"conv2d wants 4-d x and w, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = w.shape
    _require(Ci == C, f"conv2d channel mismatch: input has {C}, kernel expects {Ci}")
    _require(b.shape == (O,), f"conv2d bias shape {b.shape} != ({O},)")
    _require(H + 2 * pad >= kh and W + 2 * pad >= kw,
             f"conv2d kernel {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    out = _corr(x, w, pad)
    out += b.reshape(1, O, 1, 1)

    def backward_fn(g):
        g = np.ascontiguousarray(g)
        # input gradient: correlate g with the flipped, channel-swapped kernel
        w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx = _corr(g, w_flip, kh - 1 - pad)
        dw = _corr_dw(x, g, w.shape, pad)
        db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    return out, backward_fn


def _conv_transpose2d(x, w, b):
    """Transposed conv with kernel size == stride (non-overlapping blocks).

    Weight layout (out_ch, in_ch, k, k); each input pixel expands to a k x k
    output block.
    """
    _require(x.ndim == 4 and w.ndim == 4, f"conv_transpose2d wants 4-d x and w, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = w.shape
    _require(Ci == C, f"conv_transpose2d channel mismatch: input has {C}, kernel expects {Ci}")
    _require(kh == kw, f"conv_transpose2d kernel must be square, got {kh}x{kw}")
    _require(b.shape == (O,), f"conv_transpose2d bias shape {b.shape} != ({O},)")
    k = kh
    # (B*H*W, C) @ (C, O*k*k) -> scatter to blocks
    xmat = x.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    wmat = w.transpose(1, 0, 2, 3).reshape(C, O * k * k)
    blocks = (xmat @ wmat).reshape(B, H, W, O, k, k)
    out = blocks.transpose(0, 3, 1, 4, 2, 5).reshape(B, O, H * k, W * k)
    out = out + b.reshape(1, O, 1, 1)

    def backward_fn(g):
        gb = g.reshape(B, O, H, k, W, k).transpose(0, 2, 4, 1, 3, 5)
        gmat = np.ascontiguousarray(gb).reshape(B * H * W, O * k * k)
        dx = (gmat @ wmat.T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        dw = (xmat.T @ gmat).reshape(C, O, k, k).transpose(1, 0, 2, 3)
        db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    return out, backward_fn


def _linear(x, w, b=None):
    _require(x.ndim == 2 and w.ndim == 2, f"linear wants 2-d x and w, got {x.shape} and {w.shape}")
    _require(x.shape[1] == w.shape[1], f"linear feature mismatch: x has {x.shape[1]}, w expects {w.shape[1]}")
    out = x @ w.T
    if b is not None:
        _require(b.shape == (w.shape[0],), f"linear bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b

    def backward_fn(g):
        dx = g @ w
        dw = g.T @ x
        db = g.sum(axis=0) if b is not None else None
        return (dx, dw, db) if b is not None else (dx, dw)

    return out, backward_fn


def _silu(x):
    # a saturated exp is fine here: exp(-x) -> inf gives sigmoid -> 0 exactly
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def backward_fn(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return out, backward_fn


def _group_norm(x, gamma, beta, groups=8, eps=GN_EPS):
    B, C, H, W = x.shape
    _require(C % groups == 0, f"group_norm: {C} channels not divisible by {groups} groups")
    _require(gamma.shape == (C,) and beta.shape == (C,),
             f"group_norm affine shapes {gamma.shape}, {beta.shape} != ({C},)")
    xg = x.reshape(B, groups, -1)
    n = xg.shape[2]
    mu = xg.mean(axis=2)
    sq = np.einsum("bgn,bgn->bg", xg, xg) / n
    inv = 1.0 / np.sqrt(sq - mu * mu + eps)
    # fold normalization into per-channel affine: out = x * a + c
    cpg = C // groups
    a = (inv[:, :, None] * gamma.reshape(1, groups, cpg)).reshape(B, C, 1, 1)
    shift = beta.reshape(1, groups, cpg) - (mu * inv)[:, :, None] * gamma.reshape(
        1, groups, cpg
    )
    out = x * a + shift.reshape(B, C, 1, 1)

    def backward_fn(g):
        mu_b = mu[:, :, None]
        inv_b = inv[:, :, None]
        xh = ((xg - mu_b) * inv_b).reshape(B, C, H, W)
        dgamma = np.einsum("bchw,bchw->c", g, xh)
        dbeta = g.sum(axis=(0, 2, 3))
        gx = (g * gamma.reshape(1, C, 1, 1)).reshape(B, groups, -1)
        xhg = xh.reshape(B, groups, -1)
        mean_g = gx.mean(axis=2, keepdims=True)
        mean_gx = np.einsum("bgn,bgn->bg", gx, xhg)[:, :, None] / n
        dx = inv_b * (gx - mean_g - xhg * mean_gx)
        return dx.reshape(B, C, H, W), dgamma, dbeta

    return out, backward_fn


def _maxpool2d(x, k=2):
    B, C, H, W = x.shape
    _require(H % k == 0 and W % k == 0, f"maxpool2d: {H}x{W} not divisible by window {k}")
    Ho, Wo = H // k, W // k
    win = x.reshape(B, C, Ho, k, Wo, k)
    out = win.max(axis=(3, 5))

    def backward_fn(g):
        # route to the first maximal element in row-major window scan order
        dx = np.zeros_like(x)
        dwin = dx.reshape(B, C, Ho, k, Wo, k)
        taken = np.zeros((B, C, Ho, Wo), dtype=bool)
        for i in range(k):
            for j in range(k):
                hit = (win[:, :, :, i, :, j] == out) & ~taken
                dwin[:, :, :, i, :, j] = np.where(hit, g, 0.0)
                taken |= hit
        return (dx,)

    return out, backward_fn


def _avgpool2d(x, k):
    B, C, H, W = x.shape
    _require(H % k == 0 and W % k == 0, f"avgpool2d: {H}x{W} not divisible by window {k}")
    Ho, Wo = H // k, W // k
    out = x.reshape(B, C, Ho, k, Wo, k).mean(axis=(3, 5))

    def backward_fn(g):
        dx = np.broadcast_to(
            g[:, :, :, None, :, None] / (k * k), (B, C, Ho, k, Wo, k)
        ).reshape(B, C, H, W)
        return (np.ascontiguousarray(dx),)

    return out, backward_fn


def _concat(*xs):
    _require(all(x.ndim == xs[0].ndim for x in xs), "concat rank mismatch")
    for ax in range(xs[0].ndim):
        if ax != 1:
            _require(
                all(x.shape[ax] == xs[0].shape[ax] for x in xs),
                f"concat non-channel dims differ: {[x.shape for x in xs]}",
            )
    out = np.concatenate(xs, axis=1)
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]

    def backward_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return out, backward_fn


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to shape (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


def _add(a, b):
    _check_broadcast(a, b, "add")
    out = a + b

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return out, backward_fn


def _sub(a, b):
    _check_broadcast(a, b, "sub")
    out = a - b

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return out, backward_fn


def _mul(a, b):
    _check_broadcast(a, b, "mul")
    out = a * b

    def backward_fn(g):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return out, backward_fn


def _scale(x, c):
    out = x * x.dtype.type(c)

    def backward_fn(g):
        return (g * x.dtype.type(c),)

    return out, backward_fn


def _reshape(x, shape):
    out = x.reshape(shape)

    def backward_fn(g):
        return (g.reshape(x.shape),)

    return out, backward_fn


def _sum(x):
    out = np.asarray(x.sum())

    def backward_fn(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return out, backward_fn


def _mean(x):
    out = np.asarray(x.mean())
    inv_n = 1.0 / x.size

    def backward_fn(g):
        return (np.full_like(x, g * inv_n),)

    return out, backward_fn


_PRIMITIVES = {
    "conv2d": _conv2d,
    "conv_transpose2d": _conv_transpose2d,
    "linear": _linear,
    "silu": _silu,
    "group_norm": _group_norm,
    "maxpool2d": _maxpool2d,
    "avgpool2d": _avgpool2d,
    "concat": _concat,
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "scale": _scale,
    "reshape": _reshape,
    "sum": _sum,
    "mean": _mean,
}

PRIMITIVE_NAMES = tuple(_PRIMITIVES)


# ---------------------------------------------------------------------------
# thin wrappers used when assembling networks
# ---------------------------------------------------------------------------


def conv2d(tape, x, w, b, pad=1):
    return apply_primitive(tape, "conv2d", (x, w, b), {"pad": pad})


def conv_transpose2d(tape, x, w, b):
    return apply_primitive(tape, "conv_transpose2d", (x, w, b))


def linear(tape, x, w, b=None):
    inputs = (x, w) if b is None else (x, w, b)
    return apply_primitive(tape, "linear", inputs)


def silu(tape, x):
    return apply_primitive(tape, "silu", (x,))


def group_norm(tape, x, gamma, beta, groups=8):
    return apply_primitive(tape, "group_norm", (x, gamma, beta), {"groups": groups})


def maxpool2d(tape, x, k=2):
    return apply_primitive(tape, "maxpool2d", (x,), {"k": k})


def avgpool2d(tape, x, k):
    return apply_primitive(tape, "avgpool2d", (x,), {"k": k})


def concat(tape, xs):
    return apply_primitive(tape, "concat", tuple(xs))


def add(tape, a, b):
    return apply_primitive(tape, "add", (a, b))


def sub(tape, a, b):
    return apply_primitive(tape, "sub", (a, b))


def mul(tape, a, b):
    return apply_primitive(tape, "mul", (a, b))


def scale(tape, x, c):
    return apply_primitive(tape, "scale", (x,), {"c": c})


def reshape(tape, x, shape):
    return apply_primitive(tape, "reshape", (x,), {"shape": shape})


def tsum(tape, x):
    return apply_primitive(tape, "sum", (x,))


def tmean(tape, x):
    return apply_primitive(tape, "mean", (x,))


def mse(tape, pred, target):
    """Mean squared error over all elements."""
    d = sub(tape, pred, target)
    return tmean(tape, mul(tape, d, d))


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


class GradCheckReport:
    """Per-tensor max relative error between analytic and numeric grads."""

    def __init__(self, errors: dict[str, float], tol: float):
        self.errors = errors
        self.tol = tol

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def __repr__(self):
        worst = max(self.errors, key=self.errors.get)
        return (
            f"GradCheckReport(passed={self.passed}, max_error={self.max_error:.3e} "
            f"at {worst!r}, tol={self.tol:.1e})"
        )


def grad_check(
    loss_fn,
    params: dict[str, Tensor],
    tol: float,
    step: float = 1e-5,
    max_elems_per_tensor: int | None = None,
    seed: int = 0,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare backward() gradients against central finite differences.

    ``loss_fn(params, tape)`` must rebuild the graph and return a scalar
    Tensor.  When ``max_elems_per_tensor`` is set, only that many randomly
    chosen elements per tensor are probed (keeps full-network checks fast);
    otherwise every element is checked.  The relative error uses ``floor``
    as an absolute denominator floor so exactly-zero gradients do not divide
    finite-difference noise by ~0.
    """
    for p in params.values():
        p.zero_grad()
    tape = Tape()
    loss = loss_fn(params, tape)
    backward(tape, loss)
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    rng = np.random.Generator(np.random.PCG64(seed))
    errors: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_elems_per_tensor is not None and n > max_elems_per_tensor:
            idx = rng.choice(n, size=max_elems_per_tensor, replace=False)
        else:
            idx = np.arange(n)
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lo_hi = float(loss_fn(params, None).data)
            flat[i] = orig - step
            lo_lo = float(loss_fn(params, None).data)
            flat[i] = orig
            numeric = (lo_hi - lo_lo) / (2 * step)
            denom = max(abs(a_flat[i]), abs(numeric), floor)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
        errors[name] = worst
    return GradCheckReport(errors, tol)
