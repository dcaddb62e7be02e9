"""Training orchestration: epochs, validation, checkpoints, periodic grids.

Reproducibility model: every random draw comes from a stream derived as
SeedSequence([seed, stream_id, epoch]) — shuffling, per-item timesteps,
context-mask draws, validation noise, and periodic sample grids each own a
stream id.  Because streams are derived (never carried as mutable state), a
resumed run replays the remaining epochs bit-for-bit, and replaying any
epoch from a parameter snapshot reproduces its loss exactly.  Training noise
comes from the noise store keyed by the image's global index, so reshuffling
never breaks the (image, timestep) -> noise pairing.  Validation draws fresh
noise from its own stream each epoch and evaluates the standard (non-EMA)
parameters without touching any state.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import contextunet as cu
from . import data as data_mod
from . import diffusion
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import InvalidRangeError, ShapeMismatchError
from .evaluation import write_grid
from .noisestore import NoiseStore, load_store
from .optim import AdamState, EmaState, adam_step, cosine_lr, ema_update, mask_context
from .schedule import Schedule, build_linear_schedule

# stream ids for SeedSequence([seed, stream_id, epoch])
STREAM_SHUFFLE = 1
STREAM_TSTEP = 2
STREAM_MASK = 3
STREAM_VAL = 4
STREAM_GRID = 5


def epoch_stream(seed: int, stream_id: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, stream_id, epoch]))
    )


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 120
    eta_max: float = 1e-4
    eta_min: float = 1e-6
    lr_tmax: int | None = None  # None -> epochs
    T: int = 500
    beta1: float = 1e-3
    betaT: float = 2e-2
    keep_prob: float = 0.9
    checkpoint_every: int = 4
    sample_every: int = 4
    grid_samples: int = 16
    train_frac: float = 0.9
    seed: int = 0
    n_feat: int = 64
    n_cfeat: int = 10
    ema_decay: float = 0.995

    def __post_init__(self):
        for name in ("batch_size", "epochs", "T", "checkpoint_every",
                     "grid_samples"):
            if getattr(self, name) < 1:
                raise InvalidRangeError(f"{name} must be positive")
        if not 0.0 < self.train_frac < 1.0:
            raise InvalidRangeError(
                f"train_frac must be in (0, 1), got {self.train_frac}"
            )

    @property
    def t_max(self) -> int:
        return self.epochs if self.lr_tmax is None else self.lr_tmax


@dataclass
class HistoryRow:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float

    def format(self) -> str:
        return (
            f"{self.epoch:4d} {self.lr:.12e} "
            f"{self.train_loss:.9e} {self.val_loss:.9e}"
        )


@dataclass
class TrainState:
    model: cu.ContextUnet
    adam: AdamState
    ema: EmaState
    epoch: int = 0
    history: list = dc_field(default_factory=list)

    @classmethod
    def init(cls, model_cfg: cu.ModelConfig, seed: int,
             ema_decay: float = 0.995) -> "TrainState":
        model = cu.ContextUnet.create(model_cfg, seed)
        return cls(
            model=model,
            adam=AdamState.init(model.params),
            ema=EmaState.init(model.params, decay=ema_decay),
        )


def _one_hot(labels: np.ndarray, n_cfeat: int) -> np.ndarray:
    if labels.max() >= n_cfeat:
        raise InvalidRangeError(
            f"label {labels.max()} outside n_cfeat={n_cfeat}"
        )
    return np.eye(n_cfeat, dtype=np.float32)[labels]


def train_epoch(
    state: TrainState,
    dataset: data_mod.Dataset,
    store: NoiseStore,
    schedule: Schedule,
    cfg: TrainConfig,
    model_forward=None,
) -> float:
    """One pass over the (reshuffled) training set; returns mean batch loss."""
    epoch = state.epoch + 1
    fwd = model_forward or (
        lambda x, t, c, tape: state.model.forward(x, t, c, 1.0, tape)
    )
    shuffle = epoch_stream(cfg.seed, STREAM_SHUFFLE, epoch)
    tsteps = epoch_stream(cfg.seed, STREAM_TSTEP, epoch)
    masks = epoch_stream(cfg.seed, STREAM_MASK, epoch)
    lr = cosine_lr(epoch - 1, cfg.t_max, cfg.eta_max, cfg.eta_min)

    n = len(dataset)
    perm = shuffle.permutation(n)
    loss_sum = 0.0
    n_batches = 0
    params = state.model.params
    for start in range(0, n, cfg.batch_size):
        idx = perm[start:start + cfg.batch_size]
        t = tsteps.integers(1, schedule.T + 1, size=idx.shape[0])
        eps = np.stack([
            store.get_noise(int(g), int(ti))
            for g, ti in zip(dataset.global_indices[idx], t)
        ])
        x_t = diffusion.perturb_input(dataset.fields[idx], t, eps, schedule)
        ctx = mask_context(
            _one_hot(dataset.labels[idx], cfg.n_cfeat), cfg.keep_prob, masks
        )
        tape = ad.Tape()
        pred = fwd(x_t, t / schedule.T, ctx, tape)
        loss = ad.mse(tape, pred, ad.Tensor(eps))
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise FloatingPointError(
                f"non-finite loss {loss_val} at epoch {epoch}, batch "
                f"{n_batches}, timesteps {t.tolist()}"
            )
        if len(tape):
            for p in params.values():
                p.zero_grad()
            ad.backward(tape, loss)
            adam_step(
                params, {k: p.grad for k, p in params.items()}, state.adam, lr
            )
            ema_update(state.ema, params)
        loss_sum += loss_val
        n_batches += 1
    return loss_sum / n_batches


def validate_epoch(
    state: TrainState,
    val_set: data_mod.Dataset,
    schedule: Schedule,
    cfg: TrainConfig,
    model_forward=None,
) -> float:
    """Mean validation loss with fresh noise; no gradients, no state change."""
    if len(val_set) == 0:
        raise InvalidRangeError("validation split is empty")
    epoch = state.epoch + 1
    fwd = model_forward or (
        lambda x, t, c: state.model.forward(x, t, c, 1.0, None)
    )
    rng = epoch_stream(cfg.seed, STREAM_VAL, epoch)
    loss_sum = 0.0
    n_batches = 0
    n = len(val_set)
    for start in range(0, n, cfg.batch_size):
        fields = val_set.fields[start:start + cfg.batch_size]
        labels = val_set.labels[start:start + cfg.batch_size]
        b = fields.shape[0]
        t = rng.integers(1, schedule.T + 1, size=b)
        eps = rng.standard_normal(fields.shape, dtype=np.float32)
        x_t = diffusion.perturb_input(fields, t, eps, schedule)
        ctx = _one_hot(labels, cfg.n_cfeat)
        pred = fwd(x_t, t / schedule.T, ctx)
        pred = pred.data if isinstance(pred, ad.Tensor) else np.asarray(pred)
        loss_sum += float(np.mean((pred - eps) ** 2))
        n_batches += 1
    return loss_sum / n_batches


# ---------------------------------------------------------------------------
# checkpoint plumbing
# ---------------------------------------------------------------------------


def _write_checkpoints(out_dir: Path, state: TrainState, cfg: TrainConfig) -> None:
    tag = f"ep{state.epoch:03d}"
    sched = (cfg.T, cfg.beta1, cfg.betaT)
    tensors = {k: p.data for k, p in state.model.params.items()}
    tensors.update({f"adam/m/{k}": v for k, v in state.adam.m.items()})
    tensors.update({f"adam/v/{k}": v for k, v in state.adam.v.items()})
    tensors["meta/epoch"] = np.float32(state.epoch)
    tensors["meta/adam_step"] = np.float32(state.adam.step)
    save_checkpoint(out_dir / f"ckpt_{tag}_model.sdckpt",
                    state.model.cfg, sched, tensors)
    save_checkpoint(out_dir / f"ckpt_{tag}_ema.sdckpt",
                    state.model.cfg, sched, state.ema.shadow)


def load_train_state(model_path, ema_path=None) -> tuple[TrainState, tuple]:
    """Rebuild a TrainState from a standard checkpoint (+ sibling EMA file)."""
    model_path = Path(model_path)
    if ema_path is None:
        ema_path = Path(str(model_path).replace("_model.sdckpt", "_ema.sdckpt"))
    mcfg, sched, tensors = load_checkpoint(model_path)
    params = {
        k: ad.Tensor(v, requires_grad=True)
        for k, v in tensors.items()
        if "/" not in k
    }
    expected = set(cu.param_shape_table(mcfg))
    if set(params) != expected:
        raise ShapeMismatchError(
            f"{model_path}: parameter names do not match the shape table"
        )
    model = cu.ContextUnet(mcfg, params)
    adam = AdamState(
        m={k.removeprefix("adam/m/"): v for k, v in tensors.items()
           if k.startswith("adam/m/")},
        v={k.removeprefix("adam/v/"): v for k, v in tensors.items()
           if k.startswith("adam/v/")},
        step=int(tensors["meta/adam_step"]),
    )
    _, _, ema_tensors = load_checkpoint(ema_path)
    ema = EmaState(shadow=dict(ema_tensors))
    state = TrainState(model=model, adam=adam, ema=ema,
                       epoch=int(tensors["meta/epoch"]))
    return state, sched


def load_model(path) -> tuple[cu.ContextUnet, Schedule]:
    """Load just a model (standard or EMA checkpoint) plus its schedule."""
    mcfg, (T, b1, bT), tensors = load_checkpoint(path)
    params = {
        k: ad.Tensor(v, requires_grad=False)
        for k, v in tensors.items()
        if "/" not in k
    }
    expected = set(cu.param_shape_table(mcfg))
    if set(params) != expected:
        raise ShapeMismatchError(
            f"{path}: parameter names do not match the shape table"
        )
    return cu.ContextUnet(mcfg, params), build_linear_schedule(T, b1, bT)


def _write_history(out_dir: Path, history: list) -> None:
    lines = ["epoch lr train_loss val_loss"]
    lines += [row.format() for row in history]
    (out_dir / "history.txt").write_text("\n".join(lines) + "\n")


def _sample_grid(state: TrainState, schedule: Schedule, cfg: TrainConfig,
                 out_dir: Path) -> None:
    ema_model = cu.ContextUnet(
        state.model.cfg,
        {k: ad.Tensor(v) for k, v in state.ema.shadow.items()},
    )
    seed_seq = np.random.SeedSequence([cfg.seed, STREAM_GRID, state.epoch])
    req = diffusion.SampleRequest(
        n_samples=cfg.grid_samples,
        seed=int(seed_seq.generate_state(1)[0]),
    )
    batch = diffusion.sample(ema_model, schedule, req)
    write_grid(batch, out_dir / f"grid_ep{state.epoch:03d}.pgm", nrow=4)


def run_training(
    cfg: TrainConfig,
    dataset_path,
    labels_path,
    store_path,
    out_dir,
    resume=None,
    quiet: bool = False,
) -> TrainState:
    """Full training run; writes checkpoints, sample grids, and history."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    raw = data_mod.load_array(dataset_path)
    labels = data_mod.load_labels(labels_path, n_expected=raw.shape[0])
    train_idx, val_idx = data_mod.split_indices(
        raw.shape[0], cfg.train_frac, cfg.seed
    )
    scaler = data_mod.fit_scaler(raw[train_idx])
    dataset = data_mod.fit_transform(raw, labels, scaler=scaler)
    train_ds = dataset.subset(train_idx)
    val_ds = dataset.subset(val_idx)
    (out_dir / "scaler.json").write_text(scaler.to_json() + "\n")

    schedule = build_linear_schedule(cfg.T, cfg.beta1, cfg.betaT)
    store = load_store(store_path)
    h = store.header
    if h.n_images != raw.shape[0] or h.T != cfg.T or h.dims != raw.shape[1:]:
        raise ShapeMismatchError(
            f"noise store (N={h.n_images}, T={h.T}, dims={h.dims}) does not "
            f"match dataset (N={raw.shape[0]}, T={cfg.T}, dims={raw.shape[1:]})"
        )

    if resume is not None:
        state, (T, b1, bT) = load_train_state(resume)
        if (T, b1, bT) != (cfg.T, cfg.beta1, cfg.betaT):
            raise InvalidRangeError(
                f"resume schedule ({T}, {b1}, {bT}) != config "
                f"({cfg.T}, {cfg.beta1}, {cfg.betaT})"
            )
        state.ema.decay = cfg.ema_decay
        if state.epoch >= cfg.epochs:
            if not quiet:
                print(
                    f"checkpoint already at epoch {state.epoch} >= "
                    f"{cfg.epochs}: nothing to do"
                )
            return state
    else:
        model_cfg = cu.ModelConfig(n_feat=cfg.n_feat, n_cfeat=cfg.n_cfeat)
        state = TrainState.init(model_cfg, cfg.seed, ema_decay=cfg.ema_decay)

    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch - 1, cfg.t_max, cfg.eta_max, cfg.eta_min)
        train_loss = train_epoch(state, train_ds, store, schedule, cfg)
        val_loss = validate_epoch(state, val_ds, schedule, cfg)
        state.epoch = epoch
        state.history.append(HistoryRow(epoch, lr, train_loss, val_loss))
        _write_history(out_dir, state.history)
        if not quiet:
            print(
                f"epoch {epoch:3d}/{cfg.epochs} lr {lr:.3e} "
                f"train {train_loss:.4f} val {val_loss:.4f} "
                f"({time.perf_counter() - t0:.1f}s)"
            )
        at_cadence = epoch % cfg.checkpoint_every == 0
        if at_cadence or epoch == cfg.epochs:
            _write_checkpoints(out_dir, state, cfg)
        if cfg.sample_every and (
            epoch % cfg.sample_every == 0 or epoch == cfg.epochs
        ):
            _sample_grid(state, schedule, cfg, out_dir)
    return state
