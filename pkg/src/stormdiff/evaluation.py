"""Quantitative and visual evaluation: spectra, conditional fidelity, grids.

The log-spectral distance here is the RMS difference, in dB, between the
set-averaged 2-D power spectra of two sample sets: per field, power =
|FFT2|^2; per set, average power per frequency bin; dB = 10 log10(power)
with a 1e-12 floor before the log.  Symmetric and zero on identical sets.

Image output is binary PGM (P5), chosen for bit-exactness; a sidecar text
line records the value-to-gray mapping.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffusion
from .data import Dataset, ScalerParams, inverse_transform
from .errors import InvalidRangeError, ShapeMismatchError

POWER_FLOOR = 1e-12


def _mean_power_db(fields: np.ndarray) -> np.ndarray:
    x = np.asarray(fields, dtype=np.float64)
    if x.ndim == 4:
        x = x[:, 0]
    if x.ndim != 3:
        raise ShapeMismatchError(f"expected (N, H, W) fields, got {x.shape}")
    power = np.abs(np.fft.fft2(x)) ** 2
    mean_power = power.mean(axis=0)
    return 10.0 * np.log10(np.maximum(mean_power, POWER_FLOOR))


@dataclass
class SpectrumSummary:
    mean_power_db: np.ndarray
    n_samples: int


def spectrum_summary(fields: np.ndarray) -> SpectrumSummary:
    fields = np.asarray(fields)
    return SpectrumSummary(_mean_power_db(fields), fields.shape[0])


def lsd(set_a: np.ndarray, set_b: np.ndarray) -> float:
    """Log-spectral distance in dB between two field sets."""
    set_a = np.asarray(set_a)
    set_b = np.asarray(set_b)
    if set_a.shape[0] == 0 or set_b.shape[0] == 0:
        raise InvalidRangeError("lsd requires non-empty sets")
    if set_a.shape[-2:] != set_b.shape[-2:]:
        raise ShapeMismatchError(
            f"resolution mismatch: {set_a.shape[-2:]} vs {set_b.shape[-2:]}"
        )
    da = _mean_power_db(set_a)
    db = _mean_power_db(set_b)
    return float(np.sqrt(np.mean((da - db) ** 2)))


# ---------------------------------------------------------------------------
# conditional fidelity
# ---------------------------------------------------------------------------


def spearman_rank_correlation(a, b) -> float:
    """Rank correlation of two equal-length sequences (no tie handling)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ra = np.argsort(np.argsort(a)).astype(np.float64)
    rb = np.argsort(np.argsort(b)).astype(np.float64)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    return float((ra * rb).sum() / denom)


@dataclass
class FidelityReport:
    classes: list[int]
    generated_means: np.ndarray  # per-class mean intensity, physical units
    train_means: np.ndarray
    rank_correlation: float
    n_valid: np.ndarray  # per-class count of all-finite generated samples


def conditional_fidelity(
    model,
    schedule,
    classes,
    n_per_class: int,
    train_dataset: Dataset,
    scaler: ScalerParams | None = None,
    seed: int = 0,
    guidance_weight: float = 0.0,
    sample_fn=None,
) -> FidelityReport:
    """Sample each class, compare generated vs training per-class means.

    ``sample_fn(class_idx, n, seed) -> (n, 1, H, W) batch`` may replace the
    default sampler (used by stub tests).  Means are compared after the
    inverse transform when a scaler is supplied.
    """
    classes = list(classes)
    scaler = scaler if scaler is not None else train_dataset.scaler
    n_cfeat = getattr(model, "cfg", None).n_cfeat if sample_fn is None else None

    def _default_sample(cls_idx, n, s):
        one_hot = np.zeros(n_cfeat, dtype=np.float32)
        one_hot[cls_idx] = 1.0
        req = diffusion.SampleRequest(
            n_samples=n, context=one_hot, guidance_weight=guidance_weight,
            seed=s,
        )
        return diffusion.sample(model, schedule, req)

    sampler = sample_fn or _default_sample

    def _physical(batch):
        return inverse_transform(batch, scaler) if scaler is not None else batch

    gen_means = []
    n_valid = []
    for k, cls in enumerate(classes):
        batch = np.asarray(sampler(cls, n_per_class, seed + k))
        finite = np.isfinite(batch).all(axis=(1, 2, 3))
        n_valid.append(int(finite.sum()))
        gen_means.append(float(_physical(batch[finite]).mean()))
    train_means = []
    for cls in classes:
        sel = train_dataset.fields[train_dataset.labels == cls]
        train_means.append(float(_physical(sel).mean()))
    gen_means = np.asarray(gen_means)
    train_means = np.asarray(train_means)
    return FidelityReport(
        classes=classes,
        generated_means=gen_means,
        train_means=train_means,
        rank_correlation=spearman_rank_correlation(gen_means, train_means),
        n_valid=np.asarray(n_valid),
    )


# ---------------------------------------------------------------------------
# image grids
# ---------------------------------------------------------------------------


def write_grid(batch: np.ndarray, path, nrow: int = 4,
               value_range: tuple[float, float] = (-1.0, 1.0)) -> None:
    """Tile a batch row-major into a binary PGM, padding with black tiles.

    value_range maps linearly onto gray [0, 255] with clamping; the mapping
    is recorded in ``<path>.txt``.
    """
    batch = np.asarray(batch)
    if batch.ndim == 4:
        batch = batch[:, 0]
    n, h, w = batch.shape
    rows = (n + nrow - 1) // nrow
    lo, hi = value_range
    scaled = np.clip((batch.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    gray = np.rint(scaled * 255.0).astype(np.uint8)
    canvas = np.zeros((rows * h, nrow * w), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, nrow)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = gray[i]
    path = Path(path)
    with open(path, "wb") as f:
        f.write(f"P5\n{canvas.shape[1]} {canvas.shape[0]}\n255\n".encode("ascii"))
        f.write(canvas.tobytes())
    Path(str(path) + ".txt").write_text(
        f"grid {n} tiles {h}x{w} nrow={nrow}; values [{lo}, {hi}] -> gray [0, 255]\n"
    )


def read_pgm(path) -> np.ndarray:
    """Read back a binary PGM written by write_grid (test helper)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5\n"):
        raise InvalidRangeError(f"{path}: not a binary PGM")
    head, _, rest = raw.partition(b"255\n")
    dims = head.split(b"\n")[1].split()
    w, h = int(dims[0]), int(dims[1])
    return np.frombuffer(rest, dtype=np.uint8, count=h * w).reshape(h, w)


def noise_report(store, n: int, out_path=None, seed: int = 0) -> str:
    """Mean/std lines for n random store patches, optionally with a grid.

    The grid reuses write_grid with a [-3, 3] display mapping.
    """
    if n < 1:
        raise InvalidRangeError(f"need n >= 1, got {n}")
    from .noisestore import verify_store_stats

    report = verify_store_stats(store, max(n, 8), seed=seed)
    patches = report.patches[:n]
    lines = [f"noise store report: {n} patches"]
    fields = []
    for p in patches:
        mark = " FLAGGED" if p.flagged else ""
        lines.append(
            f"  image {p.image_idx} t={p.t}: mean {p.mean:+.4f} "
            f"std {p.std:.4f}{mark}"
        )
        fields.append(store.get_noise(p.image_idx, p.t)[0])
    lines.append(
        f"pooled over {len(report.patches)} patches: mean "
        f"{report.pooled_mean:+.5f} std {report.pooled_std:.5f} "
        f"({report.n_flagged} flagged)"
    )
    if out_path is not None:
        write_grid(np.stack(fields), out_path, nrow=4, value_range=(-3.0, 3.0))
    return "\n".join(lines)
