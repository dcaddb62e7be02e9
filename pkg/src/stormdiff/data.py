"""Dataset ingestion, normalization, splitting, and the synthetic vortex set.

Array files use the NPY 1.0 container: magic \\x93NUMPY, version bytes
(1, 0), little-endian u16 header length, a python-dict header with keys
``descr`` / ``fortran_order`` / ``shape``, then the C-order payload.  Fields
accept ``<f4``/``<f8``; labels are ``<i8``.

Normalization is a two-stage pipeline fit on the training portion only:
z-score with the train mean/std, then an affine map sending the train
z-range [min_z, max_z] onto [-1, 1].  Values outside the train range (only
possible for held-out data) are clipped to [-1, 1]; the inverse transform is
an exact identity on training data.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FileFormatError, InvalidRangeError, ShapeMismatchError

NPY_MAGIC = b"\x93NUMPY"
_FIELD_DTYPES = ("<f4", "<f8")
_LABEL_DTYPE = "<i8"


# ---------------------------------------------------------------------------
# NPY container
# ---------------------------------------------------------------------------


def read_npy(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 10:
        raise FileFormatError(f"{path}: too short for an NPY header ({len(raw)} bytes)")
    if raw[:6] != NPY_MAGIC:
        raise FileFormatError(
            f"{path}: bad magic {raw[:6]!r}, expected {NPY_MAGIC!r}"
        )
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise FileFormatError(
            f"{path}: unsupported NPY version {major}.{minor}, expected 1.0"
        )
    hlen = int.from_bytes(raw[8:10], "little")
    header_end = 10 + hlen
    if len(raw) < header_end:
        raise FileFormatError(f"{path}: truncated header dict")
    try:
        header = ast.literal_eval(raw[10:header_end].decode("latin1"))
    except (ValueError, SyntaxError) as e:
        raise FileFormatError(f"{path}: malformed header dict: {e}") from None
    if not isinstance(header, dict) or not {
        "descr", "fortran_order", "shape"
    } <= set(header):
        raise FileFormatError(f"{path}: header missing required keys: {header!r}")
    descr = header["descr"]
    if descr not in _FIELD_DTYPES + (_LABEL_DTYPE,):
        raise FileFormatError(
            f"{path}: unsupported dtype {descr!r}, expected one of "
            f"{_FIELD_DTYPES + (_LABEL_DTYPE,)}"
        )
    if header["fortran_order"]:
        raise FileFormatError(f"{path}: fortran_order arrays not supported")
    shape = tuple(header["shape"])
    dtype = np.dtype(descr)
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    actual = len(raw) - header_end
    if actual != expected:
        raise FileFormatError(
            f"{path}: payload size mismatch, expected {expected} bytes for "
            f"shape {shape}, got {actual}"
        )
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(shape).copy()


def write_npy(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        descr = "<f4"
    elif arr.dtype == np.float64:
        descr = "<f8"
    elif arr.dtype == np.int64:
        descr = "<i8"
    else:
        raise FileFormatError(f"unsupported dtype for NPY write: {arr.dtype}")
    header = {
        "descr": descr,
        "fortran_order": False,
        "shape": tuple(int(s) for s in arr.shape),
    }
    text = (
        "{"
        + ", ".join(f"{k!r}: {header[k]!r}" for k in ("descr", "fortran_order"))
        + f", 'shape': {header['shape']}, }}"
    )
    # pad so magic + version + len + dict is a multiple of 64, newline-final
    base = 10 + len(text) + 1
    pad = (64 - base % 64) % 64
    text = text + " " * pad + "\n"
    with open(path, "wb") as f:
        f.write(NPY_MAGIC)
        f.write(bytes((1, 0)))
        f.write(len(text).to_bytes(2, "little"))
        f.write(text.encode("latin1"))
        f.write(np.ascontiguousarray(arr).tobytes())


def load_array(path) -> np.ndarray:
    """Load a field array and reshape to (N, 1, 16, 16)."""
    arr = read_npy(path)
    if arr.dtype == np.int64:
        raise FileFormatError(f"{path}: field file has integer dtype")
    if arr.ndim == 2 and arr.shape[1] == 256:
        arr = arr.reshape(arr.shape[0], 1, 16, 16)
    elif arr.ndim == 3 and arr.shape[1:] == (16, 16):
        arr = arr.reshape(arr.shape[0], 1, 16, 16)
    elif arr.ndim == 4 and arr.shape[1:] == (1, 16, 16):
        pass
    else:
        raise FileFormatError(
            f"{path}: field shape {arr.shape} not one of (N, 256), "
            f"(N, 16, 16), (N, 1, 16, 16)"
        )
    return arr


def load_labels(path, n_expected: int | None = None) -> np.ndarray:
    arr = read_npy(path)
    if arr.dtype != np.int64:
        raise FileFormatError(f"{path}: labels must be <i8, got {arr.dtype}")
    if arr.ndim != 1:
        raise FileFormatError(f"{path}: labels must be 1-d, got shape {arr.shape}")
    if n_expected is not None and arr.shape[0] != n_expected:
        raise ShapeMismatchError(
            f"{path}: {arr.shape[0]} labels for {n_expected} fields"
        )
    return arr


# ---------------------------------------------------------------------------
# scaler
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalerParams:
    mean: float
    std: float
    min_z: float
    max_z: float

    def to_json(self) -> str:
        import json

        return json.dumps(
            {"mean": self.mean, "std": self.std, "min_z": self.min_z,
             "max_z": self.max_z}
        )

    @classmethod
    def from_json(cls, text: str) -> "ScalerParams":
        import json

        d = json.loads(text)
        return cls(d["mean"], d["std"], d["min_z"], d["max_z"])


def fit_scaler(train_values: np.ndarray) -> ScalerParams:
    x = np.asarray(train_values, dtype=np.float64)
    mean = float(x.mean())
    std = float(x.std())
    if std == 0.0:
        raise InvalidRangeError("zero-variance input: cannot fit scaler")
    z = (x - mean) / std
    min_z, max_z = float(z.min()), float(z.max())
    if min_z >= max_z:
        raise InvalidRangeError("degenerate standardized range")
    return ScalerParams(mean=mean, std=std, min_z=min_z, max_z=max_z)


def transform(values: np.ndarray, scaler: ScalerParams) -> np.ndarray:
    z = (np.asarray(values, dtype=np.float64) - scaler.mean) / scaler.std
    y = 2.0 * (z - scaler.min_z) / (scaler.max_z - scaler.min_z) - 1.0
    return np.clip(y, -1.0, 1.0).astype(np.float32)


def inverse_transform(values: np.ndarray, scaler: ScalerParams) -> np.ndarray:
    y = np.asarray(values, dtype=np.float64)
    z = (y + 1.0) * 0.5 * (scaler.max_z - scaler.min_z) + scaler.min_z
    return z * scaler.std + scaler.mean


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    fields: np.ndarray  # (N, 1, H, W) float32 in [-1, 1]
    labels: np.ndarray  # (N,) int64
    scaler: ScalerParams | None
    provenance: str  # "file" | "synthetic"
    global_indices: np.ndarray = None  # (N,) indices into the source array

    def __post_init__(self):
        if self.fields.shape[0] != self.labels.shape[0]:
            raise ShapeMismatchError(
                f"{self.fields.shape[0]} fields vs {self.labels.shape[0]} labels"
            )
        if self.global_indices is None:
            object.__setattr__(
                self, "global_indices",
                np.arange(self.fields.shape[0], dtype=np.int64),
            )

    def __len__(self):
        return self.fields.shape[0]

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            fields=self.fields[idx],
            labels=self.labels[idx],
            global_indices=self.global_indices[idx],
        )


def fit_transform(raw: np.ndarray, labels: np.ndarray,
                  scaler: ScalerParams | None = None,
                  provenance: str = "file") -> Dataset:
    """Normalize raw fields into a Dataset.

    Pass a pre-fit scaler (from the training portion) to transform without
    refitting; otherwise the scaler is fit on all of ``raw``.
    """
    if scaler is None:
        scaler = fit_scaler(raw)
    fields = transform(raw, scaler).reshape(raw.shape[0], 1, 16, 16)
    return Dataset(
        fields=fields,
        labels=np.asarray(labels, dtype=np.int64),
        scaler=scaler,
        provenance=provenance,
    )


def split_indices(n: int, train_frac: float, seed: int):
    """Seeded permutation split; returns (train_idx, val_idx)."""
    if n < 10:
        raise InvalidRangeError(f"dataset too small to split: {n} < 10")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 13])))
    perm = rng.permutation(n)
    n_train = int(round(n * train_frac))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split(dataset: Dataset, train_frac: float = 0.9, seed: int = 0):
    """Disjoint, exhaustive train/val split with global indices preserved."""
    tr, va = split_indices(len(dataset), train_frac, seed)
    return dataset.subset(tr), dataset.subset(va)


@dataclass
class LabelStats:
    counts: np.ndarray  # per-class sample counts
    imbalance_ratio: float  # max count / min nonzero count

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def label_histogram(labels_or_dataset, n_classes: int | None = None) -> LabelStats:
    labels = (
        labels_or_dataset.labels
        if isinstance(labels_or_dataset, Dataset)
        else np.asarray(labels_or_dataset, dtype=np.int64)
    )
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 0
    counts = np.bincount(labels, minlength=n_classes)
    nonzero = counts[counts > 0]
    ratio = float(nonzero.max() / nonzero.min()) if nonzero.size else float("nan")
    return LabelStats(counts=counts, imbalance_ratio=ratio)


# ---------------------------------------------------------------------------
# synthetic vortex dataset
# ---------------------------------------------------------------------------


def default_class_peaks(k: int) -> np.ndarray:
    """Tangential-speed peaks, strictly increasing with class index."""
    if k == 1:
        return np.array([0.6])
    return np.linspace(0.3, 0.9, k)


def synth_vortex_dataset(
    n_per_class,
    grid: int = 16,
    seed: int = 0,
    peaks=None,
) -> Dataset:
    """Rankine-style vortices with class-dependent peak speed.

    Each sample is the tangential-speed magnitude v(r) = Vc * r / R inside
    the core radius R and Vc * R / r outside, on a ``grid x grid`` pixel
    lattice.  Center jitters uniformly within +/- 3 px of the grid middle
    and the field carries +/- 10% per-pixel multiplicative noise.  The core
    radius stays within [2, 5] px but is drawn from U(3, 4): the field mean
    grows nearly linearly with R, and the tighter draw keeps per-class mean
    intensities separable (nearest-centroid accuracy > 90%), which the
    conditional-fidelity evaluation relies on.  Values stay within [0, 1),
    so the returned Dataset is valid without renormalization (scaler None,
    provenance "synthetic").
    """
    n_per_class = np.asarray(n_per_class, dtype=np.int64)
    k = n_per_class.shape[0]
    peaks = default_class_peaks(k) if peaks is None else np.asarray(peaks, float)
    if peaks.shape[0] != k:
        raise ShapeMismatchError(f"{peaks.shape[0]} peaks for {k} classes")
    if np.any(np.diff(peaks) <= 0):
        raise InvalidRangeError("class peaks must increase strictly")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 17])))
    yy, xx = np.mgrid[0:grid, 0:grid].astype(np.float64)
    mid = (grid - 1) / 2.0
    fields = []
    labels = []
    for cls in range(k):
        vc = peaks[cls]
        for _ in range(int(n_per_class[cls])):
            cy = mid + rng.uniform(-3.0, 3.0)
            cx = mid + rng.uniform(-3.0, 3.0)
            r = np.hypot(yy - cy, xx - cx)
            core = rng.uniform(3.0, 4.0)
            v = np.where(r <= core, vc * r / core,
                         vc * core / np.maximum(r, 1e-12))
            v = v * (1.0 + rng.uniform(-0.1, 0.1, size=v.shape))
            fields.append(v.astype(np.float32))
            labels.append(cls)
    fields = np.stack(fields).reshape(-1, 1, grid, grid)
    return Dataset(
        fields=fields,
        labels=np.asarray(labels, dtype=np.int64),
        scaler=None,
        provenance="synthetic",
    )
