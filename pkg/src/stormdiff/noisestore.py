"""Reproducible Gaussian noise indexed by (image index, timestep).

Training consumes one dedicated noise field per (image, timestep) pair, and
the pair must map to the same bits in every epoch and every process.  Two
modes provide that:

* ``derived`` (default): only a 46-byte header is written; fields are
  recomputed on demand from a counter-based generator keyed by
  (master_seed, image_idx, t).  No payload, no disk budget concerns.
* ``materialized``: the full (N, T, C, H, W) float32 tensor is written after
  the header, ordered (image, t, c, h, w) row-major.  Values are produced by
  the same generator, so the two modes are bit-identical field for field.

Generator, fixed for portability
--------------------------------
Uniform source: the splitmix64 finalizer applied to a per-field key mixed
with a draw counter.  The key is

    k = mix64(mix64(mix64(seed ^ 0x53444E4F49534531) ^ image_idx) ^ (t << 1))

and draw j of the field is ``u_j = mix64(k + j * GOLDEN)`` with
GOLDEN = 0x9E3779B97F4A7C15, where mix64 is

    z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27; z *= 0x94D049BB133111EB
    z ^= z >> 31

(all arithmetic modulo 2**64).  Normal conversion: consecutive uniform pairs
(u1 in (0,1], u2 in [0,1)) feed the Box-Muller transform,

    r = sqrt(-2 ln u1),  n_{2p} = r cos(2 pi u2),  n_{2p+1} = r sin(2 pi u2)

computed in float64 and cast to float32.  File header (little-endian):
magic "SDNOISE\\0" (8s), version u32, mode u8 (0=materialized, 1=derived),
N_images u64, T u32, C u32, H u32, W u32, dtype u8 (0=f32), master_seed u64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DiskBudgetError, FileFormatError, InvalidRangeError

MAGIC = b"SDNOISE\0"
VERSION = 1
MODE_MATERIALIZED = 0
MODE_DERIVED = 1
_MODE_NAMES = {MODE_MATERIALIZED: "materialized", MODE_DERIVED: "derived"}
_MODE_CODES = {v: k for k, v in _MODE_NAMES.items()}
DTYPE_F32 = 0

_HEADER_FMT = "<8sIBQIIIIBQ"
HEADER_SIZE = struct.calcsize(_HEADER_FMT)  # 46 bytes

DEFAULT_DISK_BUDGET = 2 << 30  # 2 GiB: the paper-scale tensor is ~72 GB

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_STORE_TAG = _U64(0x53444E4F49534531)  # "SDNOISE1"

def _mix64(z):
    """splitmix64 finalizer, vectorized over uint64 (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        z = z ^ (z >> _U64(30))
        z = z * _U64(0xBF58476D1CE4E5B9)
        z = z ^ (z >> _U64(27))
        z = z * _U64(0x94D049BB133111EB)
        return z ^ (z >> _U64(31))


def _field_key(seed: int, image_idx: int, t: int) -> np.uint64:
    with np.errstate(over="ignore"):
        k = _mix64(_U64(seed) ^ _STORE_TAG)
        k = _mix64(k ^ _U64(image_idx))
        k = _mix64(k ^ (_U64(t) << _U64(1)))
    return k


def _uniforms(key: np.uint64, count: int) -> np.ndarray:
    """count raw uint64 draws for one field key."""
    with np.errstate(over="ignore"):
        ctr = np.arange(count, dtype=np.uint64) * _GOLDEN + key
    return _mix64(ctr)


def gaussian_field(seed: int, image_idx: int, t: int, n_values: int) -> np.ndarray:
    """n_values standard-normal float32 draws for (seed, image_idx, t).

    n_values must be even (Box-Muller produces pairs).
    """
    if n_values % 2:
        raise InvalidRangeError(f"n_values must be even, got {n_values}")
    bits = _uniforms(_field_key(seed, image_idx, t), n_values)
    # 53-bit mantissa uniforms; +1 keeps u1 strictly positive for the log
    u = (bits >> _U64(11)).astype(np.float64)
    u1 = (u[0::2] + 1.0) * 2.0**-53  # (0, 1]
    u2 = u[1::2] * 2.0**-53  # [0, 1)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = (2.0 * np.pi) * u2
    out = np.empty(n_values, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out.astype(np.float32)


@dataclass(frozen=True)
class NoiseStoreHeader:
    version: int
    mode: str  # "materialized" | "derived"
    n_images: int
    T: int
    dims: tuple[int, int, int]  # (C, H, W)
    dtype: str  # "f32"
    master_seed: int

    @property
    def field_size(self) -> int:
        c, h, w = self.dims
        return c * h * w

    @property
    def payload_bytes(self) -> int:
        return self.n_images * self.T * self.field_size * 4

    def pack(self) -> bytes:
        c, h, w = self.dims
        return struct.pack(
            _HEADER_FMT,
            MAGIC,
            self.version,
            _MODE_CODES[self.mode],
            self.n_images,
            self.T,
            c,
            h,
            w,
            DTYPE_F32,
            self.master_seed,
        )


def _unpack_header(raw: bytes, path: Path) -> NoiseStoreHeader:
    if len(raw) < HEADER_SIZE:
        raise FileFormatError(
            f"{path}: truncated header, expected {HEADER_SIZE} bytes, "
            f"got {len(raw)}"
        )
    magic, version, mode, n, T, c, h, w, dtype, seed = struct.unpack(
        _HEADER_FMT, raw[:HEADER_SIZE]
    )
    if magic != MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    if mode not in _MODE_NAMES:
        raise FileFormatError(f"{path}: unknown mode code {mode}")
    if dtype != DTYPE_F32:
        raise FileFormatError(f"{path}: unknown dtype code {dtype}")
    return NoiseStoreHeader(
        version=version,
        mode=_MODE_NAMES[mode],
        n_images=n,
        T=T,
        dims=(c, h, w),
        dtype="f32",
        master_seed=seed,
    )


class NoiseStore:
    """Read-only noise source; concurrent get_noise calls need no locking."""

    def __init__(self, header: NoiseStoreHeader, path: Path | None,
                 payload: np.memmap | None):
        self.header = header
        self.path = path
        self._payload = payload

    @property
    def mode(self) -> str:
        return self.header.mode

    def get_noise(self, image_idx: int, t: int) -> np.ndarray:
        """float32 field of shape dims for (image_idx, t); bit-stable."""
        h = self.header
        if not 0 <= image_idx < h.n_images:
            raise InvalidRangeError(
                f"image index {image_idx} outside 0..{h.n_images - 1}"
            )
        if not 1 <= t <= h.T:
            raise InvalidRangeError(f"timestep {t} outside 1..{h.T}")
        if self._payload is not None:
            flat = image_idx * h.T + (t - 1)
            out = np.array(self._payload[flat], copy=True)
        else:
            out = gaussian_field(h.master_seed, image_idx, t, h.field_size)
        return out.reshape(h.dims)


def generate_store(
    path,
    n_images: int,
    T: int,
    dims: tuple[int, int, int] = (1, 16, 16),
    seed: int = 0,
    mode: str = "derived",
    disk_budget: int = DEFAULT_DISK_BUDGET,
) -> NoiseStore:
    """Create the store file at path and return an open handle."""
    if n_images < 1 or T < 1:
        raise InvalidRangeError(f"need n_images, T >= 1, got {n_images}, {T}")
    if mode not in _MODE_CODES:
        raise InvalidRangeError(f"mode must be materialized|derived, got {mode!r}")
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise InvalidRangeError(f"dims must be three positive ints, got {dims}")
    if (dims[0] * dims[1] * dims[2]) % 2:
        raise InvalidRangeError(f"field size must be even for pair draws: {dims}")

    header = NoiseStoreHeader(
        version=VERSION,
        mode=mode,
        n_images=n_images,
        T=T,
        dims=tuple(int(d) for d in dims),
        dtype="f32",
        master_seed=int(seed) & 0xFFFFFFFFFFFFFFFF,
    )
    if mode == "materialized" and header.payload_bytes > disk_budget:
        raise DiskBudgetError(
            f"materialized store needs {header.payload_bytes} bytes, over the "
            f"{disk_budget}-byte budget; use derived mode"
        )
    path = Path(path)
    with open(path, "wb") as f:
        f.write(header.pack())
        if mode == "materialized":
            fs = header.field_size
            for i in range(n_images):
                for t in range(1, T + 1):
                    f.write(
                        gaussian_field(header.master_seed, i, t, fs).tobytes()
                    )
    return load_store(path)


def load_store(path) -> NoiseStore:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"noise store not found: {path}")
    with open(path, "rb") as f:
        header = _unpack_header(f.read(HEADER_SIZE), path)
    payload = None
    if header.mode == "materialized":
        expected = HEADER_SIZE + header.payload_bytes
        actual = path.stat().st_size
        if actual != expected:
            raise FileFormatError(
                f"{path}: payload size mismatch, expected {expected} bytes "
                f"total, got {actual}"
            )
        payload = np.memmap(
            path,
            dtype="<f4",
            mode="r",
            offset=HEADER_SIZE,
            shape=(header.n_images * header.T, header.field_size),
        )
    return NoiseStore(header, path, payload)


@dataclass
class PatchStat:
    image_idx: int
    t: int
    mean: float
    std: float
    flagged: bool


@dataclass
class StatsReport:
    patches: list[PatchStat]
    pooled_mean: float
    pooled_std: float
    n_flagged: int

    MEAN_FLAG = 0.25  # 4 / sqrt(256)
    STD_LO = 0.75
    STD_HI = 1.25


def verify_store_stats(store: NoiseStore, n_samples: int,
                       seed: int = 0) -> StatsReport:
    """Per-patch and pooled white-noise statistics over n_samples patches.

    Patches are drawn uniformly over (image, timestep) pairs from a seeded
    stream; a patch is flagged when |mean| > 0.25 or std falls outside
    [0.75, 1.25].
    """
    if n_samples < 8:
        raise InvalidRangeError(f"need n_samples >= 8, got {n_samples}")
    h = store.header
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7])))
    idx = rng.integers(0, h.n_images, size=n_samples)
    ts = rng.integers(1, h.T + 1, size=n_samples)
    patches = []
    total = 0.0
    total_sq = 0.0
    count = 0
    for i, t in zip(idx.tolist(), ts.tolist()):
        field = store.get_noise(i, t).astype(np.float64)
        m = float(field.mean())
        s = float(field.std())
        flagged = (
            abs(m) > StatsReport.MEAN_FLAG
            or not StatsReport.STD_LO <= s <= StatsReport.STD_HI
        )
        patches.append(PatchStat(i, t, m, s, flagged))
        total += field.sum()
        total_sq += float((field * field).sum())
        count += field.size
    pooled_mean = total / count
    pooled_std = float(np.sqrt(total_sq / count - pooled_mean**2))
    return StatsReport(
        patches=patches,
        pooled_mean=pooled_mean,
        pooled_std=pooled_std,
        n_flagged=sum(p.flagged for p in patches),
    )
