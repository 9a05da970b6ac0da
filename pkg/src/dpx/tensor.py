"""Dense row-major tensor substrate with strict shapes and seeded RNG.

Design rules, applied uniformly:

* No broadcasting. Every binary op requires exactly matching shapes
  (except ``concat`` along its axis); a mismatch raises DimensionError
  naming both shapes. This trades convenience for the guarantee that a
  silent shape bug cannot survive the attention bookkeeping downstream.
* Tensors are immutable after construction (the backing numpy buffer is
  frozen), so values are safe to share across threads and every op is a
  pure function.
* Two float precisions: "single" (float32, default forward mode) and
  "double" (float64, used by gradient checks and oracles). Binary ops
  never mix precisions silently.
* Determinism: seeded streams use the Philox counter-based generator,
  which is reproducible bit-for-bit across platforms.

Binary tensor format ("DPTF"):

    magic   4 bytes  b"DPTF"
    version 1 byte   0x01
    payload 1 byte   0 = float32, 1 = float64, 2 = int32 (label maps)
    rank    1 byte
    extents rank * uint64, little endian
    data    row-major payload, little-endian IEEE-754 / two's complement

FLOP metering: every arithmetic op reports its scalar-operation counts
to the active ``FlopMeter`` (if any). The documented convention, used
identically by the analytic cost model:

* matmul (m,k)x(k,n): m*k*n multiplies and m*k*n adds (one fused
  multiply-add per scalar product term, accumulator initialised to 0);
* elementwise add/sub: one add per element; elementwise/scalar mul: one
  multiply per element;
* softmax over rows of extent L: L exps, L-1 adds, L divides per row
  (the max-shift applied for stability is not counted);
* masked softmax: identical, restricted to unmasked entries.

Composite layers (layer norm, GELU, bilinear resize) report their own
documented counts where they use fused numpy code; see their docstrings.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, PrecisionError

SINGLE = "single"
DOUBLE = "double"
INT32 = "int32"

_DTYPES = {SINGLE: np.dtype("<f4"), DOUBLE: np.dtype("<f8"), INT32: np.dtype("<i4")}
_PAYLOAD_CODES = {SINGLE: 0, DOUBLE: 1, INT32: 2}
_CODE_TO_PRECISION = {v: k for k, v in _PAYLOAD_CODES.items()}

_MAGIC = b"DPTF"
_VERSION = 1


# ---------------------------------------------------------------------------
# FLOP meter
# ---------------------------------------------------------------------------


@dataclass
class FlopMeter:
    """Tally of scalar arithmetic operations, by kind."""

    muls: int = 0
    adds: int = 0
    exps: int = 0
    divs: int = 0
    sqrts: int = 0
    tanhs: int = 0

    @property
    def flops(self) -> int:
        return self.muls + self.adds + self.exps + self.divs + self.sqrts + self.tanhs

    def add(self, *, muls=0, adds=0, exps=0, divs=0, sqrts=0, tanhs=0) -> None:
        self.muls += muls
        self.adds += adds
        self.exps += exps
        self.divs += divs
        self.sqrts += sqrts
        self.tanhs += tanhs


_ACTIVE_METER: FlopMeter | None = None


class use_meter:
    """Context manager activating a FlopMeter for all ops inside it."""

    def __init__(self, meter: FlopMeter):
        self.meter = meter
        self._prev: FlopMeter | None = None

    def __enter__(self) -> FlopMeter:
        global _ACTIVE_METER
        self._prev = _ACTIVE_METER
        _ACTIVE_METER = self.meter
        return self.meter

    def __exit__(self, *exc) -> None:
        global _ACTIVE_METER
        _ACTIVE_METER = self._prev


def meter_report(**counts) -> None:
    """Report scalar-op counts to the active meter, if one is installed."""
    if _ACTIVE_METER is not None:
        _ACTIVE_METER.add(**counts)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """Immutable dense array with explicit shape and precision.

    ``data`` is a frozen numpy array; ``shape`` is a tuple of positive
    extents and always equals ``data.shape``.
    """

    __slots__ = ("data", "precision")

    def __init__(self, data, precision: str = SINGLE):
        if precision not in _DTYPES:
            raise PrecisionError(f"unknown precision {precision!r}")
        arr = np.asarray(data, dtype=_DTYPES[precision])
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "precision", precision)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def tolist(self):
        return self.data.tolist()

    def item(self) -> float:
        return self.data.item()

    def astype(self, precision: str) -> "Tensor":
        return Tensor(self.data, precision)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, precision={self.precision})"

    # operator sugar; all strict-shape
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, precision: str = SINGLE) -> Tensor:
    return Tensor(data, precision)


def from_array(arr: np.ndarray, precision: str | None = None) -> Tensor:
    """Wrap a numpy array, inferring precision from its dtype when not given."""
    if precision is None:
        if arr.dtype == np.float64:
            precision = DOUBLE
        elif arr.dtype == np.float32:
            precision = SINGLE
        elif arr.dtype.kind == "i":
            precision = INT32
        else:
            raise PrecisionError(f"unsupported dtype {arr.dtype}")
    return Tensor(arr, precision)


def zeros(shape: Sequence[int], precision: str = SINGLE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPES[precision]), precision)


def ones(shape: Sequence[int], precision: str = SINGLE) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DTYPES[precision]), precision)


def full(shape: Sequence[int], value: float, precision: str = SINGLE) -> Tensor:
    return Tensor(np.full(shape, value, dtype=_DTYPES[precision]), precision)


def eye(n: int, precision: str = SINGLE) -> Tensor:
    return Tensor(np.eye(n, dtype=_DTYPES[precision]), precision)


def _check_same_precision(a: Tensor, b: Tensor, op: str) -> None:
    if a.precision != b.precision:
        raise PrecisionError(
            f"{op}: precision mismatch {a.precision} vs {b.precision}"
        )


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Arithmetic ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors; inner extents must agree."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents disagree, {a.shape} x {b.shape}")
    _check_same_precision(a, b, "matmul")
    m, k = a.shape
    n = b.shape[1]
    meter_report(muls=m * k * n, adds=m * k * n)
    return Tensor(a.data @ b.data, a.precision)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matmul over the last two axes with identical leading (batch) axes."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise DimensionError(f"batched_matmul: incompatible ranks {a.shape} vs {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"batched_matmul: shape mismatch {a.shape} x {b.shape}")
    _check_same_precision(a, b, "batched_matmul")
    batch = int(np.prod(a.shape[:-2], dtype=np.int64)) if a.ndim > 2 else 1
    m, k = a.shape[-2:]
    n = b.shape[-1]
    meter_report(muls=batch * m * k * n, adds=batch * m * k * n)
    return Tensor(np.matmul(a.data, b.data), a.precision)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    _check_same_precision(a, b, "add")
    meter_report(adds=a.size)
    return Tensor(a.data + b.data, a.precision)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    _check_same_precision(a, b, "sub")
    meter_report(adds=a.size)
    return Tensor(a.data - b.data, a.precision)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    _check_same_precision(a, b, "mul")
    meter_report(muls=a.size)
    return Tensor(a.data * b.data, a.precision)


def scale(a: Tensor, s: float) -> Tensor:
    meter_report(muls=a.size)
    return Tensor(a.data * np.asarray(s, dtype=a.data.dtype), a.precision)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along ``axis``.

    Finite inputs only; any +-Inf (or NaN) raises DomainError. The
    max-shift keeps exp in range, and outputs along the axis sum to 1.
    """
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise DomainError("softmax: input contains non-finite values")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    ext = x.shape[axis]
    rows = x.size // ext
    meter_report(exps=rows * ext, adds=rows * (ext - 1), divs=rows * ext)
    return Tensor(out, x.precision)


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` restricted to ``mask`` (boolean, same shape).

    Masked positions get weight exactly 0.0; a fully masked row yields an
    all-zero row rather than NaN. Exact zeros are what make delta
    perturbations outside a receptive field bitwise invisible downstream.
    """
    if mask.shape != x.shape:
        raise DimensionError(f"masked_softmax: mask shape {mask.shape} != {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise DomainError("masked_softmax: input contains non-finite values")
    neg = np.where(mask, x.data, -np.inf)
    mx = np.max(neg, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x.data - mx, 0.0)), 0.0)
    denom = np.sum(e, axis=axis, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    n_unmasked = int(mask.sum())
    rows_nonempty = int((np.sum(mask, axis=axis) > 0).sum())
    meter_report(
        exps=n_unmasked,
        adds=max(n_unmasked - rows_nonempty, 0),
        divs=n_unmasked,
    )
    return Tensor(out.astype(x.data.dtype, copy=False), x.precision)


# ---------------------------------------------------------------------------
# Shape algebra (free: no arithmetic reported)
# ---------------------------------------------------------------------------


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return Tensor(np.transpose(x.data, axes), x.precision)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}")
    return Tensor(x.data.reshape(shape), x.precision)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise DimensionError("concat: empty tensor list")
    first = tensors[0]
    for t in tensors[1:]:
        _check_same_precision(first, t, "concat")
        if t.ndim != first.ndim:
            raise DimensionError(f"concat: rank mismatch {first.shape} vs {t.shape}")
        for ax in range(first.ndim):
            if ax != axis % first.ndim and t.shape[ax] != first.shape[ax]:
                raise DimensionError(
                    f"concat: shape mismatch off axis {axis}: {first.shape} vs {t.shape}"
                )
    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), first.precision)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous range along one axis (concat's inverse)."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"slice: axis {axis} invalid for shape {x.shape}")
    if not 0 <= start <= stop <= x.shape[axis]:
        raise DimensionError(
            f"slice: range [{start}, {stop}) invalid for extent {x.shape[axis]}"
        )
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return Tensor(x.data[tuple(idx)], x.precision)


# ---------------------------------------------------------------------------
# Seeded RNG
# ---------------------------------------------------------------------------


class RngState:
    """Seeded stream over the Philox counter-based generator.

    Identical seed + identical call sequence gives bit-identical values on
    every platform. ``spawn`` derives independent child streams
    deterministically (via the seed sequence tree), so e.g. scene
    generation and parameter init cannot perturb each other.
    """

    algorithm = "philox4x64-10"

    def __init__(self, seed: int, _ss: np.random.SeedSequence | None = None):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._ss = _ss if _ss is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.Philox(self._ss))

    def spawn(self, n: int) -> list["RngState"]:
        return [RngState(self.seed, _ss=child) for child in self._ss.spawn(n)]

    def uniform(self, shape: Sequence[int], low=0.0, high=1.0, precision=SINGLE) -> Tensor:
        vals = self._gen.uniform(low, high, size=tuple(shape))
        return Tensor(vals, precision)

    def normal(self, shape: Sequence[int], std=1.0, precision=SINGLE) -> Tensor:
        vals = self._gen.standard_normal(size=tuple(shape)) * std
        return Tensor(vals, precision)

    def trunc_normal(self, shape: Sequence[int], std=0.02, precision=SINGLE) -> Tensor:
        """Normal(0, std) truncated to +-2 std by resampling (deterministic)."""
        vals = self._gen.standard_normal(size=tuple(shape))
        out_of_range = np.abs(vals) > 2.0
        while np.any(out_of_range):
            vals[out_of_range] = self._gen.standard_normal(size=int(out_of_range.sum()))
            out_of_range = np.abs(vals) > 2.0
        return Tensor(vals * std, precision)

    def integers(self, low: int, high: int, shape: Sequence[int] = ()) -> np.ndarray:
        return self._gen.integers(low, high, size=tuple(shape))

    def choice(self, options: Sequence):
        return options[int(self._gen.integers(0, len(options)))]


# ---------------------------------------------------------------------------
# DPTF serialization
# ---------------------------------------------------------------------------


def save_dptf(path: str | Path, t: Tensor) -> None:
    """Write a tensor in the DPTF binary layout (see module docstring)."""
    path = Path(path)
    header = _MAGIC + struct.pack(
        "<BBB", _VERSION, _PAYLOAD_CODES[t.precision], t.ndim
    )
    extents = b"".join(struct.pack("<Q", e) for e in t.shape)
    payload = np.ascontiguousarray(t.data, dtype=_DTYPES[t.precision]).tobytes()
    path.write_bytes(header + extents + payload)


def load_dptf(path: str | Path) -> Tensor:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise DomainError(f"{path}: bad magic {raw[:4]!r}")
    version, code, rank = struct.unpack("<BBB", raw[4:7])
    if version != _VERSION:
        raise DomainError(f"{path}: unsupported DPTF version {version}")
    if code not in _CODE_TO_PRECISION:
        raise DomainError(f"{path}: unknown payload code {code}")
    precision = _CODE_TO_PRECISION[code]
    off = 7
    shape = []
    for _ in range(rank):
        (extent,) = struct.unpack("<Q", raw[off : off + 8])
        shape.append(extent)
        off += 8
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    need = count * _DTYPES[precision].itemsize
    if len(raw) - off < need:
        raise DomainError(f"{path}: truncated payload ({len(raw) - off} of {need} bytes)")
    arr = np.frombuffer(raw, dtype=_DTYPES[precision], count=count, offset=off)
    return Tensor(arr.reshape(shape), precision)
