"""Bit-exact floating-point substrate.

Every arithmetic helper here rounds its result into the lattice of a
:class:`PrecisionMode`.  BF16 is emulated on top of float32 storage: the
operation is carried out in float32 and the result is rounded to the nearest
BF16 value.  Because float32 carries 24 significand bits and BF16 only 8,
that double rounding is innocuous for ``+ - * / sqrt`` (24 >= 2*8 + 2), so
the emulated result equals a correctly rounded BF16 operation.
"""

from __future__ import annotations

import enum
import functools
import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PrecisionMode",
    "ReductionOrder",
    "LatticeOverflowWarning",
    "round_to_bf16",
    "nextafter",
    "ulp_spacing",
    "reduce",
    "reduce_axis",
    "dot",
    "contract",
    "contract_last",
]

_BF16_MASK = np.uint32(0xFFFF0000)
_QUIET_BIT = np.uint32(0x00400000)


class LatticeOverflowWarning(RuntimeWarning):
    """Stepping past the largest finite value of a lattice produced infinity."""


class PrecisionMode(enum.Enum):
    BF16 = "bf16"
    FP32 = "fp32"
    FP64 = "fp64"

    @classmethod
    def parse(cls, name: str | PrecisionMode) -> PrecisionMode:
        if isinstance(name, PrecisionMode):
            return name
        key = str(name).strip().lower().replace("float", "fp").replace("bfloat16", "bf16")
        aliases = {"bf16": cls.BF16, "bf16emulated": cls.BF16, "fp32": cls.FP32, "fp64": cls.FP64}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown precision {name!r}; expected one of bf16, fp32, fp64") from None

    @property
    def dtype(self) -> type[np.floating]:
        return np.float64 if self is PrecisionMode.FP64 else np.float32

    @property
    def mantissa_bits(self) -> int:
        """Explicit fraction bits of the lattice."""
        return {PrecisionMode.BF16: 7, PrecisionMode.FP32: 23, PrecisionMode.FP64: 52}[self]

    def round(self, x):
        """Round ``x`` (any float array or scalar) into this lattice."""
        if self is PrecisionMode.FP64:
            return np.asarray(x, dtype=np.float64)
        a = np.asarray(x, dtype=np.float32)
        if self is PrecisionMode.BF16:
            return round_to_bf16(a)
        return a

    def cast(self, x):
        return self.round(x)

    # Elementwise ops.  Inputs are assumed to already live in the lattice.

    def add(self, a, b):
        return self._fix(np.add(a, b, dtype=self.dtype))

    def sub(self, a, b):
        return self._fix(np.subtract(a, b, dtype=self.dtype))

    def mul(self, a, b):
        return self._fix(np.multiply(a, b, dtype=self.dtype))

    def div(self, a, b):
        return self._fix(np.divide(a, b, dtype=self.dtype))

    def sqrt(self, a):
        return self._fix(np.sqrt(np.asarray(a, dtype=self.dtype)))

    def exp(self, a):
        # Extended-precision libm path: numpy's SIMD float32/float64 exp can
        # differ by an ulp from its scalar fallback, which would make results
        # depend on array layout.
        wide = np.exp(np.asarray(a, dtype=np.longdouble))
        return self.round(wide.astype(np.float64))

    def _fix(self, r):
        if self is PrecisionMode.BF16:
            return round_to_bf16(r)
        return r

    def scalar(self, value: float):
        """A python constant as a lattice scalar."""
        return self.round(np.asarray(value, dtype=np.float64))[()]


@dataclass(frozen=True)
class ReductionOrder:
    """Order in which a sum's terms are accumulated.

    ``kind`` is one of ``"sequential"``, ``"pairwise"`` or ``"permuted"``;
    ``seed`` only matters for the permuted kind.
    """

    kind: str = "sequential"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sequential", "pairwise", "permuted"):
            raise ValueError(f"unknown reduction order {self.kind!r}")

    @classmethod
    def sequential(cls) -> ReductionOrder:
        return cls("sequential")

    @classmethod
    def pairwise(cls) -> ReductionOrder:
        return cls("pairwise")

    @classmethod
    def permuted(cls, seed: int) -> ReductionOrder:
        return cls("permuted", int(seed))

    @classmethod
    def parse(cls, text: str | ReductionOrder) -> ReductionOrder:
        if isinstance(text, ReductionOrder):
            return text
        text = str(text).strip().lower()
        if text.startswith("permuted"):
            _, _, seed = text.partition(":")
            if not seed:
                raise ValueError("permuted order needs a seed, e.g. 'permuted:7'")
            return cls.permuted(int(seed))
        return cls(text)

    def __str__(self) -> str:
        return f"permuted:{self.seed}" if self.kind == "permuted" else self.kind

    def indices(self, n: int) -> np.ndarray:
        if self.kind == "permuted":
            return _permutation(self.seed, n)
        return _identity(n)


@functools.lru_cache(maxsize=256)
def _permutation(seed: int, n: int) -> np.ndarray:
    # Generator.permutation is a Fisher-Yates shuffle; mixing n in keeps
    # reductions of different lengths from sharing a prefix pattern.
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, n])
    perm = rng.permutation(n)
    perm.flags.writeable = False
    return perm


@functools.lru_cache(maxsize=64)
def _identity(n: int) -> np.ndarray:
    idx = np.arange(n)
    idx.flags.writeable = False
    return idx


def round_to_bf16(x):
    """Round float32 values to the nearest BF16 value, ties to even.

    The result is returned as float32 with the low 16 bits cleared.  NaN maps
    to a quiet NaN of the same sign, infinities pass through and finite
    values beyond the BF16 range round to infinity.
    """
    a = np.asarray(x, dtype=np.float32)
    scalar = a.ndim == 0
    bits = np.ascontiguousarray(a).view(np.uint32)
    lsb = (bits >> np.uint32(16)) & np.uint32(1)
    with np.errstate(over="ignore"):
        rounded = (bits + np.uint32(0x7FFF) + lsb) & _BF16_MASK
    nan = np.isnan(a)
    if nan.any():
        rounded = np.where(nan, (bits | _QUIET_BIT) & _BF16_MASK, rounded)
    out = rounded.astype(np.uint32).view(np.float32).reshape(a.shape)
    return out[()] if scalar else out


def _step_bf16(x: np.ndarray, up: bool) -> np.ndarray:
    bits = (np.ascontiguousarray(round_to_bf16(x)).view(np.uint32) >> np.uint32(16)).astype(np.int64)
    neg = (bits & 0x8000) != 0
    mag = bits & 0x7FFF
    # signed ordinal: ..., -1 (=-tiny), 0 (=+-0), 1 (=+tiny), ...
    ordinal = np.where(neg, -mag, mag)
    ordinal = ordinal + (1 if up else -1)
    new = np.where(ordinal < 0, 0x8000 | (-ordinal), ordinal).astype(np.uint32) << np.uint32(16)
    return new.view(np.float32)


def nextafter(x, direction: str | float = "up", mode: PrecisionMode = PrecisionMode.FP32):
    """Adjacent lattice value of ``x`` in ``direction`` (``"up"``/``"down"``).

    Subnormals are part of every lattice.  Stepping up from the largest finite
    value returns infinity and emits :class:`LatticeOverflowWarning`.
    """
    mode = PrecisionMode.parse(mode)
    if isinstance(direction, str):
        up = direction.lower() in ("up", "+", "pos", "towardposinf")
        if not up and direction.lower() not in ("down", "-", "neg", "towardneginf"):
            raise ValueError(f"unknown direction {direction!r}")
    else:
        up = direction > 0
    a = mode.round(x)
    if not np.all(np.isfinite(a)):
        raise ValueError("nextafter requires finite input")
    if mode is PrecisionMode.BF16:
        out = _step_bf16(np.atleast_1d(a), up).reshape(np.shape(a))
    else:
        target = np.asarray(np.inf if up else -np.inf, dtype=mode.dtype)
        with np.errstate(over="ignore"):
            out = np.nextafter(a, target)
    if np.any(np.isinf(out)):
        warnings.warn(f"nextafter stepped past the largest finite {mode.value} value",
                      LatticeOverflowWarning, stacklevel=2)
    return out[()] if np.ndim(out) == 0 else out


def ulp_spacing(x, mode: PrecisionMode = PrecisionMode.FP32):
    """Distance from ``|x|`` (rounded into ``mode``) to the next lattice value above it."""
    mode = PrecisionMode.parse(mode)
    a = np.abs(mode.round(x))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LatticeOverflowWarning)
        nxt = nextafter(a, "up", mode)
    # difference of adjacent lattice points is exact in float64
    return np.asarray(nxt, dtype=np.float64) - np.asarray(a, dtype=np.float64)


def reduce_axis(values, order: ReductionOrder, mode: PrecisionMode, axis: int = -1):
    """Sum ``values`` along ``axis`` with explicit ordering and per-step rounding."""
    mode = PrecisionMode.parse(mode)
    arr = np.moveaxis(mode.round(values), axis, 0)
    n = arr.shape[0]
    if n == 0:
        raise ValueError("cannot reduce an empty sequence")
    if order.kind == "pairwise":
        while arr.shape[0] > 1:
            half = arr.shape[0] // 2
            summed = mode.add(arr[0:2 * half:2], arr[1:2 * half:2])
            arr = np.concatenate([summed, arr[2 * half:]]) if arr.shape[0] % 2 else summed
        return arr[0]
    idx = order.indices(n)
    if mode is not PrecisionMode.BF16 and arr.ndim == 1:
        # add.accumulate is strictly left-to-right in the array dtype
        return np.add.accumulate(arr[idx], dtype=mode.dtype)[-1]
    acc = arr[idx[0]]
    for j in idx[1:]:
        acc = mode.add(acc, arr[j])
    return acc


def reduce(values, order: ReductionOrder | None = None, mode: PrecisionMode = PrecisionMode.FP32):
    """Sum a vector in the given order, rounding every partial sum into ``mode``.

    >>> float(reduce([1e8, 1.0, -1e8], ReductionOrder.sequential(), PrecisionMode.FP32))
    0.0
    """
    order = order or ReductionOrder.sequential()
    values = np.asarray(values)
    if values.ndim != 1:
        raise ValueError("reduce expects a one-dimensional vector")
    return reduce_axis(values, order, mode, axis=0)[()]


def dot(a, b, order: ReductionOrder | None = None, mode: PrecisionMode = PrecisionMode.FP32):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")
    mode = PrecisionMode.parse(mode)
    prods = mode.mul(mode.round(a), mode.round(b))
    return reduce(prods, order, mode)


def contract_last(a, b, order: ReductionOrder, mode: PrecisionMode):
    """Sum of ``a * b`` over the last axis, products and partial sums rounded.

    ``a`` and ``b`` broadcast against each other.  Sequential and permuted
    orders stream over the summed axis so the full product array is never
    materialised.
    """
    a = mode.round(a)
    b = mode.round(b)
    k = a.shape[-1]
    if b.shape[-1] != k:
        raise ValueError(f"contraction length mismatch: {a.shape} vs {b.shape}")
    if order.kind == "pairwise":
        return reduce_axis(mode.mul(a, b), order, mode, axis=-1)
    idx = order.indices(k)
    acc = mode.mul(a[..., idx[0]], b[..., idx[0]])
    for j in idx[1:]:
        acc = mode.add(acc, mode.mul(a[..., j], b[..., j]))
    return acc


def contract(x, w, order: ReductionOrder, mode: PrecisionMode):
    """``x @ w.T`` under ``mode``: ``x`` is ``(..., k)``, ``w`` is ``(m, k)``."""
    x = np.asarray(x)
    return contract_last(x[..., None, :], w, order, mode)
