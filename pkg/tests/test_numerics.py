import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chaoscope.numerics import (
    LatticeOverflowWarning,
    PrecisionMode,
    ReductionOrder,
    dot,
    nextafter,
    reduce,
    round_to_bf16,
    ulp_spacing,
)

FP32, FP64, BF16 = PrecisionMode.FP32, PrecisionMode.FP64, PrecisionMode.BF16


def f32(bits: int) -> np.float32:
    return np.array([bits], dtype=np.uint32).view(np.float32)[0]


def bits_of(x) -> int:
    return int(np.asarray(x, dtype=np.float32).reshape(1).view(np.uint32)[0])


finite_f32 = st.floats(width=32, allow_nan=False, allow_infinity=False)


# -- round_to_bf16 ---------------------------------------------------------------


def test_bf16_examples():
    assert round_to_bf16(np.float32(1.0)) == np.float32(1.0)
    assert round_to_bf16(f32(0x3F800001)) == np.float32(1.0)
    assert round_to_bf16(f32(0x3F808000)) == np.float32(1.0)          # tie, even stays
    assert bits_of(round_to_bf16(f32(0x3F818000))) == 0x3F820000      # tie, odd rounds up


def test_bf16_specials():
    assert np.isposinf(round_to_bf16(np.float32(np.inf)))
    assert np.isneginf(round_to_bf16(np.float32(-np.inf)))
    assert bits_of(round_to_bf16(np.float32(-0.0))) == 0x80000000
    nan = round_to_bf16(f32(0x7F800001))                             # signalling NaN payload
    assert np.isnan(nan) and bits_of(nan) & 0x00400000
    assert np.isposinf(round_to_bf16(np.finfo(np.float32).max))      # beyond the bf16 range


def bf16_oracle(value: Fraction) -> Fraction:
    """Nearest BF16 value to an exact rational, ties to even (Python's round)."""
    if value == 0:
        return Fraction(0)
    mag = abs(value)
    e = mag.numerator.bit_length() - mag.denominator.bit_length()
    if Fraction(2) ** e > mag:
        e -= 1
    spacing = Fraction(2) ** (max(e, -126) - 7)
    return round(value / spacing) * spacing


def test_bf16_matches_fraction_oracle_on_samples(rng):
    raw = rng.integers(0, 2**32, size=4000, dtype=np.uint64).astype(np.uint32)
    xs = raw.view(np.float32)
    xs = xs[np.isfinite(xs) & (np.abs(xs) < 3e38)]
    for x, g in zip(xs, round_to_bf16(xs)):
        assert Fraction(float(g)) == bf16_oracle(Fraction(float(x))), hex(bits_of(x))


@given(finite_f32)
def test_bf16_idempotent_and_low_bits_clear(x):
    r = round_to_bf16(np.float32(x))
    assert bits_of(r) & 0xFFFF == 0 or np.isinf(r)
    assert bits_of(round_to_bf16(r)) == bits_of(r)


@given(finite_f32, finite_f32)
def test_bf16_monotone(a, b):
    lo, hi = sorted((a, b))
    assert round_to_bf16(np.float32(lo)) <= round_to_bf16(np.float32(hi))


def test_bf16_roundtrip_all_patterns():
    hi = np.arange(2**16, dtype=np.uint32) << np.uint32(16)
    xs = hi.view(np.float32)
    out = round_to_bf16(xs)
    finite = ~np.isnan(xs)
    assert np.array_equal(out[finite].view(np.uint32), hi[finite])


# -- nextafter / ulp -------------------------------------------------------------


def test_nextafter_examples():
    assert nextafter(1.0, "up", FP32) == np.float32(1 + 2**-23)
    assert nextafter(0.0, "up", FP32) == np.float32(2**-149)
    assert nextafter(-1.0, "up", FP32) == np.float32(-(1 - 2**-24))
    assert nextafter(1.0, "up", BF16) == np.float32(1 + 2**-7)
    assert nextafter(1.0, "down", BF16) == np.float32(1 - 2**-8)
    assert nextafter(0.0, "down", BF16) == -f32(0x00010000)
    assert nextafter(1.0, "up", FP64) == 1 + 2**-52


def test_nextafter_overflow_is_flagged():
    with pytest.warns(LatticeOverflowWarning):
        assert np.isposinf(nextafter(np.finfo(np.float32).max, "up", FP32))
    with pytest.warns(LatticeOverflowWarning):
        assert np.isposinf(nextafter(f32(0x7F7F0000), "up", BF16))


def test_nextafter_rejects_non_finite():
    with pytest.raises(ValueError):
        nextafter(np.nan, "up", FP32)
    with pytest.raises(ValueError):
        nextafter(1.0, "sideways", FP32)


@given(finite_f32, st.sampled_from([FP32, BF16, FP64]))
def test_nextafter_up_down_identity(x, mode):
    a = mode.round(x)
    with warnings.catch_warnings():
        warnings.simplefilter("error", LatticeOverflowWarning)
        try:
            up = nextafter(a, "up", mode)
        except LatticeOverflowWarning:
            return
    back = nextafter(up, "down", mode)
    assert back == a or (back == 0 and a == 0)


def test_bf16_step_has_no_lattice_point_between():
    x = f32(0x3F850000)
    up = nextafter(x, "up", BF16)
    between = np.arange(bits_of(x) + 1, bits_of(up), dtype=np.uint32).view(np.float32)
    assert not np.any(round_to_bf16(between) == between)


def test_ulp_spacing_examples():
    assert ulp_spacing(1.0, FP32) == 2**-23
    assert ulp_spacing(2.0, FP32) == 2**-22
    assert ulp_spacing(1.0, BF16) == 2**-7
    assert ulp_spacing(-1.0, FP64) == 2**-52
    assert ulp_spacing(0.0, FP32) == 2**-149


# -- reductions --------------------------------------------------------------------


def test_reduce_examples():
    seq = ReductionOrder.sequential()
    assert reduce([1e8, 1.0, -1e8], seq, FP32) == 0.0
    assert reduce([1e8, -1e8, 1.0], seq, FP32) == 1.0
    for order in (seq, ReductionOrder.pairwise(), ReductionOrder.permuted(4)):
        assert reduce([2.5], order, FP32) == np.float32(2.5)


def _fraction_fold(values, mode):
    acc = None
    for v in values:
        acc = v if acc is None else float(mode.round(float(Fraction(float(acc)) + Fraction(float(v)))))
    return acc


@given(st.lists(st.floats(-1e6, 1e6, width=32), min_size=1, max_size=40))
def test_sequential_matches_rational_fold(values):
    # per-step exact sum then one rounding == one correctly rounded add
    got = reduce(values, ReductionOrder.sequential(), FP32)
    assert float(got) == _fraction_fold(values, FP32)


def test_reduce_bf16_rounds_every_partial_sum():
    values = [1.0, 2**-9, 2**-9, 2**-9, 2**-9]
    assert reduce(values, ReductionOrder.sequential(), BF16) == 1.0
    assert reduce(values[::-1], ReductionOrder.sequential(), BF16) == np.float32(1 + 2**-7)


def test_pairwise_order():
    # ((a+b)+(c+d))+e
    values = [1e8, 1.0, -1e8, 1.0, 3.0]
    assert reduce(values, ReductionOrder.pairwise(), FP32) == np.float32(3.0)


@given(st.lists(st.floats(-1e3, 1e3, width=32), min_size=1, max_size=60), st.integers(0, 2**63))
def test_permuted_is_deterministic(values, seed):
    order = ReductionOrder.permuted(seed)
    a = reduce(values, order, FP32)
    b = reduce(list(values), ReductionOrder.permuted(seed), FP32)
    assert bits_of(a) == bits_of(b)


def test_permuted_orders_can_differ(rng):
    values = rng.uniform(-1, 1, 1000).astype(np.float32)
    sums = {bits_of(reduce(values, ReductionOrder.permuted(s), FP32)) for s in range(20)}
    assert len(sums) > 1


def test_reduce_errors():
    with pytest.raises(ValueError):
        reduce([], ReductionOrder.sequential(), FP32)
    with pytest.raises(ValueError):
        ReductionOrder.parse("random")
    with pytest.raises(ValueError):
        ReductionOrder.parse("permuted")


def test_reduction_order_parse_roundtrip():
    for text in ("sequential", "pairwise", "permuted:17"):
        assert str(ReductionOrder.parse(text)) == text


def test_dot_examples(rng):
    b = rng.standard_normal(5).astype(np.float32)
    e1 = np.eye(5)[0]
    assert dot(e1, b) == b[0]
    assert dot([1, 1, 1], [1, 1, 1]) == 3.0
    assert dot([1.0, 1.0], [1.0, -1.0]) == 0.0
    with pytest.raises(ValueError):
        dot([1, 2], [1, 2, 3])


def test_precision_parse():
    assert PrecisionMode.parse("BF16") is BF16
    assert PrecisionMode.parse("float32") is FP32
    with pytest.raises(ValueError):
        PrecisionMode.parse("fp16")


@settings(max_examples=200)
@given(st.floats(-1e3, 1e3, width=32), st.floats(-1e3, 1e3, width=32))
def test_bf16_add_is_correctly_rounded(a, b):
    # float32 add then bf16 rounding must equal one rounding of the exact sum
    a, b = round_to_bf16(np.float32(a)), round_to_bf16(np.float32(b))
    exact = Fraction(float(a)) + Fraction(float(b))
    assert Fraction(float(BF16.add(a, b))) == bf16_oracle(exact)
