"""Low-precision storage formats used for the format comparison.

``int8_group``  32 two's-complement int8 codes sharing one scale. The scale is a
                bfloat16-style float (8-bit exponent, 7-bit mantissa) rounded up
                so the largest magnitude lands in [126, 127].
``e4m3``        OCP FP8 E4M3FN: bias 7, subnormals, max 448, no infinities.
``e5m2``        OCP FP8 E5M2: bias 15, subnormals, max 57344.
``fp16``        IEEE binary16, max 65504.
``mx8``         see :mod:`statepim.mx`.

Everything saturates at the largest finite value instead of overflowing.
Grouped formats group along ``axis`` and zero-pad the tail group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mx
from .rounding import RoundingMode, round_fixed, to_fixed


@dataclass(frozen=True)
class MiniFloat:
    name: str
    exp_bits: int
    mant_bits: int
    bias: int
    max_value: float

    @property
    def min_exp(self) -> int:
        return 1 - self.bias

    @property
    def width(self) -> int:
        return 1 + self.exp_bits + self.mant_bits


E4M3 = MiniFloat("e4m3", 4, 3, 7, 448.0)
E5M2 = MiniFloat("e5m2", 5, 2, 15, 57344.0)
FP16 = MiniFloat("fp16", 5, 10, 15, 65504.0)
MINIFLOATS = {f.name: f for f in (E4M3, E5M2, FP16)}

INT8_GROUP = 32
INT8_MAX = 127

FORMATS = ("int8_group", "e4m3", "e5m2", "fp16", "mx8")

# encoded bits per stored element, including amortised shared scales
BITS_PER_ELEMENT = {
    "int8_group": 8 + 16 / INT8_GROUP,
    "e4m3": 8.0,
    "e5m2": 8.0,
    "fp16": 16.0,
    "mx8": 8.0,
}
# bits of significand below the leading one (int8 counts 7 magnitude bits)
MANTISSA_BITS = {"e5m2": 2, "e4m3": 3, "mx8": 6, "int8_group": 7, "fp16": 10}


@dataclass
class Encoded:
    """An encoded tensor. ``codes``/``scales``/``groups`` depend on ``fmt``."""

    fmt: str
    shape: tuple
    axis: int
    codes: np.ndarray | None = None
    scales: np.ndarray | None = None
    groups: mx.MXGroup | None = None


def _check(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    return x


def _words(rm, shape):
    if rm is not None and rm.is_stochastic:
        return rm.draw(shape)
    return None


def _mode(rm):
    return rm.mode if rm is not None else "nearest_even"


def round_minifloat(x, fmt: MiniFloat, rm: RoundingMode | None = None) -> np.ndarray:
    """Round reals onto the grid of ``fmt`` (values, not codes)."""
    x = _check(x)
    words = _words(rm, x.shape)
    mag = np.abs(x)
    e = np.frexp(mag)[1].astype(np.int64) - 1
    e = np.maximum(e, fmt.min_exp)
    step = e - fmt.mant_bits
    q = round_fixed(to_fixed(np.ldexp(mag, -step)), _mode(rm), words)
    out = np.minimum(np.ldexp(q.astype(np.float64), step), fmt.max_value)
    return np.where(np.signbit(x) & (q > 0), -out, out)


def encode_minifloat(values, fmt: MiniFloat) -> np.ndarray:
    """Bit codes of values already on the grid of ``fmt``."""
    v = np.asarray(values, dtype=np.float64)
    mag = np.abs(v)
    sign = np.signbit(v) & (mag > 0)
    e = np.frexp(mag)[1].astype(np.int64) - 1
    normal = (mag > 0) & (e >= fmt.min_exp)
    efield = np.where(normal, e + fmt.bias, 0)
    lsb_exp = np.where(normal, e, fmt.min_exp) - fmt.mant_bits
    mfield = np.ldexp(mag, -lsb_exp).astype(np.int64)
    mfield = np.where(normal, mfield - (1 << fmt.mant_bits), mfield)
    code = (sign.astype(np.int64) << (fmt.width - 1)) | (efield << fmt.mant_bits) | mfield
    return code.astype(np.uint16 if fmt.width > 8 else np.uint8)


def decode_minifloat(codes, fmt: MiniFloat) -> np.ndarray:
    c = np.asarray(codes, dtype=np.int64)
    sign = (c >> (fmt.width - 1)) & 1
    efield = (c >> fmt.mant_bits) & ((1 << fmt.exp_bits) - 1)
    mfield = c & ((1 << fmt.mant_bits) - 1)
    normal = efield > 0
    sig = np.where(normal, mfield + (1 << fmt.mant_bits), mfield)
    exp = np.where(normal, efield - fmt.bias, fmt.min_exp) - fmt.mant_bits
    val = np.ldexp(sig.astype(np.float64), exp)
    return np.where(sign == 1, -val, val)


def bf16_round_up(v) -> np.ndarray:
    """Smallest bfloat16-representable value >= v (v >= 0)."""
    v = np.asarray(v, dtype=np.float64)
    frac, e = np.frexp(v)
    up = np.ldexp(np.ceil(np.ldexp(frac, 8)), e - 8)
    return np.where(v > 0, up, 0.0)


def _to_groups(x, axis, size):
    x = np.moveaxis(x, axis, -1)
    pad = (-x.shape[-1]) % size
    if pad:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (pad,))], axis=-1)
    return x.reshape(x.shape[:-1] + (-1, size))


def _from_groups(g, shape, axis):
    moved = np.moveaxis(np.empty(shape, dtype=np.int8), axis, -1).shape
    flat = g.reshape(g.shape[:-2] + (-1,))[..., : moved[-1]]
    return np.moveaxis(flat, -1, axis)


def quantize_int8_group(x, rm: RoundingMode | None = None, axis: int = -1):
    """Return (codes, scales) with codes int8 grouped by 32 along the last axis."""
    g = _to_groups(_check(x), axis, INT8_GROUP)
    words = _words(rm, g.shape)
    amax = np.abs(g).max(axis=-1)
    scale = bf16_round_up(amax / INT8_MAX)
    safe = np.where(scale > 0, scale, 1.0)
    r = np.abs(g) / safe[..., None]
    q = np.minimum(round_fixed(to_fixed(r), _mode(rm), words), INT8_MAX)
    codes = np.where(np.signbit(g), -q, q).astype(np.int8)
    return codes, scale


def quantize_format(x, fmt: str, rm: RoundingMode | None = None, axis: int = -1) -> Encoded:
    """Encode ``x`` in one of :data:`FORMATS`."""
    x = _check(x)
    axis = axis % max(x.ndim, 1)
    if fmt == "int8_group":
        codes, scales = quantize_int8_group(x, rm, axis)
        return Encoded(fmt, x.shape, axis, codes=codes, scales=scales)
    if fmt == "mx8":
        groups = mx.quantize_mx(_to_groups(x, axis, mx.GROUP), rm)
        return Encoded(fmt, x.shape, axis, groups=groups)
    if fmt in MINIFLOATS:
        f = MINIFLOATS[fmt]
        return Encoded(fmt, x.shape, axis, codes=encode_minifloat(round_minifloat(x, f, rm), f))
    raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def dequantize_format(enc: Encoded) -> np.ndarray:
    if enc.fmt == "int8_group":
        g = enc.codes.astype(np.float64) * enc.scales[..., None]
        return _from_groups(g, enc.shape, enc.axis)
    if enc.fmt == "mx8":
        return _from_groups(mx.dequantize_mx(enc.groups), enc.shape, enc.axis)
    return decode_minifloat(enc.codes, MINIFLOATS[enc.fmt])


def fake_quantize(x, fmt: str, rm: RoundingMode | None = None, axis: int = -1) -> np.ndarray:
    """Round-trip ``x`` through ``fmt``; the common case for simulation."""
    if fmt in MINIFLOATS:
        return round_minifloat(x, MINIFLOATS[fmt], rm)
    return dequantize_format(quantize_format(x, fmt, rm, axis))
