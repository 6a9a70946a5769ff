"""MX8 block floating point: encoding, the element-wise multiplier and adder,
and the group dot product.

A group holds 16 values that share one 8-bit exponent (bias 127). Each pair
of values shares a 1-bit microexponent that scales the pair down by 2**mu,
and every value is a sign bit plus a 6-bit unsigned mantissa with no implicit
leading one::

    v[i] = (-1)**s[i] * m[i] * 2**(E - 127 - mu[i // 2] - 6)

Every function here is vectorised over leading "batch" dimensions, so an
``MXGroup`` may hold a whole tensor of groups. Operations never produce
infinities or NaNs. They saturate instead and record sticky flags.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rounding import GUARD_BITS, RoundingMode, round_fixed, shr_sticky, to_fixed

GROUP = 16
PAIRS = GROUP // 2
BIAS = 127
MANT_BITS = 6
MANT_MAX = (1 << MANT_BITS) - 1
EXP_MAX = 255
# decoded exponent of mantissa LSB is E - SCALE_OFFSET - mu
SCALE_OFFSET = BIAS + MANT_BITS
GROUP_BYTES = 16

FLAG_OVERFLOW = 1
FLAG_UNDERFLOW = 2
FLAG_ACC_SATURATED = 4

_PAIR_OF = np.arange(GROUP) // 2


@dataclass(eq=False)
class MXGroup:
    """One MX8 group, or an array of them (leading batch dims).

    ``exponent`` has the batch shape; ``micro`` adds a trailing axis of 8,
    ``sign`` and ``mantissa`` a trailing axis of 16. ``flags`` is a sticky
    bitmask shared by the whole array.
    """

    exponent: np.ndarray
    micro: np.ndarray
    sign: np.ndarray
    mantissa: np.ndarray
    flags: int = 0

    def __post_init__(self):
        self.exponent = np.asarray(self.exponent, dtype=np.int64)
        self.micro = np.asarray(self.micro, dtype=np.int64)
        self.sign = np.asarray(self.sign, dtype=np.int64)
        self.mantissa = np.asarray(self.mantissa, dtype=np.int64)
        b = self.exponent.shape
        if self.micro.shape != b + (PAIRS,) or self.sign.shape != b + (GROUP,) or self.mantissa.shape != b + (GROUP,):
            raise ValueError("inconsistent MXGroup field shapes")

    @property
    def shape(self) -> tuple:
        return self.exponent.shape

    def __getitem__(self, idx) -> "MXGroup":
        if not isinstance(idx, tuple):
            idx = (idx,)
        return MXGroup(self.exponent[idx], self.micro[idx], self.sign[idx], self.mantissa[idx], self.flags)

    def equals(self, other: "MXGroup") -> bool:
        """Bit-level equality of every encoded field (flags ignored)."""
        return (
            self.shape == other.shape
            and np.array_equal(self.exponent, other.exponent)
            and np.array_equal(self.micro, other.micro)
            and np.array_equal(self.sign, other.sign)
            and np.array_equal(self.mantissa, other.mantissa)
        )

    def is_zero(self) -> np.ndarray:
        return np.all(self.mantissa == 0, axis=-1)

    def element_micro(self) -> np.ndarray:
        return self.micro[..., _PAIR_OF]

    def ulp(self) -> np.ndarray:
        """Value of one mantissa LSB for each element."""
        return np.ldexp(1.0, self.exponent[..., None] - SCALE_OFFSET - self.element_micro())

    def to_bytes(self) -> bytes:
        if self.shape != ():
            raise ValueError("to_bytes() needs a single group; use pack_groups() for arrays")
        return pack_groups(self).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "MXGroup":
        if len(data) != GROUP_BYTES:
            raise ValueError(f"an MX8 group is {GROUP_BYTES} bytes, got {len(data)}")
        return unpack_groups(np.frombuffer(data, dtype=np.uint8))


def zeros(shape=()) -> MXGroup:
    """Canonical zero group(s)."""
    shape = tuple(shape) if isinstance(shape, (tuple, list)) else (shape,)
    return MXGroup(
        np.zeros(shape, np.int64),
        np.zeros(shape + (PAIRS,), np.int64),
        np.zeros(shape + (GROUP,), np.int64),
        np.zeros(shape + (GROUP,), np.int64),
    )


def concat(groups: list[MXGroup]) -> MXGroup:
    """Concatenate group arrays along the first batch axis."""
    flags = 0
    for g in groups:
        flags |= g.flags
    return MXGroup(
        np.concatenate([g.exponent for g in groups]),
        np.concatenate([g.micro for g in groups]),
        np.concatenate([g.sign for g in groups]),
        np.concatenate([g.mantissa for g in groups]),
        flags,
    )


def stack(groups: list[MXGroup]) -> MXGroup:
    flags = 0
    for g in groups:
        flags |= g.flags
    return MXGroup(
        np.stack([g.exponent for g in groups]),
        np.stack([g.micro for g in groups]),
        np.stack([g.sign for g in groups]),
        np.stack([g.mantissa for g in groups]),
        flags,
    )


def broadcast_element(g: MXGroup, index) -> MXGroup:
    """A group whose 16 lanes all hold element ``index`` of ``g``.

    ``index`` may be an int or an integer array broadcasting against the
    batch shape. Used to feed one v element, or one attention score, to all
    lanes of the multiplier.
    """
    index = np.asarray(index, dtype=np.int64)
    shape = np.broadcast_shapes(g.shape, index.shape)
    ex = np.broadcast_to(g.exponent, shape)
    take = lambda a: np.take_along_axis(np.broadcast_to(a, shape + a.shape[-1:]), np.broadcast_to(index, shape)[..., None], -1)
    mu = take(g.micro.repeat(2, axis=-1))
    s = take(g.sign)
    m = take(g.mantissa)
    return MXGroup(
        ex.copy(),
        np.broadcast_to(mu, shape + (GROUP,))[..., ::2].copy(),
        np.broadcast_to(s, shape + (GROUP,)).copy(),
        np.broadcast_to(m, shape + (GROUP,)).copy(),
        g.flags,
    )


def _draw(rm: RoundingMode | None, shape):
    if rm is not None and rm.is_stochastic:
        return rm.draw(shape)
    return None


def _mode(rm: RoundingMode | None) -> str:
    return rm.mode if rm is not None else "nearest_even"


def _canonicalize(exponent, micro, sign, mantissa):
    zero_el = mantissa == 0
    sign = np.where(zero_el, 0, sign)
    zero_pair = zero_el.reshape(zero_el.shape[:-1] + (PAIRS, 2)).all(axis=-1)
    micro = np.where(zero_pair, 0, micro)
    exponent = np.where(np.all(zero_pair, axis=-1), 0, exponent)
    return exponent, micro, sign, mantissa


def _frexp_exp(a: np.ndarray) -> np.ndarray:
    return np.frexp(a)[1].astype(np.int64)


def quantize_mx(x, rm: RoundingMode | None = None) -> MXGroup:
    """Encode real values into MX8 groups.

    ``x`` has a trailing axis of 16. The shared exponent puts the largest
    magnitude's mantissa in [32, 64); a pair whose own maximum is at least a
    binade lower gets microexponent 1 and one extra bit of precision. When
    rounding carries a mantissa to 64 the group (or pair) is re-encoded one
    step coarser using the same LFSR words, so stochastic mode always draws
    exactly one word per element.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (GROUP,):
        raise ValueError(f"quantize_mx expects a trailing axis of {GROUP}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    mode = _mode(rm)
    words = _draw(rm, x.shape)
    mag = np.abs(x)
    sign = (np.signbit(x) & (mag > 0)).astype(np.int64)
    amax = mag.max(axis=-1)
    pmax = mag.reshape(x.shape[:-1] + (PAIRS, 2)).max(axis=-1)
    flags = 0

    exponent = BIAS + _frexp_exp(amax)
    exponent = np.where(amax > 0, exponent, 0)
    overflow = exponent > EXP_MAX
    if np.any(overflow):
        flags |= FLAG_OVERFLOW
    exponent = np.clip(exponent, 0, EXP_MAX)
    pair_exp = BIAS + _frexp_exp(pmax)

    def encode(exponent, force_coarse):
        micro = ((pmax > 0) & (exponent[..., None] - pair_exp >= 1) & ~force_coarse).astype(np.int64)
        shift = SCALE_OFFSET + micro[..., _PAIR_OF] - exponent[..., None]
        # values past the top exponent saturate below; cap them so the fixed-point cast stays in range
        fx = to_fixed(np.minimum(np.ldexp(mag, shift), 2.0 * (MANT_MAX + 1)))
        return micro, round_fixed(fx, mode, words)

    no_force = np.zeros(pmax.shape, dtype=bool)
    micro, mant = encode(exponent, no_force)
    # a mu=0 pair hitting 64 means the group exponent must grow
    coarse_hit = (mant == MANT_MAX + 1) & (micro[..., _PAIR_OF] == 0)
    bump = np.any(coarse_hit, axis=-1) & (exponent < EXP_MAX)
    if np.any(bump):
        exponent = exponent + bump
        micro, mant = encode(exponent, no_force)
    fine_hit = ((mant == MANT_MAX + 1) & (micro[..., _PAIR_OF] == 1)).reshape(pmax.shape + (2,)).any(-1)
    if np.any(fine_hit):
        micro, mant = encode(exponent, fine_hit)
    if np.any(mant > MANT_MAX):
        flags |= FLAG_OVERFLOW
        mant = np.minimum(mant, MANT_MAX)
    underflow = np.any((mant == 0) & (mag > 0))
    if underflow:
        flags |= FLAG_UNDERFLOW
    return MXGroup(*_canonicalize(exponent, micro, sign, mant), flags=flags)


def dequantize_mx(g: MXGroup) -> np.ndarray:
    """Decode MX8 group(s) to float64 values, exactly."""
    exp = g.exponent[..., None] - SCALE_OFFSET - g.element_micro()
    return np.ldexp(np.where(g.sign == 1, -1.0, 1.0) * g.mantissa, exp)


def _round_with_normalization(fx_full, base_shift, rm_mode, words, max_extra):
    """Pick the smallest extra shift in [0, max_extra] keeping mantissas <= 63.

    ``fx_full`` are exact magnitudes with GUARD_BITS fraction bits at the
    finest scale; ``base_shift`` is a per-element shift already required
    (microexponent clamping). Returns (mantissas, chosen extra shift per group).
    """
    best_m = None
    chosen = None
    for k in range(max_extra, -1, -1):
        m = round_fixed(shr_sticky(fx_full, base_shift + k), rm_mode, words)
        ok = np.all(m <= MANT_MAX, axis=-1)
        if best_m is None:
            best_m = m
            chosen = np.full(ok.shape, k, dtype=np.int64)
        else:
            best_m = np.where(ok[..., None], m, best_m)
            chosen = np.where(ok, k, chosen)
    return best_m, chosen


def mx_multiply(a: MXGroup, b: MXGroup, rm: RoundingMode | None = None) -> MXGroup:
    """Element-wise product of two MX8 groups.

    Exponents add and microexponents add per pair; a pair sum of 2 is
    clamped to 1 with that pair's products shifted right once more. The
    12-bit integer products are brought back to 6 bits with a single
    rounding, shifting only as far as the group's largest product needs,
    so multiplying by an exact power of two is lossless.
    """
    shape = np.broadcast_shapes(a.shape, b.shape)
    words = _draw(rm, shape + (GROUP,))
    prod = a.mantissa * b.mantissa
    sign = a.sign ^ b.sign
    mu_sum = a.micro + b.micro
    micro = np.minimum(mu_sum, 1)
    extra = (mu_sum - micro)[..., _PAIR_OF]
    flags = a.flags | b.flags

    fx = np.broadcast_to(prod, shape + (GROUP,)) << GUARD_BITS
    # exponent if the full 6-bit shift is taken
    exp_full = a.exponent + b.exponent - BIAS
    mant, k = _round_with_normalization(fx, extra, _mode(rm), words, MANT_BITS)
    exponent = exp_full - (MANT_BITS - k)

    over = exponent > EXP_MAX
    under = exponent < 0
    if np.any(over | under):
        # saturating exponent: shift less; underflowing exponent: shift more
        adjust = np.where(over, exponent - EXP_MAX, np.where(under, exponent, 0))
        shift = extra + k[..., None] - adjust[..., None]
        redo = round_fixed(shr_sticky(fx, shift), _mode(rm), words)
        mant = np.where((over | under)[..., None], redo, mant)
        exponent = np.clip(exponent, 0, EXP_MAX)
        if np.any(over):
            flags |= FLAG_OVERFLOW
            mant = np.minimum(mant, MANT_MAX)
        if np.any(under[..., None] & (mant == 0) & (prod != 0)):
            flags |= FLAG_UNDERFLOW
    zero_in = (a.is_zero() | b.is_zero())
    mant = np.where(zero_in[..., None], 0, mant)
    return MXGroup(*_canonicalize(exponent, micro, sign, mant), flags=flags)


def mx_add(a: MXGroup, b: MXGroup, rm: RoundingMode | None = None) -> MXGroup:
    """Element-wise sum of two MX8 groups.

    Both operands are aligned to the larger shared exponent, each mantissa
    also shifted right by its own microexponent, then added as signed
    integers. If any rounded sum needs a seventh bit, the exponent grows by
    one and all 16 sums shift right together. The result's microexponents
    are always zero.
    """
    shape = np.broadcast_shapes(a.shape, b.shape)
    words = _draw(rm, shape + (GROUP,))
    flags = a.flags | b.flags
    exponent = np.maximum(a.exponent, b.exponent)

    def aligned(g):
        shift = exponent[..., None] - g.exponent[..., None] + g.element_micro()
        v = shr_sticky(g.mantissa << GUARD_BITS, shift)
        return np.where(g.sign == 1, -v, v)

    total = aligned(a) + aligned(b)
    mag = np.abs(total)
    sign = (total < 0).astype(np.int64)
    mode = _mode(rm)
    mant = round_fixed(mag, mode, words)
    grow = np.any(mant > MANT_MAX, axis=-1)
    if np.any(grow):
        room = grow & (exponent < EXP_MAX)
        regrown = round_fixed(shr_sticky(mag, 1), mode, words)
        mant = np.where(room[..., None], regrown, mant)
        exponent = exponent + room
        if np.any(grow & ~room):
            flags |= FLAG_OVERFLOW
            mant = np.minimum(mant, MANT_MAX)
    micro = np.zeros(shape + (PAIRS,), np.int64)
    return MXGroup(*_canonicalize(exponent, micro, sign, mant), flags=flags)


ACC_BITS = 32


def mx_dot(a: MXGroup, b: MXGroup, status: list | None = None) -> np.ndarray:
    """Dot product of two groups via an exact 32-bit fixed-point accumulator.

    Products are aligned to the finest microexponent scale (two extra
    fraction bits), summed as integers and converted to float once. The
    result is exact. ``status``, if given, is a one-element list whose
    value gets FLAG_ACC_SATURATED or-ed in on accumulator saturation.
    """
    prod = a.mantissa * b.mantissa
    mu_sum = (a.element_micro() + b.element_micro())
    term = prod << (2 - mu_sum)
    term = np.where((a.sign ^ b.sign) == 1, -term, term)
    acc = term.sum(axis=-1)
    lim = (1 << (ACC_BITS - 1)) - 1
    if np.any(np.abs(acc) > lim):
        acc = np.clip(acc, -lim, lim)
        if status is not None:
            status[0] |= FLAG_ACC_SATURATED
    return np.ldexp(acc.astype(np.float64), a.exponent + b.exponent - 2 * SCALE_OFFSET - 2)


def pack_groups(g: MXGroup) -> np.ndarray:
    """Serialize groups to uint8 with a trailing axis of 16 bytes.

    Byte 0 is the shared exponent, byte 1 the microexponents (pair 0 in bit
    0), bytes 2-15 the sixteen 7-bit elements packed little-endian in index
    order with the sign as each field's top bit.
    """
    out = np.zeros(g.shape + (GROUP_BYTES,), dtype=np.uint8)
    out[..., 0] = g.exponent
    out[..., 1] = (g.micro << np.arange(PAIRS)).sum(axis=-1)
    fields = (g.sign << MANT_BITS) | g.mantissa
    bits = ((fields[..., :, None] >> np.arange(7)) & 1).reshape(g.shape + (GROUP * 7,))
    out[..., 2:] = np.packbits(bits.astype(np.uint8), axis=-1, bitorder="little")
    return out


def unpack_groups(data: np.ndarray) -> MXGroup:
    data = np.asarray(data, dtype=np.uint8)
    if data.shape[-1:] != (GROUP_BYTES,):
        raise ValueError("packed MX8 groups need a trailing axis of 16 bytes")
    exponent = data[..., 0].astype(np.int64)
    micro = ((data[..., 1:2].astype(np.int64) >> np.arange(PAIRS)) & 1)
    bits = np.unpackbits(data[..., 2:], axis=-1, bitorder="little").astype(np.int64)
    fields = (bits.reshape(data.shape[:-1] + (GROUP, 7)) << np.arange(7)).sum(axis=-1)
    return MXGroup(exponent, micro, fields >> MANT_BITS, fields & MANT_MAX)


def quantize_vector(x, rm: RoundingMode | None = None) -> MXGroup:
    """Quantize a 1-D vector into consecutive groups, zero-padding the tail."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    pad = (-n) % GROUP
    if pad:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (pad,))], axis=-1)
    return quantize_mx(x.reshape(x.shape[:-1] + (-1, GROUP)), rm)


def dequantize_vector(g: MXGroup, n: int | None = None) -> np.ndarray:
    v = dequantize_mx(g)
    v = v.reshape(v.shape[:-2] + (-1,))
    return v if n is None else v[..., :n]
