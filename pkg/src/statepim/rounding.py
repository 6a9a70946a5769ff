"""Rounding modes and the 16-bit LFSR that drives stochastic rounding.

All rounding inside the package goes through :func:`round_fixed`, which
takes non-negative magnitudes in fixed point with ``GUARD_BITS`` fraction
bits. The lowest fraction bit doubles as a sticky bit, so a value whose
fraction is exactly ``HALF`` is a true tie.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GUARD_BITS = 16
ONE = 1 << GUARD_BITS
HALF = 1 << (GUARD_BITS - 1)
FRAC_MASK = ONE - 1

NEAREST_EVEN = "nearest_even"
STOCHASTIC = "stochastic"

LFSR_PERIOD = 0xFFFF
DEFAULT_SEED = 0xACE1
# Consecutive words are 16 shifts apart; substreams are spaced by this many words.
_SUBSTREAM_STRIDE = 2731


def lfsr_step(state: int) -> int:
    """Advance a Fibonacci LFSR with taps 16, 14, 13, 11 by one shift."""
    bit = (state ^ (state >> 2) ^ (state >> 3) ^ (state >> 5)) & 1
    return (state >> 1) | (bit << 15)


def lfsr_word(state: int) -> int:
    """Return the state after 16 shifts, i.e. the next 16-bit output word."""
    for _ in range(16):
        state = lfsr_step(state)
    return state


def _build_orbit():
    orbit = np.empty(LFSR_PERIOD, dtype=np.int64)
    pos = np.full(1 << 16, -1, dtype=np.int64)
    s = 1
    for i in range(LFSR_PERIOD):
        orbit[i] = s
        pos[s] = i
        s = lfsr_step(s)
    if s != 1:  # pragma: no cover - guards the tap choice
        raise RuntimeError("LFSR taps are not maximal length")
    return orbit, pos


_ORBIT, _POS = _build_orbit()


def _check_seed(seed):
    arr = np.asarray(seed, dtype=np.int64)
    if np.any((arr <= 0) | (arr > 0xFFFF)):
        raise ValueError("LFSR state must be in [1, 0xFFFF]")
    return arr


@dataclass
class RoundingMode:
    """Rounding mode plus the LFSR state used when ``mode == 'stochastic'``.

    ``state`` is normally a scalar. It may also be an integer array; then
    every leading index owns an independent stream and :meth:`draw` must be
    asked for a shape whose leading dimensions match ``state.shape``. This
    lets many experiments run side by side while each one sees exactly the
    words it would have seen on its own.
    """

    mode: str = NEAREST_EVEN
    state: int | np.ndarray = DEFAULT_SEED
    _pos: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in (NEAREST_EVEN, STOCHASTIC):
            raise ValueError(f"unknown rounding mode {self.mode!r}")
        self._pos = _POS[_check_seed(self.state)]

    @classmethod
    def nearest(cls) -> "RoundingMode":
        return cls(NEAREST_EVEN)

    @classmethod
    def stochastic(cls, seed=DEFAULT_SEED) -> "RoundingMode":
        return cls(STOCHASTIC, seed)

    @property
    def is_stochastic(self) -> bool:
        return self.mode == STOCHASTIC

    def current_state(self):
        """The LFSR register value(s) right now."""
        return _ORBIT[self._pos % LFSR_PERIOD]

    def copy(self) -> "RoundingMode":
        state = self.current_state()
        return RoundingMode(self.mode, state if np.ndim(state) else int(state))

    def draw(self, shape) -> np.ndarray:
        """Draw one 16-bit word per element of ``shape`` (C order) and advance."""
        shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
        lead = np.shape(self._pos)
        if shape[: len(lead)] != lead:
            raise ValueError(f"draw shape {shape} does not start with stream shape {lead}")
        n = math.prod(shape[len(lead):])
        steps = 16 * np.arange(1, n + 1, dtype=np.int64)
        pos = np.expand_dims(self._pos, -1) + steps
        words = _ORBIT[pos % LFSR_PERIOD].reshape(shape)
        self._pos = (self._pos + 16 * n) % LFSR_PERIOD
        return words

    def select(self, index) -> "RoundingMode":
        """Independent copy of one stream of a multi-stream mode."""
        return RoundingMode(self.mode, int(self.current_state()[index]))

    def substreams(self, shape) -> "RoundingMode":
        """Derive one independent stream per index of ``shape``.

        The parent advances by one word, so deriving twice from the same
        parent gives different families.
        """
        shape = tuple(shape)
        idx = np.arange(1, math.prod(shape) + 1, dtype=np.int64).reshape(shape)
        base = np.asarray(self._pos)
        pos = (base[(...,) + (None,) * len(shape)] + 16 * _SUBSTREAM_STRIDE * idx) % LFSR_PERIOD
        self._pos = (self._pos + 16) % LFSR_PERIOD
        return RoundingMode(self.mode, _ORBIT[pos])


def shr_sticky(x: np.ndarray, shift) -> np.ndarray:
    """Right-shift non-negative integers, OR-ing any lost bits into the LSB.

    Negative shifts shift left.
    """
    x = np.asarray(x, dtype=np.int64)
    shift = np.broadcast_to(np.asarray(shift, dtype=np.int64), np.broadcast_shapes(x.shape, np.shape(shift)))
    left = np.left_shift(x, np.clip(-shift, 0, 62))
    s = np.clip(shift, 0, 62)
    out = np.right_shift(x, s)
    lost = (x & ((np.int64(1) << s) - 1)) != 0
    out = out | lost.astype(np.int64)
    return np.where(shift < 0, left, out)


def to_fixed(r: np.ndarray) -> np.ndarray:
    """Convert non-negative reals to fixed point with sticky LSB."""
    scaled = np.ldexp(np.asarray(r, dtype=np.float64), GUARD_BITS)
    fx = np.floor(scaled)
    sticky = (scaled != fx).astype(np.int64)
    return fx.astype(np.int64) | sticky


def round_fixed(fx: np.ndarray, mode: str, words: np.ndarray | None = None) -> np.ndarray:
    """Round fixed-point magnitudes to integers.

    Stochastic rounding adds the LFSR word to the fraction and keeps the
    carry, so the round-up probability equals the fractional position.
    """
    fx = np.asarray(fx, dtype=np.int64)
    q = fx >> GUARD_BITS
    frac = fx & FRAC_MASK
    if mode == STOCHASTIC:
        if words is None:
            raise ValueError("stochastic rounding needs LFSR words")
        up = (frac + words) >= ONE
    else:
        up = (frac > HALF) | ((frac == HALF) & ((q & 1) == 1))
    return q + up.astype(np.int64)


def stochastic_round(value: float, target_bits: int, rng: RoundingMode) -> float:
    """Round ``value`` to ``target_bits`` significant bits.

    Exactly one LFSR word is consumed per call, whatever the value. Under
    nearest_even the word is still drawn so replay stays aligned.
    """
    if target_bits < 1:
        raise ValueError("target_bits must be >= 1")
    if not math.isfinite(value):
        raise ValueError("non-finite input")
    word = rng.draw((1,))
    if value == 0.0:
        return 0.0
    mag = abs(value)
    exp = math.frexp(mag)[1] - 1
    step_exp = exp - (target_bits - 1)
    fx = to_fixed(np.array([math.ldexp(mag, -step_exp)]))
    q = int(round_fixed(fx, rng.mode, word)[0])
    return math.copysign(math.ldexp(q, step_exp), value)
