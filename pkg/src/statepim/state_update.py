"""Golden model of the generalized state update and of attention score/attend.

For one head the state update is::

    S_t = d_t * S_{t-1} + k_t v_t^T     (d broadcast along dim_state)
    y_t = S_t^T q_t

with d, q, k of length dim_head, v of length dim_state, and S of shape
(dim_head, dim_state). Mamba-2 maps a -> d (scalar, broadcast), B -> k,
X -> v, C -> q; RetNet/GLA/HGRN2 use the same step with scalar or vector
decay.

The ``*_mx`` variants execute the same steps on MX8 groups in the exact
order of the in-memory engine (decay and outer product multiplies, then the
add, then the dot product), so the device simulator can be diffed against
them bit for bit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import mx
from .rounding import RoundingMode


@dataclass
class StateUpdateInputs:
    d: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        self.k = np.asarray(self.k, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.d.ndim == 0:
            self.d = np.full(self.k.shape, float(self.d))
        if not (self.d.shape == self.q.shape == self.k.shape) or self.d.ndim != 1 or self.v.ndim != 1:
            raise ValueError(
                f"dimension mismatch: d{self.d.shape} q{self.q.shape} k{self.k.shape} must share dim_head, v{self.v.shape} must be 1-D"
            )
        for name in ("d", "q", "k", "v"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite input in {name}")
        if np.any((self.d < 0) | (self.d > 1)):
            warnings.warn("decay entries outside [0, 1]", RuntimeWarning, stacklevel=2)

    @classmethod
    def scalar_decay(cls, a: float, q, k, v) -> "StateUpdateInputs":
        """Mamba-2 / RetNet style: one decay scalar per head."""
        return cls(np.full(np.shape(k), float(a)), q, k, v)

    @property
    def dim_head(self) -> int:
        return self.k.shape[0]

    @property
    def dim_state(self) -> int:
        return self.v.shape[0]


def state_update_step_ref(S: np.ndarray, inp: StateUpdateInputs):
    """One double-precision step. Returns ``(S_new, y)``."""
    S = np.asarray(S, dtype=np.float64)
    if S.shape != (inp.dim_head, inp.dim_state):
        raise ValueError(f"dimension mismatch: state {S.shape} vs inputs ({inp.dim_head}, {inp.dim_state})")
    S_new = inp.d[:, None] * S + np.outer(inp.k, inp.v)
    return S_new, S_new.T @ inp.q


def padded_dim(dim_head: int) -> int:
    return -(-dim_head // mx.GROUP) * mx.GROUP


@dataclass
class MXState:
    """A state matrix stored as MX8 groups.

    ``groups`` has batch shape (dim_state, n_groups): every state column is
    cut into groups of 16 along dim_head, zero-padded to a multiple of 16.
    """

    groups: mx.MXGroup
    dim_head: int

    @property
    def dim_state(self) -> int:
        return self.groups.shape[0]

    @property
    def n_groups(self) -> int:
        return self.groups.shape[1]

    @classmethod
    def zeros(cls, dim_head: int, dim_state: int) -> "MXState":
        return cls(mx.zeros((dim_state, padded_dim(dim_head) // mx.GROUP)), dim_head)

    @classmethod
    def from_dense(cls, S, rm: RoundingMode | None = None) -> "MXState":
        S = np.asarray(S, dtype=np.float64)
        dh, ds = S.shape
        cols = np.zeros((ds, padded_dim(dh)))
        cols[:, :dh] = S.T
        return cls(mx.quantize_mx(cols.reshape(ds, -1, mx.GROUP), rm), dh)

    def to_dense(self) -> np.ndarray:
        cols = mx.dequantize_mx(self.groups).reshape(self.dim_state, -1)
        return cols[:, : self.dim_head].T.copy()

    def equals(self, other: "MXState") -> bool:
        return self.dim_head == other.dim_head and self.groups.equals(other.groups)


@dataclass
class MXOperands:
    """Operands after the host quantization unit: what REG_WRITE carries."""

    d: mx.MXGroup  # (n_groups,)
    k: mx.MXGroup
    q: mx.MXGroup
    v: mx.MXGroup  # (ceil(dim_state / 16),)
    dim_state: int
    streams: RoundingMode | None = field(default=None)

    def v_lane(self, j) -> mx.MXGroup:
        """Broadcast group(s) carrying v[j] on all 16 lanes."""
        j = np.asarray(j)
        return mx.broadcast_element(self.v[j // mx.GROUP], j % mx.GROUP)


def prepare_operands(inp: StateUpdateInputs, rm: RoundingMode | None = None) -> MXOperands:
    """Quantize d, k, q, v (in that order) and derive per-(column, group)
    rounding streams for the engine.

    Each (state column, dim_head group) pair owns one LFSR stream, so the
    result does not depend on the order in which sub-chunks are processed.
    """
    ng = padded_dim(inp.dim_head) // mx.GROUP
    d = mx.quantize_vector(inp.d, rm)
    k = mx.quantize_vector(inp.k, rm)
    q = mx.quantize_vector(inp.q, rm)
    v = mx.quantize_vector(inp.v, rm)
    streams = rm.substreams((inp.dim_state, ng)) if rm is not None and rm.is_stochastic else None
    return MXOperands(d, k, q, v, inp.dim_state, streams)


def _sum_in_order(partials: np.ndarray) -> np.ndarray:
    """Left-to-right float64 sum over the last axis (host accumulation order)."""
    acc = np.zeros(partials.shape[:-1])
    for g in range(partials.shape[-1]):
        acc = acc + partials[..., g]
    return acc


def engine_update(S: mx.MXGroup, ops: MXOperands, cols, grps, streams: RoundingMode | None):
    """The engine's per-group dataflow.

    ``S`` holds the state groups at state columns ``cols`` and dim_head
    groups ``grps`` (broadcastable index arrays). Returns the updated groups
    and their dot-product partials with q.
    """
    decay = mx.mx_multiply(ops.d[grps], S, streams)
    outer = mx.mx_multiply(ops.k[grps], ops.v_lane(cols), streams)
    S_new = mx.mx_add(decay, outer, streams)
    return S_new, mx.mx_dot(S_new, ops.q[grps])


def state_update_step_mx(S: MXState, inp: StateUpdateInputs, rm: RoundingMode | None = None):
    """One quantized step. Returns ``(S_new, y)`` with y in float64."""
    if S.dim_head != inp.dim_head or S.dim_state != inp.dim_state:
        raise ValueError(
            f"dimension mismatch: state ({S.dim_head}, {S.dim_state}) vs inputs ({inp.dim_head}, {inp.dim_state})"
        )
    ops = prepare_operands(inp, rm)
    cols = np.arange(S.dim_state)[:, None]
    grps = np.arange(S.n_groups)[None, :]
    S_new, partial = engine_update(S.groups, ops, cols, grps, ops.streams)
    return MXState(S_new, S.dim_head), _sum_in_order(partial)


@dataclass
class KVCache:
    """Per-head key/value cache with rows appended one token at a time."""

    K: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    V: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        self.K = np.atleast_2d(np.asarray(self.K, dtype=np.float64))
        self.V = np.atleast_2d(np.asarray(self.V, dtype=np.float64))
        if self.K.shape != self.V.shape:
            raise ValueError(f"K {self.K.shape} and V {self.V.shape} must match")

    @property
    def seq_len(self) -> int:
        return self.K.shape[0] if self.K.size else 0

    @property
    def dim_head(self) -> int:
        return self.K.shape[1]

    def append(self, k, v) -> None:
        k = np.asarray(k, dtype=np.float64)[None, :]
        v = np.asarray(v, dtype=np.float64)[None, :]
        if self.K.size == 0:
            self.K, self.V = k, v
        else:
            self.K = np.vstack([self.K, k])
            self.V = np.vstack([self.V, v])


@dataclass
class MXKVCache:
    K: mx.MXGroup  # (seq_len, n_groups)
    V: mx.MXGroup
    dim_head: int

    @property
    def seq_len(self) -> int:
        return self.K.shape[0]

    @property
    def n_groups(self) -> int:
        return self.K.shape[1]

    @classmethod
    def from_cache(cls, cache: KVCache, rm: RoundingMode | None = None) -> "MXKVCache":
        if cache.seq_len == 0:
            raise ValueError("empty cache")
        return cls(mx.quantize_vector(cache.K, rm), mx.quantize_vector(cache.V, rm), cache.dim_head)


def _check_cache(cache):
    if cache.seq_len == 0:
        raise ValueError("empty cache")


def attention_score_ref(q, cache: KVCache) -> np.ndarray:
    """Unnormalised scores K q; softmax is the host's job."""
    _check_cache(cache)
    return cache.K @ np.asarray(q, dtype=np.float64)


def attention_attend_ref(scores, cache: KVCache) -> np.ndarray:
    _check_cache(cache)
    return np.asarray(scores, dtype=np.float64) @ cache.V


def attention_score_mx(q, cache: MXKVCache, rm: RoundingMode | None = None) -> np.ndarray:
    _check_cache(cache)
    qg = mx.quantize_vector(q, rm)
    return _sum_in_order(mx.mx_dot(cache.K, qg[None, :]))


def prepare_attend(scores, n_groups: int, rm: RoundingMode | None = None):
    """Quantize the softmaxed scores and derive one stream per output group."""
    sg = mx.quantize_vector(scores, rm)
    streams = rm.substreams((n_groups,)) if rm is not None and rm.is_stochastic else None
    return sg, streams


def attend_token(acc: mx.MXGroup, sg: mx.MXGroup, i: int, V_row: mx.MXGroup, streams):
    """acc += score_i * V_i on the multiplier and adder."""
    lane = mx.broadcast_element(sg[i // mx.GROUP], i % mx.GROUP)
    return mx.mx_add(acc, mx.mx_multiply(lane, V_row, streams), streams)


def attention_attend_mx(scores, cache: MXKVCache, rm: RoundingMode | None = None) -> np.ndarray:
    _check_cache(cache)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (cache.seq_len,):
        raise ValueError(f"expected {cache.seq_len} scores, got {scores.shape}")
    sg, streams = prepare_attend(scores, cache.n_groups, rm)
    acc = mx.zeros((cache.n_groups,))
    for i in range(cache.seq_len):
        acc = attend_token(acc, sg, i, cache.V[i], streams)
    return mx.dequantize_vector(acc, cache.dim_head)


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def linear_attention_equivalence(Q, K, V, decay=None, tol: float = 1e-12) -> bool:
    """Check that the recurrent form reproduces causal ``Q (K^T V)``.

    Row t of the oracle is ``q_t (K_{<=t}^T V_{<=t})``. With any decay other
    than one the recurrence computes something else and the check fails.
    """
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    T, dh = K.shape
    S = np.zeros((dh, V.shape[1]))
    ys = []
    for t in range(T):
        d = np.ones(dh) if decay is None else np.broadcast_to(np.asarray(decay, dtype=np.float64)[t] if np.ndim(decay) else decay, (dh,))
        S, y = state_update_step_ref(S, StateUpdateInputs(d, Q[t], K[t], V[t]))
        ys.append(y)
    ys = np.array(ys)
    oracle = np.array([Q[t] @ (K[: t + 1].T @ V[: t + 1]) for t in range(T)])
    scale = max(1.0, float(np.abs(oracle).max()))
    return bool(np.all(np.abs(ys - oracle) <= tol * scale))
