"""Long state-update trajectories in low-precision storage formats.

The state is held in a storage format and every step computes
``S = Q(d * S + k v^T)`` in float64 from the stored (dequantized) state;
``Q`` is :func:`statepim.formats.fake_quantize`, grouping along ``dim_head``.
A float64 reference runs in lockstep on the same inputs. Errors are relative
to the reference: Frobenius norm of the state and L2 norm of ``y = S^T q``.

The numbers are a monotone proxy for model quality, not a perplexity
estimate.

Several input seeds are simulated at once along a leading batch axis. Each
seed owns its input generators and its LFSR stream, so a seed gives the same
series whether it runs alone or in a batch.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import formats as fm
from .rounding import NEAREST_EVEN, STOCHASTIC, RoundingMode

ROUNDINGS = (NEAREST_EVEN, STOCHASTIC)
_CHUNK = 256  # steps of inputs generated at a time

# largest finite magnitude per format; reaching it counts as saturation
FORMAT_MAX = {name: f.max_value for name, f in fm.MINIFLOATS.items()}


@dataclass(frozen=True)
class DriftExperiment:
    """One drift run. The defaults are the standard drift workload.

    The standard workload makes every increment ``k v^T`` share a sign
    pattern (``kv_mean`` > 0) and keeps a fixed per-row decay, so the state
    settles near ``1 / (1 - decay)`` increments: 20 to 100. Formats with
    2 or 3 mantissa bits stop absorbing increments well before that, while
    6 and 7 bits still absorb them.
    """

    dim_head: int = 16
    dim_state: int = 16
    steps: int = 4096
    decay_range: tuple = (0.95, 0.99)
    kv_scale: float = 2.0 ** -4
    kv_mean: float = 1.0  # k and v are kv_scale * (kv_mean + N(0, 1))
    fixed_decay: bool = True  # one decay per dim_head row for the whole run
    q_scale: float = 1.0
    seed: int = 0
    fmt: str = "mx8"
    rounding: str = NEAREST_EVEN

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.dim_head < 1 or self.dim_state < 1:
            raise ValueError("dimensions must be positive")
        lo, hi = self.decay_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("decay_range must satisfy 0 <= lo <= hi <= 1")
        if self.fmt not in fm.FORMATS:
            raise ValueError(f"unknown format {self.fmt!r}; expected one of {fm.FORMATS}")
        if self.rounding not in ROUNDINGS:
            raise ValueError(f"unknown rounding {self.rounding!r}")


@dataclass
class DriftResult:
    """Error series; arrays are (steps,) for one seed or (seeds, steps)."""

    fmt: str
    rounding: str
    frobenius_error: np.ndarray
    output_error: np.ndarray
    saturated: np.ndarray = field(repr=False)

    @property
    def final_error(self):
        return self.frobenius_error[..., -1]

    def seed(self, i: int) -> "DriftResult":
        return DriftResult(self.fmt, self.rounding, self.frobenius_error[i], self.output_error[i], self.saturated[i])


def lfsr_seed(seed: int) -> int:
    """Nonzero 16-bit LFSR state for input seed ``seed``."""
    return (seed * 40503 + 0xACE1) % 0xFFFF + 1


class _Inputs:
    """Per-seed generators for d, k, v, q; drawn in chunks of steps."""

    def __init__(self, exp: DriftExperiment, seeds):
        self.exp = exp
        self.gens = [np.random.default_rng(np.random.SeedSequence(int(s)).spawn(4)[i]) for s in seeds for i in range(4)]
        self.n = len(seeds)
        self.decay = None

    def chunk(self, t: int):
        e = self.exp
        lo, hi = e.decay_range
        dh, ds = e.dim_head, e.dim_state
        gd, gk, gv, gq = (self.gens[i::4] for i in range(4))
        if e.fixed_decay:
            if self.decay is None:
                self.decay = np.stack([g.uniform(lo, hi, (1, dh)) for g in gd])
            d = np.broadcast_to(self.decay, (self.n, t, dh))
        else:
            d = np.stack([g.uniform(lo, hi, (t, dh)) for g in gd])
        k = (np.stack([g.standard_normal((t, dh)) for g in gk]) + e.kv_mean) * e.kv_scale
        v = (np.stack([g.standard_normal((t, ds)) for g in gv]) + e.kv_mean) * e.kv_scale
        q = np.stack([g.standard_normal((t, dh)) for g in gq]) * e.q_scale
        return d, k, v, q


def _relative(err, ref):
    num = np.sqrt((err ** 2).sum(axis=tuple(range(1, err.ndim))))
    den = np.sqrt((ref ** 2).sum(axis=tuple(range(1, ref.ndim))))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 0, np.inf, 0.0))


def run_grid(exp: DriftExperiment, variants, seeds=None) -> dict:
    """Run every ``(fmt, rounding)`` of ``variants`` against one shared reference.

    ``seeds`` defaults to ``[exp.seed]``; the result arrays then have a
    leading axis of length 1 (see :func:`run_drift` for the squeezed form).
    """
    seeds = [exp.seed] if seeds is None else [int(s) for s in seeds]
    variants = [tuple(v) for v in variants]
    for fmt, rnd in variants:
        replace(exp, fmt=fmt, rounding=rnd)  # validates
    n, T = len(seeds), exp.steps
    inputs = _Inputs(exp, seeds)
    lfsr = np.array([lfsr_seed(s) for s in seeds])
    rms = {v: RoundingMode(v[1], lfsr.copy()) for v in variants}
    S_ref = np.zeros((n, exp.dim_head, exp.dim_state))
    S_q = {v: S_ref.copy() for v in variants}
    fro = {v: np.empty((n, T)) for v in variants}
    out = {v: np.empty((n, T)) for v in variants}
    sat = {v: np.zeros((n, T), dtype=bool) for v in variants}
    done = {v: np.zeros(n, dtype=bool) for v in variants}
    t0 = 0
    while t0 < T:
        c = min(_CHUNK, T - t0)
        d, k, v, q = inputs.chunk(c)
        for i in range(c):
            t = t0 + i
            outer = k[:, i, :, None] * v[:, i, None, :]
            S_ref = d[:, i, :, None] * S_ref + outer
            y_ref = np.einsum("nhs,nh->ns", S_ref, q[:, i])
            for var in variants:
                fmt = var[0]
                exact = d[:, i, :, None] * S_q[var] + outer
                if not np.all(np.isfinite(exact)):
                    done[var] |= ~np.isfinite(exact).reshape(n, -1).all(axis=1)
                    exact = np.nan_to_num(exact, nan=0.0, posinf=0.0, neginf=0.0)
                S = fm.fake_quantize(exact, fmt, rms[var], axis=-2)
                S_q[var] = S
                if fmt in FORMAT_MAX:
                    done[var] |= (np.abs(S) >= FORMAT_MAX[fmt]).reshape(n, -1).any(axis=1)
                sat[var][:, t] = done[var]
                y = np.einsum("nhs,nh->ns", S, q[:, i])
                fro[var][:, t] = _relative(S - S_ref, S_ref)
                out[var][:, t] = _relative(y - y_ref, y_ref)
        t0 += c
    return {var: DriftResult(var[0], var[1], fro[var], out[var], sat[var]) for var in variants}


def run_drift(exp: DriftExperiment) -> DriftResult:
    """Error series of one experiment (arrays of shape (steps,))."""
    return run_grid(exp, [(exp.fmt, exp.rounding)])[(exp.fmt, exp.rounding)].seed(0)


def run_drift_seeds(exp: DriftExperiment, seeds) -> DriftResult:
    """Error series of ``exp`` for several input seeds (arrays (seeds, steps))."""
    return run_grid(exp, [(exp.fmt, exp.rounding)], seeds)[(exp.fmt, exp.rounding)]


PARETO_FIELDS = ("format", "rounding", "final_error", "output_error", "bits_per_element", "saturated", "pareto", "best_le8")


def format_pareto_report(exp: DriftExperiment, formats=fm.FORMATS, roundings=ROUNDINGS, results: dict | None = None) -> list:
    """One row per (format, rounding) with final errors and storage bits.

    ``pareto`` marks rows no other row beats on both error and bits;
    ``best_le8`` marks the lowest-error row among formats of at most 8 bits.
    """
    variants = [(f, r) for f in formats for r in roundings]
    if results is None:
        results = run_grid(exp, variants)
    rows = []
    for f, r in variants:
        res = results[(f, r)]
        rows.append({
            "format": f, "rounding": r,
            "final_error": float(res.frobenius_error[..., -1].mean()),
            "output_error": float(res.output_error[..., -1].mean()),
            "bits_per_element": fm.BITS_PER_ELEMENT[f],
            "saturated": bool(np.any(res.saturated[..., -1])),
        })
    for row in rows:
        row["pareto"] = not any(
            o["final_error"] <= row["final_error"] and o["bits_per_element"] <= row["bits_per_element"]
            and (o["final_error"] < row["final_error"] or o["bits_per_element"] < row["bits_per_element"])
            for o in rows
        )
    small = [row for row in rows if row["bits_per_element"] <= 8]
    best = min(small, key=lambda row: row["final_error"]) if small else None
    for row in rows:
        row["best_le8"] = row is best
    return rows


SERIES_FIELDS = ("step", "format", "rounding", "frobenius_error", "output_error")


def series_to_csv(results) -> str:
    """CSV time series for one-seed results (a DriftResult or a list of them)."""
    if isinstance(results, DriftResult):
        results = [results]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SERIES_FIELDS)
    for res in results:
        for t, (a, b) in enumerate(zip(np.ravel(res.frobenius_error), np.ravel(res.output_error)), start=1):
            w.writerow((t, res.fmt, res.rounding, f"{a:.9g}", f"{b:.9g}"))
    return buf.getvalue()


def pareto_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=PARETO_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: f"{v:.9g}" if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()
