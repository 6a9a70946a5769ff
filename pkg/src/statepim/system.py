"""Analytical host model and end-to-end generation-phase accounting.

The host is a roofline: every kernel takes ``max(bytes / bandwidth,
flops / compute)``. State update and attention run either on the host
(``gpu``, ``gpu_q``) or in memory (``gpu_pim_tm``, ``pimba``); the in-memory
latency comes from the command-level cycle model. Host and PIM phases are
serialized.

Counting rules (per generated token, per request):

* state update, per state element: 5 flops (two multiplies, one add, one
  multiply-add for y); the state is read and written once.
* attention, per cached element of K and of V: 2 flops; K and V are read once.
* projections/FFN: 2 flops per parameter per request; weights are read once
  per step and shared across the batch.

With ``n_devices`` > 1 the model is split by heads and weight columns with
ideal tensor parallelism: host bandwidth and compute scale with the device
count, each device's PIM holds ``ceil(heads / n_devices)`` heads, and
communication is not modelled.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import commands as cmd
from . import device as dev

SYSTEM_KINDS = ("gpu", "gpu_q", "gpu_pim_tm", "pimba")
SU_FLOPS_PER_ELEMENT = 5
ATTN_FLOPS_PER_ELEMENT = 2


@dataclass(frozen=True)
class ModelConfig:
    name: str
    params_total: float
    n_layers: int
    hidden_dim: int
    n_heads: int
    dim_head: int
    dim_state: int
    attention_layer_ratio: float = 0.0
    attn_heads: int = 0  # 0 means hidden_dim // attn_dim_head
    attn_dim_head: int = 128
    weight_bytes: int = 2
    state_bytes: int = 2
    kv_bytes: int = 2

    def __post_init__(self):
        if not 0.0 <= self.attention_layer_ratio <= 1.0:
            raise ValueError("attention_layer_ratio must be in [0, 1]")
        for name in ("params_total", "n_layers", "hidden_dim", "dim_head", "attn_dim_head"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.attention_layer_ratio < 1.0 and (self.n_heads <= 0 or self.dim_state <= 0):
            raise ValueError("state-update layers need n_heads and dim_state")

    @property
    def n_attn_layers(self) -> int:
        return round(self.n_layers * self.attention_layer_ratio)

    @property
    def n_su_layers(self) -> int:
        return self.n_layers - self.n_attn_layers

    @property
    def n_attn_heads(self) -> int:
        return self.attn_heads or self.hidden_dim // self.attn_dim_head

    @property
    def state_elements(self) -> int:
        """State elements per request per state-update layer."""
        return self.n_heads * self.dim_head * self.dim_state


PRESETS = {
    m.name: m
    for m in (
        ModelConfig("retnet-2.7b", 2.7e9, 32, 2560, 10, 256, 512),
        ModelConfig("gla-2.7b", 2.7e9, 32, 2560, 4, 320, 640),
        ModelConfig("hgrn2-2.7b", 2.7e9, 32, 2560, 20, 128, 128),
        ModelConfig("mamba2-2.7b", 2.7e9, 64, 2560, 80, 128, 64),
        ModelConfig("zamba2-7b", 7.4e9, 81, 3584, 112, 64, 64, 1 / 7, attn_heads=32, attn_dim_head=112),
        ModelConfig("opt-7b", 6.7e9, 32, 4096, 0, 128, 0, 1.0, attn_heads=32, attn_dim_head=128),
    )
}


def scale_model(model: ModelConfig, params_total: float) -> ModelConfig:
    """Grow a model to ``params_total`` keeping its head counts.

    Parameters scale as layers x hidden^2, so layers and every width are
    multiplied by the cube root of the ratio (widths rounded to 16).
    """
    f = (params_total / model.params_total) ** (1 / 3)
    r16 = lambda x: max(16, int(round(x * f / 16)) * 16)
    return replace(
        model,
        name=f"{model.name.rsplit('-', 1)[0]}-{params_total / 1e9:.0f}b",
        params_total=params_total,
        n_layers=max(1, round(model.n_layers * f)),
        hidden_dim=r16(model.hidden_dim),
        dim_head=r16(model.dim_head),
        dim_state=r16(model.dim_state) if model.dim_state else 0,
        attn_dim_head=r16(model.attn_dim_head),
    )


@dataclass(frozen=True)
class EnergyCoefficients:
    """Placeholder per-event energies in picojoules."""

    pj_per_activation: float = 900.0  # one 1 KiB row
    pj_per_column: float = 60.0  # one 32-byte column read or write inside a bank
    pj_per_channel_byte: float = 30.0  # across the memory interface
    pj_per_mx_op: float = 5.0  # one 16-lane multiply, add or dot in a PIM unit
    pj_per_flop: float = 0.4  # host arithmetic


@dataclass(frozen=True)
class SystemConfig:
    external_bandwidth: float = 80 * 16 * 1.512e9  # bytes/s, 80 pseudo-channels x 16 B per bus cycle
    compute_throughput: float = 312e12  # flop/s
    n_devices: int = 1
    capacity_bytes: float = 80e9
    dram: dev.DramConfig = field(default_factory=dev.DramConfig)
    timing: cmd.TimingParams = field(default_factory=cmd.TimingParams)
    energy: EnergyCoefficients = field(default_factory=EnergyCoefficients)
    other_seconds_per_layer: float = 3e-6  # norms, activations, launch overhead
    overlap: bool = True

    def __post_init__(self):
        if self.external_bandwidth <= 0 or self.compute_throughput <= 0 or self.n_devices <= 0:
            raise ValueError("rates and device count must be positive")

    @property
    def machine_balance(self) -> float:
        return self.compute_throughput / self.external_bandwidth


def roofline(op_class: str, model: ModelConfig, bytes_per_element: float, sys: SystemConfig = SystemConfig(),
             batch: int = 1) -> tuple[float, str]:
    """(arithmetic intensity in flop/byte, 'memory' or 'compute')."""
    if op_class == "state_update":
        ai = SU_FLOPS_PER_ELEMENT / (2 * bytes_per_element)
    elif op_class == "attention":
        ai = ATTN_FLOPS_PER_ELEMENT / bytes_per_element
    elif op_class == "gemm":
        ai = 2 * batch / bytes_per_element
    else:
        raise ValueError(f"unknown op class {op_class!r}")
    return ai, "memory" if ai < sys.machine_balance else "compute"


class CapacityError(ValueError):
    pass


@dataclass
class Events:
    activations: float = 0.0
    columns: float = 0.0
    channel_bytes: float = 0.0
    mx_ops: float = 0.0
    flops: float = 0.0

    def __add__(self, o: "Events") -> "Events":
        return Events(*(a + b for a, b in zip(asdict(self).values(), asdict(o).values())))

    def scaled(self, k: float) -> "Events":
        return Events(*(a * k for a in asdict(self).values()))


@dataclass
class LatencyBreakdown:
    projections_ffn: float
    state_update: float
    attention: float
    other: float
    tokens_per_s: float
    events: dict = field(default_factory=dict)  # component -> Events

    @property
    def total(self) -> float:
        return self.projections_ffn + self.state_update + self.attention + self.other


def footprint(model: ModelConfig, batch: int, seq_len: int, state_bytes: float) -> float:
    weights = model.params_total * model.weight_bytes
    states = batch * model.n_su_layers * model.state_elements * state_bytes
    kv = batch * model.n_attn_layers * 2 * seq_len * model.n_attn_heads * model.attn_dim_head * model.kv_bytes
    return weights + states + kv


# ---- in-memory execution


def _pim_cycles(layout: dev.ChunkLayout, mode: str, sys: SystemConfig, comps=None) -> int:
    plan = cmd.analytic_plan(layout, mode, 0, comps)
    return cmd.plan_cycles(plan, sys.timing, sys.overlap, refresh=True)


def _tm_comps(writes: bool):
    passes = ("decay", "update", "gemv") if writes else ("gemv",)
    return lambda counts: sum(dev.tm_pass_iterations(int(counts.max()), dev.TM_PASSES[p]) for p in passes)


def split_layout(dram: dev.DramConfig, dim_head: int, n_columns: int, n_units: int, element_bytes: int) -> dev.ChunkLayout:
    """Layout with each unit's ``dim_head`` cut into ``r`` equal slices.

    Every slice is placed as its own unit and returns one partial result per
    column, which the host adds up. ``r`` is the smallest split that uses the
    fewest rows, so long heads neither overflow a row nor leave most of it
    empty.
    """
    best = None
    spc_max = -(-dim_head // (dram.column_bytes // element_bytes))
    for r in range(1, spc_max + 1):
        dh = -(-dim_head // r)
        try:
            lay = dev.ChunkLayout(dram, dh, n_columns, n_units * r, element_bytes=element_bytes)
        except ValueError:
            continue
        if best is None or lay.rows_used < best.rows_used:
            best = lay
    if best is None:
        raise dev.CapacityError(f"{n_units} units of {dim_head}x{n_columns} do not fit in memory")
    return best


def pim_layer_seconds(model: ModelConfig, sys: SystemConfig, batch: int, kind: str, op: str, seq_len: int = 0):
    """Seconds and events for one layer of ``op`` ('state_update' or 'attention') in memory.

    Events cover every device; seconds are those of the busiest device.
    """
    dram = sys.dram
    fp16 = kind == "gpu_pim_tm"
    eb = 2 if fp16 else 1
    nd = sys.n_devices
    if op == "state_update":
        heads = -(-model.n_heads // nd)
        lays = [(split_layout(dram, model.dim_head, model.dim_state, batch * heads, eb), dev.STATE_UPDATE)]
        passes_bytes = 5 if fp16 else 2  # column traffic per state byte
    else:
        heads = -(-model.n_attn_heads // nd)
        lay = split_layout(dram, model.attn_dim_head, max(1, seq_len), batch * heads, eb)
        lays = [(lay, dev.ATTN_SCORE), (lay, dev.ATTN_ATTEND)]
        passes_bytes = 1
    cycles, ev = 0, Events()
    for lay, mode in lays:
        comps = _tm_comps(mode == dev.STATE_UPDATE) if fp16 else None
        plan = cmd.analytic_plan(lay, mode, 0, comps)
        cycles += cmd.plan_cycles(plan, sys.timing, sys.overlap)
        data = lay.n_units * lay.bytes_per_unit
        groups = lay.n_units * lay.n_columns * lay.n_groups * eb
        ev = ev + Events(
            activations=sum(r.act4 for r in plan.rounds) * cmd.BANKS_PER_ACT4 * dram.pseudo_channels,
            columns=passes_bytes * data / dram.column_bytes,
            channel_bytes=sum(r.reg_writes + r.result_reads for r in plan.rounds) * cmd.TRANSFER_BYTES * dram.pseudo_channels,
            mx_ops=groups * (4 if mode == dev.STATE_UPDATE else 2),
        )
    return cycles / dram.bus_frequency_hz, ev.scaled(nd)


def _host_kernel(bytes_, flops, sys: SystemConfig):
    n = sys.n_devices
    return max(bytes_ / (sys.external_bandwidth * n), flops / (sys.compute_throughput * n))


def _host_events(bytes_, flops, dram: dev.DramConfig) -> Events:
    return Events(activations=bytes_ / dram.row_bytes, columns=bytes_ / dram.column_bytes, channel_bytes=bytes_, flops=flops)


def estimate_generation(model: ModelConfig, sys: SystemConfig, batch: int, seq: tuple, system_kind: str) -> LatencyBreakdown:
    """Latency of generating ``out_len`` tokens for ``batch`` requests after an ``in_len`` prompt."""
    if system_kind not in SYSTEM_KINDS:
        raise ValueError(f"unknown system kind {system_kind!r}; expected one of {SYSTEM_KINDS}")
    in_len, out_len = seq
    if batch <= 0 or in_len < 0 or out_len < 0:
        raise ValueError("batch must be positive and lengths nonnegative")
    state_bytes = {"gpu": model.state_bytes, "gpu_q": model.state_bytes / 2, "gpu_pim_tm": 2, "pimba": 1}[system_kind]
    kv_bytes = {"gpu": model.kv_bytes, "gpu_q": model.kv_bytes, "gpu_pim_tm": 2, "pimba": 1}[system_kind]
    need = footprint(replace(model, kv_bytes=kv_bytes), batch, in_len + out_len, state_bytes)
    have = sys.capacity_bytes * sys.n_devices
    if need > have:
        raise CapacityError(f"needs {need / 1e9:.1f} GB but the system has {have / 1e9:.1f} GB")
    if out_len == 0:
        return LatencyBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, {})
    ctx = in_len + (out_len + 1) / 2  # mean context length over the generated tokens
    dram = sys.dram

    w_bytes = model.params_total * model.weight_bytes
    w_flops = 2 * model.params_total * batch
    proj = _host_kernel(w_bytes, w_flops, sys)
    proj_ev = _host_events(w_bytes, w_flops, dram)

    su, su_ev = 0.0, Events()
    if model.n_su_layers:
        elems = batch * model.state_elements
        if system_kind in ("gpu", "gpu_q"):
            b = 2 * elems * state_bytes
            f = SU_FLOPS_PER_ELEMENT * elems
            su, su_ev = _host_kernel(b, f, sys), _host_events(b, f, dram)
        else:
            su, su_ev = pim_layer_seconds(model, sys, batch, system_kind, "state_update")
        su, su_ev = su * model.n_su_layers, su_ev.scaled(model.n_su_layers)

    att, att_ev = 0.0, Events()
    if model.n_attn_layers:
        kv_elems = 2 * batch * ctx * model.n_attn_heads * model.attn_dim_head
        if system_kind in ("gpu", "gpu_q"):
            b = kv_elems * kv_bytes
            f = ATTN_FLOPS_PER_ELEMENT * kv_elems
            att, att_ev = _host_kernel(b, f, sys), _host_events(b, f, dram)
        else:
            # the cycle model is evaluated at the two neighbouring integer
            # lengths and interpolated, so latency stays linear in ctx
            lo = int(math.floor(ctx))
            s0, e0 = pim_layer_seconds(model, sys, batch, system_kind, "attention", lo)
            s1, e1 = pim_layer_seconds(model, sys, batch, system_kind, "attention", lo + 1)
            fr = ctx - lo
            att = s0 + fr * (s1 - s0)
            att_ev = e0.scaled(1 - fr) + e1.scaled(fr)
        att, att_ev = att * model.n_attn_layers, att_ev.scaled(model.n_attn_layers)

    other = sys.other_seconds_per_layer * model.n_layers
    steps = out_len
    total = (proj + su + att + other) * steps
    return LatencyBreakdown(
        proj * steps, su * steps, att * steps, other * steps, batch * out_len / total,
        {"projections_ffn": proj_ev.scaled(steps), "state_update": su_ev.scaled(steps), "attention": att_ev.scaled(steps)},
    )


def estimate_energy(breakdown: LatencyBreakdown, coeff: EnergyCoefficients = EnergyCoefficients()) -> dict:
    """Dynamic energy in joules, by event class and by latency component."""
    out = {"activation": 0.0, "column": 0.0, "channel": 0.0, "compute": 0.0}
    by_component = {}
    for comp, ev in breakdown.events.items():
        parts = {
            "activation": ev.activations * coeff.pj_per_activation,
            "column": ev.columns * coeff.pj_per_column,
            "channel": ev.channel_bytes * coeff.pj_per_channel_byte,
            "compute": ev.mx_ops * coeff.pj_per_mx_op + ev.flops * coeff.pj_per_flop,
        }
        by_component[comp] = sum(parts.values()) * 1e-12
        for k, v in parts.items():
            out[k] += v * 1e-12
    out["total"] = sum(out[k] for k in ("activation", "column", "channel", "compute"))
    out["by_component"] = by_component
    return out


# ---- sweeps and output

RESULT_FIELDS = (
    "model", "system", "batch", "in_len", "out_len",
    "projections_ffn_s", "state_update_s", "attention_s", "other_s", "total_s", "tokens_per_s", "joules", "error",
)


def sweep(grid: dict, sys: SystemConfig = SystemConfig(), models: dict | None = None) -> list[dict]:
    """Evaluate every point of ``grid``.

    ``grid`` keys: ``model`` (preset names), ``system``, ``batch``,
    ``in_len``, ``out_len``; each maps to a list. Points are produced in
    row-major order of those keys. A failing point yields a row with the
    error message and empty numbers.
    """
    models = {**PRESETS, **(models or {})}
    allowed = ("model", "system", "batch", "in_len", "out_len")
    unknown = set(grid) - set(allowed)
    if unknown:
        raise KeyError(f"unknown grid keys {sorted(unknown)}")
    axes = [list(grid.get(k, d)) for k, d in zip(allowed, (["retnet-2.7b"], ["gpu"], [1], [1024], [128]))]
    rows = []
    for m in axes[0]:
        for s in axes[1]:
            for b in axes[2]:
                for i in axes[3]:
                    for o in axes[4]:
                        row = dict(zip(allowed, (m, s, int(b), int(i), int(o))))
                        try:
                            if m not in models:
                                raise KeyError(f"unknown model {m!r}")
                            bd = estimate_generation(models[m], sys, int(b), (int(i), int(o)), s)
                            row.update(
                                projections_ffn_s=bd.projections_ffn, state_update_s=bd.state_update,
                                attention_s=bd.attention, other_s=bd.other, total_s=bd.total,
                                tokens_per_s=bd.tokens_per_s, joules=estimate_energy(bd, sys.energy)["total"], error="",
                            )
                        except (ValueError, KeyError) as e:
                            row.update({k: "" for k in RESULT_FIELDS[5:-1]}, error=str(e).strip("'\""))
                        rows.append(row)
    return rows


def _fmt(v):
    return f"{v:.9g}" if isinstance(v, float) else v


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in RESULT_FIELDS})
    return buf.getvalue()


def rows_to_json(rows) -> str:
    return json.dumps([{k: r.get(k, "") for k in RESULT_FIELDS} for r in rows], indent=2, sort_keys=False) + "\n"


def linear_fit_r2(x, y) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    coef = np.polyfit(x, y, 1)
    resid = y - np.polyval(coef, x)
    ss = ((y - y.mean()) ** 2).sum()
    return 1.0 - (resid ** 2).sum() / ss if ss else 1.0
