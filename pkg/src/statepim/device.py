"""Cycle-accurate model of the PIM banks and the shared state-update units.

Geometry: a pseudo-channel holds ``banks_per_pc`` banks; every pair of
banks (2p, 2p+1) shares one SPU. A sub-chunk is one DRAM column (32 bytes,
two MX8 groups, 32 state elements along dim_head). A chunk is one DRAM row
of sub-chunks covering consecutive state columns. All chunks of one
(request, head) sit in consecutive rows of one bank and form a chunk group
that shares the d, q, k operands.

Pipeline: stage 1 reads a sub-chunk, stage 2 runs the decay and outer
product multiplies, stage 3 the add, stage 4 the dot product with q and the
write-back. A sub-chunk read at iteration r is written at r + 3. The SPU
reads its upper bank on even iterations and its bottom bank on odd ones,
so the write at r + 3 always lands on the other bank.
"""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import mx
from .rounding import RoundingMode
from .state_update import (
    MXKVCache,
    MXOperands,
    MXState,
    StateUpdateInputs,
    padded_dim,
    prepare_attend,
    prepare_operands,
)

STATE_UPDATE = "state_update"
ATTN_SCORE = "attn_score"
ATTN_ATTEND = "attn_attend"
MODES = (STATE_UPDATE, ATTN_SCORE, ATTN_ATTEND)

PIPELINE_DEPTH = 4
WRITE_OFFSET = PIPELINE_DEPTH - 1
RESULT_WORD_BYTES = 8  # one float64 dot result per state column (or token)


class CapacityError(ValueError):
    pass


class InactiveRowError(RuntimeError):
    pass


class RegisterError(RuntimeError):
    pass


@dataclass(frozen=True)
class DramConfig:
    banks_per_bank_group: int = 4
    bank_groups_per_pseudo_channel: int = 4
    pseudo_channels: int = 80
    column_bytes: int = 32
    columns_per_row: int = 32
    rows_per_bank: int = 65536
    bus_frequency_hz: float = 1.512e9
    pim_frequency_hz: float = 378e6
    register_bytes: int = 2048  # operand registers per bank side of an SPU

    def __post_init__(self):
        for name in ("banks_per_bank_group", "bank_groups_per_pseudo_channel", "pseudo_channels",
                     "column_bytes", "columns_per_row", "rows_per_bank", "register_bytes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.column_bytes % mx.GROUP_BYTES:
            raise ValueError("column_bytes must hold whole MX8 groups")
        if self.banks_per_pc % 2:
            raise ValueError("banks per pseudo-channel must be even (two banks per SPU)")
        if self.bus_frequency_hz <= 0 or self.pim_frequency_hz <= 0:
            raise ValueError("frequencies must be positive")

    @property
    def banks_per_pc(self) -> int:
        return self.banks_per_bank_group * self.bank_groups_per_pseudo_channel

    @property
    def spus_per_pc(self) -> int:
        return self.banks_per_pc // 2

    @property
    def groups_per_column(self) -> int:
        return self.column_bytes // mx.GROUP_BYTES

    @property
    def row_bytes(self) -> int:
        return self.column_bytes * self.columns_per_row

    @property
    def bus_cycles_per_iteration(self) -> int:
        return round(self.bus_frequency_hz / self.pim_frequency_hz)

    @property
    def pc_capacity_bytes(self) -> int:
        return self.banks_per_pc * self.rows_per_bank * self.row_bytes


@dataclass(frozen=True)
class ChunkLayout:
    """Placement of per-unit matrices (unit = one request-head pair).

    Each unit stores a matrix of ``n_columns`` columns of ``dim_head``
    elements: the state (n_columns = dim_state) or K/V with one column per
    token. ``element_bytes`` is 1 for MX8 and 2 for fp16.
    """

    dram: DramConfig
    dim_head: int
    n_columns: int
    n_units: int
    row_base: int = 0
    element_bytes: int = 1

    def __post_init__(self):
        if min(self.dim_head, self.n_columns, self.n_units) <= 0:
            raise ValueError("layout dimensions must be positive")
        if self.subchunks_per_column > self.dram.columns_per_row:
            raise ValueError("one state column does not fit in a DRAM row")
        need = self.row_base + self.rows_used
        if need > self.dram.rows_per_bank:
            raise CapacityError(
                f"layout needs {need} rows per bank but banks have {self.dram.rows_per_bank}; "
                f"short by {need - self.dram.rows_per_bank} rows"
            )

    @cached_property
    def padded_dim_head(self) -> int:
        return padded_dim(self.dim_head)

    @cached_property
    def n_groups(self) -> int:
        return self.padded_dim_head // mx.GROUP

    @cached_property
    def elements_per_column(self) -> int:
        return self.dram.column_bytes // self.element_bytes

    @cached_property
    def subchunks_per_column(self) -> int:
        return -(-self.padded_dim_head // self.elements_per_column)

    @cached_property
    def columns_per_chunk(self) -> int:
        return self.dram.columns_per_row // self.subchunks_per_column

    @cached_property
    def chunks_per_unit(self) -> int:
        return -(-self.n_columns // self.columns_per_chunk)

    @cached_property
    def banks_total(self) -> int:
        return self.dram.pseudo_channels * self.dram.banks_per_pc

    @cached_property
    def slots_per_bank(self) -> int:
        return -(-self.n_units // self.banks_total)

    @cached_property
    def rows_used(self) -> int:
        return self.slots_per_bank * self.chunks_per_unit

    @cached_property
    def bytes_per_unit(self) -> int:
        return self.n_columns * self.subchunks_per_column * self.dram.column_bytes

    def unit_location(self, u: int) -> tuple[int, int, int]:
        """(pseudo-channel, bank, slot) of unit ``u``."""
        P, B = self.dram.pseudo_channels, self.dram.banks_per_pc
        return u % P, (u // P) % B, u // (P * B)

    def locate(self, u: int, j: int, s: int) -> tuple[int, int, int, int]:
        """(pseudo-channel, bank, row, column) of sub-chunk ``s`` of column ``j``."""
        if not (0 <= u < self.n_units and 0 <= j < self.n_columns and 0 <= s < self.subchunks_per_column):
            raise IndexError(f"sub-chunk ({u}, {j}, {s}) outside the layout")
        pc, bank, slot = self.unit_location(u)
        c, jj = divmod(j, self.columns_per_chunk)
        return pc, bank, self.row_base + slot * self.chunks_per_unit + c, jj * self.subchunks_per_column + s

    def unit_at(self, pc: int, bank: int, rnd: int):
        """Unit and chunk index stored in row ``row_base + rnd`` of a bank, or None."""
        slot, c = divmod(rnd, self.chunks_per_unit)
        P, B = self.dram.pseudo_channels, self.dram.banks_per_pc
        u = slot * P * B + bank * P + pc
        return (u, c) if u < self.n_units else None

    def chunk_columns(self, c: int) -> range:
        return range(c * self.columns_per_chunk, min((c + 1) * self.columns_per_chunk, self.n_columns))

    def tasks(self, pc: int, bank: int, rnd: int) -> list:
        """Sub-chunk tasks ``(unit, column j, sub s, dram column)`` in read order."""
        hit = self.unit_at(pc, bank, rnd)
        if hit is None:
            return []
        u, c = hit
        spc = self.subchunks_per_column
        return [(u, j, s, (j - c * self.columns_per_chunk) * spc + s) for j in self.chunk_columns(c) for s in range(spc)]

    def groups_of(self, s: int) -> list[int]:
        """dim_head groups held by sub-chunk ``s`` (the tail may be half empty)."""
        per = self.elements_per_column // mx.GROUP
        return list(range(s * per, min((s + 1) * per, self.n_groups)))

    def subchunk_counts(self, rnd: int, pcs=None) -> np.ndarray:
        """Sub-chunks per bank in round ``rnd``, shape (len(pcs), banks_per_pc).

        ``pcs`` defaults to every pseudo-channel.
        """
        pcs = range(self.dram.pseudo_channels) if pcs is None else pcs
        out = np.zeros((len(pcs), self.dram.banks_per_pc), dtype=np.int64)
        spc = self.subchunks_per_column
        for i, pc in enumerate(pcs):
            for b in range(out.shape[1]):
                hit = self.unit_at(pc, b, rnd)
                if hit is not None:
                    out[i, b] = len(self.chunk_columns(hit[1])) * spc
        return out


def layout_state(model, dram: DramConfig, batch: int, layers: int = 1) -> ChunkLayout:
    """Place the MX8 states of ``batch`` requests for ``layers`` state-update layers.

    ``model`` needs ``n_heads``, ``dim_head`` and ``dim_state``. Returns the
    layout of the first layer; capacity is checked for all of them.
    """
    lay = ChunkLayout(dram, model.dim_head, model.dim_state, batch * model.n_heads)
    need = lay.rows_used * layers
    if need > dram.rows_per_bank:
        raise CapacityError(
            f"{layers} layers need {need} rows per bank but banks have {dram.rows_per_bank}; "
            f"short by {need - dram.rows_per_bank} rows"
        )
    return lay


def layout_kv(dim_head: int, seq_len: int, n_units: int, dram: DramConfig, row_base: int = 0) -> ChunkLayout:
    """KV placement: one column per cached token."""
    return ChunkLayout(dram, dim_head, seq_len, n_units, row_base)


# --------------------------------------------------------------------------- pipeline accounting


def shared_read_schedule(n_upper: int, n_bottom: int, writes: bool = True) -> list[tuple[int, int]]:
    """(iteration, side) of every read for one shared SPU in one round.

    With write-back the sides alternate strictly (side 0 on even
    iterations, relative to the side that starts). The side with more
    sub-chunks starts, so a lone bank still works at half rate. Without
    write-back there is no hazard and the SPU reads every iteration.
    """
    if not writes:
        out, r, left = [], 0, [n_upper, n_bottom]
        while left[0] or left[1]:
            side = r % 2 if left[r % 2] else 1 - r % 2
            out.append((r, side))
            left[side] -= 1
            r += 1
        return out
    first = 0 if n_upper >= n_bottom else 1
    counts = {first: max(n_upper, n_bottom), 1 - first: min(n_upper, n_bottom)}
    out = [(2 * i, first) for i in range(counts[first])] + [(2 * i + 1, 1 - first) for i in range(counts[1 - first])]
    return sorted(out)


def single_port_read_schedule(n: int, writes: bool = True) -> list[int]:
    """Read iterations for a unit that cannot read and write one bank in the
    same iteration: it reads whenever no write-back is due."""
    if not writes:
        return list(range(n))
    reads, writes_at, r = [], set(), 0
    while len(reads) < n:
        if r not in writes_at:
            reads.append(r)
            writes_at.add(r + WRITE_OFFSET)
        r += 1
    return reads


def iterations_from_reads(read_iters) -> int:
    read_iters = list(read_iters)
    return read_iters[-1] + PIPELINE_DEPTH if read_iters else 0


def round_iterations(counts: np.ndarray, writes: bool = True, shared: bool = True) -> int:
    """COMPs needed for one round, given sub-chunks per bank (pc, bank)."""
    counts = np.asarray(counts)
    best = 0
    for row in counts.reshape(-1, counts.shape[-1]):
        if shared:
            for p in range(0, row.size, 2):
                best = max(best, iterations_from_reads(r for r, _ in shared_read_schedule(row[p], row[p + 1], writes)))
        else:
            for n in row:
                best = max(best, iterations_from_reads(single_port_read_schedule(int(n), writes)))
    return best


# --------------------------------------------------------------------------- banks and SPUs


class Bank:
    def __init__(self, dram: DramConfig):
        self.dram = dram
        self.rows: dict[int, np.ndarray] = {}
        self.active_row: int | None = None
        self.row_buffer: np.ndarray | None = None
        self.busy_until = 0

    def _row(self, row: int) -> np.ndarray:
        if not 0 <= row < self.dram.rows_per_bank:
            raise IndexError(f"row {row} outside bank")
        if row not in self.rows:
            self.rows[row] = np.zeros((self.dram.columns_per_row, self.dram.column_bytes), dtype=np.uint8)
        return self.rows[row]

    def activate(self, row: int) -> None:
        if self.active_row is not None:
            raise RuntimeError(f"bank already has row {self.active_row} open")
        self.active_row = row
        self.row_buffer = self._row(row).copy()

    def precharge(self) -> None:
        if self.active_row is not None:
            self.rows[self.active_row] = self.row_buffer
        self.active_row, self.row_buffer = None, None

    def read_column(self, col: int) -> np.ndarray:
        if self.active_row is None:
            raise InactiveRowError("column read with no active row")
        return self.row_buffer[col].copy()

    def write_column(self, col: int, data) -> None:
        if self.active_row is None:
            raise InactiveRowError("column write with no active row")
        self.row_buffer[col] = data


@dataclass
class InFlight:
    """A sub-chunk moving through the pipeline."""

    unit: int
    j: int
    s: int
    bank: int
    row: int
    column: int
    groups: list
    read_at: int
    state: mx.MXGroup | None = None
    decay: mx.MXGroup | None = None
    outer: mx.MXGroup | None = None
    lfsr: np.ndarray | None = None


@dataclass
class SPU:
    index: int
    pc: int
    banks: tuple
    shared: bool = True
    # items read 1, 2 and 3 iterations ago: now in stages 2, 3 and 4
    latches: list = field(default_factory=lambda: [None] * (PIPELINE_DEPTH - 1))
    schedule: deque = field(default_factory=deque)  # (iteration, bank, task)
    iteration: int = 0

    @property
    def busy(self) -> bool:
        return bool(self.schedule) or any(x is not None for x in self.latches)


@dataclass
class Event:
    cycle: int
    spu: int
    bank: int
    action: str
    row: int
    column: int


EVENT_FIELDS = ("cycle", "spu", "bank", "action", "row", "column")


def events_to_csv(events) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVENT_FIELDS)
    for e in events:
        w.writerow([e.cycle, e.spu, e.bank, e.action, e.row, e.column])
    return buf.getvalue()


def audit_hazards(events) -> list:
    """(cycle, bank) pairs where one bank both read and wrote. Must be empty."""
    seen = {}
    bad = []
    for e in events:
        if e.action in ("READ", "WRITE"):
            key = (e.cycle, e.bank)
            prev = seen.setdefault(key, e.action)
            if prev != e.action:
                bad.append(key)
    return bad


def audit_writebacks(events) -> list:
    """Locations whose read and write-back counts differ (state-update runs)."""
    reads, writes = {}, {}
    for e in events:
        key = (e.bank, e.row, e.column)
        if e.action == "READ":
            reads[key] = reads.get(key, 0) + 1
        elif e.action == "WRITE":
            writes[key] = writes.get(key, 0) + 1
    return [k for k in set(reads) | set(writes) if reads.get(k, 0) != 1 or writes.get(k, 0) != 1]


# --------------------------------------------------------------------------- device


@dataclass
class HostPlan:
    """What the host quantization unit produced for one COMP sequence."""

    mode: str
    operands: list  # per unit: MXOperands (state update), MXGroup q (score), MXGroup scores (attend)
    streams: list  # per unit: RoundingMode or None


def host_prepare(layout: ChunkLayout, inputs, mode: str, rm: RoundingMode | None = None) -> HostPlan:
    """Quantize operands in unit order, exactly as the golden model does."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if len(inputs) != layout.n_units:
        raise ValueError(f"expected inputs for {layout.n_units} units, got {len(inputs)}")
    ops, streams = [], []
    for inp in inputs:
        if mode == STATE_UPDATE:
            if inp.dim_head != layout.dim_head or inp.dim_state != layout.n_columns:
                raise ValueError("dimension mismatch between inputs and layout")
            o = prepare_operands(inp, rm)
            ops.append(o)
            streams.append(o.streams)
        elif mode == ATTN_SCORE:
            ops.append(mx.quantize_vector(inp, rm))
            streams.append(None)
        else:
            sg, st = prepare_attend(inp, layout.n_groups, rm)
            ops.append(sg)
            streams.append(st)
    return HostPlan(mode, ops, streams)


def _group_bytes(g: mx.MXGroup) -> np.ndarray:
    return mx.pack_groups(g).reshape(-1)


def register_payloads(layout: ChunkLayout, plan: HostPlan, rnd: int) -> list:
    """REG_WRITE payloads for round ``rnd``: (pc, bank, register, group offset, bytes)."""
    out = []
    first = rnd % layout.chunks_per_unit == 0
    for pc in range(layout.dram.pseudo_channels):
        for b in range(layout.dram.banks_per_pc):
            hit = layout.unit_at(pc, b, rnd)
            if hit is None:
                continue
            u, c = hit
            cols = layout.chunk_columns(c)
            g0, g1 = cols[0] // mx.GROUP, (cols[-1] // mx.GROUP) + 1
            if plan.mode == STATE_UPDATE:
                o = plan.operands[u]
                if first:
                    for name in ("d", "k", "q"):
                        out.append((pc, b, name, 0, _group_bytes(getattr(o, name))))
                out.append((pc, b, "v", g0, _group_bytes(o.v[g0:g1])))
            elif plan.mode == ATTN_SCORE:
                if first:
                    out.append((pc, b, "q", 0, _group_bytes(plan.operands[u])))
            else:
                out.append((pc, b, "s", g0, _group_bytes(plan.operands[u][g0:g1])))
    return out


def result_words(layout: ChunkLayout, mode: str, rnd: int, pcs=None) -> dict:
    """Result bytes each bank holds after round ``rnd``, keyed by (pc, bank)."""
    out = {}
    for pc in range(layout.dram.pseudo_channels) if pcs is None else pcs:
        for b in range(layout.dram.banks_per_pc):
            hit = layout.unit_at(pc, b, rnd)
            if hit is None:
                continue
            u, c = hit
            if mode == ATTN_ATTEND:
                if c == layout.chunks_per_unit - 1:
                    out[(pc, b)] = layout.n_groups * mx.GROUP_BYTES
            else:
                out[(pc, b)] = len(layout.chunk_columns(c)) * RESULT_WORD_BYTES
    return out


class PimDevice:
    """Banks, SPUs and registers of every pseudo-channel in ``layout.dram``."""

    def __init__(self, layout: ChunkLayout, shared: bool = True, trace: bool = False):
        self.layout = layout
        self.dram = layout.dram
        self.shared = shared
        self.trace = trace
        d = self.dram
        self.banks = [[Bank(d) for _ in range(d.banks_per_pc)] for _ in range(d.pseudo_channels)]
        if shared:
            self.spus = [SPU(pc * d.spus_per_pc + p, pc, (2 * p, 2 * p + 1)) for pc in range(d.pseudo_channels) for p in range(d.spus_per_pc)]
        else:
            self.spus = [SPU(pc * d.banks_per_pc + b, pc, (b,), shared=False) for pc in range(d.pseudo_channels) for b in range(d.banks_per_pc)]
        self.registers: dict = {}
        self.events: list[Event] = []
        self.results: dict = {}
        self.mode: str | None = None
        self.plan: HostPlan | None = None
        self.bytes_read = 0
        self.bytes_written = 0
        self.iterations = 0
        self._lfsr: dict = {}
        self._armed = [False] * self.dram.pseudo_channels
        self._decoded: dict = {}
        self._acc: dict = {}

    # ---- host-side placement (outside the timed command stream)
    def store(self, u: int, groups: mx.MXGroup) -> None:
        """Place a unit's matrix, given as groups of shape (n_columns, n_groups)."""
        lay = self.layout
        if groups.shape != (lay.n_columns, lay.n_groups):
            raise ValueError(f"expected groups of shape {(lay.n_columns, lay.n_groups)}, got {groups.shape}")
        packed = mx.pack_groups(groups)
        for j in range(lay.n_columns):
            for s in range(lay.subchunks_per_column):
                pc, b, row, col = lay.locate(u, j, s)
                data = np.zeros(self.dram.column_bytes, dtype=np.uint8)
                for slot, g in enumerate(lay.groups_of(s)):
                    data[slot * mx.GROUP_BYTES:(slot + 1) * mx.GROUP_BYTES] = packed[j, g]
                self.banks[pc][b]._row(row)[col] = data

    def fetch(self, u: int) -> mx.MXGroup:
        lay = self.layout
        out = np.zeros((lay.n_columns, lay.n_groups, mx.GROUP_BYTES), dtype=np.uint8)
        for j in range(lay.n_columns):
            for s in range(lay.subchunks_per_column):
                pc, b, row, col = lay.locate(u, j, s)
                data = self.banks[pc][b]._row(row)[col]
                for slot, g in enumerate(lay.groups_of(s)):
                    out[j, g] = data[slot * mx.GROUP_BYTES:(slot + 1) * mx.GROUP_BYTES]
        return mx.unpack_groups(out)

    def store_state(self, u: int, state: MXState) -> None:
        self.store(u, state.groups)

    def fetch_state(self, u: int) -> MXState:
        return MXState(self.fetch(u), self.layout.dim_head)

    # ---- commands
    def configure(self, plan: HostPlan) -> None:
        """Latch the COMP mode and per-unit LFSR seeds for a command sequence."""
        self.mode, self.plan = plan.mode, plan
        self.results = {}
        self._acc = {}
        self._lfsr = {}
        for u, st in enumerate(plan.streams):
            if st is not None:
                self._lfsr[u] = np.array(st.current_state(), dtype=np.int64)

    def activate(self, rnd: int, pc: int | None = None) -> None:
        """Open row ``row_base + rnd`` in every bank that holds data there."""
        lay = self.layout
        for p in self._pcs(pc):
            banks = [b for b in range(self.dram.banks_per_pc) if lay.unit_at(p, b, rnd) is not None]
            self.activate_banks(p, banks, lay.row_base + rnd)

    def activate_banks(self, pc: int, banks, row: int) -> None:
        for b in banks:
            self.banks[pc][b].activate(row)
            self._decoded.pop((pc, b), None)
        if self.mode is not None:
            self._arm(pc)

    def reg_write(self, pc: int, bank: int, name: str, offset: int, data, at: int = 0) -> None:
        """Load ``data`` into register ``name`` at byte ``at``; ``at == 0`` starts
        a new value whose first group is group ``offset`` of the operand."""
        regs = self.registers.setdefault((pc, bank), {})
        data = np.asarray(data, dtype=np.uint8).reshape(-1)
        if at == 0:
            regs[name] = (offset, data)
        else:
            off, old = regs.get(name, (offset, np.zeros(0, dtype=np.uint8)))
            if old.size != at:
                raise RegisterError(f"register {name} write at byte {at} but it holds {old.size}")
            regs[name] = (off, np.concatenate([old, data]))
        used = sum(v[1].size for v in regs.values())
        if used > self.dram.register_bytes:
            raise RegisterError(f"bank ({pc}, {bank}) registers hold {used} bytes, capacity {self.dram.register_bytes}")
        self._decoded.pop((pc, bank), None)

    def precharge_all(self, pc: int | None = None) -> None:
        for p in self._pcs(pc):
            for bank in self.banks[p]:
                bank.precharge()
            self._armed[p] = False

    def _pcs(self, pc):
        return range(self.dram.pseudo_channels) if pc is None else (pc,)

    def _arm(self, pc: int) -> None:
        lay = self.layout
        writes = self.mode == STATE_UPDATE
        rows = {b.active_row for b in self.banks[pc] if b.active_row is not None}
        if len(rows) > 1:
            raise RuntimeError(f"pseudo-channel {pc} has different rows open: {sorted(rows)}")
        rnd = rows.pop() - lay.row_base if rows else None
        for spu in self.spus:
            if spu.pc != pc:
                continue
            spu.latches = [None] * (PIPELINE_DEPTH - 1)
            spu.iteration = 0
            spu.schedule = deque()
            if rnd is None:
                continue
            tasks = [lay.tasks(pc, b, rnd) if self.banks[pc][b].active_row is not None else [] for b in spu.banks]
            if spu.shared:
                queues = [deque(t) for t in tasks]
                for r, side in shared_read_schedule(len(tasks[0]), len(tasks[1]), writes):
                    spu.schedule.append((r, spu.banks[side], queues[side].popleft()))
            else:
                for r, task in zip(single_port_read_schedule(len(tasks[0]), writes), tasks[0]):
                    spu.schedule.append((r, spu.banks[0], task))
        self._armed[pc] = True

    def round_busy(self, pc: int | None = None) -> bool:
        return any(spu.busy for spu in self.spus if pc is None or spu.pc == pc)

    def _operands(self, pc: int, bank: int):
        key = (pc, bank)
        if key not in self._decoded:
            regs = self.registers.get(key, {})
            need = {STATE_UPDATE: ("d", "k", "q", "v"), ATTN_SCORE: ("q",), ATTN_ATTEND: ("s",)}[self.mode]
            missing = [n for n in need if n not in regs]
            if missing:
                raise RegisterError(f"bank ({pc}, {bank}) COMP with unloaded registers {missing}")
            self._decoded[key] = {n: (off, mx.unpack_groups(data.reshape(-1, mx.GROUP_BYTES))) for n, (off, data) in regs.items()}
        return self._decoded[key]

    def comp(self, cycle: int | None = None, pc: int | None = None) -> None:
        """Advance every SPU (of pseudo-channel ``pc``, or all) by one iteration."""
        if self.mode is None:
            raise RegisterError("COMP before the device was configured")
        if cycle is None:
            cycle = self.iterations * self.dram.bus_cycles_per_iteration
        for p in self._pcs(pc):
            if not self._armed[p]:
                if all(b.active_row is None for b in self.banks[p]):
                    raise InactiveRowError(f"COMP on pseudo-channel {p} with no active row")
                self._arm(p)
        bpp = self.dram.banks_per_pc
        spus = [spu for spu in self.spus if pc is None or spu.pc == pc]
        stage4 = [(spu, spu.latches[2]) for spu in spus if spu.latches[2] is not None]
        stage3 = [spu.latches[1] for spu in spus if spu.latches[1] is not None]
        stage2 = [spu.latches[0] for spu in spus if spu.latches[0] is not None]
        self._stage4(stage4, cycle)
        self._stage3(stage3)
        self._stage2(stage2)
        reads = []
        for spu in spus:
            new = None
            if spu.schedule and spu.schedule[0][0] == spu.iteration:
                _, bank, (u, j, s, col) = spu.schedule.popleft()
                b = self.banks[spu.pc][bank]
                if b.active_row is None:
                    raise InactiveRowError(f"bank {spu.pc * bpp + bank} COMP with no active row")
                data = b.read_column(col)
                self.bytes_read += data.size
                new = InFlight(u, j, s, bank, b.active_row, col, self.layout.groups_of(s), spu.iteration)
                reads.append((new, data))
                if self.trace:
                    self.events.append(Event(cycle, spu.index, spu.pc * bpp + bank, "READ", b.active_row, col))
                written = spu.latches[2]
                if written is not None and self.mode == STATE_UPDATE and written.bank == bank:
                    raise AssertionError(f"structural hazard on bank {spu.pc * bpp + bank} at cycle {cycle}")
            if self.trace and new is None and spu.latches[2] is None:
                self.events.append(Event(cycle, spu.index, -1, "IDLE", -1, -1))
            spu.latches = [new] + spu.latches[:2]
            spu.iteration += 1
        if reads:
            self._decode_reads(reads)
        self.iterations += 1

    def _decode_reads(self, reads) -> None:
        blocks = []
        for item, data in reads:
            for slot in range(len(item.groups)):
                blocks.append(data[slot * mx.GROUP_BYTES:(slot + 1) * mx.GROUP_BYTES])
        groups = mx.unpack_groups(np.stack(blocks))
        k = 0
        for item, _ in reads:
            n = len(item.groups)
            item.state = groups[k:k + n]
            if self.mode == STATE_UPDATE and item.unit in self._lfsr:
                item.lfsr = self._lfsr[item.unit][item.j, item.groups].copy()
            k += n

    def _gather(self, items, fn):
        """Operand groups for a batch, concatenated over items."""
        return mx.concat([fn(it) for it in items])

    def _streams(self, items):
        if not items or items[0].lfsr is None:
            return None
        return RoundingMode(self.plan.streams[items[0].unit].mode, np.concatenate([it.lfsr for it in items]))

    def _scatter_streams(self, items, rm) -> None:
        if rm is None:
            return
        state = rm.current_state()
        k = 0
        for it in items:
            n = len(it.groups)
            it.lfsr = state[k:k + n]
            k += n

    def _loc(self, it):
        pc, bank, _ = self.layout.unit_location(it.unit)
        return pc, bank

    def _stage2(self, items) -> None:
        if self.mode != STATE_UPDATE or not items:
            return
        ops = [self._operands(*self._loc(it)) for it in items]
        d = mx.concat([o["d"][1][it.groups] for o, it in zip(ops, items)])
        k = mx.concat([o["k"][1][it.groups] for o, it in zip(ops, items)])
        lanes = []
        for o, it in zip(ops, items):
            off, v = o["v"]
            lane = mx.broadcast_element(v[it.j // mx.GROUP - off], it.j % mx.GROUP)
            lanes.append(mx.stack([lane] * len(it.groups)))
        S = mx.concat([it.state for it in items])
        rm = self._streams(items)
        decay = mx.mx_multiply(d, S, rm)
        outer = mx.mx_multiply(k, mx.concat(lanes), rm)
        self._scatter_streams(items, rm)
        pos = 0
        for it in items:
            n = len(it.groups)
            it.decay, it.outer = decay[pos:pos + n], outer[pos:pos + n]
            pos += n

    def _stage3(self, items) -> None:
        if not items:
            return
        if self.mode == STATE_UPDATE:
            rm = self._streams(items)
            summed = mx.mx_add(mx.concat([it.decay for it in items]), mx.concat([it.outer for it in items]), rm)
            self._scatter_streams(items, rm)
            pos = 0
            for it in items:
                n = len(it.groups)
                it.state = summed[pos:pos + n]
                pos += n
        elif self.mode == ATTN_ATTEND:
            self._attend(items)

    def _attend(self, items) -> None:
        lanes, accs, lfsr = [], [], []
        stochastic = any(self.plan.streams[it.unit] is not None for it in items)
        for it in items:
            off, sg = self._operands(*self._loc(it))["s"]
            lane = mx.broadcast_element(sg[it.j // mx.GROUP - off], it.j % mx.GROUP)
            lanes.append(mx.stack([lane] * len(it.groups)))
            acc = self._acc.setdefault(it.unit, mx.zeros((self.layout.n_groups,)))
            accs.append(acc[it.groups])
            if stochastic:
                lfsr.append(self._lfsr[it.unit][it.groups])
        rm = RoundingMode(self.plan.streams[items[0].unit].mode, np.concatenate(lfsr)) if stochastic else None
        prod = mx.mx_multiply(mx.concat(lanes), mx.concat([it.state for it in items]), rm)
        new = mx.mx_add(mx.concat(accs), prod, rm)
        state = rm.current_state() if rm is not None else None
        pos = 0
        for it in items:
            n = len(it.groups)
            acc = self._acc[it.unit]
            for f in ("exponent", "micro", "sign", "mantissa"):
                getattr(acc, f)[it.groups] = getattr(new, f)[pos:pos + n]
            if state is not None:
                self._lfsr[it.unit][it.groups] = state[pos:pos + n]
            pos += n

    def _stage4(self, entries, cycle) -> None:
        if not entries:
            return
        items = [it for _, it in entries]
        bpp = self.dram.banks_per_pc
        if self.mode in (STATE_UPDATE, ATTN_SCORE):
            qs = []
            for it in items:
                ops = self._operands(*self._loc(it))
                qs.append(ops["q"][1][it.groups])
            partial = mx.mx_dot(mx.concat([it.state for it in items]), mx.concat(qs))
            # the column accumulator adds group partials in group order, as the host would
            pos = 0
            for it in items:
                acc = self.results.setdefault(it.unit, {})
                for _ in it.groups:
                    acc[it.j] = acc.get(it.j, 0.0) + float(partial[pos])
                    pos += 1
        if self.mode == STATE_UPDATE:
            packed = mx.pack_groups(mx.concat([it.state for it in items]))
            pos = 0
            for spu, it in entries:
                data = np.zeros(self.dram.column_bytes, dtype=np.uint8)
                for slot in range(len(it.groups)):
                    data[slot * mx.GROUP_BYTES:(slot + 1) * mx.GROUP_BYTES] = packed[pos]
                    pos += 1
                self.banks[spu.pc][it.bank].write_column(it.column, data)
                self.bytes_written += data.size
                if self.trace:
                    self.events.append(Event(cycle, spu.index, spu.pc * bpp + it.bank, "WRITE", it.row, it.column))

    def outputs(self) -> np.ndarray:
        """Host-side accumulation of the drained results, one row per unit."""
        lay = self.layout
        if self.mode == ATTN_ATTEND:
            return np.array([mx.dequantize_vector(self._acc.get(u, mx.zeros((lay.n_groups,))), lay.dim_head) for u in range(lay.n_units)])
        out = np.zeros((lay.n_units, lay.n_columns))
        for u in range(lay.n_units):
            for j, val in self.results.get(u, {}).items():
                out[u, j] = val
        return out


@dataclass
class CompResult:
    iterations: int
    cycles: int
    outputs: np.ndarray
    writebacks: int
    bytes_read: int
    bytes_written: int
    events: list


def execute_comp(device: PimDevice, inputs, mode: str, rm: RoundingMode | None = None) -> CompResult:
    """Run one decode step (or attention phase) over every unit of the layout.

    Each round opens one row per bank, loads operand registers, issues COMPs
    until every SPU drains, then closes the rows. Cycles count COMP
    iterations only; command-bus overheads live in :mod:`statepim.commands`.
    """
    lay = device.layout
    plan = host_prepare(lay, inputs, mode, rm)
    device.configure(plan)
    start_iter, start_w = device.iterations, device.bytes_written
    start_r = device.bytes_read
    for rnd in range(lay.rows_used):
        device.activate(rnd)
        for pc, b, name, off, data in register_payloads(lay, plan, rnd):
            device.reg_write(pc, b, name, off, data)
        while device.round_busy():
            device.comp()
        device.precharge_all()
    iters = device.iterations - start_iter
    written = device.bytes_written - start_w
    return CompResult(iters, iters * lay.dram.bus_cycles_per_iteration, device.outputs(), written // lay.dram.column_bytes,
                      device.bytes_read - start_r, written, device.events)


# --------------------------------------------------------------------------- baselines


def per_bank_pipelined_iterations(layout: ChunkLayout, writes: bool = True) -> int:
    """Iterations with one SPU per bank and no access interleaving."""
    return sum(round_iterations(layout.subchunk_counts(r), writes, shared=False) for r in range(layout.rows_used))


def pimba_iterations(layout: ChunkLayout, writes: bool = True) -> int:
    return sum(round_iterations(layout.subchunk_counts(r), writes, shared=True) for r in range(layout.rows_used))


TM_PASSES = {"decay": True, "update": True, "gemv": False}  # pass name -> writes back


def tm_pass_iterations(n: int, writes: bool) -> int:
    """One pass over ``n`` sub-chunks on a single-port unit."""
    return iterations_from_reads(single_port_read_schedule(n, writes))


def time_multiplexed_iterations(layout: ChunkLayout, primitives=("decay", "update", "gemv")) -> int:
    """Iterations for the time-multiplexed design: one single-port unit per
    bank, fp16 state, each primitive a separate pass over the open row.

    ``layout`` must be the fp16 layout (``element_bytes=2``).
    """
    total = 0
    for r in range(layout.rows_used):
        n = int(layout.subchunk_counts(r).max())
        total += sum(tm_pass_iterations(n, TM_PASSES[p]) for p in primitives)
    return total


def fp16_layout(layout: ChunkLayout) -> ChunkLayout:
    return ChunkLayout(layout.dram, layout.dim_head, layout.n_columns, layout.n_units, layout.row_base, element_bytes=2)


def _f16(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).astype(np.float16).astype(np.float64)


def tm_state_update(S16: np.ndarray, inp: StateUpdateInputs):
    """fp16 semantics of the three passes: decay, update, GEMV."""
    d, k, v, q = _f16(inp.d), _f16(inp.k), _f16(inp.v), _f16(inp.q)
    S = _f16(d[:, None] * S16)
    S = _f16(S + _f16(np.outer(k, v)))
    partial = S * q[:, None]
    y = np.zeros(S.shape[1])
    for i in range(S.shape[0]):
        y = y + partial[i]
    return S, y


def time_multiplexed_baseline(layout: ChunkLayout, states, inputs, primitives=("decay", "update", "gemv")):
    """Returns ``(cycles, new_states, outputs)``; states are fp16 (dim_head, dim_state) arrays."""
    lay16 = fp16_layout(layout) if layout.element_bytes == 1 else layout
    iters = time_multiplexed_iterations(lay16, primitives)
    new_states, ys = [], []
    for S, inp in zip(states, inputs):
        S2, y = tm_state_update(_f16(S), inp)
        new_states.append(S2)
        ys.append(y)
    return iters * layout.dram.bus_cycles_per_iteration, new_states, np.array(ys)
