"""Custom DRAM commands, timing validation and the overlap scheduler.

Row commands (ACT4, PRECHARGES, REFRESH) and column commands (REG_WRITE,
COMP, RESULT_READ) travel on separate buses, so one of each may issue in
the same cycle. All times are memory-bus cycles.

One round opens a row in every participating bank, loads operands,
streams COMPs, drains results and precharges::

    ACT4 x A   (tFAW apart)         REG_WRITE x W (tCCD_S apart)
    COMP x C   (tCCD_L apart, first one tFAW after the last ACT4)
    RESULT_READ x R                 PRECHARGES, then tRP before the next ACT4

With overlap on, REG_WRITEs fill the tFAW gaps of the ACT4 phase and
RESULT_READs run during the tRP window of PRECHARGES.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import device as dev

ACT4 = "ACT4"
REG_WRITE = "REG_WRITE"
COMP = "COMP"
RESULT_READ = "RESULT_READ"
PRECHARGES = "PRECHARGES"
REFRESH = "REFRESH"
KINDS = (ACT4, REG_WRITE, COMP, RESULT_READ, PRECHARGES, REFRESH)
COLUMN_KINDS = (REG_WRITE, COMP, RESULT_READ)

TRANSFER_BYTES = 32  # payload of one REG_WRITE or RESULT_READ
BANKS_PER_ACT4 = 4


@dataclass(frozen=True)
class TimingParams:
    tRP: int = 14
    tRAS: int = 34
    tCCD_S: int = 2
    tCCD_L: int = 4
    tWR: int = 16
    tRTP_S: int = 4
    tRTP_L: int = 6
    tREFI: int = 3900
    tFAW: int = 30
    tRFC: int = 529  # all-bank refresh of an 8 Gb die, ~350 ns at 1.512 GHz

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def reg_slots_per_window(self) -> int:
        return self.tFAW // self.tCCD_S


@dataclass
class Command:
    cycle: int
    kind: str
    args: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown command kind {self.kind!r}")

    def to_line(self) -> str:
        parts = [str(self.cycle), self.kind]
        for k, v in self.args.items():
            if isinstance(v, (bytes, bytearray, np.ndarray)):
                v = bytes(np.asarray(v, dtype=np.uint8)).hex()
            parts.append(f"{k}={v}")
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "Command":
        fields = line.split()
        if len(fields) < 2:
            raise ValueError(f"malformed command line: {line!r}")
        args = {}
        for tok in fields[2:]:
            k, sep, v = tok.partition("=")
            if not sep:
                raise ValueError(f"malformed argument {tok!r}")
            if k == "data":
                args[k] = np.frombuffer(bytes.fromhex(v), dtype=np.uint8)
            elif v.lstrip("-").isdigit():
                args[k] = int(v)
            else:
                args[k] = v
        return cls(int(fields[0]), fields[1], args)


@dataclass
class CommandStream:
    commands: list = field(default_factory=list)
    pc: int = 0

    def __len__(self):
        return len(self.commands)

    def __iter__(self):
        return iter(self.commands)

    def of_kind(self, kind: str) -> list:
        return [c for c in self.commands if c.kind == kind]

    def to_text(self) -> str:
        return "".join(c.to_line() + "\n" for c in self.commands)

    @classmethod
    def from_text(cls, text: str, pc: int = 0) -> "CommandStream":
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        return cls([Command.from_line(ln) for ln in lines], pc)

    def insert_refresh(self, index: int, t: TimingParams) -> "CommandStream":
        """Insert a REFRESH before command ``index`` and delay the rest by tRFC.

        ``index`` should point at the first ACT4 of a round.
        """
        at = self.commands[index].cycle if index < len(self.commands) else stream_cycles(self, t)
        head = self.commands[:index]
        tail = [Command(c.cycle + t.tRFC, c.kind, dict(c.args)) for c in self.commands[index:]]
        return CommandStream(head + [Command(at, REFRESH)] + tail, self.pc)


@dataclass
class Violation:
    index: int
    constraint: str
    required: int
    actual: int
    command: Command

    def __str__(self):
        return (f"{self.constraint} violated at command {self.index} ({self.command.to_line()[:60]}): "
                f"needs {self.required} cycles, got {self.actual}")


def validate_timing(stream: CommandStream, t: TimingParams = TimingParams()) -> list:
    """Every timing violation in ``stream``; an empty list means valid."""
    out = []
    last = {}
    last_comp_writes = False
    rows_open = False
    last_column = None
    refreshes = []
    prev_cycle = None
    for i, c in enumerate(stream.commands):
        def bad(name, need, got):
            out.append(Violation(i, name, need, got, c))

        if prev_cycle is not None and c.cycle < prev_cycle:
            bad("order", prev_cycle, c.cycle)
        prev_cycle = c.cycle
        if refreshes and c.cycle < refreshes[-1] + t.tRFC:
            bad("tRFC", t.tRFC, c.cycle - refreshes[-1])
        if c.kind in COLUMN_KINDS:
            if last_column is not None and c.cycle - last_column < t.tCCD_S:
                bad("tCCD_S", t.tCCD_S, c.cycle - last_column)
            last_column = c.cycle
        if c.kind == ACT4:
            if ACT4 in last and c.cycle - last[ACT4] < t.tFAW:
                bad("tFAW", t.tFAW, c.cycle - last[ACT4])
            if PRECHARGES in last and c.cycle - last[PRECHARGES] < t.tRP:
                bad("tRP", t.tRP, c.cycle - last[PRECHARGES])
            rows_open = True
        elif c.kind == COMP:
            if not rows_open:
                bad("row_closed", 0, 0)
            if COMP in last and c.cycle - last[COMP] < t.tCCD_L:
                bad("tCCD_L", t.tCCD_L, c.cycle - last[COMP])
            if ACT4 in last and c.cycle - last[ACT4] < t.tFAW:
                bad("act_window", t.tFAW, c.cycle - last[ACT4])
            last_comp_writes = c.args.get("mode", dev.STATE_UPDATE) == dev.STATE_UPDATE
        elif c.kind == RESULT_READ:
            if COMP in last:
                gap = c.cycle - last[COMP]
                if last_comp_writes and gap < t.tWR:
                    bad("tWR", t.tWR, gap)
                elif gap < t.tRTP_L:
                    bad("tRTP", t.tRTP_L, gap)
        elif c.kind == PRECHARGES:
            if ACT4 in last and c.cycle - last[ACT4] < t.tRAS:
                bad("tRAS", t.tRAS, c.cycle - last[ACT4])
            if COMP in last and last[COMP] > last.get(PRECHARGES, -1):
                gap = c.cycle - last[COMP]
                if last_comp_writes and gap < t.tWR:
                    bad("tWR", t.tWR, gap)
                elif gap < t.tRTP_L:
                    bad("tRTP", t.tRTP_L, gap)
            rows_open = False
        elif c.kind == REFRESH:
            if rows_open:
                bad("row_open", 0, 0)
            elif PRECHARGES in last and c.cycle - last[PRECHARGES] < t.tRP:
                bad("tRP", t.tRP, c.cycle - last[PRECHARGES])
            prev_ref = refreshes[-1] if refreshes else 0
            if c.cycle - prev_ref > t.tREFI:
                bad("tREFI", t.tREFI, c.cycle - prev_ref)
            refreshes.append(c.cycle)
        last[c.kind] = c.cycle
    if stream.commands:
        end = stream_cycles(stream, t)
        prev_ref = refreshes[-1] if refreshes else 0
        if end > t.tREFI and end - prev_ref > t.tREFI:
            out.append(Violation(len(stream.commands), "tREFI", t.tREFI, end - prev_ref, stream.commands[-1]))
    return out


def _occupancy(c: Command, t: TimingParams) -> int:
    return {PRECHARGES: t.tRP, REFRESH: t.tRFC, COMP: t.tCCD_L, ACT4: t.tFAW}.get(c.kind, t.tCCD_S)


def stream_cycles(stream: CommandStream, t: TimingParams = TimingParams()) -> int:
    """Cycle at which the last command's effect completes."""
    return max((c.cycle + _occupancy(c, t) for c in stream.commands), default=0)


# --------------------------------------------------------------------------- scheduling


@dataclass
class RoundPlan:
    """Work for one row-open round of one pseudo-channel."""

    act4: int
    reg_writes: int
    comps: int
    result_reads: int
    writes_state: bool = True
    row: int = 0
    payloads: list | None = None  # REG_WRITE args, one dict per command
    reg_bytes_per_bank: int = 0

    def __post_init__(self):
        if min(self.act4, self.reg_writes, self.comps, self.result_reads) < 0:
            raise ValueError("round counts must be nonnegative")
        if self.comps and not self.act4:
            raise ValueError("COMPs need at least one ACT4")
        if self.payloads is not None and len(self.payloads) != self.reg_writes:
            raise ValueError("one payload per REG_WRITE")


@dataclass
class WorkPlan:
    rounds: list
    mode: str = dev.STATE_UPDATE
    register_bytes: int = 2048
    pc: int = 0


@dataclass
class RoundTimes:
    act: list
    reg: list
    comp: list
    read: list
    pre: int
    next_start: int


def round_times(rp: RoundPlan, t: TimingParams, overlap: bool, start: int = 0) -> RoundTimes:
    """Issue cycles of every command of one round."""
    act = [start + i * t.tFAW for i in range(rp.act4)]
    act_end = start + rp.act4 * t.tFAW
    slots = rp.act4 * t.reg_slots_per_window if overlap else 0
    reg = [start + i * t.tCCD_S if i < slots else act_end + (i - slots) * t.tCCD_S for i in range(rp.reg_writes)]
    reg_end = reg[-1] + t.tCCD_S if reg else start
    comp_start = max(act_end, reg_end)
    comp = [comp_start + i * t.tCCD_L for i in range(rp.comps)]
    column_free = (comp[-1] + t.tCCD_S) if comp else reg_end
    if comp:
        rd_start = comp[-1] + (max(t.tWR, t.tRTP_L) if rp.writes_state else t.tRTP_L)
        pre_min = max(act[-1] + t.tRAS, rd_start)
    else:
        rd_start = max(column_free, act_end)
        pre_min = act[-1] + t.tRAS if act else start
    rd_start = max(rd_start, column_free)
    if overlap:
        read = [rd_start + i * t.tCCD_S for i in range(rp.result_reads)]
        pre = pre_min if act else None
    else:
        read = [rd_start + i * t.tCCD_S for i in range(rp.result_reads)]
        read_end = read[-1] + t.tCCD_S if read else rd_start
        pre = max(pre_min, read_end) if act else None
    read_end = read[-1] + t.tCCD_S if read else max(rd_start, column_free)
    if pre is None:
        nxt = read_end
    else:
        nxt = max(pre + t.tRP, read_end)
    return RoundTimes(act, reg, comp, read, pre, nxt)


def round_cycles(rp: RoundPlan, t: TimingParams, overlap: bool) -> int:
    return round_times(rp, t, overlap).next_start


def overlap_saving(rp: RoundPlan, t: TimingParams) -> int:
    """Closed-form cycles saved by overlap on one round with COMPs."""
    return (min(rp.reg_writes * t.tCCD_S, rp.act4 * t.reg_slots_per_window * t.tCCD_S)
            + min(rp.result_reads * t.tCCD_S, t.tRP))


def schedule(plan: WorkPlan, t: TimingParams = TimingParams(), overlap: bool = True, refresh: bool = True) -> CommandStream:
    """Emit a timing-clean command stream for ``plan``.

    A REFRESH is inserted between rounds whenever the next round would end
    more than tREFI after the previous refresh (the stream is assumed to
    start right after one).
    """
    cmds = []
    now, last_ref = 0, 0
    for rp in plan.rounds:
        if rp.reg_bytes_per_bank > plan.register_bytes:
            raise ValueError(f"round needs {rp.reg_bytes_per_bank} register bytes per bank, capacity {plan.register_bytes}")
        span = round_cycles(rp, t, overlap)
        if refresh and now + span > last_ref + t.tREFI:
            if span + t.tRFC > t.tREFI:
                raise ValueError(f"a {span}-cycle round cannot fit between refreshes")
            cmds.append(Command(now, REFRESH))
            last_ref = now
            now += t.tRFC
        rt = round_times(rp, t, overlap, now)
        cmds += [Command(c, ACT4, {"row": rp.row, "group": i}) for i, c in enumerate(rt.act)]
        for i, c in enumerate(rt.reg):
            cmds.append(Command(c, REG_WRITE, dict(rp.payloads[i]) if rp.payloads else {"n": i}))
        mode = plan.mode if (plan.mode == dev.STATE_UPDATE) == rp.writes_state else (
            dev.STATE_UPDATE if rp.writes_state else dev.ATTN_SCORE)
        cmds += [Command(c, COMP, {"mode": mode}) for c in rt.comp]
        cmds += [Command(c, RESULT_READ, {"n": i}) for i, c in enumerate(rt.read)]
        if rt.pre is not None:
            cmds.append(Command(rt.pre, PRECHARGES))
        now = rt.next_start
    # row and column commands interleave; stable sort keeps per-bus order
    order = {ACT4: 0, PRECHARGES: 0, REFRESH: 0, REG_WRITE: 1, COMP: 1, RESULT_READ: 1}
    cmds.sort(key=lambda c: (c.cycle, order[c.kind]))
    return CommandStream(cmds, plan.pc)


def plan_cycles(plan: WorkPlan, t: TimingParams = TimingParams(), overlap: bool = True, refresh: bool = True) -> int:
    """Total cycles of ``schedule(plan)`` without building the stream."""
    now, last_ref = 0, 0
    for rp in plan.rounds:
        span = round_cycles(rp, t, overlap)
        if refresh and now + span > last_ref + t.tREFI:
            last_ref = now
            now += t.tRFC
        now += span
    return now


# --------------------------------------------------------------------------- binding to the device


def _split(data: np.ndarray, size: int):
    return [data[i:i + size] for i in range(0, data.size, size)]


def device_plans(layout: dev.ChunkLayout, host: dev.HostPlan) -> list:
    """One :class:`WorkPlan` per pseudo-channel, with real REG_WRITE payloads."""
    plans = []
    writes = host.mode == dev.STATE_UPDATE
    for pc in range(layout.dram.pseudo_channels):
        rounds = []
        for rnd in range(layout.rows_used):
            banks = [b for b in range(layout.dram.banks_per_pc) if layout.unit_at(pc, b, rnd) is not None]
            if not banks:
                continue
            payloads, per_bank = [], {}
            for p, b, name, off, data in dev.register_payloads(layout, host, rnd):
                if p != pc:
                    continue
                per_bank[b] = per_bank.get(b, 0) + data.size
                for k, chunk in enumerate(_split(data, TRANSFER_BYTES)):
                    payloads.append({"bank": b, "reg": name, "off": off, "at": k * TRANSFER_BYTES, "data": chunk})
            words = dev.result_words(layout, host.mode, rnd)
            reads = sum(math.ceil(v / TRANSFER_BYTES) for (p, b), v in words.items() if p == pc)
            counts = layout.subchunk_counts(rnd)[pc:pc + 1]
            comps = dev.round_iterations(counts, writes)
            act4 = math.ceil((max(banks) + 1) / BANKS_PER_ACT4)
            rounds.append(RoundPlan(act4, len(payloads), comps, reads, writes, layout.row_base + rnd, payloads,
                                    max(per_bank.values(), default=0)))
        plans.append(WorkPlan(rounds, host.mode, layout.dram.register_bytes, pc))
    return plans


class TimingViolation(RuntimeError):
    def __init__(self, violation: Violation):
        super().__init__(str(violation))
        self.violation = violation


@dataclass
class RunResult:
    cycles: int
    outputs: np.ndarray
    iterations: int


def run(streams, device: dev.PimDevice, host: dev.HostPlan, t: TimingParams = TimingParams()) -> RunResult:
    """Drive ``device`` with one command stream per pseudo-channel.

    Streams are validated first; the first violation aborts the run. The
    result matches :func:`device.execute_comp` on the same inputs.
    """
    if isinstance(streams, CommandStream):
        streams = [streams]
    for s in streams:
        bad = validate_timing(s, t)
        if bad:
            raise TimingViolation(bad[0])
    device.configure(host)
    start = device.iterations
    bpa = BANKS_PER_ACT4
    for s in streams:
        pc = s.pc
        for c in s.commands:
            if c.kind == ACT4:
                row = c.args["row"]
                g = c.args["group"]
                banks = [b for b in range(g * bpa, (g + 1) * bpa)
                         if b < device.dram.banks_per_pc and device.layout.unit_at(pc, b, row - device.layout.row_base) is not None]
                device.activate_banks(pc, banks, row)
            elif c.kind == REG_WRITE:
                a = c.args
                device.reg_write(pc, a["bank"], a["reg"], a["off"], a["data"], a["at"])
            elif c.kind == COMP:
                device.comp(c.cycle, pc)
            elif c.kind == PRECHARGES:
                if device.round_busy(pc):
                    raise RuntimeError(f"PRECHARGES at cycle {c.cycle} while SPUs of pseudo-channel {pc} are still busy")
                device.precharge_all(pc)
    cycles = max((stream_cycles(s, t) for s in streams), default=0)
    return RunResult(cycles, device.outputs(), device.iterations - start)


def register_bytes(layout: dev.ChunkLayout, mode: str, pc: int, bank: int, rnd: int) -> list:
    """Sizes of the operand registers loaded for one bank in one round."""
    hit = layout.unit_at(pc, bank, rnd)
    if hit is None:
        return []
    _, c = hit
    first = c == 0
    cols = layout.chunk_columns(c)
    span = (cols[-1] // 16 - cols[0] // 16 + 1) * 16 * layout.element_bytes
    vec = layout.n_groups * 16 * layout.element_bytes
    if mode == dev.STATE_UPDATE:
        return ([vec] * 3 if first else []) + [span]
    if mode == dev.ATTN_SCORE:
        return [vec] if first else []
    return [span]


def analytic_plan(layout: dev.ChunkLayout, mode: str, pc: int = 0, comps=None) -> WorkPlan:
    """Command counts of :func:`device_plans` without building payloads.

    ``comps(counts)`` overrides the COMPs per round (used for the
    time-multiplexed baseline); it receives the (1, banks) sub-chunk counts.
    """
    writes = mode == dev.STATE_UPDATE
    rounds, memo = [], {}
    B = layout.dram.banks_per_pc
    for rnd in range(layout.rows_used):
        # a round is fully determined by which chunk each bank holds
        key = tuple(h and h[1] for h in (layout.unit_at(pc, b, rnd) for b in range(B)))
        if all(k is None for k in key):
            continue
        if key not in memo:
            banks = [b for b in range(B) if key[b] is not None]
            sizes = {b: register_bytes(layout, mode, pc, b, rnd) for b in banks}
            w = sum(math.ceil(n / TRANSFER_BYTES) for v in sizes.values() for n in v)
            words = dev.result_words(layout, mode, rnd, pcs=(pc,))
            scale = layout.element_bytes if mode == dev.ATTN_ATTEND else 1
            r = sum(math.ceil(v * scale / TRANSFER_BYTES) for v in words.values())
            counts = layout.subchunk_counts(rnd, pcs=(pc,))
            c = comps(counts) if comps is not None else dev.round_iterations(counts, writes)
            act4 = math.ceil((max(banks) + 1) / BANKS_PER_ACT4)
            memo[key] = (act4, w, c, r, max(sum(v) for v in sizes.values()))
        act4, w, c, r, reg = memo[key]
        rounds.append(RoundPlan(act4, w, c, r, writes, layout.row_base + rnd, None, reg))
    return WorkPlan(rounds, mode, layout.dram.register_bytes, pc)
