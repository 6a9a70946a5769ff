"""Command-line entry point: ``statepim {drift,simulate,sweep}``.

Every subcommand reads one YAML file (``--config``) and writes CSV/JSON
files into ``--out``; the files written are listed on standard output.
Exit codes: 0 ok, 2 configuration error, 3 timing violation, 4 mismatch
against the golden model. CSV files start with a ``# generated ...`` line
and JSON files carry a ``generated`` key unless ``--no-timestamp`` is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import accuracy as acc
from . import commands as cmd
from . import device as dev
from . import formats as fm
from . import system as sm
from .rounding import NEAREST_EVEN, RoundingMode
from .state_update import (
    KVCache, MXKVCache, MXState, StateUpdateInputs, attention_attend_mx, attention_score_mx, softmax,
    state_update_step_mx,
)

EXIT_OK, EXIT_CONFIG, EXIT_TIMING, EXIT_MISMATCH = 0, 2, 3, 4
DEFAULT_SEED = 0
INJECTABLE = ("tCCD_L", "tFAW", "tWR")


class ConfigError(Exception):
    pass


class TimingFailure(Exception):
    pass


class MismatchFailure(Exception):
    pass


@dataclass
class RunConfig:
    subcommand: str
    config: Path
    out: Path
    seed: int | None = None
    overlap: bool | None = None
    system: str | None = None
    timestamp: bool = True
    dry_run: bool = False


# ---- config helpers


def load_config(path: Path) -> dict:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {str(e).splitlines()[0]}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _take(section: dict, allowed, where: str) -> dict:
    section = section or {}
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(map(str, unknown))}")
    return section


def _coerce(cls, kwargs: dict, where: str) -> dict:
    """Accept numbers YAML leaves as strings, such as ``80.0e9``."""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = dict(kwargs)
    for k, v in kwargs.items():
        kind = {"float": float, "int": int}.get(str(types.get(k)))
        if kind is not None and isinstance(v, str):
            try:
                out[k] = kind(float(v))
            except ValueError:
                raise ConfigError(f"{where}.{k}: expected a number, got {v!r}") from None
    return out


def _build(cls, section: dict, where: str):
    fields = [f.name for f in dataclasses.fields(cls) if f.init]
    kwargs = _coerce(cls, _take(section, fields, where), where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


class _Writer:
    def __init__(self, rc: RunConfig):
        self.out = rc.out
        self.stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds") if rc.timestamp else None
        self.written: list[Path] = []

    def text(self, name: str, body: str, csv_header: bool = True):
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        if self.stamp and csv_header:
            body = f"# generated {self.stamp}\n" + body
        path.write_text(body)
        self.written.append(path)

    def json(self, name: str, obj: dict):
        if self.stamp:
            obj = {"generated": self.stamp, **obj}
        self.text(name, json.dumps(obj, indent=2) + "\n", csv_header=False)


# ---- drift


def _drift_setup(cfg: dict, rc: RunConfig):
    cfg = _take(cfg, ("experiment", "formats", "roundings", "seeds"), "drift config")
    exp_cfg = dict(cfg.get("experiment") or {})
    if "decay_range" in exp_cfg:
        exp_cfg["decay_range"] = tuple(exp_cfg["decay_range"])
    exp = _build(acc.DriftExperiment, exp_cfg, "experiment")
    formats = cfg.get("formats", [exp.fmt])
    formats = list(fm.FORMATS) if formats == "all" else formats
    roundings = cfg.get("roundings", [exp.rounding])
    roundings = list(acc.ROUNDINGS) if roundings == "all" else roundings
    if isinstance(formats, str):
        formats = [formats]
    if isinstance(roundings, str):
        roundings = [roundings]
    for f in formats:
        if f not in fm.FORMATS:
            raise ConfigError(f"unknown format {f!r}; expected one of {', '.join(fm.FORMATS)}")
    for r in roundings:
        if r not in acc.ROUNDINGS:
            raise ConfigError(f"unknown rounding {r!r}; expected one of {', '.join(acc.ROUNDINGS)}")
    seed = rc.seed if rc.seed is not None else exp.seed
    exp = dataclasses.replace(exp, seed=seed)
    return exp, formats, roundings


def cmd_drift(rc: RunConfig, cfg: dict) -> int:
    exp, formats, roundings = _drift_setup(cfg, rc)
    variants = [(f, r) for f in formats for r in roundings]
    files = [f"drift_{f}.csv" for f in formats] + (["pareto.csv"] if len(formats) > 1 else []) + ["summary.json"]
    if rc.dry_run:
        print(f"drift: {len(formats)} format(s) x {len(roundings)} rounding(s), {exp.steps} steps, "
              f"dims {exp.dim_head}x{exp.dim_state}, seed {exp.seed}")
        for name in files:
            print(f"would write {rc.out / name}")
        return EXIT_OK
    results = acc.run_grid(exp, variants)
    w = _Writer(rc)
    for f in formats:
        w.text(f"drift_{f}.csv", acc.series_to_csv([results[(f, r)].seed(0) for r in roundings]))
    rows = acc.format_pareto_report(exp, formats, roundings, results)
    if len(formats) > 1:
        w.text("pareto.csv", acc.pareto_to_csv(rows))
    w.json("summary.json", {
        "experiment": dataclasses.asdict(exp),
        "final": [{k: row[k] for k in ("format", "rounding", "final_error", "output_error", "saturated")} for row in rows],
    })
    for row in rows:
        print(f"{row['format']:>10} {row['rounding']:>12}  final frobenius error {row['final_error']:.4g}")
    for p in w.written:
        print(p)
    return EXIT_OK


# ---- simulate

SIM_KEYS = ("workload", "dram", "timing", "overlap", "inject_violation", "inject_fault")
WORKLOAD_KEYS = ("mode", "dim_head", "n_columns", "n_units", "steps", "rounding", "shared")


@dataclass
class SimWorkload:
    mode: str = dev.STATE_UPDATE
    dim_head: int = 32
    n_columns: int = 16
    n_units: int = 4
    steps: int = 1
    rounding: str = "stochastic"
    shared: bool = True

    def __post_init__(self):
        if self.mode not in dev.MODES:
            raise ValueError(f"mode must be one of {', '.join(dev.MODES)}")
        if min(self.dim_head, self.n_columns, self.n_units, self.steps) <= 0:
            raise ValueError("dim_head, n_columns, n_units and steps must be positive")
        if self.rounding not in acc.ROUNDINGS:
            raise ValueError(f"rounding must be one of {', '.join(acc.ROUNDINGS)}")


def _sim_setup(cfg: dict, rc: RunConfig):
    cfg = _take(cfg, SIM_KEYS, "simulate config")
    wl = _build(SimWorkload, cfg.get("workload"), "workload")
    dram_cfg = {"pseudo_channels": 2, **(cfg.get("dram") or {})}
    dram = _build(dev.DramConfig, dram_cfg, "dram")
    timing = _build(cmd.TimingParams, cfg.get("timing"), "timing")
    overlap = cfg.get("overlap", True) if rc.overlap is None else rc.overlap
    if isinstance(overlap, str):
        overlap = overlap == "on"
    inject = cfg.get("inject_violation")
    if inject is not None and inject not in INJECTABLE:
        raise ConfigError(f"inject_violation must be one of {', '.join(INJECTABLE)}")
    try:
        layout = dev.ChunkLayout(dram, wl.dim_head, wl.n_columns, wl.n_units)
    except ValueError as e:
        raise ConfigError(f"workload does not fit: {e}") from None
    seed = DEFAULT_SEED if rc.seed is None else rc.seed
    return wl, layout, timing, bool(overlap), inject, bool(cfg.get("inject_fault", False)), seed


def _inject(stream: cmd.CommandStream, what: str, t: cmd.TimingParams) -> cmd.CommandStream:
    """Move one command so that exactly one ``what`` constraint breaks."""
    cs = [dataclasses.replace(c) for c in stream.commands]
    idx = {k: [i for i, c in enumerate(cs) if c.kind == k] for k in (cmd.ACT4, cmd.COMP, cmd.RESULT_READ)}
    if what == "tCCD_L" and len(idx[cmd.COMP]) >= 2:
        a, b = idx[cmd.COMP][:2]
        cs[b].cycle = cs[a].cycle + t.tCCD_L - 1
    elif what == "tFAW" and len(idx[cmd.ACT4]) >= 2:
        a, b = idx[cmd.ACT4][:2]
        cs[b].cycle = cs[a].cycle + t.tFAW - 1
    elif what == "tWR" and idx[cmd.RESULT_READ]:
        r = idx[cmd.RESULT_READ][0]
        last = max(i for i in idx[cmd.COMP] if i < r)
        cs[r].cycle = cs[last].cycle + 5
    else:
        raise ConfigError(f"the workload has no command pattern to inject a {what} violation into")
    return cmd.CommandStream(cs, stream.pc)


def _sim_data(wl: SimWorkload, rng: np.random.Generator):
    dh, n, U = wl.dim_head, wl.n_columns, wl.n_units
    if wl.mode == dev.STATE_UPDATE:
        states = [MXState.from_dense(rng.standard_normal((dh, n))) for _ in range(U)]
        steps = [[StateUpdateInputs(rng.uniform(0.5, 1.0, dh), rng.standard_normal(dh), rng.standard_normal(dh),
                                    rng.standard_normal(n)) for _ in range(U)] for _ in range(wl.steps)]
        return states, steps
    caches = [MXKVCache.from_cache(KVCache(rng.standard_normal((n, dh)), rng.standard_normal((n, dh)))) for _ in range(U)]
    if wl.mode == dev.ATTN_SCORE:
        steps = [[rng.standard_normal(dh) for _ in range(U)] for _ in range(wl.steps)]
    else:
        steps = [[softmax(rng.standard_normal(n)) for _ in range(U)] for _ in range(wl.steps)]
    return caches, steps


def cmd_simulate(rc: RunConfig, cfg: dict) -> int:
    wl, layout, t, overlap, inject, fault, seed = _sim_setup(cfg, rc)
    if rc.dry_run:
        print(f"simulate: {wl.mode}, {wl.n_units} unit(s) of {wl.dim_head}x{wl.n_columns}, {wl.steps} step(s), "
              f"{layout.dram.pseudo_channels} pseudo-channel(s), {layout.rows_used} row(s) per bank, "
              f"overlap {'on' if overlap else 'off'}, seed {seed}")
        print(f"would write {rc.out / 'report.json'}, {rc.out / 'trace.csv'} and per-channel command files")
        return EXIT_OK
    rng = np.random.default_rng(seed)
    data, steps = _sim_data(wl, rng)
    device = dev.PimDevice(layout, shared=wl.shared, trace=True)
    for u in range(wl.n_units):
        if wl.mode == dev.STATE_UPDATE:
            device.store_state(u, data[u])
        else:
            device.store(u, data[u].K if wl.mode == dev.ATTN_SCORE else data[u].V)
    if fault:
        # doubling one stored group changes every result that reads it
        g = device.fetch(0)
        g.exponent[0, 0] += 1
        device.store(0, g)

    lfsr = 1 + seed % 0xFFFF
    rm_dev = RoundingMode(wl.rounding, lfsr)
    rm_gold = RoundingMode(wl.rounding, lfsr)
    w = _Writer(rc)
    cycles = {"overlap": 0, "serial": 0}
    iterations, mismatches, golden = 0, 0, list(data)
    for s, inputs in enumerate(steps):
        host = dev.host_prepare(layout, inputs, wl.mode, rm_dev)
        plans = cmd.device_plans(layout, host)
        streams = [cmd.schedule(p, t, overlap) for p in plans]
        cycles["overlap"] += max(cmd.plan_cycles(p, t, True) for p in plans)
        cycles["serial"] += max(cmd.plan_cycles(p, t, False) for p in plans)
        if inject and s == 0:
            streams[0] = _inject(streams[0], inject, t)
        if s == 0:
            for st in streams:
                w.text(f"commands/pc{st.pc:03d}.txt", st.to_text(), csv_header=False)
        try:
            res = cmd.run(streams, device, host, t)
        except cmd.TimingViolation as e:
            w.json("report.json", {"verdict": "TIMING_VIOLATION", "violation": str(e)})
            raise TimingFailure(f"timing violation on pseudo-channel {streams[0].pc}: {e}") from None
        iterations += res.iterations
        for u in range(wl.n_units):
            if wl.mode == dev.STATE_UPDATE:
                golden[u], y = state_update_step_mx(golden[u], inputs[u], rm_gold)
                ok = golden[u].equals(device.fetch_state(u)) and np.array_equal(y, res.outputs[u])
            elif wl.mode == dev.ATTN_SCORE:
                ok = np.array_equal(attention_score_mx(inputs[u], data[u], rm_gold), res.outputs[u])
            else:
                ok = np.array_equal(attention_attend_mx(inputs[u], data[u], rm_gold), res.outputs[u])
            mismatches += not ok
    verdict = "PASS" if mismatches == 0 else "FAIL"
    hazards = dev.audit_hazards(device.events)
    w.text("trace.csv", dev.events_to_csv(device.events))
    w.json("report.json", {
        "mode": wl.mode, "units": wl.n_units, "steps": wl.steps, "seed": seed,
        "overlap": overlap, "cycles": cycles["overlap"] if overlap else cycles["serial"],
        "cycles_overlap": cycles["overlap"], "cycles_serial": cycles["serial"],
        "comp_iterations": iterations, "hazards": len(hazards),
        "golden_mismatches": mismatches, "verdict": verdict,
    })
    print(f"cycles overlap={cycles['overlap']} serial={cycles['serial']} iterations={iterations} verdict={verdict}")
    for p in w.written:
        print(p)
    if mismatches:
        raise MismatchFailure(f"{mismatches} unit result(s) differ from the golden model")
    return EXIT_OK


# ---- sweep

SWEEP_KEYS = ("grid", "models", "system")


def _sweep_setup(cfg: dict, rc: RunConfig):
    cfg = _take(cfg, SWEEP_KEYS, "sweep config")
    grid = _take(cfg.get("grid"), ("model", "system", "batch", "in_len", "out_len"), "grid")
    grid = {k: (v if isinstance(v, list) else [v]) for k, v in grid.items()}
    if rc.system:
        grid["system"] = [rc.system]
    for s in grid.get("system", []):
        if s not in sm.SYSTEM_KINDS:
            raise ConfigError(f"unknown system {s!r}; expected one of {', '.join(sm.SYSTEM_KINDS)}")
    models = {}
    for name, spec in (cfg.get("models") or {}).items():
        spec = dict(spec or {})
        base = spec.pop("base", None)
        if base is not None:
            if base not in sm.PRESETS:
                raise ConfigError(f"models.{name}: unknown base {base!r}")
            spec = _coerce(sm.ModelConfig, spec, f"models.{name}")
            scale_to = spec.pop("params_total", None)
            m = sm.PRESETS[base]
            if scale_to is not None:
                m = sm.scale_model(m, float(scale_to))
            try:
                models[name] = dataclasses.replace(m, name=name, **spec)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"models.{name}: {e}") from None
        else:
            models[name] = _build(sm.ModelConfig, {"name": name, **spec}, f"models.{name}")
    for m in grid.get("model", []):
        if m not in models and m not in sm.PRESETS:
            raise ConfigError(f"unknown model {m!r}; presets are {', '.join(sm.PRESETS)}")
    sys_cfg = dict(cfg.get("system") or {})
    if rc.overlap is not None:
        sys_cfg["overlap"] = rc.overlap
    sys_cfg = _coerce(sm.SystemConfig, _take(sys_cfg, [f.name for f in dataclasses.fields(sm.SystemConfig)], "system"), "system")
    for key, cls in (("dram", dev.DramConfig), ("timing", cmd.TimingParams), ("energy", sm.EnergyCoefficients)):
        if key in sys_cfg:
            sys_cfg[key] = _build(cls, sys_cfg[key], f"system.{key}")
    try:
        system = sm.SystemConfig(**sys_cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"system: {e}") from None
    return grid, models, system


def breakdown_to_csv(rows) -> str:
    """Per-point share of each latency class (what a stacked-bar chart needs)."""
    lines = ["model,system,batch,in_len,out_len,projections_ffn,state_update,attention,other"]
    for r in rows:
        if r["error"]:
            continue
        parts = [r[k] / r["total_s"] for k in ("projections_ffn_s", "state_update_s", "attention_s", "other_s")]
        lines.append(",".join([str(r[k]) for k in ("model", "system", "batch", "in_len", "out_len")] + [f"{p:.6f}" for p in parts]))
    return "\n".join(lines) + "\n"


def cmd_sweep(rc: RunConfig, cfg: dict) -> int:
    grid, models, system = _sweep_setup(cfg, rc)
    n = int(np.prod([len(v) for v in grid.values()])) if grid else 1
    if rc.dry_run:
        print(f"sweep: {n} point(s) over {', '.join(f'{k}={v}' for k, v in grid.items()) or 'defaults'}")
        print(f"would write {rc.out / 'results.csv'}, {rc.out / 'results.json'} and {rc.out / 'breakdown.csv'}")
        return EXIT_OK
    rows = sm.sweep(grid, system, models)
    w = _Writer(rc)
    w.text("results.csv", sm.rows_to_csv(rows))
    w.json("results.json", {"rows": json.loads(sm.rows_to_json(rows))})
    w.text("breakdown.csv", breakdown_to_csv(rows))
    failed = sum(1 for r in rows if r["error"])
    print(f"{len(rows)} point(s), {failed} failed")
    for p in w.written:
        print(p)
    return EXIT_OK


# ---- entry point

COMMANDS = {"drift": cmd_drift, "simulate": cmd_simulate, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="statepim", description="MX8 state-update PIM simulator and experiments")
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name, help_ in (("drift", "quantization drift of long state-update trajectories"),
                        ("simulate", "schedule, validate and run a PIM workload against the golden model"),
                        ("sweep", "end-to-end latency, throughput and energy over a configuration grid")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, type=Path, help="YAML configuration file")
        s.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
        s.add_argument("--seed", type=int, default=None, help=f"random seed (default: config value or {DEFAULT_SEED})")
        s.add_argument("--overlap", choices=("on", "off"), default=None, help="overlap command phases (default: on)")
        s.add_argument("--system", choices=sm.SYSTEM_KINDS, default=None, help="restrict a sweep to one system")
        s.add_argument("--no-timestamp", action="store_true", help="omit the generation timestamp from outputs")
        s.add_argument("--dry-run", action="store_true", help="validate the configuration and print the plan")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    rc = RunConfig(
        args.subcommand, args.config, args.out, args.seed,
        None if args.overlap is None else args.overlap == "on",
        args.system, not args.no_timestamp, args.dry_run,
    )
    try:
        return COMMANDS[rc.subcommand](rc, load_config(rc.config))
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TimingFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_TIMING
    except MismatchFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
