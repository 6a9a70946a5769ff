"""MX8 state-update arithmetic, a pipelined near-bank PIM model and its experiments."""

from .rounding import RoundingMode, stochastic_round
from .mx import MXGroup, dequantize_mx, mx_add, mx_dot, mx_multiply, quantize_mx
from .formats import dequantize_format, fake_quantize, quantize_format
from .state_update import MXState, StateUpdateInputs, state_update_step_mx, state_update_step_ref
from .device import ChunkLayout, DramConfig, PimDevice, execute_comp
from .commands import TimingParams, schedule, validate_timing
from .system import ModelConfig, SystemConfig, estimate_energy, estimate_generation, roofline, sweep
from .accuracy import DriftExperiment, format_pareto_report, run_drift
from .estimators import FormatQuantizer, MXQuantizer

__version__ = "0.1.0"
