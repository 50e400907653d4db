"""Neuron linear transformation for few-shot crowd-counting adaptation."""

from .core import ShiftBank, apply_nlt, count_shift_params, init_shift_bank
from .counter import CounterNet, build_counter, forward
from .training import Regime, TrainConfig, run_regime

__version__ = "0.1.0"

__all__ = [
    "CounterNet",
    "Regime",
    "ShiftBank",
    "TrainConfig",
    "apply_nlt",
    "build_counter",
    "count_shift_params",
    "forward",
    "init_shift_bank",
    "run_regime",
]
