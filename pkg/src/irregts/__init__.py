"""ODE-RNN classifiers for irregularly sampled time series.

Recurrent cells (tanh, LSTM, GRU) with hand-written gradients, a learned
hidden-state ODE integrated by explicit Euler between observations, and
the training, evaluation and experiment tooling around them.
"""

from .data import Dataset, SynthSpec, TimeSeries, benchmark, generate, load_jsonl, save_jsonl, split
from .evaluation import accuracy, confusion, macro_f1, run_eval, sweep
from .model import ModelConfig, SequenceEncoder, encode, load_checkpoint, predict, preset, save_checkpoint
from .node import DynamicsNet, SolveConfig, euler_solve, ode_gradients
from .train import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "Dataset", "SynthSpec", "TimeSeries", "benchmark", "generate", "load_jsonl", "save_jsonl", "split",
    "accuracy", "confusion", "macro_f1", "run_eval", "sweep",
    "ModelConfig", "SequenceEncoder", "encode", "load_checkpoint", "predict", "preset", "save_checkpoint",
    "DynamicsNet", "SolveConfig", "euler_solve", "ode_gradients",
    "TrainConfig", "fit",
]
