"""Online continual learning under label delay."""

from delaystream.buffer import MemoryBuffer, MemoryEntry, cosine, iwms_select
from delaystream.methods import MethodSpec, run_method
from delaystream.metrics import RunTrace, backward_transfer, compute_gap, compute_recovery
from delaystream.model import BudgetLedger, BudgetExceeded, Classifier, ModelConfig, OptimizerState
from delaystream.stream import GeneratorSpec, StreamConfig, open_stream

__version__ = "0.1.0"

__all__ = [
    "BudgetExceeded",
    "BudgetLedger",
    "Classifier",
    "GeneratorSpec",
    "MemoryBuffer",
    "MemoryEntry",
    "MethodSpec",
    "ModelConfig",
    "OptimizerState",
    "RunTrace",
    "StreamConfig",
    "backward_transfer",
    "compute_gap",
    "compute_recovery",
    "cosine",
    "iwms_select",
    "open_stream",
    "run_method",
]
