"""Online accuracy, delay gap, recovery and backward transfer.

All accuracies are fractions in [0, 1]. Percentages only appear in rendered
reports.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from delaystream.model import Classifier, predict


@dataclass(frozen=True)
class StepRecord:
    t: int
    correct: int
    total: int
    online_accuracy: float

    @property
    def batch_accuracy(self) -> float:
        return self.correct / self.total


@dataclass
class RunTrace:
    """Per-step prequential accuracy of one run.

    ``online_accuracy`` at step t is the cumulative ratio of correct
    predictions over all samples seen up to and including t.
    """

    d: int = 0
    C: int = 1
    method: str = ""
    seed: int = 0
    per_step: list[StepRecord] = field(default_factory=list)
    backward_transfer: float | None = None
    _correct: int = 0
    _total: int = 0

    @property
    def final_online_accuracy(self) -> float:
        if not self.per_step:
            raise ValueError("empty trace")
        return self.per_step[-1].online_accuracy

    def online_accuracies(self) -> np.ndarray:
        return np.array([r.online_accuracy for r in self.per_step])

    def summary(self) -> dict:
        return {
            "d": self.d,
            "C": self.C,
            "method": self.method,
            "seed": self.seed,
            "final_online_acc": self.final_online_accuracy,
            "backward_transfer": self.backward_transfer,
        }


def update_online_accuracy(trace: RunTrace, t: int, correct: int, total: int) -> RunTrace:
    if trace.per_step and t <= trace.per_step[-1].t:
        raise ValueError(f"steps must increase strictly: {t} after {trace.per_step[-1].t}")
    if total < 1 or not 0 <= correct <= total:
        raise ValueError(f"invalid counts correct={correct}, total={total}")
    trace._correct += int(correct)
    trace._total += int(total)
    trace.per_step.append(StepRecord(int(t), int(correct), int(total), trace._correct / trace._total))
    return trace


def per_batch_accuracy_trace(trace: RunTrace) -> list[tuple[int, float]]:
    return [(r.t, r.batch_accuracy) for r in trace.per_step]


def _check_fraction(name: str, value: float, low: float = 0.0) -> None:
    if not low <= value <= 1.0:
        raise ValueError(f"{name} must be a fraction in [{low:g}, 1], got {value}")


def compute_gap(acc_naive_d: float, acc_naive_0: float) -> float:
    """Accuracy lost to delay; negative when delay hurts. Inputs are fractions, not percentages."""
    _check_fraction("acc_naive_d", acc_naive_d)
    _check_fraction("acc_naive_0", acc_naive_0)
    return acc_naive_d - acc_naive_0


def compute_recovery(acc_method_d: float, acc_naive_d: float, gap: float) -> float | None:
    """Fraction of ``|gap|`` a method wins back over delayed Naive; ``None`` if the gap is zero."""
    _check_fraction("acc_method_d", acc_method_d)
    _check_fraction("acc_naive_d", acc_naive_d)
    _check_fraction("gap", gap, low=-1.0)
    if gap == 0:
        return None
    return (acc_method_d - acc_naive_d) / abs(gap)


def backward_transfer(clf: Classifier, validation) -> float:
    """Top-1 accuracy of ``clf`` on the held-out, time-ordered validation set."""
    if len(validation.labels) == 0:
        raise ValueError("validation set is empty")
    labels, _, _ = predict(clf, validation.features)
    return float((labels == validation.labels).mean())


# -- export -----------------------------------------------------------------


def trace_csv(trace: RunTrace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "correct", "total", "online_acc", "batch_acc"])
    for r in trace.per_step:
        writer.writerow([r.t, r.correct, r.total, repr(r.online_accuracy), repr(r.batch_accuracy)])
    return buf.getvalue()


def write_trace(trace: RunTrace, path: str | Path) -> None:
    Path(path).write_text(trace_csv(trace), encoding="utf-8")


def read_trace(path: str | Path) -> RunTrace:
    trace = RunTrace()
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            update_online_accuracy(trace, int(row["t"]), int(row["correct"]), int(row["total"]))
    return trace


def write_summary(summary: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
