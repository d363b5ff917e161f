"""Per-step update policies under a fixed backward-pass budget.

Each stream step follows the same order: reveal the unlabeled batch, predict
it, take in the labels that arrive this step, score the predictions, then let
the method spend its budget. Training batches are assembled from three kinds
of components, each ``n`` samples:

``N``  the newest labeled batch (origin ``t - d``)
``R``  uniform draws from memory
``W``  importance-weighted draws from memory matched to the newest unlabeled batch
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from delaystream._seeding import component_rng
from delaystream.buffer import MODES, MemoryBuffer, draw_rows_round_robin
from delaystream.metrics import RunTrace, backward_transfer, update_online_accuracy
from delaystream.model import (
    BudgetLedger,
    Classifier,
    ModelConfig,
    OptimizerState,
    cross_entropy_backward,
    momentum_clone_update,
    predict,
    sgd_step,
    tta_adapt_clone,
)
from delaystream.stream import StreamHandle

VARIANTS = ("naive", "iwms", "pseudo_label", "tta")
COMPONENTS = ("N", "R", "W")
DEFAULT_COMPOSITION = {
    "naive": ("N", "R"),
    "iwms": ("W", "R"),
    "pseudo_label": ("R",),
    "tta": ("N", "R"),
}


@dataclass(frozen=True)
class MethodSpec:
    variant: str = "naive"
    budget: int = 1
    composition: tuple[str, ...] | None = None
    iwms_mode: str = "two_stage"
    lam: float = 0.99
    eps: float = 0.001
    name: str | None = None

    def __post_init__(self):
        if self.composition is not None:
            object.__setattr__(self, "composition", tuple(self.composition))

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant: expected one of {VARIANTS}, got {self.variant!r}")
        if self.budget < 1:
            raise ValueError("budget: must be >= 1")
        comp = self.batch_composition
        if not comp or any(c not in COMPONENTS for c in comp):
            raise ValueError(f"composition: entries must be drawn from {COMPONENTS}, got {comp}")
        if self.variant == "pseudo_label" and comp != ("R",):
            raise ValueError("composition: pseudo_label always trains on a random memory batch")
        if self.iwms_mode not in MODES:
            raise ValueError(f"iwms_mode: expected one of {MODES}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam: must lie in [0, 1]")
        if self.eps < 0:
            raise ValueError("eps: must be >= 0")

    @property
    def batch_composition(self) -> tuple[str, ...]:
        return self.composition if self.composition is not None else DEFAULT_COMPOSITION[self.variant]

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        label = self.variant
        if self.composition is not None and self.composition != DEFAULT_COMPOSITION[self.variant]:
            label += "[" + ",".join(self.composition) + "]"
        if "W" in self.batch_composition and self.iwms_mode != "two_stage":
            label += f"({self.iwms_mode})"
        return label


@dataclass
class LabeledBatch:
    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray


@dataclass
class StepContext:
    step: int
    newest_labeled: LabeledBatch | None
    unlabeled: np.ndarray
    predicted: np.ndarray
    query_features: np.ndarray
    buffer: MemoryBuffer
    classifier: Classifier
    optimizer: OptimizerState
    ledger: BudgetLedger
    rng: np.random.Generator
    spec: MethodSpec
    surrogate: Classifier | None = None
    next_predictor: Classifier | None = None
    audit: Callable[[int, np.ndarray], None] | None = None
    _iwms_weights: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.unlabeled)


def _component(ctx: StepContext, code: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    buf = ctx.buffer
    if code == "N":
        b = ctx.newest_labeled
        return b.ids, b.features, b.labels
    if code == "R":
        pos = buf.random_positions(ctx.n, ctx.rng)
    else:
        pos = _draw_weighted(ctx)
    X, y = buf.gather(pos)
    return buf.ids[pos], X, y


def _draw_weighted(ctx: StepContext) -> np.ndarray:
    # the buffer does not change within a step, so the weights are reused
    if ctx._iwms_weights is None:
        ctx._iwms_weights = np.cumsum(
            ctx.buffer.iwms_weights(ctx.query_features, ctx.predicted, ctx.spec.iwms_mode), axis=1
        )
    return draw_rows_round_robin(ctx._iwms_weights, ctx.n, ctx.rng)


def _train(ctx: StepContext, X: np.ndarray, y: np.ndarray, units: int) -> float:
    loss, grads = cross_entropy_backward(ctx.classifier, X, y, ctx.ledger, units=units)
    sgd_step(ctx.optimizer, ctx.classifier.params, grads)
    return loss


def _replay_update(ctx: StepContext, composition: tuple[str, ...]) -> float:
    parts = [_component(ctx, c) for c in composition]
    ids = np.concatenate([p[0] for p in parts])
    if ctx.audit is not None:
        ctx.audit(ctx.step, ids)
    X = np.concatenate([p[1] for p in parts])
    y = np.concatenate([p[2] for p in parts])
    return _train(ctx, X, y, units=1)


def step_naive(ctx: StepContext) -> None:
    """Spend the whole budget on replay updates, resampling memory each time."""
    if ctx.newest_labeled is None:
        return
    while ctx.ledger.remaining >= 1:
        _replay_update(ctx, ctx.spec.batch_composition)


def step_iwms(ctx: StepContext) -> None:
    """Same schedule as Naive; the default composition swaps N for W."""
    step_naive(ctx)


def step_pseudo_label(ctx: StepContext) -> None:
    if ctx.newest_labeled is None:
        return
    if ctx.surrogate is None:
        raise RuntimeError("pseudo-labeling needs a surrogate model")
    pseudo, _, _ = predict(ctx.surrogate, ctx.unlabeled)
    while ctx.ledger.remaining >= 2:
        ids, Xm, ym = _component(ctx, "R")
        if ctx.audit is not None:
            ctx.audit(ctx.step, ids)
        _train(ctx, np.concatenate([Xm, ctx.unlabeled]), np.concatenate([ym, pseudo]), units=2)
    if ctx.ledger.remaining == 1:
        _replay_update(ctx, ("R",))
    ctx.surrogate.params = momentum_clone_update(ctx.surrogate.params, ctx.classifier.params, ctx.spec.lam)


def step_tta(ctx: StepContext) -> None:
    """``C - 1`` replay updates, then an entropy step on a clone used for the next prediction."""
    if ctx.newest_labeled is None:
        return
    while ctx.ledger.remaining >= 2:
        _replay_update(ctx, ctx.spec.batch_composition)
    ctx.next_predictor = tta_adapt_clone(ctx.classifier, ctx.unlabeled, ctx.spec.eps, ctx.ledger)


STEPS = {
    "naive": step_naive,
    "iwms": step_iwms,
    "pseudo_label": step_pseudo_label,
    "tta": step_tta,
}


@dataclass
class RunResult:
    trace: RunTrace
    classifier: Classifier
    buffer: MemoryBuffer
    ledger_usage: list[int]
    charges: list[list[tuple[str, int]]]
    predictions: list[np.ndarray]


def run_method(
    stream: StreamHandle,
    spec: MethodSpec,
    model_config: ModelConfig = ModelConfig(),
    buffer_capacity: int = 4096,
    audit: Callable[[int, np.ndarray], None] | None = None,
) -> RunResult:
    """Run one method over the stream and return its trace and final state.

    ``audit``, if given, is called with ``(step, sample_ids)`` for every
    supervised training batch; tests use it to check label causality.
    """
    spec.validate()
    model_config.validate()
    seed = stream.config.seed
    clf = Classifier.initialize(
        model_config.arch, stream.dim, stream.num_classes, component_rng(seed, "model"), model_config.hidden
    )
    opt = OptimizerState.from_config(model_config)
    buffer = MemoryBuffer(buffer_capacity)
    rng = component_rng(seed, "sampler")
    surrogate = clf.clone() if spec.variant == "pseudo_label" else None
    step_fn = STEPS[spec.variant]
    trace = RunTrace(d=stream.d, C=spec.budget, method=spec.label, seed=seed)
    pending: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    predictor: Classifier | None = None
    usage: list[int] = []
    charges: list[list[tuple[str, int]]] = []
    predictions: list[np.ndarray] = []

    for t in range(1, stream.horizon + 1):
        batch = stream.reveal(t)
        predicted, _, feats = predict(predictor or clf, batch.features)
        predictor = None
        predictions.append(predicted)
        pending[t] = (batch.ids, batch.features, feats)

        newest = None
        arrived = stream.delayed_labels(t)
        if arrived is not None:
            ids, X, cached = pending.pop(arrived.origin_step)
            buffer.insert_batch(ids, X, arrived.labels, cached, t)
            newest = LabeledBatch(ids, X, arrived.labels)

        truth = stream.evaluation_labels(t)
        update_online_accuracy(trace, t, int((predicted == truth).sum()), len(truth))

        ctx = StepContext(
            step=t,
            newest_labeled=newest,
            unlabeled=batch.features,
            predicted=predicted,
            query_features=feats,
            buffer=buffer,
            classifier=clf,
            optimizer=opt,
            ledger=BudgetLedger(spec.budget),
            rng=rng,
            spec=spec,
            surrogate=surrogate,
            audit=audit,
        )
        step_fn(ctx)
        predictor = ctx.next_predictor
        usage.append(ctx.ledger.used_this_step)
        charges.append(list(ctx.ledger.charges))

    if len(stream.validation):
        trace.backward_transfer = backward_transfer(clf, stream.validation)
    return RunResult(trace, clf, buffer, usage, charges, predictions)
