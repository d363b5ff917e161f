"""Delayed data stream: unlabeled batches now, their labels ``d`` steps later.

A :class:`StreamHandle` materializes the whole sample sequence when it is
opened, so two handles built from equal configs replay identical data. The
consumer API (:meth:`StreamHandle.reveal` and :meth:`StreamHandle.delayed_labels`)
never exposes the label of a sample before its delay has elapsed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from delaystream._seeding import component_rng

VARIANTS = ("rotating_gaussians", "abrupt_shift", "label_burst", "file")


class StreamConfigError(ValueError):
    pass


class StreamFileError(ValueError):
    """Raised for unreadable or ill-formed stream CSV files."""


class CausalityError(RuntimeError):
    """A consumer asked for data the stream has not revealed yet."""


@dataclass(frozen=True)
class Sample:
    id: int
    features: np.ndarray
    true_label: int
    origin_step: int


@dataclass(frozen=True)
class StreamBatch:
    """One unlabeled batch. Carries no labels by construction."""

    step: int
    ids: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class DelayedLabelBatch:
    origin_step: int
    sample_ids: np.ndarray
    labels: np.ndarray

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.sample_ids.tolist(), self.labels.tolist()))


@dataclass(frozen=True)
class GeneratorSpec:
    variant: str = "rotating_gaussians"
    num_classes: int = 4
    dim: int = 8
    noise: float = 0.5
    radius: float = 1.0
    omega: float = 0.0
    shift_step: int = 1
    shift: float = 0.0
    burst_length: int = 1
    path: str | None = None

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise StreamConfigError(f"generator.variant: unknown variant {self.variant!r}")
        if self.variant == "file":
            if not self.path:
                raise StreamConfigError("generator.path: required for the file variant")
            return
        if self.num_classes < 2:
            raise StreamConfigError("generator.num_classes: must be >= 2")
        if self.dim < 2:
            raise StreamConfigError("generator.dim: must be >= 2")
        if self.noise < 0:
            raise StreamConfigError("generator.noise: must be >= 0")
        if self.burst_length < 1:
            raise StreamConfigError("generator.burst_length: must be >= 1")


@dataclass(frozen=True)
class StreamConfig:
    n: int
    d: int
    horizon: int | None
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    seed: int = 0
    validation_fraction: float = 0.0

    def validate(self) -> None:
        if self.n < 1:
            raise StreamConfigError("n: batch size must be >= 1")
        if self.d < 0:
            raise StreamConfigError("d: label delay must be >= 0")
        if self.horizon is None:
            if self.generator.variant != "file":
                raise StreamConfigError("horizon: required unless replaying a file")
        elif self.horizon < 1:
            raise StreamConfigError("horizon: must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise StreamConfigError("validation_fraction: must lie in [0, 1)")
        self.generator.validate()
        gen = self.generator
        if gen.variant == "abrupt_shift" and not 1 <= gen.shift_step <= self.horizon:
            raise StreamConfigError("generator.shift_step: must lie within the horizon")


# -- synthetic generators ---------------------------------------------------


def class_means(spec: GeneratorSpec, step: int) -> np.ndarray:
    """Class means at ``step``: points on a circle in the first two coordinates."""
    k = np.arange(spec.num_classes)
    angle = 2.0 * np.pi * k / spec.num_classes + spec.omega * step
    means = np.zeros((spec.num_classes, spec.dim))
    means[:, 0] = spec.radius * np.cos(angle)
    means[:, 1] = spec.radius * np.sin(angle)
    return means


def _draw(spec: GeneratorSpec, means: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal((len(labels), spec.dim))
    return means[labels] + spec.noise * noise


def gen_rotating_gaussians(spec: GeneratorSpec, rng: np.random.Generator, step: int, count: int, labels=None):
    """Draw ``count`` samples at ``step``; the class means rotate by ``omega`` per step.

    Labels are i.i.d. uniform unless ``labels`` is given.
    """
    if labels is None:
        labels = rng.integers(0, spec.num_classes, size=count)
    return _draw(spec, class_means(spec, step), labels, rng), labels


def gen_abrupt_shift(spec: GeneratorSpec, rng: np.random.Generator, step: int, count: int):
    """Stationary classes whose means all translate by ``shift`` along the first axis from ``shift_step`` on."""
    labels = rng.integers(0, spec.num_classes, size=count)
    means = class_means(replace(spec, omega=0.0), step)
    if step >= spec.shift_step:
        means[:, 0] += spec.shift
    return _draw(spec, means, labels, rng), labels


class LabelBurst:
    """Labels arrive in runs of ``burst_length`` identical values.

    The generator keeps the position inside the current run between calls, so
    runs continue across step boundaries.
    """

    def __init__(self, spec: GeneratorSpec):
        self.spec = spec
        self._label = 0
        self._remaining = 0

    def labels(self, rng: np.random.Generator, count: int) -> np.ndarray:
        labels = np.empty(count, dtype=np.int64)
        for i in range(count):
            if self._remaining == 0:
                self._label = int(rng.integers(0, self.spec.num_classes))
                self._remaining = self.spec.burst_length
            labels[i] = self._label
            self._remaining -= 1
        return labels

    def __call__(self, rng: np.random.Generator, step: int, count: int):
        return gen_rotating_gaussians(self.spec, rng, step, count, self.labels(rng, count))


def gen_label_burst(spec: GeneratorSpec, rng: np.random.Generator, steps: range, count: int):
    """Convenience wrapper producing a fresh burst sequence over ``steps``."""
    burst = LabelBurst(spec)
    xs, ys = zip(*(burst(rng, t, count) for t in steps))
    return np.concatenate(xs), np.concatenate(ys)


# -- CSV ingestion ----------------------------------------------------------


def _read_stream_csv(path: str | Path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = list(reader)
    except OSError as exc:
        raise StreamFileError(f"{path}: cannot read ({exc})") from exc
    if header is None or len(header) < 3 or header[:2] != ["step", "label"]:
        raise StreamFileError(f"{path}: header must be 'step,label,f0,...'")
    dim = len(header) - 2
    if header[2:] != [f"f{i}" for i in range(dim)]:
        raise StreamFileError(f"{path}: feature columns must be named f0..f{dim - 1}")
    steps = np.empty(len(rows), dtype=np.int64)
    labels = np.empty(len(rows), dtype=np.int64)
    feats = np.empty((len(rows), dim))
    prev = None
    for i, row in enumerate(rows):
        line = i + 2
        if len(row) != dim + 2:
            raise StreamFileError(f"{path}:{line}: ragged row, expected {dim} features, got {len(row) - 2}")
        try:
            steps[i] = int(row[0])
        except ValueError:
            raise StreamFileError(f"{path}:{line}: step must be an integer, got {row[0]!r}") from None
        try:
            labels[i] = int(row[1])
        except ValueError:
            raise StreamFileError(f"{path}:{line}: label must be an integer, got {row[1]!r}") from None
        if labels[i] < 0:
            raise StreamFileError(f"{path}:{line}: negative label")
        try:
            feats[i] = [float(v) for v in row[2:]]
        except ValueError:
            raise StreamFileError(f"{path}:{line}: non-numeric feature") from None
        if prev is not None and steps[i] < prev:
            raise StreamFileError(f"{path}:{line}: rows unsorted (step {steps[i]} after {prev})")
        prev = steps[i]
    return steps, labels, feats


def ingest_file(path: str | Path, num_classes: int | None = None) -> GeneratorSpec:
    """Validate a stream CSV and describe it as a ``file`` generator."""
    _, labels, feats = _read_stream_csv(path)
    if len(labels) == 0:
        raise StreamFileError(f"{path}: no data rows")
    inferred = int(labels.max()) + 1
    if num_classes is None:
        num_classes = max(inferred, 2)
    elif inferred > num_classes:
        raise StreamFileError(f"{path}: label {inferred - 1} out of range for {num_classes} classes")
    return GeneratorSpec(variant="file", path=str(path), dim=feats.shape[1], num_classes=num_classes)


def write_stream_csv(path: str | Path, handle: "StreamHandle") -> None:
    """Write the consumer-visible stream of ``handle`` in the ingestion format."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "label"] + [f"f{i}" for i in range(handle.dim)])
        for t in range(1, handle.horizon + 1):
            feats = handle._features[t - 1]
            labels = handle._labels[t - 1]
            for x, y in zip(feats, labels):
                writer.writerow([t, int(y)] + [repr(float(v)) for v in x])


# -- the handle -------------------------------------------------------------


@dataclass(frozen=True)
class ValidationSet:
    """Held-out samples sorted by the step at which they were generated."""

    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    origin_steps: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class StreamHandle:
    """Replays one materialized stream step by step.

    ``reveal(t)`` must be called for t = 1, 2, ... in order. Labels for step
    ``t - d`` become available through ``delayed_labels(t)`` once step ``t``
    has been revealed.
    """

    def __init__(self, config: StreamConfig):
        config.validate()
        self.config = config
        gen = config.generator
        self._horizon = config.horizon
        if gen.variant == "file":
            self._load_file(gen)
        else:
            self._generate(gen)
        self._revealed = 0

    @property
    def n(self) -> int:
        return self.config.n

    @property
    def d(self) -> int:
        return self.config.d

    @property
    def horizon(self) -> int:
        return self._horizon

    def _generate(self, gen: GeneratorSpec) -> None:
        cfg = self.config
        per_step = math.ceil(cfg.n / (1.0 - cfg.validation_fraction))
        rng = component_rng(cfg.seed, "stream")
        if gen.variant == "abrupt_shift":
            draw = lambda t: gen_abrupt_shift(gen, rng, t, per_step)  # noqa: E731
        elif gen.variant == "label_burst" or gen.burst_length > 1:
            burst = LabelBurst(gen)
            draw = lambda t: burst(rng, t, per_step)  # noqa: E731
        else:
            draw = lambda t: gen_rotating_gaussians(gen, rng, t, per_step)  # noqa: E731
        xs, ys = zip(*(draw(t) for t in range(1, cfg.horizon + 1)))
        X = np.stack(xs)
        Y = np.stack(ys).astype(np.int64)
        ids = np.arange(cfg.horizon * per_step, dtype=np.int64).reshape(cfg.horizon, per_step)
        n = cfg.n
        self.num_classes = gen.num_classes
        self.dim = gen.dim
        self._features = _readonly(np.ascontiguousarray(X[:, :n]))
        self._labels = _readonly(np.ascontiguousarray(Y[:, :n]))
        self._ids = _readonly(np.ascontiguousarray(ids[:, :n]))
        steps = np.repeat(np.arange(1, cfg.horizon + 1), per_step - n)
        self.validation = ValidationSet(
            ids=_readonly(ids[:, n:].reshape(-1)),
            features=_readonly(X[:, n:].reshape(-1, gen.dim)),
            labels=_readonly(Y[:, n:].reshape(-1)),
            origin_steps=_readonly(steps),
        )

    def _load_file(self, gen: GeneratorSpec) -> None:
        cfg = self.config
        _, labels, feats = _read_stream_csv(gen.path)
        if self._horizon is None:
            self._horizon = len(labels) // cfg.n
        horizon = self._horizon
        if horizon < 1 or len(labels) < horizon * cfg.n:
            raise StreamFileError(
                f"{gen.path}: {len(labels)} rows do not cover horizon*n = {max(horizon, 1) * cfg.n}"
            )
        if labels.size and labels.max() >= gen.num_classes:
            raise StreamFileError(f"{gen.path}: label {labels.max()} out of range for {gen.num_classes} classes")
        used = horizon * cfg.n
        self.num_classes = gen.num_classes
        self.dim = feats.shape[1]
        self._features = _readonly(feats[:used].reshape(horizon, cfg.n, -1).copy())
        self._labels = _readonly(labels[:used].reshape(horizon, cfg.n).copy())
        self._ids = _readonly(np.arange(used, dtype=np.int64).reshape(horizon, cfg.n))
        empty = np.empty(0, dtype=np.int64)
        self.validation = ValidationSet(
            ids=_readonly(empty.copy()),
            features=_readonly(np.empty((0, self.dim))),
            labels=_readonly(empty.copy()),
            origin_steps=_readonly(empty.copy()),
        )

    # consumer API

    def reveal(self, step: int) -> StreamBatch:
        if step != self._revealed + 1 or step > self.horizon:
            raise CausalityError(f"expected step {self._revealed + 1}, got {step}")
        self._revealed = step
        return StreamBatch(step=step, ids=self._ids[step - 1], features=self._features[step - 1])

    def delayed_labels(self, step: int) -> DelayedLabelBatch | None:
        """Labels arriving at ``step``; their origin is ``step - d``."""
        if step > self._revealed:
            raise CausalityError(f"step {step} has not been revealed yet")
        origin = step - self.d
        if origin < 1:
            return None
        return DelayedLabelBatch(
            origin_step=origin, sample_ids=self._ids[origin - 1], labels=self._labels[origin - 1]
        )

    def __iter__(self):
        for t in range(self._revealed + 1, self.horizon + 1):
            yield self.reveal(t), self.delayed_labels(t)

    # privileged access for evaluation only

    def evaluation_labels(self, step: int) -> np.ndarray:
        """True labels of a revealed batch. Reserved for scoring predictions."""
        if step > self._revealed:
            raise CausalityError(f"step {step} has not been revealed yet")
        return self._labels[step - 1]

    def samples(self, step: int) -> list[Sample]:
        """Full samples of a revealed step, labels included (evaluation/debugging)."""
        labels = self.evaluation_labels(step)
        return [
            Sample(int(i), x, int(y), step)
            for i, x, y in zip(self._ids[step - 1], self._features[step - 1], labels)
        ]


def open_stream(config: StreamConfig) -> StreamHandle:
    return StreamHandle(config)
