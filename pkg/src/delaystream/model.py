"""Small differentiable classifiers with hand-derived gradients.

Two architectures are supported:

* ``linear``: ``logits = W x + b``; the feature extractor is the identity.
* ``mlp``: ``h = tanh(W1 x + b1)``, ``logits = W2 h + b2``; ``h`` is the
  penultimate representation cached by the replay buffer.

Every backward pass is charged against a :class:`BudgetLedger`. Forward
passes are free.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ARCHS = ("linear", "mlp")


class BudgetExceeded(RuntimeError):
    """A backward pass was requested with no budget left in the current step."""


@dataclass
class BudgetLedger:
    budget: int
    used_this_step: int = 0
    charges: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be a positive integer")

    @property
    def remaining(self) -> int:
        return self.budget - self.used_this_step

    def charge(self, units: int = 1, kind: str = "backward") -> None:
        if units < 1:
            raise ValueError("units must be positive")
        if self.used_this_step + units > self.budget:
            raise BudgetExceeded(
                f"charging {units} unit(s) would exceed the budget ({self.used_this_step}/{self.budget} used)"
            )
        self.used_this_step += units
        self.charges.append((kind, units))

    def reset(self) -> None:
        self.used_this_step = 0
        self.charges.clear()


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "linear"
    hidden: int = 16
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-5

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ValueError(f"model.arch: expected one of {ARCHS}, got {self.arch!r}")
        if self.hidden < 1:
            raise ValueError("model.hidden: must be >= 1")
        if self.lr <= 0:
            raise ValueError("model.lr: must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("model.momentum: must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("model.weight_decay: must be >= 0")


class Classifier:
    def __init__(self, arch: str, input_dim: int, num_classes: int, params: dict[str, np.ndarray]):
        if arch not in ARCHS:
            raise ValueError(f"unknown arch {arch!r}")
        self.arch = arch
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.params = params

    @classmethod
    def initialize(
        cls,
        arch: str,
        input_dim: int,
        num_classes: int,
        rng: np.random.Generator,
        hidden: int = 16,
    ) -> "Classifier":
        """Weights uniform in +-1/sqrt(fan_in), biases zero."""

        def uniform(rows, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=(rows, fan_in))

        if arch == "linear":
            params = {"W": uniform(num_classes, input_dim), "b": np.zeros(num_classes)}
        elif arch == "mlp":
            params = {
                "W1": uniform(hidden, input_dim),
                "b1": np.zeros(hidden),
                "W2": uniform(num_classes, hidden),
                "b2": np.zeros(num_classes),
            }
        else:
            raise ValueError(f"unknown arch {arch!r}")
        return cls(arch, input_dim, num_classes, params)

    @classmethod
    def zeros(cls, arch: str, input_dim: int, num_classes: int, hidden: int = 16) -> "Classifier":
        clf = cls.initialize(arch, input_dim, num_classes, np.random.default_rng(0), hidden)
        for p in clf.params.values():
            p[...] = 0.0
        return clf

    @property
    def feature_dim(self) -> int:
        return self.input_dim if self.arch == "linear" else self.params["W1"].shape[0]

    def clone(self) -> "Classifier":
        return Classifier(self.arch, self.input_dim, self.num_classes, {k: v.copy() for k, v in self.params.items()})

    def _check_input(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"expected inputs of shape (batch, {self.input_dim}), got {X.shape}")
        return X

    def forward(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(logits, penultimate features)``."""
        X = self._check_input(X)
        p = self.params
        if self.arch == "linear":
            return X @ p["W"].T + p["b"], X
        h = np.tanh(X @ p["W1"].T + p["b1"])
        return h @ p["W2"].T + p["b2"], h

    def _backward(self, X: np.ndarray, h: np.ndarray, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        if self.arch == "linear":
            return {"W": dlogits.T @ X, "b": dlogits.sum(axis=0)}
        dh = dlogits @ p["W2"]
        da = dh * (1.0 - h * h)
        return {
            "W1": da.T @ X,
            "b1": da.sum(axis=0),
            "W2": dlogits.T @ h,
            "b2": dlogits.sum(axis=0),
        }


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def predict(clf: Classifier, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return predicted labels, class probabilities and penultimate features.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class index.
    """
    logits, feats = clf.forward(X)
    probs = softmax(logits)
    return probs.argmax(axis=1), probs, feats


def _charge(ledger: BudgetLedger | None, units: int, kind: str) -> None:
    if ledger is not None:
        ledger.charge(units, kind)


def cross_entropy_loss(clf: Classifier, X: np.ndarray, y: np.ndarray) -> float:
    logits, _ = clf.forward(X)
    y = np.asarray(y)
    return float(-log_softmax(logits)[np.arange(len(y)), y].mean())


def cross_entropy_backward(
    clf: Classifier,
    X: np.ndarray,
    y: np.ndarray,
    ledger: BudgetLedger | None = None,
    units: int = 1,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy and its gradient w.r.t. the parameters."""
    X = clf._check_input(X)
    _charge(ledger, units, "cross_entropy")
    y = np.asarray(y, dtype=np.int64)
    logits, h = clf.forward(X)
    logp = log_softmax(logits)
    rows = np.arange(len(y))
    loss = float(-logp[rows, y].mean())
    dlogits = np.exp(logp)
    dlogits[rows, y] -= 1.0
    dlogits /= len(y)
    return loss, clf._backward(X, h, dlogits)


def entropy_loss(clf: Classifier, X: np.ndarray) -> float:
    logits, _ = clf.forward(X)
    logp = log_softmax(logits)
    return float(-(np.exp(logp) * logp).sum(axis=1).mean())


def entropy_backward(
    clf: Classifier, X: np.ndarray, ledger: BudgetLedger | None = None
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean prediction entropy and its gradient w.r.t. the parameters.

    With ``H = -sum_c p_c log p_c`` the logit gradient is ``-p_k (log p_k + H)``.
    """
    X = clf._check_input(X)
    _charge(ledger, 1, "entropy")
    logits, h = clf.forward(X)
    logp = log_softmax(logits)
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1, keepdims=True)
    dlogits = -p * (logp + ent) / len(X)
    return float(ent.mean()), clf._backward(X, h, dlogits)


@dataclass
class OptimizerState:
    learning_rate: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-5
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "OptimizerState":
        return cls(cfg.lr, cfg.momentum, cfg.weight_decay)


def sgd_step(state: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Heavy-ball SGD with L2 weight decay, updating ``params`` in place."""
    for name, g in grads.items():
        theta = params[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {theta.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(theta)
        v *= state.momentum
        v += g + state.weight_decay * theta
        theta -= state.learning_rate * v
    return params


def momentum_clone_update(phi: dict[str, np.ndarray], theta: dict[str, np.ndarray], lam: float) -> dict[str, np.ndarray]:
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    out = {}
    for name, p in phi.items():
        if p.shape != theta[name].shape:
            raise ValueError(f"shape mismatch for {name}")
        out[name] = lam * p + (1.0 - lam) * theta[name]
    return out


def tta_adapt_clone(clf: Classifier, X: np.ndarray, eps: float, ledger: BudgetLedger | None = None) -> Classifier:
    """One entropy-descent step on a copy of ``clf``; ``clf`` itself is untouched."""
    _, grads = entropy_backward(clf, X, ledger)
    adapted = clf.clone()
    for name, g in grads.items():
        adapted.params[name] -= eps * g
    return adapted


def save_params_csv(path: str | Path, clf: Classifier) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "row", "col", "value"])
        for name, p in clf.params.items():
            mat = p.reshape(p.shape[0], -1)
            for r, c in np.ndindex(mat.shape):
                writer.writerow([name, r, c, repr(float(mat[r, c]))])


def load_params_csv(path: str | Path, template: Classifier) -> Classifier:
    """Read a checkpoint written by :func:`save_params_csv` into a copy of ``template``."""
    clf = template.clone()
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            p = clf.params[row["name"]]
            mat = p.reshape(p.shape[0], -1)
            mat[int(row["row"]), int(row["col"])] = float(row["value"])
            seen.add(row["name"])
    missing = set(clf.params) - seen
    if missing:
        raise ValueError(f"checkpoint misses tensors {sorted(missing)}")
    return clf
