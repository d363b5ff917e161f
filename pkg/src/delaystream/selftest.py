"""Built-in numerical checks: finite-difference gradients and sampler frequencies."""

from __future__ import annotations

import numpy as np
from scipy import stats

from delaystream.buffer import MemoryBuffer, similarity_weights, cosine_matrix
from delaystream.model import Classifier, cross_entropy_backward, cross_entropy_loss, entropy_backward, entropy_loss

FD_STEP = 1e-5
GRAD_RTOL = 1e-4


def numerical_gradient(loss_fn, clf: Classifier, h: float = FD_STEP) -> dict[str, np.ndarray]:
    """Central finite differences of ``loss_fn(clf)`` w.r.t. every parameter."""
    grads = {}
    for name, p in clf.params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = loss_fn(clf)
            p[idx] = orig - h
            down = loss_fn(clf)
            p[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def relative_error(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> float:
    va = np.concatenate([a[k].ravel() for k in sorted(a)])
    vb = np.concatenate([b[k].ravel() for k in sorted(b)])
    return float(np.linalg.norm(va - vb) / max(np.linalg.norm(va) + np.linalg.norm(vb), 1e-12))


def random_instance(rng: np.random.Generator, arch: str | None = None):
    arch = arch or ("linear", "mlp")[int(rng.integers(2))]
    dim = int(rng.integers(1, 9))
    hidden = int(rng.integers(1, 9))
    classes = int(rng.integers(2, 6))
    n = int(rng.integers(1, 6))
    clf = Classifier.initialize(arch, dim, classes, rng, hidden)
    for p in clf.params.values():
        p += rng.normal(scale=0.5, size=p.shape)
    X = rng.normal(size=(n, dim))
    y = rng.integers(0, classes, size=n)
    return clf, X, y


def gradient_check(instances: int = 100, seed: int = 0) -> float:
    """Worst relative error between analytic and finite-difference gradients."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        clf, X, y = random_instance(rng)
        _, g = cross_entropy_backward(clf, X, y)
        worst = max(worst, relative_error(g, numerical_gradient(lambda c: cross_entropy_loss(c, X, y), clf)))
        _, g = entropy_backward(clf, X)
        worst = max(worst, relative_error(g, numerical_gradient(lambda c: entropy_loss(c, X), clf)))
    return worst


def sampler_chisquare(draws: int = 100_000, seed: int = 0) -> float:
    """p-value of the weighted sampler's frequencies against the clamped cosine weights."""
    rng = np.random.default_rng(seed)
    buf = MemoryBuffer(16)
    for i in range(6):
        buf.insert_labeled(i, rng.normal(size=3), 0, rng.normal(size=4), step=1)
    query = rng.normal(size=(1, 4))
    expected = similarity_weights(cosine_matrix(query, buf.cached_features))[0]
    expected = expected / expected.sum()
    picks = buf.iwms_positions(query, np.array([0]), draws, rng)
    observed = np.bincount(picks, minlength=len(buf))
    keep = expected * draws >= 5
    obs, exp = observed[keep], expected[keep] * draws
    exp *= obs.sum() / exp.sum()
    return float(stats.chisquare(obs, exp).pvalue)


def run_selftest() -> list[tuple[str, bool, str]]:
    results = []
    worst = gradient_check()
    results.append(("gradients", worst < GRAD_RTOL, f"worst relative error {worst:.2e}"))
    p = sampler_chisquare()
    results.append(("sampler", p > 1e-3, f"chi-square p = {p:.4f}"))
    return results
