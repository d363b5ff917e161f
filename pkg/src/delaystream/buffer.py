"""FIFO replay memory with feature caching and importance-weighted sampling.

Entries carry the penultimate features computed when the sample was first
predicted. Those cached features are never refreshed: the sampler compares
fresh features of the newest unlabeled batch against possibly stale ones.

Positions used by the sampling methods are FIFO positions, 0 being the oldest
entry still held.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

WEIGHT_FLOOR = 1e-6
NORM_EPS = 1e-12
MODES = ("two_stage", "single_shot")


class EmptyBufferError(LookupError):
    pass


class DuplicateSampleError(KeyError):
    pass


@dataclass(frozen=True)
class MemoryEntry:
    sample_id: int
    features: np.ndarray
    true_label: int
    cached_feature: np.ndarray
    inserted_at: int


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; 0 when either vector has (near) zero norm."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < NORM_EPS or nv < NORM_EPS:
        return 0.0
    return float(u @ v / (nu * nv))


def cosine_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between the rows of ``A`` and ``B``."""
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    a = np.divide(A, na[:, None], out=np.zeros_like(A, dtype=float), where=na[:, None] >= NORM_EPS)
    b = np.divide(B, nb[:, None], out=np.zeros_like(B, dtype=float), where=nb[:, None] >= NORM_EPS)
    return a @ b.T


def similarity_weights(similarities: np.ndarray) -> np.ndarray:
    """Multinomial weights from cosine scores: clamp at zero, add a small floor."""
    return np.maximum(similarities, 0.0) + WEIGHT_FLOOR


def draw_rows_round_robin(cumulative: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """One multinomial draw per output, cycling over the rows of ``cumulative``.

    ``cumulative`` holds row-wise cumulative (unnormalized) weights.
    """
    out = np.empty(count, dtype=np.int64)
    for j, u in enumerate(rng.random(count)):
        row = cumulative[j % len(cumulative)]
        out[j] = min(np.searchsorted(row, u * row[-1], side="right"), len(row) - 1)
    return out


class MemoryBuffer:
    def __init__(self, capacity: int = 4096):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._size = 0
        self._head = 0  # slot of the oldest entry
        self._slot_of: dict[int, int] = {}
        self._features: np.ndarray | None = None
        self._cached: np.ndarray | None = None
        self._ids = np.empty(capacity, dtype=np.int64)
        self._labels = np.empty(capacity, dtype=np.int64)
        self._inserted = np.empty(capacity, dtype=np.int64)

    def __len__(self) -> int:
        return self._size

    def __contains__(self, sample_id: int) -> bool:
        return int(sample_id) in self._slot_of

    def _allocate(self, dim: int, feat_dim: int) -> None:
        self._features = np.empty((self.capacity, dim))
        self._cached = np.empty((self.capacity, feat_dim))

    def insert_labeled(self, sample_id: int, features, label: int, cached_feature, step: int) -> None:
        sample_id = int(sample_id)
        if sample_id in self._slot_of:
            raise DuplicateSampleError(f"sample {sample_id} already in memory")
        features = np.asarray(features, dtype=float)
        cached_feature = np.asarray(cached_feature, dtype=float)
        if self._features is None:
            self._allocate(features.shape[0], cached_feature.shape[0])
        if self._size == self.capacity:
            slot = self._head
            del self._slot_of[int(self._ids[slot])]
            self._head = (self._head + 1) % self.capacity
        else:
            slot = (self._head + self._size) % self.capacity
            self._size += 1
        self._features[slot] = features
        self._cached[slot] = cached_feature
        self._ids[slot] = sample_id
        self._labels[slot] = label
        self._inserted[slot] = step
        self._slot_of[sample_id] = slot

    def insert_batch(self, ids, features, labels, cached_features, step: int) -> None:
        for i, x, y, c in zip(ids, features, labels, cached_features):
            self.insert_labeled(i, x, int(y), c, step)

    def _slots(self, positions=None) -> np.ndarray:
        if positions is None:
            positions = np.arange(self._size)
        return (self._head + np.asarray(positions, dtype=np.int64)) % self.capacity

    def _require_entries(self) -> None:
        if self._size == 0:
            raise EmptyBufferError("memory buffer is empty")

    def entry(self, position: int) -> MemoryEntry:
        if not 0 <= position < self._size:
            raise IndexError(position)
        slot = int(self._slots([position])[0])
        feats = self._features[slot].copy()
        cached = self._cached[slot].copy()
        feats.setflags(write=False)
        cached.setflags(write=False)
        return MemoryEntry(
            int(self._ids[slot]), feats, int(self._labels[slot]), cached, int(self._inserted[slot])
        )

    def entries(self, positions=None) -> list[MemoryEntry]:
        if positions is None:
            positions = range(self._size)
        return [self.entry(int(p)) for p in positions]

    @property
    def ids(self) -> np.ndarray:
        return self._ids[self._slots()]

    @property
    def labels(self) -> np.ndarray:
        return self._labels[self._slots()]

    @property
    def cached_features(self) -> np.ndarray:
        if self._size == 0:
            return np.empty((0, 0))
        return self._cached[self._slots()]

    def gather(self, positions) -> tuple[np.ndarray, np.ndarray]:
        """Training inputs and labels at FIFO ``positions``."""
        slots = self._slots(positions)
        return self._features[slots], self._labels[slots]

    # sampling

    def random_positions(self, count: int, rng: np.random.Generator) -> np.ndarray:
        self._require_entries()
        return rng.integers(0, self._size, size=count)

    def sample_random(self, count: int, rng: np.random.Generator) -> list[MemoryEntry]:
        """Uniform draws with replacement."""
        return self.entries(self.random_positions(count, rng))

    def iwms_weights(self, query_features: np.ndarray, predicted_labels: np.ndarray, mode: str = "two_stage") -> np.ndarray:
        """Unnormalized selection weights, one row per query sample.

        Under ``two_stage`` only entries whose label equals the query's predicted
        label get nonzero weight; a query without any such entry falls back to
        all entries.
        """
        self._require_entries()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        query_features = np.atleast_2d(np.asarray(query_features, dtype=float))
        predicted_labels = np.asarray(predicted_labels)
        if len(query_features) != len(predicted_labels):
            raise ValueError("one predicted label per query sample required")
        weights = similarity_weights(cosine_matrix(query_features, self.cached_features))
        if mode == "two_stage":
            match = predicted_labels[:, None] == self.labels[None, :]
            has_match = match.any(axis=1)
            match[~has_match] = True
            weights = np.where(match, weights, 0.0)
        return weights

    def iwms_positions(
        self,
        query_features: np.ndarray,
        predicted_labels: np.ndarray,
        count: int,
        rng: np.random.Generator,
        mode: str = "two_stage",
    ) -> np.ndarray:
        cum = np.cumsum(self.iwms_weights(query_features, predicted_labels, mode), axis=1)
        return draw_rows_round_robin(cum, count, rng)

    # cached-feature policy

    def refresh_policy(self) -> None:
        """Cached features are never recomputed after insertion.

        This is deliberate: recomputing ``h`` for the whole memory after every
        update would cost a forward pass over the buffer per step. The method
        is intentionally a no-op; entries hand out read-only copies.
        """
        return None

    def snapshot_hash(self) -> str:
        h = hashlib.sha256()
        if self._size:
            slots = self._slots()
            for arr in (self._ids[slots], self._labels[slots], self._inserted[slots], self._features[slots], self._cached[slots]):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def dump_csv(self, path: str | Path) -> None:
        """Write ``sample_id,true_label,inserted_at,f0..,c0..`` rows, oldest first."""
        dim = 0 if self._features is None else self._features.shape[1]
        cdim = 0 if self._cached is None else self._cached.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["sample_id", "true_label", "inserted_at"]
                + [f"f{i}" for i in range(dim)]
                + [f"c{i}" for i in range(cdim)]
            )
            for e in self.entries():
                writer.writerow(
                    [e.sample_id, e.true_label, e.inserted_at]
                    + [repr(float(v)) for v in e.features]
                    + [repr(float(v)) for v in e.cached_feature]
                )


def sample_random(buffer: MemoryBuffer, count: int, rng: np.random.Generator) -> list[MemoryEntry]:
    return buffer.sample_random(count, rng)


def iwms_select(
    buffer: MemoryBuffer,
    query_features: np.ndarray,
    predicted_labels: np.ndarray,
    count: int,
    rng: np.random.Generator,
    mode: str = "two_stage",
) -> list[MemoryEntry]:
    """Draw ``count`` entries, cycling over the query samples round-robin.

    ``query_features`` are the penultimate features of the newest unlabeled
    batch and ``predicted_labels`` the model's predictions for it.
    """
    return buffer.entries(buffer.iwms_positions(query_features, predicted_labels, count, rng, mode))
