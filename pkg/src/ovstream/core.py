"""Core numeric types and the frozen open-vocabulary scorer.

Labels are integer ids. Embeddings and token matrices are numpy arrays:
an embedding is a 1-D float vector, a token matrix is T x D with the CLS
token in row 0 and patch tokens below it. Probability distributions are
plain ``{label_id: prob}`` dicts.

Inputs are stored as float32; all scoring arithmetic runs in float64.
"""

from __future__ import annotations

import numpy as np

# Softmax temperature applied to cosine logits by both the frozen and the
# tuned scorer (they share one label table, so one temperature).
TEMPERATURE = 100.0


class FormatError(Exception):
    """Raised when an on-disk artifact is malformed or truncated."""


def as_embedding(values) -> np.ndarray:
    """Validate and return a 1-D float32 embedding."""
    v = np.asarray(values, dtype=np.float32)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"embedding must be a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("embedding contains non-finite entries")
    return v


def as_token_matrix(values) -> np.ndarray:
    """Validate and return a T x D float32 token matrix (T >= 2)."""
    m = np.asarray(values, dtype=np.float32)
    if m.ndim != 2 or m.shape[0] < 2:
        raise ValueError(f"token matrix must be 2-D with T >= 2, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("token matrix contains non-finite entries")
    return m


class LabelEmbeddingTable:
    """Immutable map from label id to a unit-norm embedding.

    Embeddings are L2-normalized once at insertion; lookups always return
    unit vectors, so scoring never has to worry about stale norms.
    """

    def __init__(self, entries: dict[int, np.ndarray] | None = None):
        self._entries: dict[int, np.ndarray] = {}
        self._dim: int | None = None
        if entries:
            for label, emb in entries.items():
                self._insert(int(label), emb)

    def _insert(self, label: int, emb) -> None:
        if label in self._entries:
            raise ValueError(f"duplicate label id {label}")
        v = as_embedding(emb).astype(np.float64)
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise ValueError(f"label {label}: zero-norm embedding")
        if self._dim is None:
            self._dim = v.size
        elif v.size != self._dim:
            raise ValueError(f"label {label}: dimension {v.size} != table dimension {self._dim}")
        # Already-unit vectors pass through untouched so reloaded tables are
        # bit-identical to what was saved.
        if abs(norm - 1.0) < 1e-6:
            self._entries[label] = v.astype(np.float32)
        else:
            self._entries[label] = (v / norm).astype(np.float32)

    @property
    def dim(self) -> int:
        if self._dim is None:
            raise ValueError("empty label table has no dimension")
        return self._dim

    def labels(self) -> list[int]:
        return sorted(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, label: int) -> bool:
        return label in self._entries

    def embedding(self, label: int) -> np.ndarray:
        try:
            return self._entries[label]
        except KeyError:
            raise KeyError(f"unknown label id {label}") from None

    def matrix(self, candidates) -> np.ndarray:
        """Stacked unit embeddings for the given labels, one per row, float64."""
        labels = list(candidates)
        if not labels:
            raise ValueError("empty candidate set")
        return np.stack([self.embedding(c).astype(np.float64) for c in labels])


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    va = as_embedding(a).astype(np.float64)
    vb = as_embedding(b).astype(np.float64)
    if va.size != vb.size:
        raise ValueError(f"dimension mismatch: {va.size} vs {vb.size}")
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vector")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over a 1-D logit array, in float64."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def cosine_logits(e_x, table: LabelEmbeddingTable, candidates) -> np.ndarray:
    """Temperature-scaled cosine logits of ``e_x`` against candidate labels."""
    labels = sorted(candidates)
    if not labels:
        raise ValueError("empty candidate set")
    v = as_embedding(e_x).astype(np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError("zero-norm input embedding")
    mat = table.matrix(labels)
    if mat.shape[1] != v.size:
        raise ValueError(f"dimension mismatch: {v.size} vs table {mat.shape[1]}")
    cos = np.clip(mat @ (v / norm), -1.0, 1.0)
    return TEMPERATURE * cos


def zero_shot_probabilities(e_x, table: LabelEmbeddingTable, candidates) -> dict[int, float]:
    """Softmax over temperature-scaled cosine similarities for each candidate."""
    labels = sorted(candidates)
    probs = softmax(cosine_logits(e_x, table, labels))
    return {label: float(p) for label, p in zip(labels, probs)}


def argmax_label(dist: dict[int, float]) -> int:
    """Label with the highest probability; ties go to the lowest label id."""
    if not dist:
        raise ValueError("empty distribution")
    return min(dist, key=lambda label: (-dist[label], label))
