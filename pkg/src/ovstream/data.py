"""Synthetic labeled embedding datasets and the dataset file format.

Generation uses numpy's PCG64 with one SeedSequence-spawned stream per
purpose (class centers, label embeddings, sample noise, shuffling), so
datasets are bit-reproducible per seed across platforms.

Each sample is a T x D token matrix whose CLS row sits near its class
center; the patch rows are the CLS plus a low-rank perturbation, so the
matrix compresses well under per-instance PCA.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .core import FormatError, LabelEmbeddingTable, as_token_matrix
from . import compression


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    samples_per_class: int = 100
    dim: int = 64
    tokens: int = 10
    noise: float = 0.1          # intra-class CLS noise sigma
    separation: float = 0.5     # pairwise center cosine must stay <= 1 - separation
    seed: int = 0
    # How closely label embeddings track the class centers. 1.0 means the
    # embeddings are exactly the centers (a perfect zero-shot scorer at
    # noise 0); lower values blend in a fixed random direction per class,
    # leaving headroom for the tuned decoder to learn the true mapping.
    label_alignment: float = 1.0

    def validate(self) -> None:
        if self.num_classes < 1 or self.samples_per_class < 1:
            raise ValueError("num_classes and samples_per_class must be >= 1")
        if self.dim < 1 or self.tokens < 2:
            raise ValueError("dim must be >= 1 and tokens >= 2")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if not 0.0 < self.separation <= 2.0:
            raise ValueError("separation must be in (0, 2]")
        if not 0.0 <= self.label_alignment <= 1.0:
            raise ValueError("label_alignment must be in [0, 1]")


@dataclass
class Dataset:
    label_table: LabelEmbeddingTable
    samples: list            # of (token matrix or CompressedFeature, label id)
    task_map: dict[int, list[int]] = field(default_factory=dict)  # task -> sample ids

    def labels(self) -> list[int]:
        return self.label_table.labels()

    def tokens(self, index: int) -> np.ndarray:
        payload, _ = self.samples[index]
        if isinstance(payload, compression.CompressedFeature):
            return compression.reconstruct(payload)
        return payload


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _draw_centers(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    bound = 1.0 - spec.separation
    for _ in range(1000):
        centers = rng.standard_normal((spec.num_classes, spec.dim))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        gram = centers @ centers.T
        np.fill_diagonal(gram, -1.0)
        if gram.max() <= bound:
            return centers
    raise ValueError(
        f"cannot place {spec.num_classes} centers in {spec.dim} dims with "
        f"pairwise cosine <= {bound}")


def generate(spec: SyntheticSpec) -> Dataset:
    """Draw a dataset with well-separated class centers and low-rank tokens."""
    spec.validate()
    ss = np.random.SeedSequence(spec.seed)
    rng_centers, rng_labels, rng_noise, _rng_shuffle = (
        np.random.default_rng(child) for child in ss.spawn(4))

    centers = _draw_centers(spec, rng_centers)

    entries = {}
    for y in range(spec.num_classes):
        if spec.label_alignment >= 1.0:
            emb = centers[y]
        else:
            drift = _unit(rng_labels.standard_normal(spec.dim))
            emb = _unit(spec.label_alignment * centers[y]
                        + (1.0 - spec.label_alignment) * drift)
        entries[y] = emb.astype(np.float32)
    table = LabelEmbeddingTable(entries)

    samples = []
    patch_rank = min(3, spec.dim)
    for y in range(spec.num_classes):
        for _ in range(spec.samples_per_class):
            cls = _unit(centers[y] + spec.noise * rng_noise.standard_normal(spec.dim))
            basis = rng_noise.standard_normal((patch_rank, spec.dim))
            basis /= np.linalg.norm(basis, axis=1, keepdims=True)
            coeffs = 0.05 * rng_noise.standard_normal((spec.tokens - 1, patch_rank))
            patches = cls + coeffs @ basis
            patches += 1e-3 * rng_noise.standard_normal(patches.shape)
            tokens = np.vstack([cls, patches]).astype(np.float32)
            samples.append((tokens, y))
    return Dataset(table, samples)


# ---------------------------------------------------------------------------
# Dataset file: magic "OVDS", u32 version, u32 D, u32 T, u32 label count,
# u32 sample count, u32 task count; label block (u32 id + D float32 each);
# task block (u32 task id, u32 size, u32 sample indices); sample records
# (u32 label id + payload record per ovstream.compression). Little-endian.

_MAGIC = b"OVDS"
_VERSION = 1


def save(dataset: Dataset, path) -> None:
    labels = dataset.label_table.labels()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIIII", _VERSION, dataset.label_table.dim,
                             _dataset_tokens(dataset), len(labels),
                             len(dataset.samples), len(dataset.task_map)))
        for label in labels:
            fh.write(struct.pack("<I", label))
            fh.write(np.ascontiguousarray(
                dataset.label_table.embedding(label), dtype="<f4").tobytes())
        for task in sorted(dataset.task_map):
            ids = dataset.task_map[task]
            fh.write(struct.pack(f"<II{len(ids)}I", task, len(ids), *ids))
        for payload, label in dataset.samples:
            fh.write(struct.pack("<I", label))
            fh.write(compression.payload_to_bytes(payload))


def _dataset_tokens(dataset: Dataset) -> int:
    if not dataset.samples:
        return 0
    payload, _ = dataset.samples[0]
    if isinstance(payload, compression.CompressedFeature):
        return payload.shape[0]
    return as_token_matrix(payload).shape[0]


def load(path) -> Dataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise FormatError("bad dataset magic at offset 0")
    try:
        version, dim, _tokens, n_labels, n_samples, n_tasks = struct.unpack_from(
            "<IIIIII", data, 4)
        if version != _VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        off = 28
        entries = {}
        for _ in range(n_labels):
            (label,) = struct.unpack_from("<I", data, off)
            off += 4
            emb = np.frombuffer(data, dtype="<f4", count=dim, offset=off)
            off += 4 * dim
            entries[label] = emb.copy()
        task_map = {}
        for _ in range(n_tasks):
            task, size = struct.unpack_from("<II", data, off)
            off += 8
            ids = struct.unpack_from(f"<{size}I", data, off)
            off += 4 * size
            task_map[task] = list(ids)
        samples = []
        for _ in range(n_samples):
            (label,) = struct.unpack_from("<I", data, off)
            off += 4
            payload, off = compression.payload_from_bytes(data, off)
            samples.append((payload, label))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated dataset file near offset {len(data)}") from exc
    return Dataset(LabelEmbeddingTable(entries), samples, task_map)
