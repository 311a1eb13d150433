"""Incremental streams, the online learning loop, and evaluation metrics.

A stream is an ordered list of stages; each stage trains on its samples one
by one and is followed by an evaluation of every configured suite. A suite
is a named set of evaluation samples plus the candidate label set scored
over. Metrics follow the multi-task incremental convention: Transfer
averages accuracy on tasks not yet trained, Last averages the final row,
Avg averages per-task column means.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import compression
from .core import argmax_label, zero_shot_probabilities
from .data import Dataset
from .decoder import (
    OptimizerState,
    augmented_logits,
    block_params,
    decode,
    linear_params,
    online_update,
)
from .replay import ReplayStore, SamplerConfig
from .weighting import (
    ClassAccuracyTracker,
    aim_alpha,
    combined_prediction,
    nn_loo_confidence,
    p_other,
)

DEFAULT_FRACTIONS = (2, 4, 8, 16, 32, 64, 100)

WEIGHTINGS = ("ocw", "ocw-binary", "aim", "nn-loo", "frozen-only", "tuned-only")
COMPRESSION_MODES = ("none", "pca", "pca-cls", "pca-cls-quant", "dataset-pca")


@dataclass
class EvalSuite:
    name: str
    sample_ids: list[int]
    candidates: set[int]


@dataclass
class StreamStage:
    index: int
    sample_ids: list[int]
    suites: list[EvalSuite]


@dataclass
class MetricsRecord:
    rows: list = field(default_factory=list)  # (stage, suite, accuracy)

    def add(self, stage: int, suite: str, accuracy: float) -> None:
        self.rows.append((stage, suite, accuracy))

    def accuracy(self, stage: int, suite: str) -> float:
        for s, name, acc in self.rows:
            if s == stage and name == suite:
                return acc
        raise KeyError(f"no accuracy recorded for stage {stage} suite {suite!r}")

    def suite_trajectory(self, suite: str) -> list[tuple[int, float]]:
        return [(s, acc) for s, name, acc in self.rows if name == suite]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "suite", "accuracy"])
            for stage, suite, acc in self.rows:
                writer.writerow([stage, suite, repr(acc)])


# ---------------------------------------------------------------------------
# Stream construction


def build_stream(dataset: Dataset, protocol: str, seed: int = 0,
                 fractions=DEFAULT_FRACTIONS, class_groups: int = 5,
                 suites: list[EvalSuite] | None = None) -> list[StreamStage]:
    """Partition the dataset into ordered training stages.

    ``data_incremental`` shuffles once and cuts at cumulative fractions;
    ``class_incremental`` sorts classes by id into ``class_groups`` groups;
    ``task_incremental`` follows the dataset's task partition in task-id
    order; ``union_data_incremental`` ignores the task partition and runs
    the data-incremental schedule over everything.
    """
    labels = [label for _, label in dataset.samples]
    if not labels:
        raise ValueError("dataset has no samples")
    if suites is None:
        suites = [EvalSuite("all", list(range(len(labels))), set(dataset.labels()))]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))

    if protocol in ("data_incremental", "union_data_incremental"):
        fr = list(fractions)
        if fr != sorted(set(fr)) or fr[-1] != 100 or fr[0] <= 0:
            raise ValueError(f"fractions must be strictly increasing and end at 100: {fr}")
        order = list(rng.permutation(len(labels)))
        cuts = [int(round(f / 100 * len(order))) for f in fr]
        stages = []
        prev = 0
        for i, cut in enumerate(cuts):
            stages.append(StreamStage(i + 1, [int(j) for j in order[prev:cut]], suites))
            prev = cut
        return stages

    if protocol == "class_incremental":
        classes = sorted(set(labels))
        groups = [list(g) for g in np.array_split(classes, class_groups) if len(g)]
        stages = []
        for i, group in enumerate(groups):
            ids = [j for j, label in enumerate(labels) if label in set(int(g) for g in group)]
            ids = [int(j) for j in rng.permutation(ids)]
            stages.append(StreamStage(i + 1, ids, suites))
        return stages

    if protocol == "task_incremental":
        if not dataset.task_map:
            raise ValueError("task_incremental requires a dataset task partition")
        stages = []
        for i, task in enumerate(sorted(dataset.task_map)):
            stages.append(StreamStage(i + 1, list(dataset.task_map[task]), suites))
        return stages

    raise ValueError(f"unknown protocol {protocol!r}")


# ---------------------------------------------------------------------------
# Engine


@dataclass
class EngineConfig:
    decoder_variant: str = "linear"    # "linear" | "block"
    weighting: str = "ocw"
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    beta: float = 0.1
    ema_decay: float = 0.99
    lr: float = 9.375e-6
    weight_decay: float = 0.05
    compression: str = "none"
    pca_components: int = 5
    dataset_pca_components: int = 200
    chunk_size: int = 5000
    p_other_weighting: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting strategy {self.weighting!r}")
        if self.compression not in COMPRESSION_MODES:
            raise ValueError(f"unknown compression mode {self.compression!r}")
        if self.decoder_variant not in ("linear", "block"):
            raise ValueError(f"unknown decoder variant {self.decoder_variant!r}")
        if self.beta < 0 or not 0 < self.ema_decay <= 1 or self.lr <= 0:
            raise ValueError("hyperparameters out of range")
        self.sampler.validate()


class Engine:
    """Online learner combining the frozen scorer and the tuned decoder."""

    def __init__(self, dataset: Dataset, config: EngineConfig):
        config.validate()
        self.dataset = dataset
        self.config = config
        self.table = dataset.label_table
        ss = np.random.SeedSequence([config.seed, 0xE4914E])
        init_rng, self.rng = (np.random.default_rng(c) for c in ss.spawn(2))
        dim = self.table.dim
        if config.decoder_variant == "linear":
            self.params = linear_params(dim)
        else:
            self.params = block_params(dim, rng=init_rng)
        self.opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
        self.tracker = ClassAccuracyTracker(decay=config.ema_decay)
        self.store = ReplayStore()
        self._codec = None
        if config.compression == "dataset-pca":
            self._codec = compression.DatasetPcaCodec.fit(
                [dataset.tokens(i) for i in range(len(dataset.samples))],
                chunk_size=config.chunk_size,
                n_components=config.dataset_pca_components)

    # -- training -----------------------------------------------------------

    def _payload(self, sample_index: int, tokens: np.ndarray):
        mode = self.config.compression
        if mode == "none":
            return tokens
        if mode == "dataset-pca":
            coeff = self._codec.encode(sample_index, tokens)
            return self._codec.decode(sample_index, coeff)
        gain = bias = None
        if self.params.variant == "block":
            gain = self.params.tensors["ln1_gain"]
            bias = self.params.tensors["ln1_bias"]
        return compression.compress(
            tokens, self.config.pca_components,
            quantized=(mode == "pca-cls-quant"),
            cls_weight=(mode in ("pca-cls", "pca-cls-quant")),
            norm_gain=gain, norm_bias=bias)

    def tuned_probabilities(self, tokens, candidates) -> dict[int, float]:
        return zero_shot_probabilities(decode(tokens, self.params), self.table, candidates)

    def frozen_probabilities(self, tokens, candidates) -> dict[int, float]:
        return zero_shot_probabilities(np.asarray(tokens)[0], self.table, candidates)

    def process(self, sample_index: int) -> None:
        """Store one incoming sample, update accuracy estimates, train one step."""
        tokens = self.dataset.tokens(sample_index)
        label = self.dataset.samples[sample_index][1]
        sid = self.store.insert(label, self._payload(sample_index, tokens))
        candidates = self.store.seen_labels()
        p_t = self.tuned_probabilities(tokens, candidates)
        p_o = self.frozen_probabilities(tokens, candidates)
        self.tracker.ema_update(label,
                                argmax_label(p_t) == label,
                                argmax_label(p_o) == label)
        online_update(sid, self.store, self.params, self.opt, self.table,
                      self.config.sampler, self.rng, beta=self.config.beta)

    # -- evaluation ---------------------------------------------------------

    def _nn_loo_maps(self):
        exemplars_t = []
        exemplars_o = []
        for sid in range(len(self.store)):
            tokens = self.store.tokens(sid)
            label = self.store.label(sid)
            exemplars_t.append((decode(tokens, self.params), label))
            exemplars_o.append((tokens[0], label))
        return nn_loo_confidence(exemplars_t), nn_loo_confidence(exemplars_o)

    def predict(self, tokens, candidates, nn_maps=None) -> dict[int, float]:
        """Combined candidate distribution for one sample under the configured weighting."""
        strategy = self.config.weighting
        p_o = self.frozen_probabilities(tokens, candidates)
        if strategy == "frozen-only":
            return p_o
        p_t = self.tuned_probabilities(tokens, candidates)
        if strategy == "tuned-only":
            return p_t
        seen = self.tracker.seen_labels()
        all_seen = set(candidates) <= seen and bool(candidates)

        if strategy == "ocw-binary":
            return p_t if all_seen else p_o
        if strategy == "aim":
            a = aim_alpha(p_o, seen)
            return {y: a * p_t[y] + (1 - a) * p_o[y] for y in p_o}
        if strategy == "nn-loo":
            conf_t, conf_o = nn_maps if nn_maps is not None else self._nn_loo_maps()
            mixed = {}
            for y in sorted(candidates):
                if all_seen:
                    a = 1.0
                elif y not in conf_t or y not in conf_o:
                    a = 0.0
                else:
                    a = conf_t[y] / (conf_t[y] + conf_o[y] + self.tracker.eps)
                mixed[y] = a * p_t[y] + (1 - a) * p_o[y]
            total = sum(mixed.values())
            return {y: v / total for y, v in mixed.items()}

        pov = None
        if self.config.p_other_weighting:
            logits = augmented_logits(decode(tokens, self.params), self.table,
                                      candidates, self.params.other_logit)
            pov = p_other(logits)
        return combined_prediction(p_t, p_o, self.tracker, candidates,
                                   all_candidates_seen=all_seen, p_other_value=pov)

    def evaluate_suite(self, suite: EvalSuite) -> tuple[float, dict[int, dict]]:
        nn_maps = self._nn_loo_maps() if self.config.weighting == "nn-loo" else None
        hits = 0
        predictions = {}
        for idx in suite.sample_ids:
            tokens = self.dataset.tokens(idx)
            label = self.dataset.samples[idx][1]
            dist = self.predict(tokens, suite.candidates, nn_maps=nn_maps)
            predictions[idx] = dist
            if argmax_label(dist) == label:
                hits += 1
        accuracy = hits / len(suite.sample_ids) if suite.sample_ids else 0.0
        return accuracy, predictions

    def run(self, stream: list[StreamStage]) -> MetricsRecord:
        record = MetricsRecord()
        seen_suites = []
        for stage in stream:
            for suite in stage.suites:
                if all(s.name != suite.name for s in seen_suites):
                    seen_suites.append(suite)
        for suite in seen_suites:
            acc, _ = self.evaluate_suite(suite)
            record.add(0, suite.name, acc)
        for stage in stream:
            for idx in stage.sample_ids:
                self.process(idx)
            for suite in stage.suites:
                acc, _ = self.evaluate_suite(suite)
                record.add(stage.index, suite.name, acc)
        return record


def run_stream(dataset: Dataset, stream: list[StreamStage],
               config: EngineConfig) -> MetricsRecord:
    """Drive the online loop over a stream and collect stage accuracies."""
    return Engine(dataset, config).run(stream)


# ---------------------------------------------------------------------------
# Metrics


def mtil_metrics(accuracy_matrix) -> tuple[float, float, float]:
    """(Transfer, Avg, Last) from a stages x tasks accuracy matrix.

    Row i holds per-task accuracy after training task i; task order matches
    stage order. Transfer averages, over each task, the accuracy before that
    task was trained; Avg averages per-task column means; Last averages the
    final row.
    """
    m = np.asarray(accuracy_matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
        raise ValueError(f"expected a square stages x tasks matrix, got {m.shape}")
    n = m.shape[0]
    transfer = float(np.mean([m[:j, j].mean() for j in range(1, n)]))
    avg = float(m.mean(axis=0).mean())
    last = float(m[-1].mean())
    return transfer, avg, last
