"""Replay store: batching strategies, FWS weight updates, persistence."""

import numpy as np
import pytest

from ovstream.core import FormatError
from ovstream.replay import ReplayStore, SamplerConfig, StoredSample


def _store_with(labels, dim=4, tokens=3, seed=0):
    gen = np.random.default_rng(seed)
    store = ReplayStore()
    for label in labels:
        store.insert(label, gen.standard_normal((tokens, dim)).astype(np.float32))
    return store


class TestInsertAndLookup:
    def test_ids_are_sequential(self):
        store = _store_with([5, 5, 7])
        assert [store.label(i) for i in range(3)] == [5, 5, 7]
        assert len(store) == 3

    def test_seen_labels_sorted(self):
        store = _store_with([9, 2, 9, 4])
        assert store.seen_labels() == [2, 4, 9]

    def test_class_index(self):
        store = _store_with([1, 2, 1, 1])
        assert store.class_ids(1) == [0, 2, 3]
        assert store.class_ids(99) == []

    def test_tokens_round_trip(self):
        tokens = np.arange(12, dtype=np.float32).reshape(3, 4)
        store = ReplayStore()
        sid = store.insert(0, tokens)
        np.testing.assert_array_equal(store.tokens(sid), tokens)

    def test_unknown_id(self):
        with pytest.raises(ValueError):
            _store_with([0]).label(5)


class TestComposeBatch:
    def test_batch_contains_new_id_first_exactly_once(self):
        store = _store_with([0, 1, 2, 3, 4, 0, 1, 2, 3, 4])
        rng = np.random.default_rng(7)
        for strategy in ("fifo", "uniform", "class_balanced", "fws"):
            batch = store.compose_batch(
                2, SamplerConfig(strategy=strategy, batch_size=4), rng)
            assert batch[0] == 2
            assert batch.count(2) == 1
            assert len(batch) == 4

    def test_batch_size_one(self):
        store = _store_with([0, 1])
        batch = store.compose_batch(
            1, SamplerConfig(strategy="uniform", batch_size=1),
            np.random.default_rng(0))
        assert batch == [1]

    def test_single_sample_store(self):
        store = _store_with([3])
        batch = store.compose_batch(
            0, SamplerConfig(strategy="fifo", batch_size=8),
            np.random.default_rng(0))
        assert batch == [0]

    def test_fifo_takes_most_recent_others(self):
        # ids 0..9, new id 9 -> companions are 8, 7, 6 (most recent first).
        store = _store_with(list(range(10)))
        batch = store.compose_batch(
            9, SamplerConfig(strategy="fifo", batch_size=4),
            np.random.default_rng(0))
        assert batch == [9, 8, 7, 6]

    def test_fifo_skips_new_id_in_middle(self):
        store = _store_with(list(range(6)))
        batch = store.compose_batch(
            4, SamplerConfig(strategy="fifo", batch_size=4),
            np.random.default_rng(0))
        assert batch == [4, 5, 3, 2]

    def test_uniform_allows_repeats(self):
        store = _store_with([0, 1])
        config = SamplerConfig(strategy="uniform", batch_size=8)
        batch = store.compose_batch(0, config, np.random.default_rng(1))
        # Only one companion exists but sampling is with replacement,
        # so it may appear up to min(B-1, n-1) = 1 time per draw slot.
        assert batch[0] == 0
        assert set(batch[1:]) == {1}

    def test_companion_count_capped_by_store(self):
        store = _store_with([0, 1, 2])
        config = SamplerConfig(strategy="uniform", batch_size=32)
        batch = store.compose_batch(0, config, np.random.default_rng(1))
        assert len(batch) == 1 + min(31, 2)

    def test_invalid_config(self):
        store = _store_with([0, 1])
        with pytest.raises(ValueError):
            store.compose_batch(0, SamplerConfig(strategy="nope"),
                                np.random.default_rng(0))
        with pytest.raises(ValueError):
            store.compose_batch(0, SamplerConfig(batch_size=0),
                                np.random.default_rng(0))

    def test_deterministic_given_seed(self):
        store = _store_with([0, 1, 2, 0, 1, 2, 0, 1])
        config = SamplerConfig(strategy="fws", batch_size=5)
        b1 = store.compose_batch(3, config, np.random.default_rng(42))
        b2 = store.compose_batch(3, config, np.random.default_rng(42))
        assert b1 == b2


class TestClassBalanced:
    def test_distinct_classes_when_enough(self):
        store = _store_with([0, 0, 1, 1, 2, 2, 3, 3, 4, 4])
        config = SamplerConfig(strategy="class_balanced", batch_size=4)
        batch = store.compose_batch(0, config, np.random.default_rng(3))
        labels = [store.label(i) for i in batch[1:]]
        assert len(set(labels)) == 3

    def test_remainder_spreads_over_classes(self):
        # Two classes, batch size 6 -> 5 companions over k=2 classes:
        # floor(5/2)=2 each plus 1 extra, i.e. counts {3, 2}.
        store = _store_with([0] * 5 + [1] * 5)
        config = SamplerConfig(strategy="class_balanced", batch_size=6)
        batch = store.compose_batch(0, config, np.random.default_rng(5))
        labels = [store.label(i) for i in batch[1:]]
        counts = sorted((labels.count(0), labels.count(1)))
        assert counts == [2, 3]

    def test_class_marginal_uniform(self):
        # 5 classes, 3 companion slots: each class selected w.p. 3/5.
        store = _store_with([0, 0, 1, 1, 2, 2, 3, 3, 4, 4])
        config = SamplerConfig(strategy="class_balanced", batch_size=4)
        rng = np.random.default_rng(2024)
        trials = 20_000
        hits = 0
        for _ in range(trials):
            batch = store.compose_batch(0, config, rng)
            if any(store.label(i) == 3 for i in batch[1:]):
                hits += 1
        assert hits / trials == pytest.approx(3 / 5, abs=0.01)

    def test_small_class_reuses_samples(self):
        # One class with a single sample but 4 slots requested from it.
        store = _store_with([0, 1])
        config = SamplerConfig(strategy="class_balanced", batch_size=6)
        batch = store.compose_batch(0, config, np.random.default_rng(9))
        # Companions can only come from ids {1}; with-replacement fills slots.
        assert set(batch[1:]) == {1}


class TestFws:
    def test_record_batched_exact_weights(self):
        store = _store_with([0, 1, 2])
        config = SamplerConfig(strategy="fws", batch_size=2,
                               decay=0.99, weight_floor=0.01)
        for _ in range(7):
            store.record_batched([1], config)
        assert store.sample(1).batch_count == 7
        assert store.sample(1).fws_weight == 0.99 ** 7
        assert store.sample(0).fws_weight == 1.0

    def test_weight_floor_applies(self):
        store = _store_with([0])
        config = SamplerConfig(strategy="fws", decay=0.5, weight_floor=0.01)
        for _ in range(20):
            store.record_batched([0], config)
        assert store.sample(0).fws_weight == 0.01

    def test_decay_one_keeps_weight(self):
        store = _store_with([0])
        config = SamplerConfig(strategy="fws", decay=1.0)
        for _ in range(50):
            store.record_batched([0], config)
        assert store.sample(0).fws_weight == 1.0

    def test_low_weight_samples_rarely_drawn(self):
        # Weights (1, 0.01, 0.01): one companion slot, so sample 0 is drawn
        # with probability 1/1.02.
        store = _store_with([0, 1, 2, 9])
        for sid, w in ((0, 1.0), (1, 0.01), (2, 0.01)):
            store.sample(sid).fws_weight = w
        config = SamplerConfig(strategy="fws", batch_size=2)
        rng = np.random.default_rng(77)
        trials = 100_000
        hits = sum(store.compose_batch(3, config, rng)[1] == 0
                   for _ in range(trials))
        assert hits / trials == pytest.approx(1 / 1.02, abs=0.01)

    def test_draws_without_replacement(self):
        store = _store_with([0, 1, 2, 3])
        config = SamplerConfig(strategy="fws", batch_size=4)
        rng = np.random.default_rng(5)
        for _ in range(100):
            batch = store.compose_batch(0, config, rng)
            assert len(set(batch)) == len(batch)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        store = _store_with([4, 4, 6], seed=31)
        config = SamplerConfig(strategy="fws")
        store.record_batched([0, 2], config)
        store.record_batched([0], config)
        store.save(tmp_path / "store.bin", tmp_path / "store.csv")
        loaded = ReplayStore.load(tmp_path / "store.bin", tmp_path / "store.csv")
        assert len(loaded) == 3
        for sid in range(3):
            a, b = store.sample(sid), loaded.sample(sid)
            assert (a.label, a.batch_count) == (b.label, b.batch_count)
            assert a.fws_weight == b.fws_weight  # repr() round trip is exact
            np.testing.assert_array_equal(store.tokens(sid), loaded.tokens(sid))

    def test_bad_magic(self, tmp_path):
        payload = tmp_path / "store.bin"
        meta = tmp_path / "store.csv"
        _store_with([0]).save(payload, meta)
        payload.write_bytes(b"XXXX" + payload.read_bytes()[4:])
        with pytest.raises(FormatError):
            ReplayStore.load(payload, meta)

    def test_metadata_mismatch(self, tmp_path):
        payload = tmp_path / "store.bin"
        meta = tmp_path / "store.csv"
        _store_with([0, 1]).save(payload, meta)
        lines = meta.read_text().splitlines()
        meta.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(FormatError):
            ReplayStore.load(payload, meta)
