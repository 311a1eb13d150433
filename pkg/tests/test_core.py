import numpy as np
import pytest
from hypothesis import given, strategies as st

from ovstream.core import (
    LabelEmbeddingTable,
    argmax_label,
    cosine_similarity,
    zero_shot_probabilities,
)


class TestCosineSimilarity:
    def test_identical_vectors(self):
        assert cosine_similarity([1, 0, 0], [1, 0, 0]) == 1.0

    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == 0.0

    def test_hand_computed(self):
        # (1,1).(1,0) / (sqrt(2)*1)
        assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(0.70710678, abs=1e-6)

    def test_symmetric(self, rng):
        a = rng.standard_normal(5)
        b = rng.standard_normal(5)
        assert cosine_similarity(a, b) == pytest.approx(cosine_similarity(b, a))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cosine_similarity([1, 0], [1, 0, 0])

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            cosine_similarity([0, 0], [1, 0])


class TestLabelTable:
    def test_unit_norm_on_insert(self):
        table = LabelEmbeddingTable({0: [3.0, 4.0, 0.0]})
        assert np.linalg.norm(table.embedding(0)) == pytest.approx(1.0, abs=1e-5)

    def test_duplicate_label_rejected(self):
        with pytest.raises(ValueError):
            LabelEmbeddingTable({0: [1, 0]})._insert(0, [0, 1])

    def test_unknown_label(self, small_table):
        with pytest.raises(KeyError):
            small_table.embedding(42)


class TestZeroShotProbabilities:
    def test_identical_candidates_split_evenly(self):
        table = LabelEmbeddingTable({0: [1.0, 0.0], 1: [1.0, 0.0]})
        probs = zero_shot_probabilities([0.3, 0.8], table, [0, 1])
        assert probs[0] == pytest.approx(0.5)
        assert probs[1] == pytest.approx(0.5)

    def test_matching_candidate_dominates(self):
        table = LabelEmbeddingTable({0: [1.0, 0.0], 1: [0.0, 1.0]})
        probs = zero_shot_probabilities([1.0, 0.0], table, [0, 1])
        # p0 = 1 / (1 + e^-100)
        assert probs[0] == pytest.approx(1.0 / (1.0 + np.exp(-100.0)), abs=1e-10)

    def test_matches_direct_evaluation(self, rng):
        # Independent double-precision softmax over 100*cos for 3 random
        # unit candidates.
        cands = {i: rng.standard_normal(4) for i in range(3)}
        table = LabelEmbeddingTable(cands)
        x = rng.standard_normal(4)
        probs = zero_shot_probabilities(x, table, [0, 1, 2])
        xs = x / np.linalg.norm(x)
        expected_logits = []
        for i in range(3):
            e = np.asarray(table.embedding(i), dtype=np.float64)
            expected_logits.append(100.0 * float(xs @ e / np.linalg.norm(e)))
        exps = np.exp(np.array(expected_logits))
        expected = exps / exps.sum()
        for i in range(3):
            assert probs[i] == pytest.approx(expected[i], abs=1e-6)

    def test_sums_to_one(self, small_table, rng):
        probs = zero_shot_probabilities(rng.standard_normal(8), small_table, range(4))
        assert sum(probs.values()) == pytest.approx(1.0, abs=1e-6)

    def test_invariant_to_input_rescaling(self, small_table, rng):
        x = rng.standard_normal(8)
        p1 = zero_shot_probabilities(x, small_table, range(4))
        p2 = zero_shot_probabilities(7.5 * x, small_table, range(4))
        for label in p1:
            assert p1[label] == pytest.approx(p2[label], abs=1e-6)

    def test_extreme_cosines_stay_finite(self):
        table = LabelEmbeddingTable({0: [1.0, 0.0], 1: [-1.0, 0.0]})
        probs = zero_shot_probabilities([1.0, 0.0], table, [0, 1])
        assert all(np.isfinite(p) for p in probs.values())
        assert sum(probs.values()) == pytest.approx(1.0)

    def test_empty_candidates(self, small_table):
        with pytest.raises(ValueError):
            zero_shot_probabilities([1.0] * 8, small_table, [])

    def test_unknown_candidate(self, small_table):
        with pytest.raises(KeyError):
            zero_shot_probabilities([1.0] * 8, small_table, [0, 99])


class TestArgmaxLabel:
    def test_clear_winner(self):
        assert argmax_label({0: 0.7, 1: 0.3}) == 0

    def test_tie_breaks_to_lowest_id(self):
        assert argmax_label({5: 0.5, 2: 0.5}) == 2

    def test_uniform_gives_smallest(self):
        assert argmax_label({k: 0.2 for k in (9, 3, 7, 1, 5)}) == 1

    def test_insertion_order_irrelevant(self, rng):
        probs = {int(k): float(v) for k, v in zip(range(6), rng.random(6))}
        items = list(probs.items())
        for _ in range(10):
            rng.shuffle(items)
            assert argmax_label(dict(items)) == argmax_label(probs)

    def test_empty(self):
        with pytest.raises(ValueError):
            argmax_label({})


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8),
       st.integers(0, 2 ** 31))
def test_zero_shot_always_normalized(logit_like, seed):
    gen = np.random.default_rng(seed)
    dim = 6
    table = LabelEmbeddingTable(
        {i: gen.standard_normal(dim) for i in range(len(logit_like))})
    x = gen.standard_normal(dim)
    probs = zero_shot_probabilities(x, table, range(len(logit_like)))
    assert sum(probs.values()) == pytest.approx(1.0, abs=1e-6)
    assert all(p >= 0.0 for p in probs.values())
