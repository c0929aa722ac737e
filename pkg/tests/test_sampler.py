import json
import logging

import numpy as np
import pytest

from helpers import inclusion_probabilities, unordered_pair_probabilities
from lami.errors import SamplerError
from lami.sampler import (
    SamplingState,
    calibrate_frequencies,
    compute_frequencies,
    dump_frequencies,
    sample_federated,
)


class TestComputeFrequencies:
    def test_uniform_when_each_category_in_one_image(self):
        anns = [(0, 10), (1, 11), (2, 12)]
        p = compute_frequencies(anns, vocabulary=[10, 11, 12])
        np.testing.assert_allclose(p, [1 / 3] * 3)

    def test_direct_normalization(self):
        anns = [(0, 0), (1, 0), (2, 0), (3, 1)]
        p = compute_frequencies(anns, vocabulary=[0, 1])
        np.testing.assert_allclose(p, [0.75, 0.25])

    def test_counts_images_not_annotations(self):
        # category 0 appears twice in image 0: still one image
        anns = [(0, 0), (0, 0), (1, 1)]
        p = compute_frequencies(anns, vocabulary=[0, 1])
        np.testing.assert_allclose(p, [0.5, 0.5])

    def test_matches_independent_recount(self):
        rng = np.random.default_rng(0)
        vocabulary = list(range(7))
        anns = []
        for image_id in range(100):
            for cat in rng.choice(7, size=rng.integers(1, 4), replace=False):
                anns.append((image_id, int(cat)))
        p = compute_frequencies(anns, vocabulary)
        # independent counting pass
        images_of = {c: set() for c in vocabulary}
        for img, cat in anns:
            images_of[cat].add(img)
        counts = np.array([len(images_of[c]) for c in vocabulary], dtype=float)
        np.testing.assert_allclose(p, counts / counts.sum(), atol=1e-12)

    def test_empty_dataset(self):
        with pytest.raises(SamplerError, match="empty dataset"):
            compute_frequencies([], vocabulary=[0])

    def test_unknown_category(self):
        with pytest.raises(SamplerError, match="not in training vocabulary"):
            compute_frequencies([(0, 99)], vocabulary=[0, 1])


class TestCalibrateFrequencies:
    def test_eq_substitution(self):
        p = np.array([0.2, 0.2, 0.2, 0.2, 0.2])
        np.testing.assert_array_equal(
            calibrate_frequencies(p, {0, 1}), [0.0, 0.0, 0.2, 0.2, 0.2]
        )

    def test_empty_cg_identity(self):
        p = np.array([0.5, 0.5])
        np.testing.assert_array_equal(calibrate_frequencies(p, set()), p)

    def test_full_cg_zero_vector(self):
        p = np.array([0.25, 0.75])
        np.testing.assert_array_equal(calibrate_frequencies(p, {0, 1}), [0.0, 0.0])

    def test_input_not_mutated(self):
        p = np.array([0.5, 0.5])
        calibrate_frequencies(p, {0})
        np.testing.assert_array_equal(p, [0.5, 0.5])


class TestSampleFederated:
    def test_forced_single_draw(self):
        p_cal = np.array([0.0, 0.0, 0.5])  # only index 2 has support
        rng = np.random.default_rng(0)
        assert sample_federated(p_cal, c_fed=1, gt_indices={0}, rng=rng) == [0, 2]

    def test_gt_always_included_and_excluded_never_sampled(self):
        full = np.array([0.1, 0.2, 0.3, 0.2, 0.1, 0.1])
        cg = {0, 1}
        p_cal = calibrate_frequencies(full, cg)
        rng = np.random.default_rng(1)
        for _ in range(10_000):
            out = sample_federated(p_cal, c_fed=2, gt_indices={0}, rng=rng)
            assert out[0] == 0
            assert 1 not in out  # cg member that is not gt never appears
            assert len(out) == len(set(out))

    def test_pair_frequencies_match_enumeration(self):
        # 3 equal-weight candidates, draw 2: each unordered pair should have p=1/3
        weights = np.array([1.0, 1.0, 1.0])
        expected = unordered_pair_probabilities(weights, draws=2)
        assert all(abs(v - 1 / 3) < 1e-12 for v in expected.values())
        rng = np.random.default_rng(123)
        counts = {}
        trials = 30_000
        for _ in range(trials):
            out = sample_federated(weights / weights.sum(), c_fed=2, gt_indices=set(), rng=rng)
            key = frozenset(out)
            counts[key] = counts.get(key, 0) + 1
        for key, analytic in expected.items():
            assert counts.get(key, 0) / trials == pytest.approx(analytic, abs=0.02)

    def test_inclusion_probabilities_match_enumeration_skewed(self):
        weights = np.array([0.4, 0.3, 0.2, 0.1])
        analytic = inclusion_probabilities(weights, draws=2)
        rng = np.random.default_rng(7)
        counts = np.zeros(4)
        trials = 20_000
        for _ in range(trials):
            for idx in sample_federated(weights, c_fed=2, gt_indices=set(), rng=rng):
                counts[idx] += 1
        empirical = counts / trials
        tv = 0.5 * float(np.abs(empirical - analytic).sum())
        assert tv < 0.02

    def test_support_smaller_than_c_fed_takes_all(self):
        p_cal = np.array([0.0, 0.5, 0.5])
        rng = np.random.default_rng(0)
        out = sample_federated(p_cal, c_fed=10, gt_indices={0}, rng=rng)
        assert sorted(out) == [0, 1, 2]

    def test_empty_support_no_gt(self):
        with pytest.raises(SamplerError, match="nothing to train on"):
            sample_federated(np.zeros(3), c_fed=1, gt_indices=set(), rng=np.random.default_rng(0))

    def test_empty_support_with_gt_warns(self, caplog):
        with caplog.at_level(logging.WARNING, logger="lami.sampler"):
            out = sample_federated(np.zeros(3), c_fed=1, gt_indices={2}, rng=np.random.default_rng(0))
        assert out == [2]
        assert any("ground truth only" in r.message for r in caplog.records)

    def test_gt_with_nonzero_weight_rejected(self):
        p_cal = np.array([0.5, 0.5])
        with pytest.raises(SamplerError, match="non-zero calibrated frequency"):
            sample_federated(p_cal, c_fed=1, gt_indices={0}, rng=np.random.default_rng(0))

    def test_deterministic_given_rng_state(self):
        p = np.array([0.1, 0.0, 0.3, 0.6])
        a = sample_federated(p, 2, set(), np.random.default_rng(99))
        b = sample_federated(p, 2, set(), np.random.default_rng(99))
        assert a == b

    def test_baseline_degeneration_equals_plain_federated(self):
        # C_g = gt exactly: only gt is excluded, everything else sampleable
        p = np.array([0.25, 0.25, 0.25, 0.25])
        gt = {1}
        p_cal = calibrate_frequencies(p, gt)
        rng = np.random.default_rng(3)
        seen = set()
        for _ in range(200):
            out = sample_federated(p_cal, c_fed=2, gt_indices=gt, rng=rng)
            seen.update(out[1:])
        assert seen == {0, 2, 3}


class TestSamplingState:
    def test_frequencies_must_sum_to_one(self):
        with pytest.raises(SamplerError, match="sum to 1"):
            SamplingState(vocabulary=(0, 1), frequencies=np.array([0.5, 0.6]), c_fed=1)

    def test_c_fed_bounded(self):
        with pytest.raises(SamplerError, match="exceeds vocabulary"):
            SamplingState(vocabulary=(0,), frequencies=np.array([1.0]), c_fed=2)

    def test_iteration_vocabulary_maps_ids(self):
        state = SamplingState(
            vocabulary=(10, 20, 30, 40),
            frequencies=np.array([0.25, 0.25, 0.25, 0.25]),
            c_fed=1,
        )
        out = state.iteration_vocabulary(
            gt_concept_ids={20}, cg_concept_ids={20, 30}, rng=np.random.default_rng(0)
        )
        assert out[0] == 20
        assert set(out) <= {10, 20, 40}  # 30 excluded

    def test_out_of_vocabulary_cg_ignored(self):
        state = SamplingState(
            vocabulary=(0, 1), frequencies=np.array([0.5, 0.5]), c_fed=1
        )
        out = state.iteration_vocabulary({0}, {0, 999}, np.random.default_rng(0))
        assert out == [0, 1]

    def test_unknown_gt_rejected(self):
        state = SamplingState(vocabulary=(0, 1), frequencies=np.array([0.5, 0.5]), c_fed=1)
        with pytest.raises(SamplerError, match="not in training vocabulary"):
            state.iteration_vocabulary({7}, {7}, np.random.default_rng(0))

    def test_from_annotations(self):
        state = SamplingState.from_annotations([(0, 5), (1, 5), (1, 6)], [5, 6], c_fed=1)
        np.testing.assert_allclose(state.frequencies, [2 / 3, 1 / 3])

    def test_dump_frequencies(self, tmp_path):
        state = SamplingState(vocabulary=(3, 4), frequencies=np.array([0.75, 0.25]), c_fed=2)
        path = tmp_path / "freq.json"
        dump_frequencies(state, path)
        payload = json.loads(path.read_text())
        assert payload == {"c_fed": 2, "frequencies": {"3": 0.75, "4": 0.25}}
