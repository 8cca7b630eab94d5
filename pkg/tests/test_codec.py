import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from tdreward import codec


def exact_interval_law(horizon, decay):
    # independent oracle: direct summation of the exponential masses
    masses = [np.exp(-decay * d) for d in range(1, horizon)]
    total = sum(masses)
    return np.array([m / total for m in masses])


class TestNormalizedDistance:
    def test_full_span_forward(self):
        assert codec.normalized_distance(codec.TimeIndexPair(1, 10, 10)) == 1.0

    def test_identical_frames(self):
        assert codec.normalized_distance(codec.TimeIndexPair(5, 5, 10)) == 0.0

    def test_full_span_backward(self):
        assert codec.normalized_distance(codec.TimeIndexPair(3, 1, 3)) == -1.0

    def test_direct_evaluation(self):
        assert codec.normalized_distance(codec.TimeIndexPair(2, 5, 7)) == 0.5

    @pytest.mark.parametrize("u,v,T", [(0, 1, 5), (1, 6, 5), (1, 1, 1),
                                       (2, 2, 0), (-1, 1, 5)])
    def test_invalid_indices_rejected(self, u, v, T):
        with pytest.raises(ValueError):
            codec.TimeIndexPair(u, v, T)

    @given(st.integers(2, 400).flatmap(
        lambda T: st.tuples(st.just(T), st.integers(1, T), st.integers(1, T))))
    def test_antisymmetry_exact(self, tvu):
        T, u, v = tvu
        forward = codec.normalized_distance(codec.TimeIndexPair(u, v, T))
        backward = codec.normalized_distance(codec.TimeIndexPair(v, u, T))
        assert forward == -backward
        assert -1.0 <= forward <= 1.0
        assert (forward > 0) == (v > u)


class TestTwoHotCodec:
    def test_boundary_is_one_hot(self):
        weights = codec.TwoHotCodec(20).encode(-1.0)
        assert weights[0] == 1.0
        assert np.count_nonzero(weights) == 1

    def test_center_hit_is_one_hot(self):
        c = codec.TwoHotCodec(20)
        weights = c.encode(c.centers[7])
        assert weights[7] == pytest.approx(1.0, abs=1e-15)
        assert np.count_nonzero(weights) <= 2

    def test_midpoint_splits_evenly(self):
        c = codec.TwoHotCodec(20)
        mid = 0.5 * (c.centers[3] + c.centers[4])
        weights = c.encode(mid)
        assert weights[3] == pytest.approx(0.5)
        assert weights[4] == pytest.approx(0.5)

    def test_support_and_mass(self):
        c = codec.TwoHotCodec(20)
        rng = np.random.default_rng(11)
        for d in rng.uniform(-1, 1, 500):
            weights = c.encode(d)
            assert np.count_nonzero(weights) <= 2
            assert abs(weights.sum() - 1.0) < 1e-12
            assert np.all(weights >= 0)
            assert weights @ c.centers == pytest.approx(d, abs=1e-12)

    def test_out_of_range_rejected_not_clamped(self):
        c = codec.TwoHotCodec(20)
        for d in (-1.0000001, 1.0000001, 2.0, np.nan):
            with pytest.raises(ValueError):
                c.encode(d)

    def test_batch_matches_scalar_encode(self):
        c = codec.TwoHotCodec(20)
        targets = np.random.default_rng(3).uniform(-1, 1, 64)
        batch = c.encode_batch(targets)
        for row, d in zip(batch, targets):
            np.testing.assert_array_equal(row, c.encode(d))

    def test_uniform_logits_decode_to_zero(self):
        c = codec.TwoHotCodec(20)
        assert c.decode(np.full(20, 3.7)) == pytest.approx(0.0, abs=1e-15)

    def test_spike_on_last_bin_approaches_one(self):
        logits = np.zeros(20)
        logits[-1] = 60.0
        assert codec.TwoHotCodec(20).decode(logits) == pytest.approx(1.0,
                                                                     abs=1e-9)

    def test_decode_rejects_non_finite(self):
        c = codec.TwoHotCodec(20)
        bad = np.zeros(20)
        bad[3] = np.inf
        with pytest.raises(ValueError):
            c.decode(bad)

    def test_decode_encode_round_trip(self):
        # oracle: log of the exact two-hot weights (floored at -30 for
        # zeros) must decode back to the encoded scalar
        c = codec.TwoHotCodec(20)
        assert c.decode(_log_weights(c.encode(0.37))) == pytest.approx(
            0.37, abs=1e-12)
        rng = np.random.default_rng(99)
        for d in rng.uniform(-1, 1, 1000):
            assert abs(c.decode(_log_weights(c.encode(d))) - d) < 1e-9

    def test_decode_always_in_range(self):
        c = codec.TwoHotCodec(20)
        rng = np.random.default_rng(5)
        out = c.decode(rng.normal(scale=30, size=(200, 20)))
        assert np.all(out >= -1.0) and np.all(out <= 1.0)

    def test_tiny_codec_rejected(self):
        with pytest.raises(ValueError):
            codec.TwoHotCodec(1)


def _log_weights(weights, floor=-30.0):
    out = np.full_like(weights, floor)
    hot = weights > 0
    out[hot] = np.log(weights[hot])
    return out


class TestIntervalSampling:
    def test_exact_law_matches_oracle(self):
        cfg = codec.PairSamplerConfig(decay=0.1)
        np.testing.assert_allclose(codec.interval_pmf(50, cfg),
                                   exact_interval_law(50, 0.1), atol=1e-15)

    def test_tiny_decay_approaches_uniform(self):
        cfg = codec.PairSamplerConfig(decay=1e-12)
        np.testing.assert_allclose(codec.interval_pmf(30, cfg),
                                   np.full(29, 1 / 29), atol=1e-9)

    def test_adjacent_ratio_is_exp_decay(self):
        for horizon in (3, 10, 50):
            pmf = codec.interval_pmf(horizon,
                                     codec.PairSamplerConfig(decay=0.3))
            assert pmf[0] / pmf[1] == pytest.approx(np.exp(0.3), rel=1e-12)

    def test_uniform_flag(self):
        cfg = codec.PairSamplerConfig(decay=0.1, uniform_intervals=True)
        np.testing.assert_array_equal(codec.interval_pmf(40, cfg),
                                      np.full(39, 1 / 39))

    def test_empirical_frequencies_match_law(self):
        cfg = codec.PairSamplerConfig(decay=0.1)
        rng = np.random.default_rng(12345)
        draws = codec.sample_interval(50, cfg, rng, size=1_000_000)
        counts = np.bincount(draws, minlength=50)[1:50]
        freqs = counts / counts.sum()
        law = exact_interval_law(50, 0.1)
        assert np.max(np.abs(freqs - law)) < 0.005
        chi2 = stats.chisquare(counts, law * counts.sum())
        assert chi2.pvalue >= 0.001

    def test_short_horizon_rejected(self):
        cfg = codec.PairSamplerConfig()
        with pytest.raises(ValueError):
            codec.sample_interval(1, cfg, np.random.default_rng(0))

    def test_draws_deterministic_given_seed(self):
        cfg = codec.PairSamplerConfig(decay=0.2)
        a = codec.sample_interval(30, cfg, np.random.default_rng(7), size=500)
        b = codec.sample_interval(30, cfg, np.random.default_rng(7), size=500)
        np.testing.assert_array_equal(a, b)

    def test_nonpositive_decay_rejected(self):
        with pytest.raises(ValueError):
            codec.PairSamplerConfig(decay=0.0)


class TestPairSampling:
    def test_backward_fraction_balanced(self):
        cfg = codec.PairSamplerConfig(decay=0.1)
        rng = np.random.default_rng(2024)
        u, v = codec.sample_pairs(50, cfg, rng, 100_000)
        backward = np.mean(v < u)
        assert 0.495 <= backward <= 0.505

    def test_forward_only_targets_positive(self):
        cfg = codec.PairSamplerConfig(decay=0.1, negative_sampling=False)
        rng = np.random.default_rng(4)
        u, v = codec.sample_pairs(40, cfg, rng, 5000)
        assert np.all(v > u)

    def test_bounds_and_interval_consistency(self):
        cfg = codec.PairSamplerConfig(decay=0.3)
        rng = np.random.default_rng(8)
        for _ in range(300):
            pair = codec.sample_pair(17, cfg, rng)
            assert 1 <= pair.u <= 17 and 1 <= pair.v <= 17
            assert 1 <= abs(pair.v - pair.u) <= 16

    def test_pair_sequences_reproducible(self):
        cfg = codec.PairSamplerConfig(decay=0.1)

        def draw_sequence(seed):
            rng = np.random.default_rng(seed)
            return [codec.sample_pair(25, cfg, rng) for _ in range(200)]

        assert draw_sequence(51) == draw_sequence(51)

    @settings(max_examples=30)
    @given(st.integers(2, 60), st.integers(0, 2 ** 32 - 1))
    def test_sampled_distances_in_range(self, horizon, seed):
        cfg = codec.PairSamplerConfig(decay=0.15)
        rng = np.random.default_rng(seed)
        pair = codec.sample_pair(horizon, cfg, rng)
        assert -1.0 <= codec.normalized_distance(pair) <= 1.0
