import mpmath
import numpy as np
import pytest

from tdreward import codec, nets
from tdreward.errors import CorruptArtifactError


def tiny_model(head_width=5, smoothing=None):
    # under 2000 parameters for exhaustive finite-difference sweeps
    return nets.ProgressModel(12, embed_dim=4, hidden=(8, 8),
                              head_width=head_width, smoothing=smoothing,
                              seed=3)


def reference_forward(model, frame_a, frame_b):
    """Straight-line reimplementation of the pair forward pass."""
    def encode(x):
        if model.smoothing is not None:
            s = model.smoothing
            mix = nets.gaussian_blur_matrix(s.height, s.width, s.sigma)
            x = (x.reshape(s.channels, s.height * s.width) @ mix.T).ravel()
        h = x
        last = len(model.encoder.weights) - 1
        for i, (w, b) in enumerate(zip(model.encoder.weights,
                                       model.encoder.biases)):
            z = h @ w + b
            h = z if i == last else np.tanh(z)
        return h
    h = np.concatenate([encode(frame_a), encode(frame_b)])
    return h @ model.head.weights[0] + model.head.biases[0]


def finite_difference_grads(model, frames_a, frames_b, targets, h=1e-4,
                            loss_fn=None):
    loss_fn = loss_fn or nets.pair_loss_and_grads
    grads = []
    for p in model.params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            original = p[idx]
            p[idx] = original + h
            up, _ = loss_fn(model, frames_a, frames_b, targets)
            p[idx] = original - h
            down, _ = loss_fn(model, frames_a, frames_b, targets)
            p[idx] = original
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


class TestForwardPass:
    def test_zero_final_encoder_layer_gives_zero_embedding(self):
        model = tiny_model()
        model.encoder.weights[-1][:] = 0.0
        model.encoder.biases[-1][:] = 0.0
        out = model.encode(np.random.default_rng(0).normal(size=12))
        np.testing.assert_array_equal(out, np.zeros(4))

    def test_identical_frames_identical_embeddings(self):
        model = tiny_model()
        frame = np.random.default_rng(1).normal(size=12)
        np.testing.assert_array_equal(model.encode(frame),
                                      model.encode(frame.copy()))

    def test_forward_matches_reference_reimplementation(self):
        rng = np.random.default_rng(2)
        model = tiny_model()
        for _ in range(20):
            a, b = rng.normal(size=(2, 12))
            got = model.pair_logits(a, b)[0]
            np.testing.assert_allclose(got, reference_forward(model, a, b),
                                       rtol=1e-12, atol=1e-12)

    def test_forward_matches_reference_with_smoothing(self):
        smoothing = nets.FrameSmoothing(3, 2, 2, 1.0)
        model = tiny_model(smoothing=smoothing)
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=(2, 12))
        np.testing.assert_allclose(model.pair_logits(a, b)[0],
                                   reference_forward(model, a, b),
                                   rtol=1e-12, atol=1e-12)

    def test_zero_head_gives_zero_logits(self):
        model = tiny_model()
        model.head.weights[0][:] = 0.0
        rng = np.random.default_rng(3)
        logits = model.pair_logits(rng.normal(size=(4, 12)),
                                   rng.normal(size=(4, 12)))
        np.testing.assert_array_equal(logits, np.zeros((4, 5)))

    def test_concatenation_order_first_then_second(self):
        model = tiny_model()
        # head reads only the first-argument half
        model.head.weights[0][:] = 0.0
        model.head.weights[0][:4, :] = 1.0
        a = np.random.default_rng(4).normal(size=12)
        b = np.random.default_rng(5).normal(size=12)
        expected = np.full(5, model.encode(a).sum())
        np.testing.assert_allclose(model.pair_logits(a, b)[0], expected,
                                   rtol=1e-12)
        assert not np.allclose(model.pair_logits(b, a)[0], expected)

    def test_shape_mismatch_rejected(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            model.encode(np.zeros(13))
        with pytest.raises(ValueError):
            model.pair_logits(np.zeros((2, 12)), np.zeros((3, 12)))

    def test_shared_encoder_perturbation_moves_both_embeddings(self):
        model = tiny_model()
        frame = np.random.default_rng(6).normal(size=12)
        before = model.pair_logits(frame, frame)[0]
        model.encoder.weights[0][0, 0] += 0.25
        after_a = model.encode(frame)
        after_b = model.encode(frame.copy())
        np.testing.assert_array_equal(after_a, after_b)
        assert not np.allclose(model.pair_logits(frame, frame)[0], before)


class TestCrossEntropy:
    def test_uniform_target_equal_logits(self):
        k = 20
        target = np.full(k, 1 / k)
        assert nets.cross_entropy_loss(np.zeros(k), target) == pytest.approx(
            np.log(k), rel=1e-12)

    def test_spike_logit_approaches_zero(self):
        logits = np.zeros(8)
        logits[2] = 80.0
        target = np.zeros(8)
        target[2] = 1.0
        assert nets.cross_entropy_loss(logits, target) < 1e-9

    def test_matches_extended_precision_oracle(self):
        rng = np.random.default_rng(13)
        mpmath.mp.dps = 50
        for _ in range(25):
            logits = rng.normal(scale=5, size=6)
            target = rng.dirichlet(np.ones(6))
            norm = mpmath.fsum(mpmath.e ** mpmath.mpf(z) for z in logits)
            oracle = -mpmath.fsum(
                mpmath.mpf(t) * (mpmath.mpf(z) - mpmath.log(norm))
                for t, z in zip(target, logits))
            got = nets.cross_entropy_loss(logits, target)
            assert got == pytest.approx(float(oracle), rel=1e-12)

    def test_non_negative_and_zero_at_match(self):
        rng = np.random.default_rng(14)
        for _ in range(50):
            logits = rng.normal(size=7)
            target = rng.dirichlet(np.ones(7))
            assert nets.cross_entropy_loss(logits, target) >= 0
        matched = nets.softmax(rng.normal(size=7))
        # loss equals the entropy lower bound exactly when target==softmax
        loss = nets.cross_entropy_loss(np.log(matched), matched)
        entropy = -np.sum(matched * np.log(matched))
        assert loss == pytest.approx(entropy, rel=1e-12)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            nets.cross_entropy_loss(np.array([np.nan, 0.0]),
                                    np.array([0.5, 0.5]))
        with pytest.raises(ValueError):
            nets.cross_entropy_loss(np.zeros(2), np.array([0.7, 0.7]))


class TestBackward:
    def test_zero_gradient_at_stationary_target(self):
        model = tiny_model()
        rng = np.random.default_rng(7)
        a, b = rng.normal(size=(2, 3, 12))
        logits = model.pair_logits(a, b)
        targets = nets.softmax(logits)
        _, grads = nets.pair_loss_and_grads(model, a, b, targets)
        for g in grads:
            np.testing.assert_allclose(g, 0.0, atol=1e-14)

    def test_gradients_match_finite_differences(self):
        model = tiny_model()
        assert sum(p.size for p in model.params) <= 2000
        rng = np.random.default_rng(8)
        a, b = rng.normal(size=(2, 4, 12))
        targets = codec.TwoHotCodec(5).encode_batch(rng.uniform(-1, 1, 4))
        _, analytic = nets.pair_loss_and_grads(model, a, b, targets)
        numeric = finite_difference_grads(model, a, b, targets)
        worst = max(
            np.max(np.abs(g - n) / np.maximum(np.abs(n), 1e-8))
            for g, n in zip(analytic, numeric))
        assert worst < 1e-4

    def test_regression_gradients_match_finite_differences(self):
        model = tiny_model(head_width=1)
        rng = np.random.default_rng(18)
        a, b = rng.normal(size=(2, 4, 12))
        targets = rng.uniform(-1, 1, 4)
        _, analytic = nets.pair_squared_loss_and_grads(model, a, b, targets)
        numeric = finite_difference_grads(
            model, a, b, targets, loss_fn=nets.pair_squared_loss_and_grads)
        worst = max(
            np.max(np.abs(g - n) / np.maximum(np.abs(n), 1e-8))
            for g, n in zip(analytic, numeric))
        assert worst < 1e-4

    def test_logit_gradient_is_softmax_minus_target(self):
        model = tiny_model()
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=(2, 12))
        target = codec.TwoHotCodec(5).encode(0.3)
        logits, caches = model.pair_forward(a, b)
        expected = nets.softmax(logits) - target
        got_grads = model.pair_backward(caches, expected)
        _, reference = nets.pair_loss_and_grads(model, a, b, target)
        for g, r in zip(got_grads, reference):
            np.testing.assert_allclose(g, r, rtol=1e-12, atol=1e-15)

    def test_gradient_scales_linearly(self):
        model = tiny_model()
        rng = np.random.default_rng(10)
        a, b = rng.normal(size=(2, 12))
        target = codec.TwoHotCodec(5).encode(-0.4)
        logits, caches = model.pair_forward(a, b)
        base = nets.softmax(logits) - target
        ones = model.pair_backward(caches, base)
        threes = model.pair_backward(caches, 3.0 * base)
        for g1, g3 in zip(ones, threes):
            np.testing.assert_allclose(3.0 * g1, g3, rtol=1e-12, atol=1e-15)


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        params = [np.array([1.5, -2.0]), np.array([[0.3]])]
        opt = nets.Adam(params, lr=0.1)
        before = [p.copy() for p in params]
        opt.step(params, [np.zeros_like(p) for p in params])
        for p, b in zip(params, before):
            np.testing.assert_array_equal(p, b)
        assert opt.step_count == 1

    def test_single_step_hand_computed(self):
        # m=0.1, v=0.001; bias correction makes both hats 1, so the step
        # is lr/(1+eps) ~ lr
        params = [np.array([2.0])]
        opt = nets.Adam(params, lr=0.001)
        opt.step(params, [np.array([1.0])])
        expected = 2.0 - 0.001 * 1.0 / (1.0 + 1e-8)
        assert params[0][0] == pytest.approx(expected, abs=1e-15)

    def test_two_runs_bitwise_identical(self):
        def run():
            model = tiny_model()
            opt = nets.Adam(model.params, lr=1e-3)
            rng = np.random.default_rng(21)
            for _ in range(30):
                a, b = rng.normal(size=(2, 6, 12))
                targets = codec.TwoHotCodec(5).encode_batch(
                    rng.uniform(-1, 1, 6))
                _, grads = nets.pair_loss_and_grads(model, a, b, targets)
                opt.step(model.params, grads)
            return model.params

        for p1, p2 in zip(run(), run()):
            assert np.array_equal(p1, p2)

    def test_shape_mismatch_rejected(self):
        params = [np.zeros(3)]
        opt = nets.Adam(params)
        with pytest.raises(ValueError):
            opt.step(params, [np.zeros(4)])


class TestTrainingSmoke:
    def test_fixed_batch_loss_halves_in_200_steps(self):
        rng = np.random.default_rng(33)
        model = nets.ProgressModel(27, embed_dim=8, hidden=(16, 16),
                                   head_width=10, seed=5)
        a, b = rng.normal(size=(2, 64, 27))
        targets = codec.TwoHotCodec(10).encode_batch(rng.uniform(-1, 1, 64))
        opt = nets.Adam(model.params, lr=1e-3)
        first, grads = nets.pair_loss_and_grads(model, a, b, targets)
        for _ in range(200):
            opt.step(model.params, grads)
            loss, grads = nets.pair_loss_and_grads(model, a, b, targets)
        assert loss <= 0.5 * first


class TestCheckpoints:
    def test_round_trip_preserves_model(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "model.trwd"
        nets.save_progress_model(path, model)
        loaded = nets.load_progress_model(path)
        assert loaded.encoder.sizes == model.encoder.sizes
        assert loaded.head.sizes == model.head.sizes
        assert loaded.smoothing == model.smoothing
        for p, q in zip(model.params, loaded.params):
            assert np.array_equal(p, q)
        frame = np.random.default_rng(0).normal(size=(2, 12))
        np.testing.assert_array_equal(model.pair_logits(frame, frame),
                                      loaded.pair_logits(frame, frame))

    def test_round_trip_with_smoothing(self, tmp_path):
        smoothing = nets.FrameSmoothing(3, 2, 2, 1.5)
        model = tiny_model(smoothing=smoothing)
        path = tmp_path / "model.trwd"
        nets.save_progress_model(path, model)
        assert nets.load_progress_model(path).smoothing == smoothing

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "model.trwd"
        nets.save_progress_model(path, tiny_model())
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptArtifactError):
            nets.load_progress_model(path)

    def test_corrupted_payload_rejected(self, tmp_path):
        path = tmp_path / "model.trwd"
        nets.save_progress_model(path, tiny_model())
        raw = bytearray(path.read_bytes())
        raw[60] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptArtifactError):
            nets.load_progress_model(path)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "model.trwd"
        nets.save_progress_model(path, tiny_model())
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(CorruptArtifactError):
            nets.load_progress_model(path)

    def test_policy_net_round_trip(self, tmp_path):
        net = nets.MLP((10, 8, 5), np.random.default_rng(2))
        path = tmp_path / "policy.trqn"
        nets.save_policy_net(path, net)
        loaded = nets.load_policy_net(path)
        assert loaded.sizes == net.sizes
        x = np.random.default_rng(1).normal(size=(3, 10))
        np.testing.assert_array_equal(net(x), loaded(x))

    def test_model_magic_not_accepted_for_policy(self, tmp_path):
        path = tmp_path / "model.trwd"
        nets.save_progress_model(path, tiny_model())
        with pytest.raises(CorruptArtifactError):
            nets.load_policy_net(path)
