import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gafcnn.errors import EmptySplit, FormatError, ShapeError
from gafcnn.nn import (PARAM_ORDER, AdamState, CnnConfig, CnnModel, TrainConfig, _logits, adam_step, batch_loss,
                       conv2d_forward, dump_checkpoint, forward, forward_batch, init_model, load_checkpoint,
                       loss_and_gradients, max_pool_2x2, max_pool_2x2_backward, predict, predict_batch,
                       read_checkpoint, save_checkpoint, softmax, train, zero_model)

from gradcheck import SMALL_CONFIGS, gradient_check


def direct_conv(x, k, b):
    """Loop-by-loop same convolution for odd kernels."""
    h, w, c = x.shape
    kk = k.shape[0]
    r = kk // 2
    out = np.zeros((h, w, k.shape[3]))
    for i in range(h):
        for j in range(w):
            for f in range(k.shape[3]):
                s = b[f]
                for di in range(kk):
                    for dj in range(kk):
                        ii, jj = i + di - r, j + dj - r
                        if 0 <= ii < h and 0 <= jj < w:
                            s += np.dot(x[ii, jj], k[di, dj, :, f])
                out[i, j, f] = s
    return out


class TestConv:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(5, 6, 1))
        np.testing.assert_array_equal(conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1)), x)

    def test_bias_only(self):
        x = np.random.default_rng(0).normal(size=(4, 4, 3))
        out = conv2d_forward(x, np.zeros((3, 3, 3, 2)), np.array([0.5, -2.0]))
        assert out.shape == (4, 4, 2)
        assert (out[..., 0] == 0.5).all() and (out[..., 1] == -2.0).all()

    def test_centre_is_full_dot_product(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 3, 1))
        k = rng.normal(size=(3, 3, 1, 1))
        out = conv2d_forward(x, k, np.zeros(1))
        assert out[1, 1, 0] == pytest.approx(float(np.sum(x[..., 0] * k[..., 0, 0])), abs=1e-14)

    @pytest.mark.parametrize("kk", [1, 3, 5])
    def test_against_loops(self, kk):
        rng = np.random.default_rng(kk)
        x = rng.normal(size=(6, 5, 3))
        k = rng.normal(size=(kk, kk, 3, 2))
        b = rng.normal(size=2)
        np.testing.assert_allclose(conv2d_forward(x, k, b), direct_conv(x, k, b), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d_forward(np.zeros((4, 4, 2)), np.zeros((3, 3, 3, 1)), np.zeros(1))


class TestPool:
    def test_single_patch(self):
        np.testing.assert_array_equal(max_pool_2x2(np.array([[1.0, 2.0], [3.0, 4.0]])[..., None])[..., 0], [[4.0]])

    def test_constant(self):
        out = max_pool_2x2(np.full((10, 10, 2), 3.5))
        assert out.shape == (5, 5, 2) and (out == 3.5).all()

    def test_odd_edges_truncate(self):
        x = np.arange(25, dtype=float).reshape(5, 5, 1)
        out = max_pool_2x2(x)[..., 0]
        np.testing.assert_array_equal(out, [[6, 8, 9], [16, 18, 19], [21, 23, 24]])

    def test_gradient_of_sum_goes_to_maxima(self):
        x = np.random.default_rng(2).normal(size=(10, 10, 2))
        dx = max_pool_2x2_backward(x, np.ones((5, 5, 2)))
        assert dx.sum() == 25 * 2
        h = 1e-6
        for idx in np.ndindex(x.shape):
            e = np.zeros_like(x)
            e[idx] = h
            fd = (max_pool_2x2(x + e).sum() - max_pool_2x2(x - e).sum()) / (2 * h)
            assert fd == pytest.approx(dx[idx], abs=1e-6)


TINY = CnnConfig(input_shape=(2, 2, 1), conv1_filters=1, conv2_filters=1, kernel_size=1, dense_units=1, n_classes=2)


def tiny_model():
    return CnnModel(TINY, {
        "conv1_w": np.full((1, 1, 1, 1), 2.0), "conv1_b": np.array([-1.0]),
        "conv2_w": np.full((1, 1, 1, 1), 0.5), "conv2_b": np.array([0.0]),
        "dense_w": np.ones((4, 1)), "dense_b": np.array([-1.0]),
        "out_w": np.array([[1.0, -1.0]]), "out_b": np.zeros(2),
    })


class TestForward:
    def test_zero_model_is_uniform(self):
        p = forward(zero_model(CnnConfig()), np.random.default_rng(0).normal(size=(10, 10, 4)))
        np.testing.assert_allclose(p, np.full(9, 1 / 9), atol=1e-15)

    def test_hand_evaluated(self):
        # conv1: 2x-1 -> [[1,3],[5,-9]] -> relu [[1,3],[5,0]]; conv2: x/2 -> [.5,1.5,2.5,0]
        # dense: sum - 1 = 3.5; logits (3.5, -3.5)
        x = np.array([[1.0, 2.0], [3.0, -4.0]])[..., None]
        logits, _ = _logits(tiny_model(), x[None])
        np.testing.assert_allclose(logits[0], [3.5, -3.5], atol=1e-15)
        p = forward(tiny_model(), x)
        assert p[0] == pytest.approx(1 / (1 + math.exp(-7)), abs=1e-15)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31))
    def test_probabilities(self, seed):
        rng = np.random.default_rng(seed)
        model = init_model(CnnConfig(use_max_pooling=bool(seed % 2)), rng)
        p = forward_batch(model, rng.normal(size=(5, 10, 10, 4)) * 3)
        assert ((p > 0) & (p < 1)).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_softmax_large_logits(self):
        p = softmax(np.array([[1000.0, 0.0, -1000.0]]))
        assert np.isfinite(p).all() and p[0, 0] == 1.0

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            forward(zero_model(CnnConfig()), np.zeros((10, 10, 3)))

    def test_shape_algebra(self):
        assert CnnConfig().spatial_after_convs() == (10, 10)
        assert CnnConfig(use_max_pooling=True).spatial_after_convs() == (3, 3)
        _, c = _logits(init_model(CnnConfig(use_max_pooling=True)), np.zeros((1, 10, 10, 4)), keep=True)
        assert c["h1_shape"][1:3] == (5, 5) and c["h2_shape"][1:3] == (3, 3)
        _, c = _logits(init_model(CnnConfig()), np.zeros((1, 10, 10, 4)), keep=True)
        assert c["h2_shape"][1:3] == (10, 10)


class TestLoss:
    def test_uniform_loss(self):
        x = np.random.default_rng(0).normal(size=(4, 10, 10, 4))
        loss, _ = loss_and_gradients(zero_model(CnnConfig()), x, np.array([0, 3, 5, 8]))
        assert loss == pytest.approx(math.log(9), abs=1e-12)
        assert math.log(9) == pytest.approx(2.1972, abs=1e-4)

    @pytest.mark.parametrize("i", range(len(SMALL_CONFIGS)))
    def test_finite_differences(self, i):
        worst, kinks, probes = gradient_check(SMALL_CONFIGS[i], seed=i)
        assert kinks < probes / 10
        assert worst < 1e-4

    def test_full_size_gradients(self):
        cfg = CnnConfig(use_max_pooling=True)
        rng = np.random.default_rng(7)
        model = init_model(cfg, rng)
        x = rng.uniform(-1, 1, (2, 10, 10, 4))
        y = np.array([1, 7])
        _, g = loss_and_gradients(model, x, y)
        for name in PARAM_ORDER:
            assert g[name].shape == model.params[name].shape
        # directional derivative along the gradient
        h = 1e-6
        plus, minus = model.copy(), model.copy()
        norm = math.sqrt(sum(float((v * v).sum()) for v in g.values()))
        for name in PARAM_ORDER:
            plus.params[name] += h * g[name] / norm
            minus.params[name] -= h * g[name] / norm
        fd = (batch_loss(plus, x, y)[0] - batch_loss(minus, x, y)[0]) / (2 * h)
        assert fd == pytest.approx(norm, rel=1e-4)

    def test_duplicated_batch(self):
        rng = np.random.default_rng(3)
        model = init_model(CnnConfig(), rng)
        x = rng.normal(size=(3, 10, 10, 4))
        y = np.array([0, 4, 2])
        l1, g1 = loss_and_gradients(model, x, y)
        l2, g2 = loss_and_gradients(model, np.concatenate([x, x]), np.concatenate([y, y]))
        assert l1 == pytest.approx(l2, rel=1e-13)
        for name in PARAM_ORDER:
            np.testing.assert_allclose(g1[name], g2[name], rtol=1e-10, atol=1e-15)

    def test_empty_batch(self):
        with pytest.raises(EmptySplit):
            loss_and_gradients(zero_model(CnnConfig()), np.zeros((0, 10, 10, 4)), np.zeros(0, int))

    def test_gradient_descent_decreases_loss(self):
        rng = np.random.default_rng(4)
        model = init_model(CnnConfig(), rng)
        x = rng.normal(size=(16, 10, 10, 4))
        y = rng.integers(0, 9, 16)
        prev = math.inf
        for _ in range(10):
            loss, g = loss_and_gradients(model, x, y)
            assert loss < prev
            prev = loss
            for name in PARAM_ORDER:
                model.params[name] -= 1e-3 * g[name]


def scalar_model(value):
    cfg = CnnConfig(input_shape=(1, 1, 1), conv1_filters=1, conv2_filters=1, kernel_size=1, dense_units=1,
                    n_classes=1)
    return CnnModel(cfg, {n: np.full(s, value) for n, s in cfg.param_shapes().items()})


class TestAdam:
    def test_first_step_is_lr_sign(self):
        model = scalar_model(1.0)
        grads = {n: np.full(p.shape, g) for (n, p), g in zip(model.params.items(), [3, -2, 1e-3, -5, 7, 0.5, -1, 2])}
        adam_step(model, grads, AdamState.zeros_like(model), TrainConfig())
        for n, g in grads.items():
            assert model.params[n].item() == pytest.approx(1.0 - 0.001 * np.sign(g.item()), abs=1e-8)

    def test_zero_gradient(self):
        model = scalar_model(0.25)
        state = AdamState.zeros_like(model)
        adam_step(model, {n: np.zeros_like(p) for n, p in model.params.items()}, state, TrainConfig())
        assert state.t == 1
        assert all(p.item() == 0.25 for p in model.params.values())

    def test_two_step_recurrence(self):
        cfg = TrainConfig(learning_rate=0.01)
        g = 0.3
        theta, m, v = 1.0, 0.0, 0.0
        for t in (1, 2):
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            theta -= cfg.learning_rate * (m / (1 - cfg.beta1 ** t)) / (math.sqrt(v / (1 - cfg.beta2 ** t)) + cfg.epsilon)
        model = scalar_model(1.0)
        state = AdamState.zeros_like(model)
        for _ in range(2):
            adam_step(model, {n: np.full(p.shape, g) for n, p in model.params.items()}, state, cfg)
        assert state.t == 2
        assert model.params["out_w"].item() == pytest.approx(theta, abs=1e-15)


def separable(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.normal(0, 0.3, (n, 4, 4, 1))
    x[y == 1, :2, :, 0] += 1.5
    return x, y


SMALL = CnnConfig(input_shape=(4, 4, 1), conv1_filters=4, conv2_filters=4, dense_units=8, n_classes=2)


class TestTrain:
    def test_separable(self):
        x, y = separable(200, 0)
        xv, yv = separable(50, 1)
        model, hist = train(SMALL, TrainConfig(epochs=50, batch_size=16, early_stopping_patience=50), x, y, xv, yv)
        assert max(hist.train_accuracy) >= 0.99
        assert batch_loss(model, x, y)[1] >= 0.99

    def test_patience_zero(self):
        # random labels: validation loss soon stops improving
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(64, 4, 4, 1)), rng.integers(0, 2, 64)
        xv, yv = rng.normal(size=(32, 4, 4, 1)), rng.integers(0, 2, 32)
        model, hist = train(SMALL, TrainConfig(epochs=100, early_stopping_patience=0, learning_rate=0.05), x, y, xv, yv)
        losses = hist.val_loss
        stops = [i for i in range(1, len(losses)) if losses[i] >= min(losses[:i])]
        assert len(losses) < 100
        assert stops == [len(losses) - 1]
        assert hist.best_epoch == int(np.argmin(losses))

    def test_restores_best_epoch(self):
        x, y = separable(64, 2)
        xv, yv = separable(32, 3)
        model, hist = train(SMALL, TrainConfig(epochs=15, early_stopping_patience=3), x, y, xv, yv)
        assert batch_loss(model, xv, yv)[0] == pytest.approx(min(hist.val_loss), rel=1e-12)

    def test_deterministic(self):
        x, y = separable(64, 0)
        xv, yv = separable(32, 1)
        a = train(SMALL, TrainConfig(epochs=5, seed=3), x, y, xv, yv)
        b = train(SMALL, TrainConfig(epochs=5, seed=3), x, y, xv, yv)
        c = train(SMALL, TrainConfig(epochs=5, seed=4), x, y, xv, yv)
        assert a[1].to_csv() == b[1].to_csv() != c[1].to_csv()
        assert dump_checkpoint(a[0]) == dump_checkpoint(b[0])

    def test_empty(self):
        with pytest.raises(EmptySplit):
            train(SMALL, TrainConfig(), np.zeros((0, 4, 4, 1)), np.zeros(0, int), *separable(4, 0))


class TestPredict:
    def test_zero_model_tie(self):
        assert predict(zero_model(CnnConfig()), np.ones((10, 10, 4))) == 0

    def test_last_class(self):
        model = zero_model(CnnConfig())
        model.params["out_b"][8] = 50.0
        p = forward(model, np.zeros((10, 10, 4)))
        assert p[8] == pytest.approx(1.0) and predict(model, np.zeros((10, 10, 4))) == 8

    def test_agrees_with_forward(self):
        rng = np.random.default_rng(5)
        model = init_model(CnnConfig(), rng)
        x = rng.normal(size=(100, 10, 10, 4))
        np.testing.assert_array_equal(predict_batch(model, x), forward_batch(model, x).argmax(axis=1))
        assert [predict(model, xi) for xi in x[:5]] == list(predict_batch(model, x[:5]))


class TestCheckpoint:
    @pytest.mark.parametrize("cfg", [CnnConfig(), CnnConfig(use_max_pooling=True, kernel_size=5)])
    def test_round_trip(self, cfg, tmp_path):
        model = init_model(cfg, 3)
        save_checkpoint(model, tmp_path / "m.ckpt")
        back = read_checkpoint(tmp_path / "m.ckpt")
        assert back.config == cfg
        for name in PARAM_ORDER:
            np.testing.assert_array_equal(back.params[name], model.params[name])
        assert dump_checkpoint(back) == dump_checkpoint(model)

    def test_layout(self):
        data = dump_checkpoint(zero_model(CnnConfig()))
        assert data[:8] == b"GAFCNNCK"
        assert int.from_bytes(data[8:12], "little") == 1
        hlen = int.from_bytes(data[12:16], "little")
        n_params = sum(int(np.prod(s)) for s in CnnConfig().param_shapes().values())
        assert len(data) == 16 + hlen + 8 * n_params

    @pytest.mark.parametrize("mutate", [
        lambda d: b"XXXXXXXX" + d[8:],
        lambda d: d[:8] + (2).to_bytes(4, "little") + d[12:],
        lambda d: d[:-8],
    ])
    def test_corrupt(self, mutate):
        with pytest.raises(FormatError):
            load_checkpoint(mutate(dump_checkpoint(zero_model(CnnConfig()))))
