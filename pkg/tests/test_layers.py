import numpy as np
import pytest

from emberflow.layers import (BatchNorm2d, Conv2d, Dropout, Linear, MaxPool2d,
                              Model, ModelConfig, ReLU, UsageError, build_model,
                              softmax_cross_entropy)
from emberflow.tensor import GeometryError, Rng, ShapeError


def naive_conv2d(x, w, b, stride, padding):
    """Direct six-loop cross-correlation, the independent oracle."""
    B, Cin, H, W = x.shape
    Cout, _, k, _ = w.shape
    hout = (H + 2 * padding - k) // stride + 1
    wout = (W + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    y = np.zeros((B, Cout, hout, wout), dtype=np.float64)
    for bi in range(B):
        for co in range(Cout):
            for oy in range(hout):
                for ox in range(wout):
                    acc = 0.0
                    for ci in range(Cin):
                        for ky in range(k):
                            for kx in range(k):
                                acc += (xp[bi, ci, oy * stride + ky, ox * stride + kx]
                                        * w[co, ci, ky, kx])
                    y[bi, co, oy, ox] = acc + b[co]
    return y


def make_conv(cin, cout, k, stride, padding, seed=0, dtype=np.float64):
    return Conv2d("c", cin, cout, k, stride, padding, Rng(seed), dtype)


class TestConv2d:
    def test_overlap_counts_with_ones(self):
        conv = make_conv(1, 1, 3, 1, 1)
        conv.weight.value[...] = 1.0
        conv.bias.value[...] = 0.0
        y = conv.forward(np.ones((1, 1, 3, 3)), True)
        assert y[0, 0, 1, 1] == 9
        assert y[0, 0, 0, 0] == 4

    def test_identity_1x1_kernel(self):
        conv = make_conv(1, 1, 1, 1, 0)
        conv.weight.value[...] = 1.0
        x = Rng(1).normal((2, 1, 4, 4), dtype=np.float64)
        assert np.allclose(conv.forward(x, True), x)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_naive_oracle(self, seed):
        rng = Rng(seed + 50)
        B = 1 + rng.randbelow(3)
        cin = 1 + rng.randbelow(3)
        cout = 1 + rng.randbelow(4)
        k = (1, 3)[rng.randbelow(2)]
        p = rng.randbelow(2)
        H = k + rng.randbelow(6)
        W = k + rng.randbelow(6)
        conv = make_conv(cin, cout, k, 1, p, seed=seed)
        x = rng.normal((B, cin, H, W), dtype=np.float64)
        y = conv.forward(x, True)
        expect = naive_conv2d(x, conv.weight.value, conv.bias.value, 1, p)
        assert np.abs(y - expect).max() < 1e-5

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            make_conv(2, 3, 3, 1, 1).forward(np.zeros((1, 1, 4, 4)), True)

    def test_geometry_error(self):
        with pytest.raises(GeometryError):
            Conv2d("c", 1, 1, 2, 2, 0, Rng(0), np.float64).forward(
                np.zeros((1, 1, 5, 5)), True)

    def test_zero_dy_zero_grads(self):
        conv = make_conv(2, 3, 3, 1, 1)
        x = Rng(2).normal((2, 2, 4, 4), dtype=np.float64)
        conv.forward(x, True)
        dx = conv.backward(np.zeros((2, 3, 4, 4)))
        assert not dx.any() and not conv.weight.grad.any() and not conv.bias.grad.any()

    def test_dbias_is_sum_over_batch_and_space(self):
        conv = make_conv(1, 2, 3, 1, 1)
        x = Rng(3).normal((2, 1, 4, 4), dtype=np.float64)
        dy = Rng(4).normal((2, 2, 4, 4), dtype=np.float64)
        conv.forward(x, True)
        conv.backward(dy)
        assert np.allclose(conv.bias.grad, dy.sum(axis=(0, 2, 3)))

    def test_backward_before_forward(self):
        with pytest.raises(UsageError):
            make_conv(1, 1, 3, 1, 1).backward(np.zeros((1, 1, 4, 4)))


class TestBatchNorm:
    def test_normalizes_to_unit_stats(self):
        bn = BatchNorm2d("bn", 3, np.float64)
        x = Rng(5).normal((4, 3, 5, 5), 2.0, 3.0, dtype=np.float64)
        y = bn.forward(x, True)
        assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-5
        assert np.abs(y.var(axis=(0, 2, 3)) - 1.0).max() < 1e-4

    def test_gamma_zero_gives_beta(self):
        bn = BatchNorm2d("bn", 2, np.float64)
        bn.gamma.value[...] = 0.0
        bn.beta.value[...] = [1.5, -2.0]
        y = bn.forward(Rng(6).normal((3, 2, 4, 4), dtype=np.float64), True)
        assert np.allclose(y[:, 0], 1.5) and np.allclose(y[:, 1], -2.0)

    def test_constant_channel_gives_beta(self):
        # closed form with variance floored by eps=1e-5: xhat = 0 exactly
        bn = BatchNorm2d("bn", 1, np.float64)
        bn.beta.value[...] = 0.7
        y = bn.forward(np.full((2, 1, 3, 3), 5.0), True)
        assert np.allclose(y, 0.7)

    def test_degenerate_batch(self):
        with pytest.raises(ShapeError):
            BatchNorm2d("bn", 1, np.float64).forward(np.ones((1, 1, 1, 1)), True)

    def test_eval_uses_running_stats(self):
        bn = BatchNorm2d("bn", 1, np.float64)
        x = Rng(7).normal((2, 1, 4, 4), 3.0, 2.0, dtype=np.float64)
        y = bn.forward(x, False)  # fresh running stats: mean 0, var 1
        assert np.allclose(y, x / np.sqrt(1 + bn.EPS), atol=1e-6)

    def test_running_stats_momentum(self):
        bn = BatchNorm2d("bn", 1, np.float64)
        x = np.zeros((2, 1, 2, 2))
        x[0] = 1.0
        bn.forward(x, True)
        assert np.isclose(bn.running_mean[0], 0.1 * 0.5)
        assert np.isclose(bn.running_var[0], 0.9 * 1.0 + 0.1 * 0.25)

    def test_dbeta_is_sum(self):
        bn = BatchNorm2d("bn", 2, np.float64)
        x = Rng(8).normal((2, 2, 3, 3), dtype=np.float64)
        dy = Rng(9).normal((2, 2, 3, 3), dtype=np.float64)
        bn.forward(x, True)
        bn.backward(dy)
        assert np.allclose(bn.beta.grad, dy.sum(axis=(0, 2, 3)))

    def test_zero_dy(self):
        bn = BatchNorm2d("bn", 2, np.float64)
        bn.forward(Rng(10).normal((2, 2, 3, 3), dtype=np.float64), True)
        dx = bn.backward(np.zeros((2, 2, 3, 3)))
        assert not dx.any() and not bn.gamma.grad.any()


class TestReLU:
    def test_definition(self):
        r = ReLU()
        assert np.array_equal(r.forward(np.array([-2.0, 0.0, 3.0]), True),
                              [0.0, 0.0, 3.0])

    def test_subgradient_zero_at_zero(self):
        r = ReLU()
        r.forward(np.array([0.0, 1.0]), True)
        assert np.array_equal(r.backward(np.array([5.0, 5.0])), [0.0, 5.0])


class TestMaxPool:
    def test_single_window(self):
        pool = MaxPool2d(2, 2)
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        y = pool.forward(x, True)
        assert y.reshape(()) == 4.0
        dx = pool.backward(np.full((1, 1, 1, 1), 7.0))
        assert np.array_equal(dx.reshape(2, 2), [[0, 0], [0, 7.0]])

    def test_tie_routes_to_first_row_major(self):
        pool = MaxPool2d(2, 2)
        x = np.full((1, 1, 2, 2), 3.0)
        pool.forward(x, True)
        dx = pool.backward(np.ones((1, 1, 1, 1)))
        assert np.array_equal(dx.reshape(2, 2), [[1, 0], [0, 0]])

    def test_stride1_2x2_on_3x3(self):
        pool = MaxPool2d(2, 1)
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        y = pool.forward(x, True)
        assert np.array_equal(y.reshape(2, 2), [[4, 5], [7, 8]])
        dx = pool.backward(np.ones((1, 1, 2, 2)))
        assert dx.reshape(9)[8] == 1.0 and dx.sum() == 4.0

    def test_overlapping_gradient_sums(self):
        pool = MaxPool2d(2, 1)
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = 9.0  # center wins every window
        pool.forward(x, True)
        dx = pool.backward(np.ones((1, 1, 2, 2)))
        assert dx[0, 0, 1, 1] == 4.0

    def test_geometry_error(self):
        with pytest.raises(GeometryError):
            MaxPool2d(2, 2).forward(np.zeros((1, 1, 5, 5)), True)

    def test_eval_matches_train_output(self):
        x = Rng(11).normal((2, 3, 6, 6), dtype=np.float64)
        assert np.array_equal(MaxPool2d(2, 2).forward(x, True),
                              MaxPool2d(2, 2).forward(x, False))


class TestDropout:
    def test_rate_zero_identity(self):
        x = Rng(12).normal((4, 4), dtype=np.float64)
        assert np.array_equal(Dropout(0.0, Rng(0)).forward(x, True), x)

    def test_eval_identity(self):
        x = Rng(13).normal((4, 4), dtype=np.float64)
        assert np.array_equal(Dropout(0.9, Rng(0)).forward(x, False), x)

    def test_survivor_fraction(self):
        d = Dropout(0.2, Rng(14))
        y = d.forward(np.ones((100000,)), True)
        survivors = (y != 0).mean()
        assert abs(survivors - 0.8) < 0.01
        # survivors are scaled by 1/(1-rate)
        assert np.allclose(y[y != 0], 1.25)

    def test_backward_uses_same_mask(self):
        d = Dropout(0.5, Rng(15))
        x = np.ones((1000,))
        y = d.forward(x, True)
        dx = d.backward(np.ones_like(x))
        assert np.array_equal(dx, y)

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            Dropout(1.0, Rng(0))
        with pytest.raises(ValueError):
            Dropout(-0.1, Rng(0))


class TestLinear:
    def test_identity(self):
        lin = Linear("fc", 3, 3, Rng(16), np.float64)
        lin.weight.value[...] = np.eye(3)
        lin.bias.value[...] = 0.0
        x = Rng(17).normal((2, 3), dtype=np.float64)
        assert np.allclose(lin.forward(x, True), x)

    def test_db_is_column_sum(self):
        lin = Linear("fc", 4, 2, Rng(18), np.float64)
        x = Rng(19).normal((3, 4), dtype=np.float64)
        dy = Rng(20).normal((3, 2), dtype=np.float64)
        lin.forward(x, True)
        lin.backward(dy)
        assert np.allclose(lin.bias.grad, dy.sum(axis=0))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Linear("fc", 4, 2, Rng(0), np.float64).forward(np.zeros((2, 5)), True)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(np.zeros((3, 7)), np.array([0, 3, 6]))
        assert abs(loss - np.log(7)) < 1e-6

    def test_huge_true_logit(self):
        logits = np.zeros((1, 7))
        logits[0, 2] = 1000.0
        loss, dl = softmax_cross_entropy(logits, np.array([2]))
        assert np.isfinite(loss) and loss < 1e-6
        assert np.isfinite(dl).all()

    def test_rows_sum_to_one(self):
        logits = Rng(21).normal((5, 7), dtype=np.float64)
        _, dl = softmax_cross_entropy(logits, np.zeros(5, dtype=int))
        probs = dl * 5
        probs[np.arange(5), 0] += 1.0
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-6

    def test_loss_nonnegative(self):
        logits = Rng(22).normal((8, 7), dtype=np.float64)
        loss, _ = softmax_cross_entropy(logits, np.arange(8) % 7)
        assert loss >= 0

    def test_out_of_range_label(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(np.zeros((2, 7)), np.array([0, 7]))


class TestModel:
    def test_default_shape_trace(self):
        config = ModelConfig()
        assert config.shape_trace() == [(1, 48, 48), (64, 24, 24),
                                        (128, 12, 12), (256, 6, 6)]
        assert config.flatten_size() == 9216

    def test_parameter_registry(self):
        model = build_model(ModelConfig(conv_channels=(2, 3, 4), hidden_units=5,
                                        input_shape=(1, 8, 8)), Rng(0))
        assert len(model.slots) == 16
        expected = {f"conv{i}/{p}" for i in (1, 2, 3) for p in ("weight", "bias")}
        expected |= {f"bn{i}/{p}" for i in (1, 2, 3) for p in ("gamma", "beta")}
        expected |= {f"fc{i}/{p}" for i in (1, 2) for p in ("weight", "bias")}
        assert set(model.slots) == expected
        for slot in model.slots.values():
            assert slot.value.shape == slot.grad.shape

    def test_output_shape(self):
        model = build_model(ModelConfig(conv_channels=(2, 3, 4), hidden_units=5,
                                        input_shape=(1, 8, 8)), Rng(0))
        model.set_mode("eval")
        y = model.forward(Rng(1).uniform((3, 1, 8, 8)))
        assert y.shape == (3, 7)

    def test_eval_deterministic(self):
        model = build_model(ModelConfig(conv_channels=(2, 3, 4), hidden_units=5,
                                        input_shape=(1, 8, 8)), Rng(0))
        model.set_mode("eval")
        x = Rng(2).uniform((2, 1, 8, 8))
        assert np.array_equal(model.forward(x), model.forward(x))

    def test_identical_images_identical_logits(self):
        model = build_model(ModelConfig(conv_channels=(2, 3, 4), hidden_units=5,
                                        input_shape=(1, 8, 8)), Rng(0))
        model.set_mode("eval")
        x = np.repeat(Rng(3).uniform((1, 1, 8, 8)), 4, axis=0)
        y = model.forward(x)
        assert np.allclose(y, y[0], atol=1e-5)

    def test_train_eval_equivalence_with_frozen_bn(self):
        # no dropout, and running stats set to the batch stats: the two
        # modes compute the same normalization
        config = ModelConfig(conv_channels=(2, 3), hidden_units=5,
                             dropout_rate=0.0, input_shape=(1, 8, 8))
        model = build_model(config, Rng(4), dtype=np.float64)
        x = Rng(5).uniform((4, 1, 8, 8), dtype=np.float64)
        model.set_mode("train")
        train_logits = model.forward(x)
        for bn in model.batchnorms():
            # train forward stored momentum-blended stats; recover batch stats
            bn.running_mean = (bn.running_mean - 0.0) / 0.1
            bn.running_var = (bn.running_var - 0.9) / 0.1
        model.set_mode("eval")
        eval_logits = model.forward(x)
        assert np.allclose(train_logits, eval_logits, atol=1e-8)

    def test_backward_before_forward(self):
        model = build_model(ModelConfig(conv_channels=(2,), hidden_units=3,
                                        input_shape=(1, 4, 4)), Rng(0))
        with pytest.raises(UsageError):
            model.backward(np.zeros((1, 7)))

    def test_pool_stride_one_trace(self):
        config = ModelConfig(pool_stride=1)
        c, h, w = config.shape_trace()[-1]
        assert (h, w) == (45, 45)  # barely shrinks, as configured

    def test_bad_config(self):
        with pytest.raises(ValueError):
            ModelConfig(dropout_rate=1.0).validate()
        with pytest.raises(ValueError):
            ModelConfig(conv_channels=()).validate()
