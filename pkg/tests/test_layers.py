import numpy as np
import pytest

from capsule_sed import layers as Lyr
from capsule_sed import tensor as T
from capsule_sed.gradcheck import check_gradients
from capsule_sed.tensor import Tensor


def gated_params(lin_k, lin_b, gate_k, gate_b):
    return {k: Tensor(np.asarray(v, dtype=np.float64)) for k, v in
            {"linear.kernel": lin_k, "linear.bias": lin_b, "gate.kernel": gate_k, "gate.bias": gate_b}.items()}


def stack_params(rng, spec, c_in=1, dtype=np.float32):
    params, states = {}, {}
    for b in range(spec.blocks):
        for l in range(spec.layers_per_block):
            prefix = f"block{b}.layer{l}."
            for k, v in Lyr.init_gated_conv(rng, c_in, spec, dtype).items():
                params[prefix + k] = Tensor(v)
            params[prefix + "bn.gamma"] = Tensor(np.ones(spec.filters_linear, dtype))
            params[prefix + "bn.beta"] = Tensor(np.zeros(spec.filters_linear, dtype))
            states[prefix] = Lyr.BatchNormState.fresh(spec.filters_linear, dtype=dtype)
            c_in = spec.filters_linear
    return params, states


class TestGatedConv:
    def test_zero_gate_halves_linear_branch(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 4, 4))
        k = rng.standard_normal((2, 1, 3, 3))
        p = gated_params(k, np.zeros(2), np.zeros((2, 1, 3, 3)), np.zeros(2))
        out = Lyr.gated_conv(Tensor(x), p)
        np.testing.assert_allclose(out.data, 0.5 * T.conv2d(x, k).data)

    def test_saturated_gate_closes(self):
        x = np.ones((1, 4, 4))
        p = gated_params(np.ones((1, 1, 1, 1)), [0.0], np.zeros((1, 1, 1, 1)), [-1e3])
        np.testing.assert_allclose(Lyr.gated_conv(Tensor(x), p).data, 0.0, atol=1e-300)

    def test_hand_set_passthrough(self):
        x = np.arange(16.0).reshape(1, 4, 4)
        p = gated_params(np.full((1, 1, 1, 1), 2.0), [0.0], np.zeros((1, 1, 1, 1)), [0.0])
        np.testing.assert_allclose(Lyr.gated_conv(Tensor(x), p).data, x)

    def test_gating_bound(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 5, 5))
        p = gated_params(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3),
                         rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3))
        out = Lyr.gated_conv(Tensor(x), p).data
        lin = T.conv2d(x, p["linear.kernel"], p["linear.bias"]).data
        assert np.all(np.abs(out) <= np.abs(lin))

    def test_spec_rejects_unequal_filters(self):
        with pytest.raises(ValueError):
            Lyr.GatedConvSpec(filters_linear=64, filters_gate=32)

    def test_gradients(self):
        for trial in range(20):
            rng = np.random.default_rng(trial)
            shapes = [(2, 4, 5), (3, 2, 3, 3), (3,), (3, 2, 3, 3), (3,)]

            def f(x, lk, lb, gk, gb):
                return Lyr.gated_conv(x, {"linear.kernel": lk, "linear.bias": lb, "gate.kernel": gk, "gate.bias": gb})

            errs = check_gradients(f, [rng.standard_normal(s) for s in shapes], seed=trial)
            assert max(errs) < 1e-6


class TestBlockStack:
    def test_paper_geometry(self):
        spec = Lyr.GatedConvSpec()
        params, states = stack_params(np.random.default_rng(0), spec)
        out = Lyr.gated_block_stack(Tensor(np.zeros((1, 1, 240, 64), np.float32)), params, states, spec)
        assert out.shape == (1, 64, 30, 8)

    def test_halving_law_odd_sizes(self):
        spec = Lyr.GatedConvSpec(filters_linear=2, filters_gate=2, blocks=3)
        params, states = stack_params(np.random.default_rng(0), spec)
        out = Lyr.gated_block_stack(Tensor(np.zeros((1, 1, 25, 11), np.float32)), params, states, spec)
        assert out.shape == (1, 2, 4, 2)

    def test_too_small(self):
        spec = Lyr.GatedConvSpec(filters_linear=2, filters_gate=2)
        params, states = stack_params(np.random.default_rng(0), spec)
        with pytest.raises(T.ShapeError):
            Lyr.gated_block_stack(Tensor(np.zeros((1, 1, 4, 64))), params, states, spec)

    def test_inference_is_pure(self):
        spec = Lyr.GatedConvSpec(filters_linear=4, filters_gate=4, blocks=2)
        params, states = stack_params(np.random.default_rng(0), spec)
        x = Tensor(np.random.default_rng(1).standard_normal((2, 1, 16, 16)).astype(np.float32))
        a = Lyr.gated_block_stack(x, params, states, spec, training=False).data
        b = Lyr.gated_block_stack(x, params, states, spec, training=False).data
        assert a.tobytes() == b.tobytes()

    def test_training_updates_running_stats_only_in_training(self):
        spec = Lyr.GatedConvSpec(filters_linear=4, filters_gate=4, blocks=1)
        params, states = stack_params(np.random.default_rng(0), spec)
        x = Tensor(np.random.default_rng(1).standard_normal((2, 1, 8, 8)).astype(np.float32))
        before = states["block0.layer0."].running_mean.copy()
        Lyr.gated_block_stack(x, params, states, spec, training=False)
        np.testing.assert_array_equal(states["block0.layer0."].running_mean, before)
        Lyr.gated_block_stack(x, params, states, spec, training=True, rng=np.random.default_rng(2))
        assert not np.array_equal(states["block0.layer0."].running_mean, before)
        assert np.all(states["block0.layer0."].running_var >= 0)


class TestBatchNorm:
    def test_training_normalizes(self):
        x = np.random.default_rng(0).normal(3.0, 2.0, (4, 3, 5, 5))
        st = Lyr.BatchNormState.fresh(3, dtype=np.float64)
        out = Lyr.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), st, training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)

    def test_inference_uses_running_stats(self):
        st = Lyr.BatchNormState(np.array([1.0]), np.array([4.0]), eps=0.0)
        out = Lyr.batch_norm(Tensor(np.full((1, 1, 2, 2), 5.0)), Tensor([1.0]), Tensor([0.0]), st, False)
        np.testing.assert_allclose(out.data, 2.0)

    def test_gradients(self):
        for trial in range(20):
            rng = np.random.default_rng(trial)

            def f(x, g, b):
                return Lyr.batch_norm(x, g, b, Lyr.BatchNormState.fresh(3, dtype=np.float64), True)

            errs = check_gradients(f, [rng.standard_normal((2, 3, 2, 3)), rng.standard_normal(3),
                                       rng.standard_normal(3)], seed=trial)
            assert max(errs) < 1e-6


class TestDense:
    def test_identity_passthrough(self):
        x = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(Lyr.dense(x, np.eye(3), np.zeros(3)).data, x)

    def test_zero_weights_sigmoid(self):
        np.testing.assert_array_equal(Lyr.dense(np.ones(4), np.zeros((4, 2)), np.zeros(2), "sigmoid").data, 0.5)

    def test_hand_evaluation(self):
        out = Lyr.dense(np.array([2.0, 1.0]), np.array([[1.0], [-1.0]]), np.zeros(1), "sigmoid")
        assert out.item() == pytest.approx(0.7310585786, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            Lyr.dense(np.ones(3), np.ones((2, 2)), np.zeros(2))


class TestDropout:
    def test_rate_zero_identity(self):
        x = Tensor(np.arange(5.0))
        assert Lyr.dropout(x, 0.0, True, np.random.default_rng(0)) is x

    def test_inference_identity(self):
        x = Tensor(np.arange(5.0))
        assert Lyr.dropout(x, 0.5, False) is x

    def test_seeded_mask_reproducible(self):
        x = Tensor(np.ones((10, 10)))
        a = Lyr.dropout(x, 0.5, True, np.random.default_rng(7)).data
        b = Lyr.dropout(x, 0.5, True, np.random.default_rng(7)).data
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a)) <= {0.0, 2.0}

    def test_expectation_preserved(self):
        x = np.linspace(0.5, 2.0, 8)
        rng = np.random.default_rng(11)
        samples = np.stack([Lyr.dropout(Tensor(x), 0.5, True, rng).data for _ in range(10_000)])
        np.testing.assert_allclose(samples.mean(axis=0), x, rtol=0.05)
