import itertools
import math

import numpy as np
import pytest

from capsule_sed import capsules as C
from capsule_sed import tensor as T
from capsule_sed.gradcheck import check_gradients
from capsule_sed.tensor import Tensor

# Frozen from a literal pure-Python transcription of the routing loop
# (math.exp softmax, exact squash) for M=1, N=2, u_hat = (1,0), (0.5,0), r=2.
ORACLE_COUPLINGS = [[0.5425439385493253, 0.45745606145067474]]
ORACLE_OUTPUTS = [[0.2274137849879479, 0.0], [0.04971556698098031, 0.0]]


def routing_oracle(u_hat, r):
    """Step-by-step transcription of routing-by-agreement with plain lists."""
    M, N, U = len(u_hat), len(u_hat[0]), len(u_hat[0][0])
    beta = [[0.0] * N for _ in range(M)]
    for _ in range(r):
        alpha = []
        for i in range(M):
            e = [math.exp(b) for b in beta[i]]
            alpha.append([x / sum(e) for x in e])
        v = []
        for j in range(N):
            s = [sum(alpha[i][j] * u_hat[i][j][k] for i in range(M)) for k in range(U)]
            n2 = sum(x * x for x in s)
            v.append([n2 / (1 + n2) * x / math.sqrt(n2) if n2 > 0 else 0.0 for x in s])
        for i in range(M):
            for j in range(N):
                beta[i][j] += sum(v[j][k] * u_hat[i][j][k] for k in range(U))
    return alpha, v


class TestSquash:
    def test_zero_maps_to_zero(self):
        for form in C.SQUASH_FORMS:
            np.testing.assert_array_equal(C.squash(np.zeros(4), form).data, 0.0)

    def test_unit_norm_gives_half(self):
        s = np.array([0.6, 0.8])
        for form in C.SQUASH_FORMS:
            assert np.linalg.norm(C.squash(s, form).data) == pytest.approx(0.5, abs=1e-6)

    def test_three_four(self):
        s = np.array([3.0, 4.0])
        assert np.linalg.norm(C.squash(s, "cited").data) == pytest.approx(25 / 26, abs=1e-9)
        assert np.linalg.norm(C.squash(s, "paper-literal").data) == pytest.approx(5 / 26, abs=1e-9)

    def test_direction_kept(self):
        s = np.array([1.0, -2.0, 2.0])
        v = C.squash(s).data
        np.testing.assert_allclose(v / np.linalg.norm(v), s / 3.0)

    def test_cited_monotone(self):
        norms = np.linspace(0, 50, 2001)
        out = [np.linalg.norm(C.squash(np.array([n, 0.0])).data) for n in norms]
        assert np.all(np.diff(out) > 0)

    def test_literal_not_monotone(self):
        out = [np.linalg.norm(C.squash(np.array([n, 0.0]), "paper-literal").data) for n in (0.5, 1.0, 2.0)]
        assert out[1] > out[0] and out[1] > out[2]

    def test_gradients(self):
        for form in C.SQUASH_FORMS:
            for trial in range(20):
                x = np.random.default_rng(trial).standard_normal((3, 4))
                assert max(check_gradients(lambda s: C.squash(s, form), [x], seed=trial)) < 1e-6


class TestPrimaryCapsules:
    def test_paper_shape(self):
        rng = np.random.default_rng(0)
        out = C.primary_capsules(rng.standard_normal((64, 30, 8)).astype(np.float32),
                                 rng.standard_normal((64, 64, 3, 3)).astype(np.float32) * 0.05,
                                 np.zeros(64, np.float32))
        assert out.shape == (30, 64, 4)
        assert np.all(np.linalg.norm(out.data, axis=-1) < 1)

    def test_zero_input(self):
        out = C.primary_capsules(np.zeros((8, 6, 8)), np.ones((8, 8, 3, 3)), np.zeros(8))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_channel_grouping_contiguous(self):
        h = np.arange(2 * 8 * 3 * 2, dtype=np.float64).reshape(2, 8, 3, 2)
        caps = C.feature_map_to_capsules(Tensor(h), 4).data
        assert caps.shape == (2, 3, 4, 4)
        # slice t=1, frequency 1, channel group 1 -> channels 4..7
        np.testing.assert_array_equal(caps[0, 1, 1 * 2 + 1], h[0, 4:8, 1, 1])

    def test_indivisible_channels(self):
        with pytest.raises(T.ShapeError):
            C.feature_map_to_capsules(Tensor(np.zeros((1, 6, 2, 2))), 4)


class TestRouting:
    def test_oracle_example(self):
        u_hat = np.array([[[1.0, 0.0], [0.5, 0.0]]])
        st = C.empty_state()
        v = C.dynamic_routing(u_hat, C.RoutingConfig(iterations=2), st)
        np.testing.assert_allclose(st.couplings, ORACLE_COUPLINGS, atol=1e-9)
        np.testing.assert_allclose(v.data, ORACLE_OUTPUTS, atol=1e-9)
        alpha, out = routing_oracle(u_hat.tolist(), 2)
        np.testing.assert_allclose(alpha, ORACLE_COUPLINGS, atol=1e-12)
        np.testing.assert_allclose(out, ORACLE_OUTPUTS, atol=1e-12)

    def test_agreement_growth(self):
        u_hat = np.array([[[1.0, 0.0], [0.5, 0.0]]])
        st = C.empty_state()
        C.dynamic_routing(u_hat, C.RoutingConfig(iterations=2), st)
        first_agreement = np.einsum("nu,mnu->mn", st.outputs_history[0], u_hat)
        winner = int(first_agreement[0].argmax())
        assert st.couplings_history[1][0, winner] > st.couplings_history[1][0, 1 - winner]

    def test_random_instances_match_oracle(self):
        for trial in range(25):
            rng = np.random.default_rng(trial)
            M, N, U = rng.integers(1, 5, size=3)
            u_hat = rng.standard_normal((M, N, U))
            r = int(rng.integers(1, 5))
            _, out = routing_oracle(u_hat.tolist(), r)
            np.testing.assert_allclose(C.dynamic_routing(u_hat, C.RoutingConfig(r)).data, out, atol=1e-9)

    def test_single_output_independent_of_r(self):
        u_hat = np.random.default_rng(0).standard_normal((6, 1, 4))
        expected = C.squash(u_hat.sum(axis=0)).data
        for r in (1, 2, 3, 7):
            np.testing.assert_allclose(C.dynamic_routing(u_hat, C.RoutingConfig(r)).data, expected, atol=1e-12)

    def test_single_iteration_uniform(self):
        u_hat = np.random.default_rng(1).standard_normal((5, 3, 4))
        st = C.empty_state()
        v = C.dynamic_routing(u_hat, C.RoutingConfig(1), st)
        np.testing.assert_allclose(st.couplings, 1 / 3, atol=1e-15)
        np.testing.assert_allclose(v.data, C.squash(u_hat.sum(axis=0) / 3).data, atol=1e-12)

    def test_couplings_sum_to_one(self):
        for trial in range(100):
            rng = np.random.default_rng(trial)
            u_hat = rng.standard_normal((7, 4, 3)) * 3
            st = C.empty_state()
            v = C.dynamic_routing(u_hat, C.RoutingConfig(3), st)
            for alpha in st.couplings_history:
                np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-6)
            assert np.all(np.linalg.norm(v.data, axis=-1) < 1)

    def test_permutation_equivariant(self):
        u_hat = np.random.default_rng(2).standard_normal((5, 4, 3))
        v = C.dynamic_routing(u_hat).data
        for perm in itertools.permutations(range(4)):
            np.testing.assert_allclose(C.dynamic_routing(u_hat[:, list(perm)]).data, v[list(perm)], atol=1e-12)

    def test_batched_matches_unbatched(self):
        u_hat = np.random.default_rng(3).standard_normal((3, 5, 4, 2))
        batched = C.dynamic_routing(u_hat).data
        for b in range(3):
            np.testing.assert_allclose(batched[b], C.dynamic_routing(u_hat[b]).data, atol=1e-12)

    def test_zero_iterations_rejected(self):
        with pytest.raises(ValueError):
            C.RoutingConfig(iterations=0)

    def test_gradients_through_three_iterations(self):
        for trial in range(20):
            x = np.random.default_rng(trial).standard_normal((4, 3, 5))
            assert max(check_gradients(lambda u: C.dynamic_routing(u), [x], seed=trial)) < 1e-6


class TestCapsuleLengths:
    def test_zero(self):
        np.testing.assert_allclose(C.capsule_lengths(np.zeros((3, 8))).data, 0.0, atol=1e-6)

    def test_hand_value(self):
        assert C.capsule_lengths(np.array([[0.3, 0.4]])).data[0] == pytest.approx(0.5, abs=1e-9)

    def test_rotation_invariant(self):
        rng = np.random.default_rng(0)
        v = rng.standard_normal((4, 3))
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        np.testing.assert_allclose(C.capsule_lengths(v @ q.T).data, C.capsule_lengths(v).data, atol=1e-12)


class TestCapsuleDenseLayer:
    def test_zero_weights(self):
        v = C.capsule_dense_layer(np.ones((5, 4)), np.zeros((3, 5, 8, 4)))
        np.testing.assert_allclose(v.data, 0.0)

    def test_single_capsule_identity(self):
        u = np.array([[0.3, -0.2, 0.5, 0.1]])
        W = np.eye(4).reshape(1, 1, 4, 4)
        np.testing.assert_allclose(C.capsule_dense_layer(u, W).data, C.squash(u).data, atol=1e-12)

    def test_matches_oracle_end_to_end(self):
        for trial in range(10):
            rng = np.random.default_rng(trial)
            u = rng.standard_normal((6, 4))
            W = rng.standard_normal((3, 6, 8, 4)) * 0.5
            u_hat = np.einsum("nmoi,mi->mno", W, u)
            _, out = routing_oracle(u_hat.tolist(), 3)
            np.testing.assert_allclose(C.capsule_dense_layer(u, W).data, out, atol=1e-9)

    def test_paper_geometry(self):
        rng = np.random.default_rng(0)
        v = C.capsule_dense_layer(rng.standard_normal((64, 4)) * 0.2, rng.standard_normal((17, 64, 8, 4)) * 0.1)
        assert v.shape == (17, 8)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            C.capsule_dense_layer(np.ones((5, 4)), np.zeros((3, 6, 8, 4)))

    def test_gradients(self):
        for trial in range(20):
            rng = np.random.default_rng(trial)
            errs = check_gradients(lambda u, W: C.capsule_dense_layer(u, W),
                                   [rng.standard_normal((2, 5, 4)), rng.standard_normal((3, 5, 6, 4)) * 0.5],
                                   seed=trial)
            assert max(errs) < 1e-6
