import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agn import layers as L
from agn import tensor as T
from agn.errors import ConfigError, InputError, ShapeError
from agn.gradcheck import grad_check
from agn.tensor import Tensor

from conftest import t64
from oracles import affm_loop, conv2d_loop, cosine_loop, gce_loop, nonlocal_loop, weighted_joint_sum


def arrays(p):
    return {k: v.data for k, v in p.items()}


def gce_params(rng, n, c):
    return L.init_gce(rng, n, c, dtype=np.float64)


class TestVelocity:
    def test_constant_sequence(self):
        np.testing.assert_array_equal(L.velocity(t64(np.full((2, 5, 3), 7.0))).data, 0)

    def test_ramp(self):
        c = np.array([1.0, -2.0, 0.5])
        x = np.arange(6)[None, :, None] * c
        np.testing.assert_allclose(L.velocity(t64(x)).data, np.broadcast_to(c, (1, 5, 3)))

    def test_against_subtraction(self, rng):
        x = rng.standard_normal((3, 5, 3))
        out = L.velocity(t64(x)).data
        for t in range(4):
            np.testing.assert_array_equal(out[:, t], x[:, t + 1] - x[:, t])

    def test_single_frame_rejected(self):
        with pytest.raises(InputError):
            L.velocity(t64(np.zeros((2, 1, 3))))


class TestMtde:
    def test_zero_input(self, rng):
        p = L.init_mtde(rng, 3, 8, dtype=np.float64)
        out = L.mtde_forward(t64(np.zeros((2, 6, 3))), p).data
        assert out.shape == (2, 11, 8)
        np.testing.assert_array_equal(out, 0)

    def test_reference_shape(self, rng):
        p = L.init_mtde(rng, 3, 32)
        assert L.mtde_forward(Tensor(np.zeros((2, 10, 3), np.float32)), p).shape == (2, 19, 32)

    def test_hand_computed_ramp(self):
        p = {
            "pos.k3.weight": t64(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1)),
            "pos.k3.bias": t64([0.0]),
            "pos.reduce.weight": t64([[1.0]]),
            "pos.reduce.bias": t64([0.0]),
            "vel.k3.weight": t64(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1)),
            "vel.k3.bias": t64([0.0]),
            "vel.reduce.weight": t64([[1.0]]),
            "vel.reduce.bias": t64([0.0]),
        }
        x = np.arange(4.0).reshape(1, 4, 1)
        out = L.mtde_forward(t64(x), p).data.reshape(-1)
        # position [0,1,2,3] -> [3, 8, 14, 8]; velocity [1,1,1] -> [5, 6, 3]
        np.testing.assert_array_equal(out, [3, 8, 14, 8, 5, 6, 3])

    def test_against_conv_oracle(self, rng):
        p = L.init_mtde(rng, 3, 4, dtype=np.float64)
        x = rng.standard_normal((2, 5, 3))
        v = x[:, 1:] - x[:, :-1]
        a = arrays(p)
        streams = []
        for name, inp in (("pos", x), ("vel", v)):
            cat = np.concatenate([conv2d_loop(inp, a[f"{name}.k{k}.weight"][None], a[f"{name}.k{k}.bias"])
                                  for k in (3, 5, 7)], axis=-1)
            streams.append(cat @ a[f"{name}.reduce.weight"] + a[f"{name}.reduce.bias"])
        np.testing.assert_allclose(L.mtde_forward(t64(x), p).data, np.concatenate(streams, axis=1), atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 12))
    def test_length_is_2t_minus_1(self, t):
        p = L.init_mtde(np.random.default_rng(t), 3, 4)
        assert L.mtde_forward(Tensor(np.ones((2, t, 3), np.float32)), p).shape[1] == 2 * t - 1

    def test_lift_variant_keeps_length(self, rng):
        p = L.init_mtde(rng, 3, 4, use_mtde=False)
        assert set(p) == {"lift.weight", "lift.bias"}
        assert L.mtde_forward(Tensor(np.ones((2, 6, 3), np.float32)), p).shape == (2, 11, 4)


class TestBalanceAttractor:
    def test_uniform_weights_give_mean(self, rng):
        n = 4
        p = gce_params(rng, n, 3)
        p["conv_ba.weight"] = t64(np.full((n, 1), 1 / n))
        x = rng.standard_normal((n, 5, 3))
        ba, x_new = L.balance_attractor(t64(x), p)
        assert ba.shape == (5, 3, 1)
        np.testing.assert_allclose(ba.data[..., 0], x.mean(0), atol=1e-12)
        np.testing.assert_allclose(x_new.data.mean(0), 0, atol=1e-6)

    def test_one_hot_zeroes_that_joint(self, rng):
        p = gce_params(rng, 4, 3)
        w = np.zeros((4, 1))
        w[2] = 1
        p["conv_ba.weight"] = t64(w)
        _, x_new = L.balance_attractor(t64(rng.standard_normal((4, 5, 3))), p)
        np.testing.assert_array_equal(x_new.data[2], 0)

    def test_against_weighted_sum(self, rng):
        p = gce_params(rng, 4, 2)
        p["conv_ba.bias"] = t64([0.3])
        x = rng.standard_normal((4, 3, 2))
        ba, x_new = L.balance_attractor(t64(x), p)
        ref = weighted_joint_sum(x, p["conv_ba.weight"].data[:, 0], 0.3)
        assert np.max(np.abs(ba.data[..., 0] - ref)) < 1e-12
        np.testing.assert_allclose(x_new.data, x - ref[None], atol=1e-12)

    def test_translation_invariance_with_unit_weight_sum(self, rng):
        n = 5
        p = gce_params(rng, n, 3)
        w = rng.uniform(0.1, 1, (n, 1))
        p["conv_ba.weight"] = t64(w / w.sum())
        x = rng.standard_normal((n, 4, 3))
        shift = rng.standard_normal((1, 4, 3)) * 100
        a = L.balance_attractor(t64(x), p)[1].data
        b = L.balance_attractor(t64(x + shift), p)[1].data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_wrong_joint_count(self, rng):
        with pytest.raises(ShapeError):
            L.balance_attractor(t64(np.zeros((3, 4, 2))), gce_params(rng, 4, 2))


class TestCosineUnit:
    def test_parallel_rows_give_ones(self, rng):
        p = gce_params(rng, 3, 2)
        p["conv_emb.weight"] = t64(np.eye(2))
        x = np.ones((3, 2, 2))  # every joint identical -> x_new rows identical too
        x[:, 1] *= 2
        stack = L.cosine_similarity_unit(t64(x), p).data
        np.testing.assert_allclose(stack, 1, atol=1e-12)

    def test_orthogonal_pair(self, rng):
        p = gce_params(rng, 2, 2)
        p["conv_emb.weight"] = t64(np.eye(2))
        x = np.array([[[1.0, 0.0]], [[0.0, 3.0]]])
        assert L.cosine_similarity_unit(t64(x), p).data[0, 0, 1] == 0

    def test_against_loop(self, rng):
        p = gce_params(rng, 5, 4)
        x = rng.standard_normal((5, 3, 4))
        stack = L.cosine_similarity_unit(t64(x), p).data
        emb = x @ p["conv_emb.weight"].data
        for t in range(3):
            assert np.max(np.abs(stack[t] - cosine_loop(emb[:, t]))) < 1e-12

    def test_slices_are_valid_correlations(self, rng):
        p = gce_params(rng, 5, 4)
        stack = L.cosine_similarity_unit(t64(rng.standard_normal((2, 5, 6, 4))), p).data
        assert stack.shape == (2, 6, 5, 5)
        np.testing.assert_array_equal(stack, np.swapaxes(stack, -1, -2))
        assert np.all(np.abs(stack) <= 1)
        np.testing.assert_allclose(np.diagonal(stack, axis1=-2, axis2=-1), 1, atol=1e-12)

    def test_row_scale_invariance(self, rng):
        p = gce_params(rng, 4, 3)
        p["conv_emb.weight"] = t64(np.eye(3))
        x = rng.standard_normal((4, 2, 3))
        a = L.cosine_similarity_unit(t64(x), p).data
        x[1] *= 7.5
        np.testing.assert_allclose(L.cosine_similarity_unit(t64(x), p).data, a, atol=1e-6)


class TestGce:
    def test_identity_graph(self, rng):
        p = gce_params(rng, 2, 2)
        p["conv_ba.weight"] = t64(np.zeros((2, 1)))
        p["conv_emb.weight"] = t64(np.eye(2))
        a = rng.uniform(1, 2, 4)
        x = np.zeros((2, 4, 2))
        x[0, :, 0] = a
        x[1, :, 1] = -a
        out = L.gce_forward(t64(x), p).data
        intra = T.conv2d(t64(x), p["conv_intra.weight"], p["conv_intra.bias"]).data
        np.testing.assert_allclose(out, intra, atol=1e-12)

    def test_zero_input(self, rng):
        np.testing.assert_array_equal(L.gce_forward(t64(np.zeros((4, 6, 2))), gce_params(rng, 4, 2)).data, 0)

    def test_against_staged_loops(self, rng):
        p = gce_params(rng, 4, 2)
        p["conv_intra.bias"] = t64(rng.standard_normal(2))
        x = rng.standard_normal((4, 6, 2))
        ref = gce_loop(x, arrays(p))
        assert np.max(np.abs(L.gce_forward(t64(x), p).data - ref)) < 1e-10

    def test_joint_permutation(self, rng):
        p = gce_params(rng, 5, 4)
        x = rng.standard_normal((5, 3, 4))
        perm = rng.permutation(5)
        q = dict(p)
        q["conv_ba.weight"] = t64(p["conv_ba.weight"].data[perm])
        out = L.gce_forward(t64(x), p).data
        np.testing.assert_allclose(L.gce_forward(t64(x[perm]), q).data, out[perm], atol=1e-12)

    def test_batched_equals_per_sample(self, rng):
        p = gce_params(rng, 3, 4)
        x = rng.standard_normal((2, 3, 5, 4))
        out = L.gce_forward(t64(x), p).data
        for b in range(2):
            np.testing.assert_allclose(out[b], L.gce_forward(t64(x[b]), p).data, atol=1e-12)


class TestLie:
    def test_zero_weights(self, rng):
        p = {k: t64(np.zeros(v.shape)) for k, v in L.init_lie(rng, 4).items()}
        adj, dist = L.lie_forward(t64(rng.standard_normal((3, 4, 4))), p)
        np.testing.assert_array_equal(adj.data, 0)
        np.testing.assert_array_equal(dist.data, 0)

    def test_shared_projection_gives_symmetric_logits(self, rng):
        p = L.init_lie(rng, 4, dtype=np.float64)
        x = t64(rng.standard_normal((1, 3, 4, 4)))
        theta = T.conv_1x1(x, p["theta.weight"], p["theta.bias"]).data.reshape(12, -1)
        logits = theta @ theta.T
        np.testing.assert_array_equal(logits, logits.T)

    def test_attention_rows_sum_to_one(self, rng):
        p = L.init_lie(rng, 6, dtype=np.float64)
        attn = L.attention_weights(t64(rng.standard_normal((2, 4, 5, 6)) * 3), p).data
        assert attn.shape == (2, 20, 20)
        np.testing.assert_allclose(attn.sum(-1), 1, atol=1e-6)

    def test_nonlocal_against_loop(self, rng):
        p = L.init_lie(rng, 2, dtype=np.float64)
        x = rng.standard_normal((3, 4, 2))
        _, dist = L.lie_forward(t64(x), p)
        assert np.max(np.abs(dist.data - nonlocal_loop(x, arrays(p)))) < 1e-10

    def test_adjacent_against_loop(self, rng):
        p = L.init_lie(rng, 2, dtype=np.float64)
        x = rng.standard_normal((3, 4, 2))
        adj, _ = L.lie_forward(t64(x), p)
        a = arrays(p)
        np.testing.assert_allclose(adj.data, conv2d_loop(x, a["conv_adjacent.weight"], a["conv_adjacent.bias"]),
                                   atol=1e-12)

    def test_odd_width_rejected(self, rng):
        with pytest.raises(ConfigError):
            L.init_lie(rng, 3)
        with pytest.raises(ConfigError):
            L.lie_forward(t64(np.zeros((2, 2, 3))), L.init_lie(rng, 4))


class TestAffm:
    def test_saturated_gate_is_identity_scaling(self, rng):
        p = L.init_affm(rng, 2, 4, ratio=2, dtype=np.float64)
        p["excite.weight"] = t64(np.zeros((2, 4)))
        p["excite.bias"] = t64(np.full(4, 50.0))
        feats = [t64(rng.standard_normal((3, 5, 4))) for _ in range(2)]
        out = L.affm_forward(feats, p).data
        z = T.conv_1x1(T.concat(feats, -1), p["reduce.weight"], p["reduce.bias"]).data
        np.testing.assert_allclose(out, z, atol=1e-12)

    def test_gate_range(self, rng):
        p = L.init_affm(rng, 1, 4, ratio=1, dtype=np.float64)
        p["reduce.weight"] = t64(np.eye(4))
        gate = L.affm_gate(t64(rng.standard_normal((1, 3, 5, 4)) * 10), p).data
        assert np.all((gate > 0) & (gate < 1))

    def test_against_se_loop(self, rng):
        p = L.init_affm(rng, 2, 4, ratio=2, dtype=np.float64)
        p["squeeze.bias"] = t64(rng.standard_normal(2))
        feats = [rng.standard_normal((3, 4, 4)) for _ in range(2)]
        out = L.affm_forward([t64(f) for f in feats], p).data
        assert np.max(np.abs(out - affm_loop(feats, arrays(p)))) < 1e-10

    def test_shape_mismatch(self, rng):
        p = L.init_affm(rng, 2, 4, ratio=2)
        with pytest.raises(ShapeError):
            L.affm_forward([t64(np.zeros((3, 4, 4))), t64(np.zeros((3, 5, 4)))], p)

    def test_bad_ratio(self, rng):
        with pytest.raises(ConfigError):
            L.init_affm(rng, 2, 6, ratio=4)


def _check_all(fn, x, params, tol=1e-3):
    """Gradient check w.r.t. the input and each parameter tensor."""
    errs = {"input": grad_check(lambda v: fn(v, params), x)}
    for name in params:
        def f(v, name=name):
            return fn(t64(x), {**params, name: v})
        errs[name] = grad_check(f, params[name].data)
    bad = {k: v for k, v in errs.items() if v >= tol}
    assert not bad, bad


class TestLayerGradients:
    def test_mtde(self, rng):
        p = L.init_mtde(rng, 3, 4, dtype=np.float64)
        _check_all(L.mtde_forward, rng.standard_normal((2, 5, 3)), p)

    def test_balance_attractor_and_cosine(self, rng):
        p = gce_params(rng, 3, 4)
        fn = lambda x, q: L.cosine_similarity_unit(L.balance_attractor(x, q)[1], q)  # noqa: E731
        _check_all(fn, rng.standard_normal((3, 5, 4)), {k: v for k, v in p.items() if "intra" not in k})

    def test_gce(self, rng):
        _check_all(L.gce_forward, rng.standard_normal((3, 5, 4)), gce_params(rng, 3, 4))

    def test_lie_adjacent(self, rng):
        p = L.init_lie(rng, 4, dtype=np.float64)
        q = {k: v for k, v in p.items() if k.startswith("conv_adjacent")}
        _check_all(lambda x, pp: T.conv2d(x, pp["conv_adjacent.weight"], pp["conv_adjacent.bias"]),
                   rng.standard_normal((3, 5, 4)), q)

    def test_lie_nonlocal(self, rng):
        p = L.init_lie(rng, 4, dtype=np.float64)
        q = {k: v for k, v in p.items() if not k.startswith("conv_adjacent")}
        _check_all(L.nonlocal_forward, rng.standard_normal((3, 5, 4)), q)

    def test_affm(self, rng):
        p = L.init_affm(rng, 3, 4, ratio=2, dtype=np.float64)
        feats = [t64(rng.standard_normal((3, 5, 4))) for _ in range(2)]
        _check_all(lambda x, q: L.affm_forward([x] + feats, q), rng.standard_normal((3, 5, 4)), p)
