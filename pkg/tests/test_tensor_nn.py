import math

import numpy as np
import pytest

from fedtune import tensor_nn as tn
from fedtune.errors import (
    ConfigurationError,
    DataError,
    ShapeError,
    TrainingError,
)
from fedtune.tensor_nn import (
    AttentionParams,
    SeededRng,
    Tensor,
    cross_entropy_loss,
    grad_check,
    layer_norm,
    linear_forward,
    make_parameter,
    multi_head_attention,
    sgd_step,
)


def rand_param(rng, shape, name, trainable=True):
    return make_parameter(rng.normal(0.0, 1.0, shape), trainable, name)


def make_attention(rng, n, trainable=True):
    fields = {}
    for key in ("wq", "wk", "wv", "wo"):
        fields[key] = rand_param(rng, (n, n), key, trainable)
        fields["b" + key[1]] = rand_param(rng, (n,), "b" + key[1], trainable)
    return AttentionParams(**fields)


class TestSeededRng:
    def test_same_seed_same_stream(self):
        a = SeededRng(42).normal(0, 1, (4, 4))
        b = SeededRng(42).normal(0, 1, (4, 4))
        assert np.array_equal(a, b)

    def test_spawn_is_stable_and_independent(self):
        root = SeededRng(7)
        child1 = root.spawn("task")
        child2 = SeededRng(7).spawn("task")
        other = SeededRng(7).spawn("model")
        assert np.array_equal(child1.normal(0, 1, 8), child2.normal(0, 1, 8))
        assert not np.array_equal(SeededRng(7).spawn("task").normal(0, 1, 8),
                                  other.normal(0, 1, 8))

    def test_algorithm_is_pinned(self):
        assert SeededRng.ALGORITHM == "pcg64"


class TestLinear:
    def test_identity(self):
        x = Tensor([[1.0, 0.0], [0.0, 1.0]])
        w = make_parameter(np.eye(2), True, "w")
        b = make_parameter(np.zeros(2), True, "b")
        out = linear_forward(x, w, b)
        assert np.array_equal(out.data, np.eye(2))

    def test_hand_arithmetic(self):
        x = Tensor([[1.0, 2.0]])
        w = make_parameter([[1.0], [1.0]], True, "w")
        b = make_parameter([3.0], True, "b")
        assert linear_forward(x, w, b).data.tolist() == [[6.0]]

    def test_gradcheck_seed7(self):
        rng = SeededRng(7)
        x = Tensor(rng.normal(0, 1, (3, 4)))
        w = rand_param(rng, (4, 5), "w")
        b = rand_param(rng, (5,), "b")

        def loss():
            out = linear_forward(x, w, b)
            flat = tn.reshape(out, (15,))
            sq = tn.bmm(tn.reshape(flat, (1, 1, 15)), tn.reshape(flat, (1, 15, 1)))
            return tn.reshape(sq, ())

        err = grad_check(loss, [w, b], step=1e-5)
        assert err < 1e-6

    def test_shape_error_names_both_shapes(self):
        x = Tensor(np.zeros((2, 3)))
        w = make_parameter(np.zeros((4, 5)), True, "w")
        b = make_parameter(np.zeros(5), True, "b")
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            linear_forward(x, w, b)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = Tensor([[5.0, 5.0, 5.0]])
        g = make_parameter(np.ones(3), False, "g")
        s = make_parameter(np.zeros(3), False, "s")
        out = layer_norm(x, g, s)
        assert np.allclose(out.data, 0.0)

    def test_two_point_row(self):
        x = Tensor([[1.0, -1.0]])
        g = make_parameter(np.ones(2), False, "g")
        s = make_parameter(np.zeros(2), False, "s")
        out = layer_norm(x, g, s).data
        # population variance 1, eps slightly shrinks the output
        assert out.flatten() == pytest.approx([1.0, -1.0], abs=1e-4)

    def test_row_statistics(self):
        rng = SeededRng(3)
        x = Tensor(rng.normal(2.0, 3.0, (6, 32)))
        g = make_parameter(np.ones(32), False, "g")
        s = make_parameter(np.zeros(32), False, "s")
        out = layer_norm(x, g, s).data
        assert np.abs(out.mean(axis=1)).max() < 1e-12
        assert np.abs(out.var(axis=1) - 1.0).max() < 1e-4

    def test_gradcheck(self):
        rng = SeededRng(5)
        x = Tensor(rng.normal(0, 1, (3, 6)), requires_grad=False)
        g = rand_param(rng, (6,), "g")
        s = rand_param(rng, (6,), "s")
        labels = np.array([0, 1, 2])

        def loss():
            return cross_entropy_loss(
                linear_forward(layer_norm(x, g, s), w, b), labels)

        w = rand_param(rng, (6, 3), "w")
        b = rand_param(rng, (3,), "b")
        err = grad_check(loss, [g, s, w, b])
        assert err < 1e-6

    def test_gradcheck_through_input(self):
        rng = SeededRng(9)
        base = rand_param(rng, (2, 6), "base")
        g = rand_param(rng, (6,), "g")
        s = rand_param(rng, (6,), "s")
        labels = np.array([1, 0])
        w = rand_param(rng, (6, 2), "w")
        b = rand_param(rng, (2,), "b")

        def loss():
            return cross_entropy_loss(
                linear_forward(layer_norm(base.tensor, g, s), w, b), labels)

        assert grad_check(loss, [base, g, s, w, b]) < 1e-6


class TestAttention:
    def test_single_position_is_value_projection(self):
        rng = SeededRng(1)
        n = 6
        params = make_attention(rng, n)
        x = Tensor(rng.normal(0, 1, (2, 1, n)))
        out = multi_head_attention(x, params, heads=2).data
        v = x.data.reshape(-1, n) @ params.wv.data + params.bv.data
        expected = (v @ params.wo.data + params.bo.data).reshape(2, 1, n)
        assert np.allclose(out, expected, atol=1e-12)

    def test_heads_must_divide(self):
        rng = SeededRng(2)
        params = make_attention(rng, 6)
        x = Tensor(rng.normal(0, 1, (1, 3, 6)))
        with pytest.raises(ConfigurationError):
            multi_head_attention(x, params, heads=4)

    def test_batch_permutation_equivariance(self):
        rng = SeededRng(4)
        n = 8
        params = make_attention(rng, n, trainable=False)
        x = rng.normal(0, 1, (5, 3, n))
        perm = np.array([3, 0, 4, 1, 2])
        out = multi_head_attention(Tensor(x), params, heads=2).data
        out_perm = multi_head_attention(Tensor(x[perm]), params, heads=2).data
        assert np.array_equal(out[perm], out_perm)

    def test_gradcheck_two_heads(self):
        rng = SeededRng(6)
        n = 4
        params = make_attention(rng, n)
        x = Tensor(rng.normal(0, 1, (2, 3, n)))
        labels = np.array([0, 1])
        w = rand_param(rng, (n, 2), "w")
        b = rand_param(rng, (2,), "b")

        def loss():
            att = multi_head_attention(x, params, heads=2)
            return cross_entropy_loss(linear_forward(tn.first_token(att), w, b), labels)

        err = grad_check(loss, params.all() + [w, b])
        assert err < 1e-4


class TestCrossEntropy:
    def test_extreme_logits_are_stable(self):
        loss = cross_entropy_loss(Tensor([[1000.0, -1000.0]]), np.array([0]))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_logits(self):
        loss = cross_entropy_loss(Tensor([[0.0, 0.0, 0.0, 0.0]]), np.array([2]))
        assert loss.item() == pytest.approx(math.log(4.0), rel=1e-12)

    def test_out_of_range_label_identifies_sample(self):
        with pytest.raises(DataError, match="sample 1"):
            cross_entropy_loss(Tensor(np.zeros((3, 2))), np.array([0, 5, 1]))

    def test_gradcheck(self):
        rng = SeededRng(8)
        x = Tensor(rng.normal(0, 1, (4, 3)))
        w = rand_param(rng, (3, 5), "w")
        b = rand_param(rng, (5,), "b")
        labels = np.array([0, 4, 2, 1])

        def loss():
            return cross_entropy_loss(linear_forward(x, w, b), labels)

        assert grad_check(loss, [w, b]) < 1e-6


class TestSgd:
    def test_frozen_param_bytes_unchanged(self):
        rng = SeededRng(1)
        frozen = rand_param(rng, (3, 3), "frozen", trainable=False)
        live = rand_param(rng, (3, 3), "live", trainable=True)
        before = frozen.data.tobytes()
        x = Tensor(rng.normal(0, 1, (2, 3)))
        loss = cross_entropy_loss(
            linear_forward(x, live, make_parameter(np.zeros(3), True, "b")),
            np.array([0, 1]))
        loss.backward()
        live.tensor.grad = np.ones((3, 3))
        sgd_step([frozen, live], lr=0.5)
        assert frozen.data.tobytes() == before

    def test_hand_arithmetic(self):
        p = make_parameter([1.0], True, "p")
        p.tensor.grad = np.array([2.0])
        sgd_step([p], lr=0.1)
        assert p.data.tolist() == [0.8]
        assert p.tensor.grad is None

    def test_two_steps_match_summed_gradient(self):
        rng = SeededRng(2)
        g1, g2 = rng.normal(0, 1, 4), rng.normal(0, 1, 4)
        start = rng.normal(0, 1, 4)
        p = make_parameter(start.copy(), True, "p")
        p.tensor.grad = g1.copy()
        sgd_step([p], lr=0.05)
        p.tensor.grad = g2.copy()
        sgd_step([p], lr=0.05)
        q = make_parameter(start.copy(), True, "q")
        q.tensor.grad = g1 + g2
        sgd_step([q], lr=0.05)
        assert np.allclose(p.data, q.data, atol=1e-12)

    def test_missing_gradient_raises(self):
        p = make_parameter([1.0], True, "p")
        with pytest.raises(TrainingError, match="'p'"):
            sgd_step([p], lr=0.1)

    def test_lr_zero_is_bitwise_noop(self):
        p = make_parameter([0.1, -2.5, 3e-7], True, "p")
        before = p.data.tobytes()
        p.tensor.grad = np.array([5.0, -1.0, 2.0])
        sgd_step([p], lr=0.0)
        assert p.data.tobytes() == before


class TestGradCheck:
    def test_zero_parameter_model_returns_zero(self):
        assert grad_check(lambda: Tensor(np.array(1.0)), []) == 0.0

    def test_linear_model_is_nearly_exact(self):
        rng = SeededRng(3)
        w = rand_param(rng, (4,), "w")
        x = rng.normal(0, 1, 4)

        def loss():
            # loss linear in w, so central differences are exact to rounding
            prod = tn.bmm(tn.reshape(Tensor(x), (1, 1, 4)),
                          tn.reshape(w.tensor, (1, 4, 1)))
            return tn.reshape(prod, ())

        assert grad_check(loss, [w]) < 1e-8


class TestDeterminism:
    def test_forward_backward_bit_identical(self):
        def run():
            rng = SeededRng(12)
            x = Tensor(rng.normal(0, 1, (3, 2, 8)))
            params = make_attention(rng, 8)
            w = rand_param(rng, (8, 3), "w")
            b = rand_param(rng, (3,), "b")
            att = multi_head_attention(x, params, heads=2)
            loss = cross_entropy_loss(
                linear_forward(tn.first_token(att), w, b), np.array([0, 1, 2]))
            loss.backward()
            return loss.item(), w.tensor.grad.tobytes(), params.wq.tensor.grad.tobytes()

        assert run() == run()
