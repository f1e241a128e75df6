import numpy as np
import pytest

from fedtune import adapter as adapter_mod
from fedtune import model as model_mod
from fedtune import tensor_nn as tn
from fedtune.adapter import AdapterConfig
from fedtune.errors import (
    ConfigurationError,
    ContractViolation,
    DataError,
    EvaluationError,
)
from fedtune.model import ModelSpec, build_model, evaluate, forward, forward_from_boundary
from fedtune.tensor_nn import SeededRng


def model_bytes(model):
    return b"".join(p.tensor.data.tobytes() for p in model.parameters())


class TestBuildModel:
    def test_same_seed_bit_identical(self, tiny_spec):
        assert model_bytes(build_model(tiny_spec, 5)) == model_bytes(build_model(tiny_spec, 5))
        assert model_bytes(build_model(tiny_spec, 5)) != model_bytes(build_model(tiny_spec, 6))

    def test_backbone_count_matches_closed_form(self, tiny_spec):
        model = build_model(tiny_spec, 1)
        frozen = sum(p.size() for p in model.parameters() if not p.trainable)
        assert frozen == model_mod.backbone_param_count(tiny_spec)

    def test_backbone_count_at_reference_shape(self):
        spec = ModelSpec(num_layers=12, hidden=768, heads=12, ffn_dim=3072,
                         vocab=100, seqlen=16, num_labels=20)
        # per block: attention 4n^2+4n, two layer norms 4n, ffn 2nf+f+n
        n, f = 768, 3072
        per_block = 4 * n * n + 4 * n + 4 * n + 2 * n * f + f + n
        expected = 100 * n + 16 * n + 12 * per_block
        assert model_mod.backbone_param_count(spec) == expected

    def test_depth_zero_trainable_is_classifier_only(self, tiny_spec, tiny_model):
        count = adapter_mod.trainable_param_count(tiny_model)
        assert count == tiny_spec.hidden * tiny_spec.num_labels + tiny_spec.num_labels

    def test_invalid_spec(self):
        with pytest.raises(ConfigurationError):
            ModelSpec(num_layers=0, hidden=8, heads=2, ffn_dim=16,
                      vocab=10, seqlen=4, num_labels=2)
        with pytest.raises(ConfigurationError):
            ModelSpec(num_layers=1, hidden=9, heads=2, ffn_dim=16,
                      vocab=10, seqlen=4, num_labels=2)


class TestForward:
    def test_depth_zero_ignores_adapter_rng(self, tiny_spec, tiny_tokens):
        a = build_model(tiny_spec, 5)
        b = build_model(tiny_spec, 5)
        # inserting a depth-0 config consumes no randomness and adds nothing
        b = adapter_mod.insert_adapters(b, AdapterConfig(0, 8, 8), SeededRng(99))
        assert np.array_equal(forward(a, tiny_tokens).data, forward(b, tiny_tokens).data)

    def test_zero_up_projection_is_residual_noop(self, tiny_model, tiny_tokens):
        base = forward(tiny_model, tiny_tokens).data
        adapted = adapter_mod.insert_adapters(
            tiny_model, AdapterConfig(2, 8, 8), SeededRng(11))
        for block in adapted.blocks:
            for meta in block.adapters:
                meta.w_up.tensor.data[:] = 0.0
        assert np.array_equal(base, forward(adapted, tiny_tokens).data)

    def test_out_of_range_token(self, tiny_model):
        with pytest.raises(DataError):
            forward(tiny_model, np.array([[0, 1, 99, 2, 3]]))

    def test_golden_logits_reproduced(self, tiny_tokens):
        spec = ModelSpec(num_layers=2, hidden=8, heads=2, ffn_dim=16,
                         vocab=12, seqlen=5, num_labels=3)
        model = build_model(spec, seed=2024)
        logits = forward(model, tiny_tokens[:2]).data
        # frozen golden values from the first verified run of this configuration
        golden = np.array([
            [0.0714217120065039, -0.03465329193142037, -0.022805332312550903],
            [0.08229840649731744, -0.009517061480671302, -0.07798217541428816],
        ])
        assert np.allclose(logits, golden, rtol=0, atol=1e-15)


class TestBoundary:
    @pytest.fixture
    def adapted(self, tiny_model):
        return adapter_mod.insert_adapters(tiny_model, AdapterConfig(1, 8, 8), SeededRng(7))

    def test_boundary_zero_equals_full_forward(self, adapted, tiny_tokens):
        act = model_mod.compute_boundary_activation(adapted, tiny_tokens, 0)
        full = forward(adapted, tiny_tokens).data
        resumed = forward_from_boundary(adapted, 0, act).data
        assert np.array_equal(full, resumed)

    def test_mid_boundary_bit_identical(self, tiny_tokens):
        spec = ModelSpec(num_layers=6, hidden=8, heads=2, ffn_dim=16,
                         vocab=12, seqlen=5, num_labels=3)
        model = adapter_mod.insert_adapters(
            build_model(spec, 3), AdapterConfig(2, 8, 8), SeededRng(1))
        act = model_mod.compute_boundary_activation(model, tiny_tokens, 4)
        assert np.array_equal(forward(model, tiny_tokens).data,
                              forward_from_boundary(model, 4, act).data)

    def test_boundary_backward_grads_match_full_path(self, adapted, tiny_tokens):
        labels = np.array([0, 1, 2])
        params = adapted.trainable_parameters()

        loss_full = tn.cross_entropy_loss(forward(adapted, tiny_tokens), labels)
        loss_full.backward()
        grads_full = {p.name: p.tensor.grad.copy() for p in params}
        tn.clear_grads(params)

        act = model_mod.compute_boundary_activation(adapted, tiny_tokens, 1)
        loss_boundary = tn.cross_entropy_loss(
            forward_from_boundary(adapted, 1, act), labels)
        loss_boundary.backward()
        for p in params:
            assert np.array_equal(grads_full[p.name], p.tensor.grad), p.name

    def test_boundary_above_lowest_adapter_rejected(self, adapted, tiny_tokens):
        act = model_mod.compute_boundary_activation(adapted, tiny_tokens, 1)
        with pytest.raises(ContractViolation):
            forward_from_boundary(adapted, 2, act)


class TestEvaluate:
    def test_biased_classifier_scores_one(self, tiny_model, tiny_tokens):
        tiny_model.cls_w.tensor.data[:] = 0.0
        tiny_model.cls_b.tensor.data[:] = np.array([0.0, 10.0, 0.0])
        labels = np.array([1, 1, 1])
        assert evaluate(tiny_model, tiny_tokens, labels) == 1.0

    def test_random_model_near_chance(self):
        spec = ModelSpec(num_layers=1, hidden=8, heads=2, ffn_dim=16,
                         vocab=30, seqlen=6, num_labels=4)
        model = build_model(spec, 9)
        rng = SeededRng(17)
        tokens = np.concatenate(
            [np.zeros((600, 1), dtype=np.int64),
             rng.integers(1, 30, size=(600, 5))], axis=1)
        labels = rng.integers(0, 4, size=600)
        acc = evaluate(model, tokens, labels)
        # binomial 3-sigma band around chance level 1/4
        sigma = np.sqrt(0.25 * 0.75 / 600)
        assert abs(acc - 0.25) < 3 * sigma + 1e-9

    def test_deterministic(self, tiny_model, tiny_tokens):
        labels = np.array([0, 1, 2])
        assert evaluate(tiny_model, tiny_tokens, labels) == evaluate(
            tiny_model, tiny_tokens, labels)

    def test_empty_shard(self, tiny_model):
        with pytest.raises(EvaluationError):
            evaluate(tiny_model, np.zeros((0, 5), dtype=np.int64), np.zeros(0, dtype=np.int64))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tiny_model, tiny_tokens, tmp_path):
        model = adapter_mod.insert_adapters(tiny_model, AdapterConfig(2, 16, 8), SeededRng(4))
        path = str(tmp_path / "model.npz")
        model_mod.save_model(model, path)
        loaded = model_mod.load_model(path)
        assert model_bytes(loaded) == model_bytes(model)
        assert [p.trainable for p in loaded.parameters()] == [
            p.trainable for p in model.parameters()]
        assert np.array_equal(forward(loaded, tiny_tokens).data,
                              forward(model, tiny_tokens).data)
