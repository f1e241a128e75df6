import numpy as np
import pytest

from fedtune import adapter as adapter_mod
from fedtune import model as model_mod
from fedtune import session as session_mod
from fedtune.model import ModelSpec
from fedtune.tensor_nn import SeededRng


@pytest.fixture
def tiny_spec() -> ModelSpec:
    return ModelSpec(num_layers=2, hidden=8, heads=2, ffn_dim=16,
                     vocab=12, seqlen=5, num_labels=3)


@pytest.fixture
def tiny_model(tiny_spec):
    return model_mod.build_model(tiny_spec, seed=3)


@pytest.fixture
def tiny_tokens():
    # row 0 is the pooling token by convention
    return np.array([[0, 1, 2, 3, 4], [0, 5, 6, 7, 8], [0, 9, 10, 11, 1]])


def small_session_doc(**overrides) -> dict:
    """A fast-but-real session configuration for integration tests."""
    doc = {
        "seed": 11,
        "mode": "fixed_adapter",
        "model": {"num_layers": 3, "hidden": 16, "heads": 2, "ffn_dim": 32,
                  "vocab": 24, "seqlen": 8, "num_labels": 3},
        "task": {"teacher_seed": 5, "samples_per_label": 40, "noise_rate": 0.0},
        "num_clients": 9,
        "participants_per_group": 2,
        "noniid_concentration": 10.0,
        "batch_size": 4,
        "max_rounds": 4,
        "fixed_depth": 2,
        "fixed_width": 8,
    }
    doc.update(overrides)
    return doc


@pytest.fixture
def small_world():
    cfg = session_mod.config_from_dict(small_session_doc())
    return session_mod.build_world(cfg)
