"""Transformer encoder backbone, classifier head, and boundary-entry forward.

The backbone is a randomly initialized frozen encoder standing in for a
downloaded pre-trained model: embeddings and projection weights act as a
fixed feature extractor (reservoir style), while the classifier head and
any inserted adapter stacks are the only trainable parts. Layers are
1-indexed from the input side.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor_nn as tn
from .errors import (
    ConfigurationError,
    ContractViolation,
    DataError,
    EvaluationError,
)
from .tensor_nn import AttentionParams, Parameter, SeededRng, Tensor

CHECKPOINT_VERSION = 1
LN_EPS = 1e-5
EMBED_INIT_STD = 1.0
ADAPTER_INIT_STD = 0.02  # also used for the classifier head


@dataclass(frozen=True)
class ModelSpec:
    """Static shape of the encoder."""

    num_layers: int
    hidden: int
    heads: int
    ffn_dim: int
    vocab: int
    seqlen: int
    num_labels: int

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigurationError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden < 1 or self.hidden % self.heads != 0:
            raise ConfigurationError(
                f"hidden ({self.hidden}) must be positive and divisible by heads ({self.heads})"
            )
        if self.seqlen < 1:
            raise ConfigurationError(f"seqlen must be >= 1, got {self.seqlen}")
        if self.vocab < 2 or self.ffn_dim < 1 or self.num_labels < 2:
            raise ConfigurationError("vocab and num_labels must be >= 2, ffn_dim >= 1")

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden": self.hidden,
            "heads": self.heads,
            "ffn_dim": self.ffn_dim,
            "vocab": self.vocab,
            "seqlen": self.seqlen,
            "num_labels": self.num_labels,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(**d)


@dataclass
class MetaAdapter:
    """One bottleneck unit: down-projection, ReLU, up-projection, residual."""

    w_down: Parameter
    b_down: Parameter
    w_up: Parameter
    b_up: Parameter

    def all(self) -> list[Parameter]:
        return [self.w_down, self.b_down, self.w_up, self.b_up]

    @property
    def width(self) -> int:
        return self.w_down.data.shape[1]


@dataclass
class BlockParams:
    """One transformer layer plus its (possibly empty) adapter stack."""

    attn: AttentionParams
    ln1_gain: Parameter
    ln1_shift: Parameter
    ffn_w1: Parameter
    ffn_b1: Parameter
    ffn_w2: Parameter
    ffn_b2: Parameter
    ln2_gain: Parameter
    ln2_shift: Parameter
    adapters: list[MetaAdapter] = field(default_factory=list)

    def backbone_params(self) -> list[Parameter]:
        return self.attn.all() + [
            self.ln1_gain, self.ln1_shift,
            self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2,
            self.ln2_gain, self.ln2_shift,
        ]


@dataclass
class ModelState:
    """Value-type container for all model parameters."""

    spec: ModelSpec
    tok_embed: Parameter
    pos_embed: Parameter
    blocks: list[BlockParams]
    cls_w: Parameter
    cls_b: Parameter

    def parameters(self) -> Iterator[Parameter]:
        yield self.tok_embed
        yield self.pos_embed
        for block in self.blocks:
            yield from block.backbone_params()
            for meta in block.adapters:
                yield from meta.all()
        yield self.cls_w
        yield self.cls_b

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def adapter_depth(self) -> int:
        return sum(1 for block in self.blocks if block.adapters)

    def adapted_layers(self) -> list[int]:
        """1-indexed layers carrying adapters."""
        return [i + 1 for i, block in enumerate(self.blocks) if block.adapters]

    def lowest_trainable_layer(self) -> int | None:
        """Lowest 1-indexed layer with any trainable parameter, if any."""
        for i, block in enumerate(self.blocks):
            if any(p.trainable for p in block.backbone_params()):
                return i + 1
            if any(p.trainable for meta in block.adapters for p in meta.all()):
                return i + 1
        return None


def _adapter_name(layer: int, index: int, part: str) -> str:
    return f"block{layer:02d}.adapter{index:02d}.{part}"


def make_meta_adapter(
    hidden: int, width: int, layer: int, index: int, rng: SeededRng, trainable: bool = True
) -> MetaAdapter:
    """Fresh bottleneck unit: projection weights N(0, 0.02), zero biases."""
    return MetaAdapter(
        w_down=tn.make_parameter(
            rng.normal(0.0, ADAPTER_INIT_STD, (hidden, width)), trainable,
            _adapter_name(layer, index, "w_down")),
        b_down=tn.make_parameter(np.zeros(width), trainable, _adapter_name(layer, index, "b_down")),
        w_up=tn.make_parameter(
            rng.normal(0.0, ADAPTER_INIT_STD, (width, hidden)), trainable,
            _adapter_name(layer, index, "w_up")),
        b_up=tn.make_parameter(np.zeros(hidden), trainable, _adapter_name(layer, index, "b_up")),
    )


def build_model(spec: ModelSpec, seed: int) -> ModelState:
    """Frozen random backbone plus a trainable classifier, no adapters yet.

    Projection matrices use fan-in scaling so the frozen encoder produces
    well-mixed features; the classifier starts at N(0, 0.02) with zero bias.
    """
    root = SeededRng(seed)
    rb = root.spawn("backbone")
    rc = root.spawn("classifier")
    n, f = spec.hidden, spec.ffn_dim

    def frozen(data, name: str) -> Parameter:
        return tn.make_parameter(data, False, name)

    tok = frozen(rb.normal(0.0, EMBED_INIT_STD, (spec.vocab, n)), "tok_embed")
    pos = frozen(rb.normal(0.0, EMBED_INIT_STD, (spec.seqlen, n)), "pos_embed")
    blocks = []
    for layer in range(1, spec.num_layers + 1):
        pref = f"block{layer:02d}"
        std_n = n ** -0.5
        attn = AttentionParams(
            wq=frozen(rb.normal(0.0, std_n, (n, n)), f"{pref}.wq"),
            bq=frozen(np.zeros(n), f"{pref}.bq"),
            wk=frozen(rb.normal(0.0, std_n, (n, n)), f"{pref}.wk"),
            bk=frozen(np.zeros(n), f"{pref}.bk"),
            wv=frozen(rb.normal(0.0, std_n, (n, n)), f"{pref}.wv"),
            bv=frozen(np.zeros(n), f"{pref}.bv"),
            wo=frozen(rb.normal(0.0, std_n, (n, n)), f"{pref}.wo"),
            bo=frozen(np.zeros(n), f"{pref}.bo"),
        )
        blocks.append(BlockParams(
            attn=attn,
            ln1_gain=frozen(np.ones(n), f"{pref}.ln1_gain"),
            ln1_shift=frozen(np.zeros(n), f"{pref}.ln1_shift"),
            ffn_w1=frozen(rb.normal(0.0, std_n, (n, f)), f"{pref}.ffn_w1"),
            ffn_b1=frozen(np.zeros(f), f"{pref}.ffn_b1"),
            ffn_w2=frozen(rb.normal(0.0, f ** -0.5, (f, n)), f"{pref}.ffn_w2"),
            ffn_b2=frozen(np.zeros(n), f"{pref}.ffn_b2"),
            ln2_gain=frozen(np.ones(n), f"{pref}.ln2_gain"),
            ln2_shift=frozen(np.zeros(n), f"{pref}.ln2_shift"),
        ))
    cls_w = tn.make_parameter(rc.normal(0.0, ADAPTER_INIT_STD, (n, spec.num_labels)), True, "cls_w")
    cls_b = tn.make_parameter(np.zeros(spec.num_labels), True, "cls_b")
    return ModelState(spec, tok, pos, blocks, cls_w, cls_b)


def backbone_param_count(spec: ModelSpec) -> int:
    """Closed-form parameter count of the frozen encoder (no adapters)."""
    n, f = spec.hidden, spec.ffn_dim
    per_block = 4 * n * n + 4 * n + 4 * n + 2 * n * f + f + n
    return spec.vocab * n + spec.seqlen * n + spec.num_layers * per_block


# ---------------------------------------------------------------------------
# forward paths
# ---------------------------------------------------------------------------

def _embed(model: ModelState, tokens: np.ndarray) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise DataError(f"tokens must be [batch, seqlen], got shape {tokens.shape}")
    if tokens.shape[1] > model.spec.seqlen:
        raise DataError(
            f"sequence length {tokens.shape[1]} exceeds model seqlen {model.spec.seqlen}"
        )
    tok = tn.embedding(model.tok_embed, tokens)
    pos = tn.embedding(model.pos_embed, np.arange(tokens.shape[1]))
    return tn.add(tok, pos)


def _apply_block(block: BlockParams, h: Tensor, heads: int) -> Tensor:
    attn_out = tn.multi_head_attention(h, block.attn, heads)
    h = tn.layer_norm(tn.add(h, attn_out), block.ln1_gain, block.ln1_shift, LN_EPS)
    ffn_out = tn.linear_forward(
        tn.relu(tn.linear_forward(h, block.ffn_w1, block.ffn_b1)),
        block.ffn_w2, block.ffn_b2)
    h = tn.layer_norm(tn.add(h, ffn_out), block.ln2_gain, block.ln2_shift, LN_EPS)
    for meta in block.adapters:
        bottleneck = tn.relu(tn.linear_forward(h, meta.w_down, meta.b_down))
        h = tn.add(h, tn.linear_forward(bottleneck, meta.w_up, meta.b_up))
    return h


def _run_blocks(model: ModelState, h: Tensor, start_layer: int) -> Tensor:
    for block in model.blocks[start_layer - 1:]:
        h = _apply_block(block, h, model.spec.heads)
    return h


def _classify(model: ModelState, h: Tensor) -> Tensor:
    return tn.linear_forward(tn.first_token(h), model.cls_w, model.cls_b)


def forward(model: ModelState, tokens: np.ndarray) -> Tensor:
    """Embedding, all transformer blocks, first-token pooling, classifier."""
    return _classify(model, _run_blocks(model, _embed(model, tokens), 1))


def compute_boundary_activation(model: ModelState, tokens: np.ndarray, boundary: int) -> np.ndarray:
    """Output of layer ``boundary`` (0 = embedding output) as a plain array."""
    _check_boundary(model, boundary)
    h = _embed(model, tokens)
    for block in model.blocks[:boundary]:
        h = _apply_block(block, h, model.spec.heads)
    return h.data


def _check_boundary(model: ModelState, boundary: int) -> None:
    if not 0 <= boundary <= model.spec.num_layers:
        raise ContractViolation(
            f"boundary {boundary} outside [0, {model.spec.num_layers}]")
    lowest = model.lowest_trainable_layer()
    if lowest is not None and boundary >= lowest:
        raise ContractViolation(
            f"boundary {boundary} is at or above the lowest trainable layer {lowest}; "
            "caller must recompute from below")


def forward_from_boundary(model: ModelState, boundary: int, cached_act: np.ndarray) -> Tensor:
    """Resume the forward pass at layer ``boundary`` from stored activations.

    Bit-identical to ``forward`` when ``cached_act`` equals the true layer
    output, because the remaining computation is the same instruction
    sequence either way.
    """
    _check_boundary(model, boundary)
    act = np.asarray(cached_act, dtype=np.float64)
    expected = (model.spec.hidden,)
    if act.ndim != 3 or act.shape[2:] != expected:
        raise ContractViolation(
            f"cached activation shape {act.shape} does not end in hidden size {expected[0]}")
    return _classify(model, _run_blocks(model, Tensor(act), boundary + 1))


def evaluate(model: ModelState, tokens: np.ndarray, labels: np.ndarray,
             chunk: int = 256) -> float:
    """Fraction of samples whose argmax logit matches the label."""
    tokens = np.asarray(tokens)
    labels = np.asarray(labels, dtype=np.int64)
    if tokens.shape[0] == 0:
        raise EvaluationError("cannot evaluate an empty shard")
    correct = 0
    for start in range(0, tokens.shape[0], chunk):
        logits = forward(model, tokens[start:start + chunk]).data
        correct += int((logits.argmax(axis=1) == labels[start:start + chunk]).sum())
    return correct / tokens.shape[0]


# ---------------------------------------------------------------------------
# checkpoint serialization (bit-exact round trip)
# ---------------------------------------------------------------------------

def save_model(model: ModelState, path: str) -> None:
    """Write spec plus every parameter buffer to a versioned .npz file."""
    arrays: dict[str, np.ndarray] = {}
    trainable: dict[str, bool] = {}
    stacks: dict[str, int] = {}
    for p in model.parameters():
        arrays[p.name] = p.tensor.data
        trainable[p.name] = p.trainable
    for i, block in enumerate(model.blocks):
        stacks[str(i + 1)] = len(block.adapters)
    meta = {
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "trainable": trainable,
        "adapter_stacks": stacks,
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path: str) -> ModelState:
    with np.load(path) as archive:
        meta = json.loads(bytes(archive["__meta__"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {meta['version']}")
        spec = ModelSpec.from_dict(meta["spec"])
        trainable = meta["trainable"]
        model = build_model(spec, seed=0)
        for i, block in enumerate(model.blocks):
            layer = i + 1
            count = meta["adapter_stacks"].get(str(layer), 0)
            for idx in range(count):
                width = archive[_adapter_name(layer, idx, "w_down")].shape[1]
                block.adapters.append(
                    make_meta_adapter(spec.hidden, width, layer, idx, SeededRng(0)))
        for p in model.parameters():
            if p.name not in archive:
                raise ConfigurationError(f"checkpoint missing buffer '{p.name}'")
            p.tensor.data = archive[p.name].astype(np.float64, copy=True)
            p.trainable = bool(trainable[p.name])
            p.tensor.requires_grad = p.trainable
    return model
