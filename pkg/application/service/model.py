"""
Head-gated encoder-decoder transformer
Every attention head's output is multiplied by a gate scalar recorded on
the tape, across encoder self-attention, decoder self-attention and
encoder-decoder attention
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from service.errors import ConfigurationError, ContractError, InputError, UsageError
from service.loss import Reduction, label_smoothed_loss
from service.tasks import Batch
from service.tensor import (
    DEFAULT_DTYPE,
    RngStreams,
    Tensor,
    add,
    checksum,
    concatenate,
    constant,
    dropout,
    embedding,
    expand,
    layer_norm,
    matmul,
    mul,
    mul_scalar,
    relu,
    reshape,
    select,
    softmax,
    transpose,
)

logger = logging.getLogger(__name__)

MASK_FILL = -1e9


class AttentionType(str, Enum):
    """The three attention types of an encoder-decoder transformer"""

    ENC_SELF = "enc_self"
    DEC_SELF = "dec_self"
    ENC_DEC = "enc_dec"

    @property
    def index(self) -> int:
        return list(AttentionType).index(self)


@dataclass(frozen=True)
class HeadId:
    """(attention type, layer, head) coordinate of one attention head"""

    attn_type: AttentionType
    layer: int
    head: int

    def flat_index(self, layers: int, heads_per_layer: int) -> int:
        return self.attn_type.index * layers * heads_per_layer + self.layer * heads_per_layer + self.head

    @classmethod
    def from_flat(cls, flat: int, layers: int, heads_per_layer: int) -> "HeadId":
        per_type = layers * heads_per_layer
        if not 0 <= flat < 3 * per_type:
            raise UsageError(f"flat head id {flat} outside [0, {3 * per_type})")
        type_index, rest = divmod(flat, per_type)
        layer, head = divmod(rest, heads_per_layer)
        return cls(list(AttentionType)[type_index], layer, head)

    def __str__(self) -> str:
        return f"{self.attn_type.value}/L{self.layer}/H{self.head}"


class ModelConfig(BaseModel):
    """Desk-scale transformer shape"""

    layers: int = Field(default=2, ge=1)
    heads_per_layer: int = Field(default=4, ge=1)
    d_model: int = Field(default=64, ge=1)
    d_ff: int = Field(default=128, ge=1)
    vocab_src: int = Field(ge=5)
    vocab_tgt: int = Field(ge=5)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    max_len: int = Field(default=64, ge=2)
    rescale_heads: bool = False

    @model_validator(mode="after")
    def _check_heads_divide_model(self) -> "ModelConfig":
        if self.d_model % self.heads_per_layer:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads_per_layer={self.heads_per_layer}")
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads_per_layer

    @property
    def total_heads(self) -> int:
        return count_heads(self)

    def all_heads(self) -> List[HeadId]:
        """Every head in flat-index order"""
        return [HeadId.from_flat(i, self.layers, self.heads_per_layer) for i in range(self.total_heads)]

    def flat_index(self, head: HeadId) -> int:
        return head.flat_index(self.layers, self.heads_per_layer)

    def head_from_flat(self, flat: int) -> HeadId:
        return HeadId.from_flat(flat, self.layers, self.heads_per_layer)


def count_heads(config: ModelConfig) -> int:
    """3 attention types x layers x heads per layer"""
    return 3 * config.layers * config.heads_per_layer


@dataclass
class MaskSet:
    """Gate assignment over heads; absent heads are open (gate 1)"""

    gates: Dict[HeadId, int] = field(default_factory=dict)

    def __post_init__(self):
        bad = {h: g for h, g in self.gates.items() if g not in (0, 1)}
        if bad:
            raise UsageError(f"gate values must be 0 or 1, got {bad}")

    @classmethod
    def from_heads(cls, heads: Iterable[HeadId]) -> "MaskSet":
        return cls({head: 0 for head in heads})

    @classmethod
    def from_flat_ids(cls, flat_ids: Iterable[int], config: ModelConfig) -> "MaskSet":
        return cls.from_heads(config.head_from_flat(i) for i in flat_ids)

    def gate(self, head: HeadId) -> int:
        return self.gates.get(head, 1)

    def masked(self, head: HeadId) -> bool:
        return self.gate(head) == 0

    def masked_heads(self) -> List[HeadId]:
        return [h for h, g in self.gates.items() if g == 0]

    def count_masked(self) -> int:
        return sum(1 for g in self.gates.values() if g == 0)

    def flat_ids(self, config: ModelConfig) -> List[int]:
        return sorted(config.flat_index(h) for h in self.masked_heads())


@dataclass
class ModelOutput:
    """Forward-pass results; ``head_outputs`` holds each head's ungated context"""

    loss: Tensor
    logits: Tensor
    gates: Dict[HeadId, Tensor]
    head_outputs: Dict[HeadId, Tensor]


def sinusoidal_positions(length: int, d_model: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / (10000 ** (2 * (i // 2) / d_model))
    table = np.zeros((length, d_model), dtype=dtype)
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    return table


def _attention_bias(batch: int, heads: int, q_len: int, k_len: int,
                    padding_mask: Optional[np.ndarray], causal: bool, dtype) -> Optional[np.ndarray]:
    if padding_mask is None and not causal:
        return None
    blocked = np.zeros((batch, 1, q_len, k_len), dtype=bool)
    if padding_mask is not None:
        blocked |= ~np.asarray(padding_mask, dtype=bool)[:, None, None, :]
    if causal:
        blocked |= np.triu(np.ones((q_len, k_len), dtype=bool), k=1)[None, None]
    bias = np.where(blocked, dtype.type(MASK_FILL), dtype.type(0))
    return np.broadcast_to(bias, (batch, heads, q_len, k_len)).copy()


def _apply_gate(context: Tensor, gate: Tensor) -> Tensor:
    if gate.ndim == 0:
        return mul(context, gate)
    batch = context.shape[0]
    if gate.shape != (batch,):
        raise ConfigurationError(f"per-example gate shape {gate.shape} does not match batch {batch}")
    return mul(context, expand(reshape(gate, (batch, 1, 1)), context.shape))


def gated_multihead_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    gates: Optional[Sequence[Tensor]],
    padding_mask: Optional[np.ndarray],
    causal: bool,
    w_o: Tensor,
    b_o: Tensor,
    heads: int,
    rescale_heads: bool = False,
    head_outputs: Optional[List[Tensor]] = None,
) -> Tensor:
    """
    Multi-head attention whose head contexts are scaled by gate scalars

    Args:
        q, k, v: Projected queries/keys/values shaped [batch, len, d_model]
        gates: One gate tensor per head (shape () or [batch]); None means ungated
        padding_mask: [batch, k_len] boolean, True on real keys
        causal: Block attention to later positions
        w_o, b_o: Output projection
        heads: Number of heads
        rescale_heads: Scale surviving heads by heads / open_heads
        head_outputs: When given, receives each head's ungated context

    Returns:
        Tensor shaped [batch, q_len, d_model]
    """
    if gates is not None and len(gates) != heads:
        raise ConfigurationError(f"got {len(gates)} gates for {heads} heads")
    batch, q_len, d_model = q.shape
    k_len = k.shape[1]
    d_head = d_model // heads

    qh = transpose(reshape(q, (batch, q_len, heads, d_head)), (0, 2, 1, 3))
    kt = transpose(reshape(k, (batch, k_len, heads, d_head)), (0, 2, 3, 1))
    vh = transpose(reshape(v, (batch, k_len, heads, d_head)), (0, 2, 1, 3))

    scores = mul_scalar(matmul(qh, kt), 1.0 / math.sqrt(d_head))
    bias = _attention_bias(batch, heads, q_len, k_len, padding_mask, causal, q.dtype)
    if bias is not None:
        scores = add(scores, constant(bias))
    context = matmul(softmax(scores, axis=-1), vh)

    parts = []
    for h in range(heads):
        att = select(context, axis=1, index=h)
        if head_outputs is not None:
            head_outputs.append(att)
        if gates is not None:
            att = _apply_gate(att, gates[h])
        parts.append(att)
    merged = concatenate(parts, axis=-1)

    if rescale_heads and gates is not None:
        merged = _rescale_open_heads(merged, gates, heads)

    return add(matmul(merged, w_o), b_o)


def _rescale_open_heads(merged: Tensor, gates: Sequence[Tensor], heads: int) -> Tensor:
    # factor heads / open_heads per example, held off the tape; 1 when all or none are open
    batch = merged.shape[0]
    open_heads = np.sum([np.broadcast_to(np.asarray(g.data, dtype=np.float64), (batch,)) for g in gates], axis=0)
    partial = (open_heads > 0.0) & (open_heads < heads)
    scale = np.where(partial, heads / np.where(partial, open_heads, 1.0), 1.0)
    if np.all(scale == 1.0):
        return merged
    if all(g.ndim == 0 for g in gates):
        return mul_scalar(merged, float(scale[0]))
    factor = constant(scale.reshape(batch, 1, 1), dtype=merged.dtype)
    return mul(merged, expand(factor, merged.shape))


class HeadMaskTransformer:
    """
    Pre-norm encoder-decoder transformer with gated attention heads

    Parameters live in ``self.params`` (insertion order is the checkpoint
    order). All randomness comes from explicit generators.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Tensor] = {}
        self._positions = sinusoidal_positions(config.max_len, config.d_model, self.dtype)
        self._init_parameters(RngStreams(seed).init())
        logger.info(f"✅ Model initialised: {self.num_parameters()} parameters, {config.total_heads} heads")

    # Parameters

    def _add(self, name: str, array: np.ndarray) -> None:
        self.params[name] = Tensor(array, requires_grad=True, dtype=self.dtype, name=name)

    def _xavier(self, rng: np.random.Generator, name: str, fan_in: int, fan_out: int) -> None:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        self._add(name, rng.uniform(-limit, limit, size=(fan_in, fan_out)))

    def _linear(self, rng, prefix: str, fan_in: int, fan_out: int, weight: str = "w", bias: str = "b") -> None:
        self._xavier(rng, f"{prefix}.{weight}", fan_in, fan_out)
        self._add(f"{prefix}.{bias}", np.zeros(fan_out))

    def _norm(self, prefix: str) -> None:
        self._add(f"{prefix}.gamma", np.ones(self.config.d_model))
        self._add(f"{prefix}.beta", np.zeros(self.config.d_model))

    def _attention_params(self, rng, prefix: str) -> None:
        d = self.config.d_model
        for proj in ("q", "k", "v", "o"):
            self._linear(rng, prefix, d, d, weight=f"w_{proj}", bias=f"b_{proj}")

    def _feed_forward_params(self, rng, prefix: str) -> None:
        self._linear(rng, prefix, self.config.d_model, self.config.d_ff, weight="w1", bias="b1")
        self._linear(rng, prefix, self.config.d_ff, self.config.d_model, weight="w2", bias="b2")

    def _init_parameters(self, rng: np.random.Generator) -> None:
        cfg = self.config
        std = cfg.d_model ** -0.5
        self._add("src_embed", rng.normal(0.0, std, size=(cfg.vocab_src, cfg.d_model)))
        self._add("tgt_embed", rng.normal(0.0, std, size=(cfg.vocab_tgt, cfg.d_model)))
        for layer in range(cfg.layers):
            p = f"enc.{layer}"
            self._norm(f"{p}.ln1")
            self._attention_params(rng, f"{p}.self")
            self._norm(f"{p}.ln2")
            self._feed_forward_params(rng, f"{p}.ff")
        self._norm("enc.ln")
        for layer in range(cfg.layers):
            p = f"dec.{layer}"
            self._norm(f"{p}.ln1")
            self._attention_params(rng, f"{p}.self")
            self._norm(f"{p}.ln2")
            self._attention_params(rng, f"{p}.cross")
            self._norm(f"{p}.ln3")
            self._feed_forward_params(rng, f"{p}.ff")
        self._norm("dec.ln")
        self._linear(rng, "out", cfg.d_model, cfg.vocab_tgt)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def checksum(self) -> str:
        return checksum(self.parameters())

    # Gates

    def make_gates(self, mask: Optional[MaskSet] = None, batch_size: Optional[int] = None) -> Dict[HeadId, Tensor]:
        """
        Gate tensors for every head, valued 0/1 from ``mask``

        Args:
            mask: Heads to close; None leaves every gate open
            batch_size: When given, each gate is a [batch] vector (one gate per example)
        """
        mask = mask or MaskSet()
        shape = () if batch_size is None else (batch_size,)
        return {head: Tensor(np.full(shape, mask.gate(head)), requires_grad=True, dtype=self.dtype)
                for head in self.config.all_heads()}

    def _layer_gates(self, gates: Dict[HeadId, Tensor], attn_type: AttentionType, layer: int) -> List[Tensor]:
        return [gates[HeadId(attn_type, layer, h)] for h in range(self.config.heads_per_layer)]

    # Blocks

    def _attention(self, prefix: str, x_q: Tensor, x_kv: Tensor, gates: List[Tensor],
                   padding_mask: np.ndarray, causal: bool, attn_type: AttentionType, layer: int,
                   head_outputs: Optional[Dict[HeadId, Tensor]]) -> Tensor:
        p = self.params
        q = add(matmul(x_q, p[f"{prefix}.w_q"]), p[f"{prefix}.b_q"])
        k = add(matmul(x_kv, p[f"{prefix}.w_k"]), p[f"{prefix}.b_k"])
        v = add(matmul(x_kv, p[f"{prefix}.w_v"]), p[f"{prefix}.b_v"])
        collected: Optional[List[Tensor]] = [] if head_outputs is not None else None
        out = gated_multihead_attention(
            q, k, v, gates, padding_mask, causal, p[f"{prefix}.w_o"], p[f"{prefix}.b_o"],
            heads=self.config.heads_per_layer, rescale_heads=self.config.rescale_heads,
            head_outputs=collected,
        )
        if head_outputs is not None:
            for h, att in enumerate(collected):
                head_outputs[HeadId(attn_type, layer, h)] = att
        return out

    def _feed_forward(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        hidden = relu(add(matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return add(matmul(hidden, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _norm_apply(self, prefix: str, x: Tensor) -> Tensor:
        return layer_norm(x, self.params[f"{prefix}.gamma"], self.params[f"{prefix}.beta"])

    def _embed(self, table: str, ids: np.ndarray, vocab: int, train_mode: bool,
               rng: Optional[np.random.Generator]) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[1] > self.config.max_len:
            raise InputError(f"sequence length {ids.shape[1]} exceeds max_len {self.config.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise InputError(f"token id {int(ids.max())} outside vocabulary of size {vocab}")
        x = mul_scalar(embedding(self.params[table], ids), math.sqrt(self.config.d_model))
        x = add(x, constant(self._positions[:ids.shape[1]]))
        return dropout(x, self.config.dropout, rng, train_mode)

    def encode(self, src_ids: np.ndarray, src_mask: np.ndarray, gates: Dict[HeadId, Tensor],
               train_mode: bool = False, dropout_rng: Optional[np.random.Generator] = None,
               head_outputs: Optional[Dict[HeadId, Tensor]] = None) -> Tensor:
        cfg = self.config
        x = self._embed("src_embed", src_ids, cfg.vocab_src, train_mode, dropout_rng)
        for layer in range(cfg.layers):
            p = f"enc.{layer}"
            h = self._norm_apply(f"{p}.ln1", x)
            h = self._attention(f"{p}.self", h, h, self._layer_gates(gates, AttentionType.ENC_SELF, layer),
                                src_mask, False, AttentionType.ENC_SELF, layer, head_outputs)
            x = add(x, dropout(h, cfg.dropout, dropout_rng, train_mode))
            h = self._feed_forward(f"{p}.ff", self._norm_apply(f"{p}.ln2", x))
            x = add(x, dropout(h, cfg.dropout, dropout_rng, train_mode))
        return self._norm_apply("enc.ln", x)

    def decode(self, tgt_in: np.ndarray, tgt_mask: np.ndarray, memory: Tensor, src_mask: np.ndarray,
               gates: Dict[HeadId, Tensor], train_mode: bool = False,
               dropout_rng: Optional[np.random.Generator] = None,
               head_outputs: Optional[Dict[HeadId, Tensor]] = None) -> Tensor:
        cfg = self.config
        x = self._embed("tgt_embed", tgt_in, cfg.vocab_tgt, train_mode, dropout_rng)
        for layer in range(cfg.layers):
            p = f"dec.{layer}"
            h = self._norm_apply(f"{p}.ln1", x)
            h = self._attention(f"{p}.self", h, h, self._layer_gates(gates, AttentionType.DEC_SELF, layer),
                                tgt_mask, True, AttentionType.DEC_SELF, layer, head_outputs)
            x = add(x, dropout(h, cfg.dropout, dropout_rng, train_mode))
            h = self._norm_apply(f"{p}.ln2", x)
            h = self._attention(f"{p}.cross", h, memory, self._layer_gates(gates, AttentionType.ENC_DEC, layer),
                                src_mask, False, AttentionType.ENC_DEC, layer, head_outputs)
            x = add(x, dropout(h, cfg.dropout, dropout_rng, train_mode))
            h = self._feed_forward(f"{p}.ff", self._norm_apply(f"{p}.ln3", x))
            x = add(x, dropout(h, cfg.dropout, dropout_rng, train_mode))
        x = self._norm_apply("dec.ln", x)
        return add(matmul(x, self.params["out.w"]), self.params["out.b"])

    def forward(
        self,
        batch: Batch,
        mask: Optional[MaskSet] = None,
        train_mode: bool = False,
        dropout_rng: Optional[np.random.Generator] = None,
        label_smoothing: float = 0.0,
        per_example_gates: bool = False,
        reduction: Reduction = "token",
        keep_head_outputs: bool = False,
    ) -> ModelOutput:
        """
        Teacher-forced forward pass

        Args:
            batch: Padded source/target ids
            mask: Heads whose gate is 0 for this pass
            train_mode: Enables dropout (requires ``dropout_rng``)
            dropout_rng: Generator for dropout masks
            label_smoothing: Smoothing of the loss
            per_example_gates: One gate per example per head instead of a scalar
            reduction: "token" or "sentence" (see ``label_smoothed_loss``)
            keep_head_outputs: Collect each head's ungated context

        Returns:
            ModelOutput with loss, logits and the gate tensors
        """
        gates = self.make_gates(mask, batch.size if per_example_gates else None)
        return self.forward_with_gates(batch, gates, train_mode, dropout_rng, label_smoothing,
                                       reduction, keep_head_outputs)

    def forward_with_gates(
        self,
        batch: Batch,
        gates: Dict[HeadId, Tensor],
        train_mode: bool = False,
        dropout_rng: Optional[np.random.Generator] = None,
        label_smoothing: float = 0.0,
        reduction: Reduction = "token",
        keep_head_outputs: bool = False,
    ) -> ModelOutput:
        """Forward pass with caller-built gate tensors (any real gate values)"""
        if train_mode and self.config.dropout > 0 and dropout_rng is None:
            raise ContractError("train-mode forward needs a dropout generator")
        missing = [str(h) for h in self.config.all_heads() if h not in gates]
        if missing:
            raise ConfigurationError(f"no gate for heads {', '.join(missing)}")
        head_outputs: Optional[Dict[HeadId, Tensor]] = {} if keep_head_outputs else None
        memory = self.encode(batch.src_ids, batch.src_mask, gates, train_mode, dropout_rng, head_outputs)
        logits = self.decode(batch.tgt_in, batch.tgt_mask, memory, batch.src_mask, gates,
                             train_mode, dropout_rng, head_outputs)
        loss = label_smoothed_loss(logits, batch.tgt_out, label_smoothing, reduction=reduction)
        return ModelOutput(loss, logits, gates, head_outputs or {})
