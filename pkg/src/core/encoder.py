"""Causal transformer encoder with droppable sublayers.

Each block holds an optional attention sublayer and an optional gated MLP,
each with its own RMS pre-norm. A present sublayer updates the residual
stream as ``x + F(norm(x))``; a dropped one (``None``) leaves it untouched.
"""
import copy
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.core.errors import ContractError, DimensionError
from src.core.lora import LoraAdapter
from src.core.tensor import (
    Tensor,
    add,
    embedding,
    gelu,
    l2_normalize,
    masked_fill,
    matmul,
    mean,
    mul,
    relu,
    repeat,
    rms_norm,
    scale,
    select,
    silu,
    softmax,
)
from src.core.tokenizer import EOS_ID


class Pooling(str, Enum):
    LAST_TOKEN = "last_token"
    MEAN = "mean"


class Activation(str, Enum):
    SILU = "silu"
    GELU = "gelu"
    RELU = "relu"


class SublayerGroup(str, Enum):
    ATTN = "attn"
    MLP = "mlp"


ACTIVATIONS: dict[Activation, Callable[[Tensor], Tensor]] = {
    Activation.SILU: silu,
    Activation.GELU: gelu,
    Activation.RELU: relu,
}


class EncoderConfig(BaseModel):
    vocab_size: int = Field(default=512, ge=2)
    d_model: int = Field(default=64, ge=1, description="Hidden size d")
    n_layers: int = Field(default=8, ge=1, description="Number of blocks L")
    n_heads: int = Field(default=4, ge=1)
    n_kv_heads: Optional[int] = Field(default=None, ge=1, description="Key/value heads; defaults to n_heads")
    d_ff: int = Field(default=256, ge=1, description="Intermediate size n")
    max_seq_len: int = Field(default=128, ge=2)
    pooling: Pooling = Pooling.LAST_TOKEN
    activation: Activation = Activation.SILU
    norm_eps: float = Field(default=1e-6, ge=0)
    init_scale: float = Field(default=1.0, gt=0, description="Multiplier on fan-in scaled init")

    @model_validator(mode="after")
    def _check_heads(self) -> "EncoderConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_heads % self.kv_heads:
            raise ValueError(f"n_heads={self.n_heads} is not divisible by n_kv_heads={self.kv_heads}")
        return self

    @property
    def kv_heads(self) -> int:
        return self.n_kv_heads or self.n_heads

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.kv_heads * self.head_dim


@dataclass
class Projection:
    """Linear map ``y = x @ W.T`` with ``W`` of shape (out, in) and an optional adapter."""

    weight: Tensor
    lora: Optional[LoraAdapter] = None

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight.T)
        if self.lora is not None:
            out = out + self.lora(x)
        return out

    def keep_outputs(self, index: np.ndarray) -> None:
        self.weight = Tensor(self.weight.data[index], requires_grad=self.weight.requires_grad)
        if self.lora is not None:
            self.lora.B = Tensor(self.lora.B.data[index], requires_grad=self.lora.B.requires_grad)

    def keep_inputs(self, index: np.ndarray) -> None:
        self.weight = Tensor(self.weight.data[:, index], requires_grad=self.weight.requires_grad)
        if self.lora is not None:
            self.lora.A = Tensor(self.lora.A.data[:, index], requires_grad=self.lora.A.requires_grad)

    def tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        if self.lora is not None:
            yield f"{prefix}.lora_A", self.lora.A
            yield f"{prefix}.lora_B", self.lora.B


@dataclass
class AttentionSublayer:
    q_proj: Projection
    k_proj: Projection
    v_proj: Projection
    o_proj: Projection
    n_heads: int
    n_kv_heads: int
    causal: bool = True

    def projections(self) -> Iterator[tuple[str, Projection]]:
        yield "q_proj", self.q_proj
        yield "k_proj", self.k_proj
        yield "v_proj", self.v_proj
        yield "o_proj", self.o_proj

    def transform(self, x: Tensor) -> Tensor:
        seq_len, d_model = x.shape
        head_dim = d_model // self.n_heads
        group = self.n_heads // self.n_kv_heads

        q = self.q_proj(x).reshape(seq_len, self.n_heads, head_dim).transpose(1, 0, 2)
        k = self.k_proj(x).reshape(seq_len, self.n_kv_heads, head_dim).transpose(1, 0, 2)
        v = self.v_proj(x).reshape(seq_len, self.n_kv_heads, head_dim).transpose(1, 0, 2)
        if group > 1:
            k = repeat(k, group, axis=0)
            v = repeat(v, group, axis=0)

        scores = scale(matmul(q, k.transpose(0, 2, 1)), 1.0 / np.sqrt(head_dim))
        if self.causal:
            future = np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)
            scores = masked_fill(scores, np.broadcast_to(future, scores.shape), -np.inf)
        weights = softmax(scores, axis=-1)
        context = matmul(weights, v).transpose(1, 0, 2).reshape(seq_len, d_model)
        return self.o_proj(context)


@dataclass
class GatedMlp:
    gate_proj: Projection
    up_proj: Projection
    down_proj: Projection
    activation: Activation = Activation.SILU
    z: Optional[Tensor] = None
    gate_frozen: bool = False

    @property
    def width(self) -> int:
        return self.gate_proj.out_features

    def projections(self) -> Iterator[tuple[str, Projection]]:
        yield "gate_proj", self.gate_proj
        yield "up_proj", self.up_proj
        yield "down_proj", self.down_proj

    def transform(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.gate_proj.in_features:
            raise DimensionError(
                f"gated MLP input shape {x.shape} does not match hidden size {self.gate_proj.in_features}"
            )
        hidden = mul(ACTIVATIONS[self.activation](self.gate_proj(x)), self.up_proj(x))
        if self.z is not None:
            if self.z.shape != (self.width,):
                raise ContractError(f"gate vector shape {self.z.shape} does not match width {self.width}")
            hidden = mul(hidden, relu(self.z))
        return self.down_proj(hidden)


def gated_mlp_forward(mlp: GatedMlp, x: Tensor) -> Tensor:
    return x + mlp.transform(x)


Observer = Callable[[SublayerGroup, int, np.ndarray, np.ndarray], None]


@dataclass
class EncoderBlock:
    attn: Optional[AttentionSublayer]
    attn_norm: Optional[Tensor]
    mlp: Optional[GatedMlp]
    mlp_norm: Optional[Tensor]

    def drop_attention(self) -> None:
        self.attn = None
        self.attn_norm = None

    def drop_mlp(self) -> None:
        self.mlp = None
        self.mlp_norm = None

    def forward(self, x: Tensor, index: int, eps: float, observer: Optional[Observer] = None) -> Tensor:
        if self.attn is not None:
            out = x + self.attn.transform(rms_norm(x, self.attn_norm, eps))
            if observer is not None:
                observer(SublayerGroup.ATTN, index, x.data, out.data)
            x = out
        if self.mlp is not None:
            out = x + self.mlp.transform(rms_norm(x, self.mlp_norm, eps))
            if observer is not None:
                observer(SublayerGroup.MLP, index, x.data, out.data)
            x = out
        return x


class EncoderModel:
    def __init__(
        self,
        config: EncoderConfig,
        token_embedding: Tensor,
        position_embedding: Tensor,
        blocks: list[EncoderBlock],
    ):
        self.config = config
        self.token_embedding = token_embedding
        self.position_embedding = position_embedding
        self.blocks = blocks

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0, dtype=np.float32) -> "EncoderModel":
        rng = np.random.default_rng(seed)
        d, n = config.d_model, config.d_ff

        def weight(out_features: int, in_features: int) -> Tensor:
            std = config.init_scale / np.sqrt(in_features)
            return Tensor(rng.normal(0.0, std, size=(out_features, in_features)).astype(dtype), requires_grad=True)

        def norm() -> Tensor:
            return Tensor(np.ones(d, dtype=dtype), requires_grad=True)

        blocks: list[EncoderBlock] = []
        for _ in range(config.n_layers):
            attn = AttentionSublayer(
                q_proj=Projection(weight(d, d)),
                k_proj=Projection(weight(config.kv_dim, d)),
                v_proj=Projection(weight(config.kv_dim, d)),
                o_proj=Projection(weight(d, d)),
                n_heads=config.n_heads,
                n_kv_heads=config.kv_heads,
            )
            mlp = GatedMlp(
                gate_proj=Projection(weight(n, d)),
                up_proj=Projection(weight(n, d)),
                down_proj=Projection(weight(d, n)),
                activation=config.activation,
            )
            blocks.append(EncoderBlock(attn=attn, attn_norm=norm(), mlp=mlp, mlp_norm=norm()))

        token_table = Tensor(rng.normal(0.0, 1.0, size=(config.vocab_size, d)).astype(dtype), requires_grad=True)
        # Absolute positions start at zero and are learned.
        position_table = Tensor(np.zeros((config.max_seq_len, d), dtype=dtype), requires_grad=True)
        return cls(config, token_table, position_table, blocks)

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    @property
    def dtype(self) -> np.dtype:
        return self.token_embedding.dtype

    def prepare(self, token_ids: Sequence[int]) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        if ids.size == 0:
            raise ContractError("cannot encode an empty sequence")
        if ids.size + 1 > self.config.max_seq_len:
            raise ContractError(
                f"sequence of {ids.size} tokens plus <eos> exceeds max_seq_len={self.config.max_seq_len}"
            )
        bad = ids[(ids <= 0) | (ids >= self.config.vocab_size)]
        if bad.size:
            raise ContractError(f"unknown token id {int(bad[0])} for vocab_size={self.config.vocab_size}")
        return np.append(ids, EOS_ID)

    def embed(self, ids: np.ndarray) -> Tensor:
        positions = np.arange(len(ids))
        return add(embedding(self.token_embedding, ids), embedding(self.position_embedding, positions))

    def forward(self, ids: np.ndarray, observer: Optional[Observer] = None) -> Tensor:
        x = self.embed(ids)
        for index, block in enumerate(self.blocks):
            x = block.forward(x, index, self.config.norm_eps, observer)
        return x

    def hidden_states(self, ids: np.ndarray) -> list[Tensor]:
        """Residual stream at every block boundary, embedding output first."""
        x = self.embed(ids)
        states = [x]
        for index, block in enumerate(self.blocks):
            x = block.forward(x, index, self.config.norm_eps)
            states.append(x)
        return states

    def pool(self, hidden: Tensor) -> Tensor:
        if self.config.pooling == Pooling.LAST_TOKEN:
            return select(hidden, hidden.shape[0] - 1)
        return mean(hidden, axis=0)

    def iter_projections(self) -> Iterator[tuple[int, str, Projection]]:
        for index, block in enumerate(self.blocks):
            if block.attn is not None:
                for name, projection in block.attn.projections():
                    yield index, name, projection
            if block.mlp is not None:
                for name, projection in block.mlp.projections():
                    yield index, name, projection

    def mlp_layers(self) -> list[tuple[int, GatedMlp]]:
        return [(index, block.mlp) for index, block in enumerate(self.blocks) if block.mlp is not None]

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        """Every stored tensor in a fixed order, frozen gate masks included."""
        yield "token_embedding", self.token_embedding
        yield "position_embedding", self.position_embedding
        for index, block in enumerate(self.blocks):
            prefix = f"blocks.{index}"
            if block.attn is not None:
                yield f"{prefix}.attn_norm", block.attn_norm
                for name, projection in block.attn.projections():
                    yield from projection.tensors(f"{prefix}.attn.{name}")
            if block.mlp is not None:
                yield f"{prefix}.mlp_norm", block.mlp_norm
                for name, projection in block.mlp.projections():
                    yield from projection.tensors(f"{prefix}.mlp.{name}")
                if block.mlp.z is not None:
                    yield f"{prefix}.mlp.z", block.mlp.z

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        frozen = {id(mlp.z) for _, mlp in self.mlp_layers() if mlp.z is not None and mlp.gate_frozen}
        for name, tensor in self.named_tensors():
            if id(tensor) not in frozen:
                yield name, tensor

    def parameters(self) -> list[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def freeze(self) -> None:
        for _, tensor in self.named_tensors():
            tensor.requires_grad = False
            tensor.zero_grad()

    def unfreeze(self) -> None:
        for _, tensor in self.named_parameters():
            tensor.requires_grad = True

    def trainable_parameters(self) -> list[Tensor]:
        return [tensor for tensor in self.parameters() if tensor.requires_grad]

    def copy(self) -> "EncoderModel":
        return copy.deepcopy(self)

    def cast(self, dtype) -> "EncoderModel":
        clone = self.copy()
        for _, tensor in clone.named_tensors():
            tensor.data = tensor.data.astype(dtype)
            tensor.zero_grad()
        return clone


def encode(model: EncoderModel, token_ids: Sequence[int]) -> Tensor:
    """L2-normalized embedding of ``token_ids`` with <eos> appended."""
    hidden = model.forward(model.prepare(token_ids))
    return l2_normalize(model.pool(hidden))


@dataclass
class ParamBreakdown:
    embedding: int
    attention: int
    mlp: int
    gates: int = 0
    adapters: int = 0
    lm_head: int = 0

    @property
    def total(self) -> int:
        return self.embedding + self.attention + self.mlp + self.gates + self.adapters + self.lm_head

    @property
    def mlp_fraction(self) -> float:
        return self.mlp / self.total


def attention_params(config: EncoderConfig) -> int:
    d = config.d_model
    return 2 * d * d + 2 * config.kv_dim * d + d


def mlp_params(d_model: int, width: int) -> int:
    return 3 * d_model * width + d_model


def param_breakdown(
    config: EncoderConfig,
    attn_present: Optional[Sequence[bool]] = None,
    mlp_widths: Optional[Sequence[int]] = None,
    include_positions: bool = True,
    include_lm_head: bool = False,
) -> ParamBreakdown:
    """Analytic parameter count; ``mlp_widths`` uses 0 for a dropped MLP."""
    attn_present = list(attn_present) if attn_present is not None else [True] * config.n_layers
    mlp_widths = list(mlp_widths) if mlp_widths is not None else [config.d_ff] * config.n_layers
    d = config.d_model
    embed = config.vocab_size * d + (config.max_seq_len * d if include_positions else 0)
    return ParamBreakdown(
        embedding=embed,
        attention=sum(attention_params(config) for present in attn_present if present),
        mlp=sum(mlp_params(d, width) for width in mlp_widths if width > 0),
        lm_head=config.vocab_size * d if include_lm_head else 0,
    )


def model_breakdown(model: EncoderModel) -> ParamBreakdown:
    breakdown = param_breakdown(
        model.config,
        attn_present=[block.attn is not None for block in model.blocks],
        mlp_widths=[block.mlp.width if block.mlp is not None else 0 for block in model.blocks],
    )
    breakdown.gates = sum(mlp.width for _, mlp in model.mlp_layers() if mlp.z is not None and not mlp.gate_frozen)
    breakdown.adapters = sum(p.lora.num_params for _, _, p in model.iter_projections() if p.lora is not None)
    return breakdown


def count_params(model: EncoderModel) -> int:
    """Parameter count without a language-model head; frozen gate masks are buffers."""
    return int(sum(tensor.size for tensor in model.parameters()))
