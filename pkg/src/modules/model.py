"""Transformer encoder-decoder producing P(w_n | w_1..w_{n-1}, X; params).

Layout: a convolution + max-pooling subsampler reduces the frame rate by four,
sinusoidal positions are added, I post-norm encoder blocks follow, and J post-norm
decoder blocks (masked self-attention, source-target attention, FFN) feed a
linear + softmax head. All tensors are batch-first: [B × L × D].
"""

from __future__ import annotations

import logging
import math
from functools import lru_cache
from typing import Iterator, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import numcore as nc
from .numcore import Tensor
from ..utils.exceptions import (
    CapacityError,
    ContractError,
    DimensionError,
    InputTooShortError,
)

logger = logging.getLogger(__name__)

PAD = 0
SOS = 1
EOS = 2
NUM_SPECIAL = 3

CONV_KERNEL = 3
MIN_FRAMES = 4
NEG_INF = -1e9
LAYER_NORM_EPS = 1e-5


class ModelConfig(BaseModel):
    """Sizes of one student. Defaults are the large-scale setup."""

    model_config = ConfigDict(extra="forbid")

    num_encoder_blocks: int = Field(default=8, ge=1)
    num_decoder_blocks: int = Field(default=6, ge=1)
    model_dim: int = Field(default=256, ge=1)
    ffn_dim: int = Field(default=2048, ge=1)
    num_heads: int = Field(default=4, ge=1)
    vocab_size: int = Field(default=16, ge=4)
    feature_dim: int = Field(default=120, ge=1)
    dropout_rate: float = Field(default=0.1, ge=0.0, lt=1.0)
    max_positions: int = Field(default=2048, ge=1)

    @model_validator(mode="after")
    def _heads_divide_dim(self) -> "ModelConfig":
        if self.model_dim % self.num_heads != 0:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        return self

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def subsampled_length(num_frames: int) -> int:
    """Frames left after two stride-2 pooling stages: ceil(ceil(M/2)/2)."""
    half = (num_frames + 1) // 2
    return (half + 1) // 2


def _pool_mask(mask: np.ndarray) -> np.ndarray:
    """A pooled frame is valid iff the first frame of its pair is valid."""
    return mask[:, 0::2]


@lru_cache(maxsize=16)
def positional_table(max_positions: int, dim: int) -> np.ndarray:
    """Sinusoidal table: even channels sin(pos / 10000^(2i/D)), odd channels cos(...)."""
    positions = np.arange(max_positions, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((max_positions, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: dim // 2])
    table.setflags(write=False)
    return table


class ModelParams:
    """Named parameter tensors of one student (the full parameter set)."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        shapes = parameter_shapes(config)
        tensors: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            if name.endswith(".gain"):
                data = np.ones(shape)
            elif len(shape) == 1:
                data = np.zeros(shape)
            else:
                fan_in, fan_out = shape
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                data = rng.uniform(-bound, bound, size=shape)
            tensors[name] = Tensor(data, requires_grad=True)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def frozen(self) -> "ModelParams":
        """View sharing the same arrays but recording no graph."""
        return ModelParams(self.config, {k: t.detach() for k, t in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self.tensors.items()},
        )

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())

    def equals(self, other: "ModelParams") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[k].data, other[k].data) for k in self.names())


def _attention_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for proj in ("q", "k", "v", "o"):
        shapes[f"{prefix}.{proj}.weight"] = (d, d)
        shapes[f"{prefix}.{proj}.bias"] = (d,)
    return shapes


def _norm_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.gain": (d,), f"{prefix}.bias": (d,)}


def _ffn_shapes(prefix: str, d: int, f: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.w1": (d, f),
        f"{prefix}.b1": (f,),
        f"{prefix}.w2": (f, d),
        f"{prefix}.b2": (d,),
    }


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; the order is the checkpoint order."""
    d, f, v = config.model_dim, config.ffn_dim, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "subsampler.conv1.weight": (CONV_KERNEL * config.feature_dim, d),
        "subsampler.conv1.bias": (d,),
        "subsampler.conv2.weight": (CONV_KERNEL * d, d),
        "subsampler.conv2.bias": (d,),
        "subsampler.proj.weight": (d, d),
        "subsampler.proj.bias": (d,),
    }
    for i in range(config.num_encoder_blocks):
        p = f"encoder.{i}"
        shapes.update(_attention_shapes(f"{p}.self_attn", d))
        shapes.update(_norm_shapes(f"{p}.norm1", d))
        shapes.update(_ffn_shapes(f"{p}.ffn", d, f))
        shapes.update(_norm_shapes(f"{p}.norm2", d))
    for j in range(config.num_decoder_blocks):
        p = f"decoder.{j}"
        shapes.update(_attention_shapes(f"{p}.self_attn", d))
        shapes.update(_norm_shapes(f"{p}.norm1", d))
        shapes.update(_attention_shapes(f"{p}.cross_attn", d))
        shapes.update(_norm_shapes(f"{p}.norm2", d))
        shapes.update(_ffn_shapes(f"{p}.ffn", d, f))
        shapes.update(_norm_shapes(f"{p}.norm3", d))
    shapes["embedding.weight"] = (v, d)
    shapes["output.weight"] = (d, v)
    shapes["output.bias"] = (v,)
    return shapes


class Seq2SeqTransformer:
    """Stateless forward computations over a `ModelParams`."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.config = params.config

    # -- frontend ---------------------------------------------------------

    def conv_subsample(
        self,
        features: Tensor,
        frame_mask: np.ndarray,
    ) -> tuple[Tensor, np.ndarray]:
        """[B×M×F] features -> ([B×M'×D], validity mask [B×M'])."""
        if features.ndim != 3 or features.shape[-1] != self.config.feature_dim:
            raise DimensionError(
                f"expected [B×M×{self.config.feature_dim}] features, got {features.shape}"
            )
        lengths = frame_mask.sum(axis=1)
        if lengths.size and lengths.min() < MIN_FRAMES:
            raise InputTooShortError(f"feature sequences need at least {MIN_FRAMES} frames, got {int(lengths.min())}")
        p = self.params
        mask = frame_mask.astype(np.float64)
        h = nc.mul_constant(features, mask[:, :, None])
        for stage in ("conv1", "conv2"):
            h = nc.linear(nc.unfold_time(h, CONV_KERNEL), p[f"subsampler.{stage}.weight"], p[f"subsampler.{stage}.bias"])
            h = nc.mul_constant(nc.relu(h), mask[:, :, None])
            h = nc.max_pool_time(h)
            mask = _pool_mask(mask)
        h = nc.linear(h, p["subsampler.proj.weight"], p["subsampler.proj.bias"])
        return h, mask.astype(bool)

    def add_positional_encoding(self, h: Tensor) -> Tensor:
        length = h.shape[-2]
        if length > self.config.max_positions:
            raise CapacityError(f"sequence of length {length} exceeds max_positions={self.config.max_positions}")
        table = positional_table(self.config.max_positions, self.config.model_dim)[:length]
        return nc.add_constant(h, table)

    # -- blocks -----------------------------------------------------------

    def _attention(
        self,
        prefix: str,
        query: Tensor,
        memory: Tensor,
        key_mask: np.ndarray,
        causal: bool,
    ) -> Tensor:
        p = self.params
        b, lq, d = query.shape
        lk = memory.shape[1]
        heads, hd = self.config.num_heads, self.config.head_dim

        def split(x: Tensor, length: int) -> Tensor:
            return nc.transpose(nc.reshape(x, (b, length, heads, hd)), (0, 2, 1, 3))

        q = split(nc.linear(query, p[f"{prefix}.q.weight"], p[f"{prefix}.q.bias"]), lq)
        k = split(nc.linear(memory, p[f"{prefix}.k.weight"], p[f"{prefix}.k.bias"]), lk)
        v = split(nc.linear(memory, p[f"{prefix}.v.weight"], p[f"{prefix}.v.bias"]), lk)

        bias = np.where(key_mask[:, None, None, :], 0.0, NEG_INF)
        if causal:
            future = np.triu(np.ones((lq, lk), dtype=bool), k=1)
            bias = bias + np.where(future, NEG_INF, 0.0)[None, None]
        scores = nc.scale(nc.matmul(q, nc.swap_last(k)), 1.0 / math.sqrt(hd))
        weights = nc.softmax_rows(nc.add_constant(scores, np.broadcast_to(bias, scores.shape)))
        context = nc.reshape(nc.transpose(nc.matmul(weights, v), (0, 2, 1, 3)), (b, lq, d))
        return nc.linear(context, p[f"{prefix}.o.weight"], p[f"{prefix}.o.bias"])

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        hidden = nc.relu(nc.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return nc.linear(hidden, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _sublayer(self, prefix: str, x: Tensor, update: Tensor, rng, training: bool) -> Tensor:
        p = self.params
        update = nc.dropout(update, self.config.dropout_rate, rng, training)
        return nc.layer_norm(nc.add(x, update), p[f"{prefix}.gain"], p[f"{prefix}.bias"], LAYER_NORM_EPS)

    def encoder_forward(
        self,
        h0: Tensor,
        pad_mask: np.ndarray,
        rng: Optional[np.random.Generator] = None,
        training: bool = False,
    ) -> Tensor:
        """Stack of post-norm encoder blocks; padded frames are never attended to."""
        h = h0
        for i in range(self.config.num_encoder_blocks):
            p = f"encoder.{i}"
            h = self._sublayer(f"{p}.norm1", h, self._attention(f"{p}.self_attn", h, h, pad_mask, False), rng, training)
            h = self._sublayer(f"{p}.norm2", h, self._ffn(f"{p}.ffn", h), rng, training)
        return h

    def encode(
        self,
        features: Tensor,
        frame_mask: np.ndarray,
        rng: Optional[np.random.Generator] = None,
        training: bool = False,
    ) -> tuple[Tensor, np.ndarray]:
        h, mask = self.conv_subsample(features, frame_mask)
        h = nc.dropout(self.add_positional_encoding(h), self.config.dropout_rate, rng, training)
        return self.encoder_forward(h, mask, rng, training), mask

    def decoder_forward(
        self,
        tokens: np.ndarray,
        memory: Tensor,
        memory_mask: np.ndarray,
        rng: Optional[np.random.Generator] = None,
        training: bool = False,
    ) -> Tensor:
        """Decoder input tokens [B×L] (starting with SOS) -> logits [B×L×|V|].

        Position n attends to input positions 0..n only.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] == 0:
            raise ContractError("decoder input must be a non-empty [B×L] token matrix")
        if not np.all(tokens[:, 0] == SOS):
            raise ContractError("decoder input must begin with SOS")
        p = self.params
        b, length = tokens.shape
        u = nc.scale(nc.embedding(p["embedding.weight"], tokens), math.sqrt(self.config.model_dim))
        u = nc.dropout(self.add_positional_encoding(u), self.config.dropout_rate, rng, training)
        self_mask = np.ones((b, length), dtype=bool)
        for j in range(self.config.num_decoder_blocks):
            pre = f"decoder.{j}"
            u = self._sublayer(f"{pre}.norm1", u, self._attention(f"{pre}.self_attn", u, u, self_mask, True), rng, training)
            u = self._sublayer(f"{pre}.norm2", u, self._attention(f"{pre}.cross_attn", u, memory, memory_mask, False), rng, training)
            u = self._sublayer(f"{pre}.norm3", u, self._ffn(f"{pre}.ffn", u), rng, training)
        return nc.linear(u, p["output.weight"], p["output.bias"])

    # -- heads ------------------------------------------------------------

    def forward_logits(
        self,
        features: Tensor,
        frame_mask: np.ndarray,
        decoder_inputs: np.ndarray,
        rng: Optional[np.random.Generator] = None,
        training: bool = False,
    ) -> Tensor:
        memory, memory_mask = self.encode(features, frame_mask, rng, training)
        return self.decoder_forward(decoder_inputs, memory, memory_mask, rng, training)

    def forward_probs(
        self,
        features: Tensor,
        frame_mask: np.ndarray,
        decoder_inputs: np.ndarray,
        rng: Optional[np.random.Generator] = None,
        training: bool = False,
    ) -> Tensor:
        """Per-position output distributions [B×L×|V|] (softmax of the decoder logits)."""
        return nc.softmax_rows(self.forward_logits(features, frame_mask, decoder_inputs, rng, training))

    def utterance_probs(self, features: np.ndarray, prefix: np.ndarray) -> np.ndarray:
        """Unbatched inference helper: FeatSeq [M×F] and prefix [L] -> [L×|V|]."""
        feats = Tensor(np.asarray(features, dtype=np.float64)[None])
        mask = np.ones((1, feats.shape[1]), dtype=bool)
        probs = self.forward_probs(feats, mask, np.asarray(prefix, dtype=np.int64)[None])
        return probs.data[0]


    def predict_tokens(
        self,
        features: Tensor,
        frame_mask: np.ndarray,
        decoder_inputs: np.ndarray,
    ) -> np.ndarray:
        """Teacher-forced argmax token at every decoder position, PAD and SOS excluded.

        Runs on a frozen view with dropout off, so no graph is recorded.
        """
        frozen = Seq2SeqTransformer(self.params.frozen())
        logits = frozen.forward_logits(features.detach(), frame_mask, decoder_inputs).data.copy()
        logits[..., PAD] = -np.inf
        logits[..., SOS] = -np.inf
        return logits.argmax(axis=-1)
