"""Post-norm transformer encoder and decoder blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from marmot.attention import MultiHeadParams, multi_head
from marmot.tensor import ShapeError, Tensor, matmul, relu

DEFAULT_LN_EPS = 1e-12


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = DEFAULT_LN_EPS

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("layer norm epsilon must be positive")
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ShapeError("gamma and beta must be vectors of equal length")

    @classmethod
    def init(cls, d: int, eps: float = DEFAULT_LN_EPS):
        return cls(Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True), eps)


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    """Normalise each row over its features, then scale by gamma and shift by beta."""
    d = p.gamma.shape[0]
    if x.shape[-1] != d:
        raise ShapeError(f"layer_norm expects last dim {d}, got shape {x.shape}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = centered * inv_std
    gamma, beta = p.gamma.data, p.beta.data
    out = gamma * xhat + beta

    def _back(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gamma
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )
        return dx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return Tensor._from_op(out, (x, p.gamma, p.beta), _back)


@dataclass
class FeedForwardParams:
    w1: Tensor  # d x d_ff
    b1: Tensor
    w2: Tensor  # d_ff x d
    b2: Tensor

    def __post_init__(self):
        d, d_ff = self.w1.shape
        if self.w2.shape != (d_ff, d) or self.b1.shape != (d_ff,) or self.b2.shape != (d,):
            raise ShapeError("feedforward weights have inconsistent shapes")

    @classmethod
    def init(cls, d: int, d_ff: int, rng: np.random.Generator, std: float = 0.02):
        return cls(
            Tensor(rng.normal(0.0, std, (d, d_ff)), requires_grad=True),
            Tensor(np.zeros(d_ff), requires_grad=True),
            Tensor(rng.normal(0.0, std, (d_ff, d)), requires_grad=True),
            Tensor(np.zeros(d), requires_grad=True),
        )


def feedforward(x: Tensor, p: FeedForwardParams) -> Tensor:
    return matmul(relu(matmul(x, p.w1) + p.b1), p.w2) + p.b2


@dataclass
class EncoderBlockParams:
    self_attn: MultiHeadParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    ff: FeedForwardParams

    @classmethod
    def init(cls, d: int, heads: int, d_ff: int, rng: np.random.Generator, std: float = 0.02):
        return cls(
            MultiHeadParams.init(d, heads, rng, std),
            LayerNormParams.init(d),
            LayerNormParams.init(d),
            FeedForwardParams.init(d, d_ff, rng, std),
        )


@dataclass
class DecoderBlockParams:
    self_attn: MultiHeadParams
    cross_attn: MultiHeadParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    ln3: LayerNormParams
    ff: FeedForwardParams

    @classmethod
    def init(cls, d: int, heads: int, d_ff: int, rng: np.random.Generator, std: float = 0.02):
        return cls(
            MultiHeadParams.init(d, heads, rng, std),
            MultiHeadParams.init(d, heads, rng, std),
            LayerNormParams.init(d),
            LayerNormParams.init(d),
            LayerNormParams.init(d),
            FeedForwardParams.init(d, d_ff, rng, std),
        )


def _record(trace: Optional[list], kind: str, heads: list) -> None:
    if trace is not None:
        trace.extend({"attention": kind, "head": h, "weights": w} for h, w in heads)


def encoder_block(x: Tensor, mask, p: EncoderBlockParams, trace: Optional[list] = None) -> Tensor:
    heads = [] if trace is not None else None
    h = layer_norm(x + multi_head(x, x, p.self_attn, mask, heads), p.ln1)
    _record(trace, "self", heads)
    return layer_norm(h + feedforward(h, p.ff), p.ln2)


def decoder_block(
    x: Tensor,
    memory: Tensor,
    self_mask,
    cross_mask,
    p: DecoderBlockParams,
    trace: Optional[list] = None,
) -> Tensor:
    """Self-attention, cross-attention over ``memory``, feedforward; each post-normed.

    No causal mask is applied: all positions are decoded in parallel.
    """
    if memory.ndim != 2 or memory.shape[1] != x.shape[1]:
        raise ShapeError(f"memory shape {memory.shape} does not match input {x.shape}")
    self_heads = [] if trace is not None else None
    cross_heads = [] if trace is not None else None
    h1 = layer_norm(x + multi_head(x, x, p.self_attn, self_mask, self_heads), p.ln1)
    h2 = layer_norm(h1 + multi_head(h1, memory, p.cross_attn, cross_mask, cross_heads), p.ln2)
    _record(trace, "self", self_heads)
    _record(trace, "cross", cross_heads)
    return layer_norm(h2 + feedforward(h2, p.ff), p.ln3)


Block = Union[EncoderBlockParams, DecoderBlockParams]


def stack(blocks: Sequence[Block], x: Tensor, *args, trace: Optional[list] = None) -> Tensor:
    """Apply blocks in order. An empty stack returns ``x`` unchanged.

    Encoder blocks take ``(mask,)`` as extra arguments; decoder blocks take
    ``(memory, self_mask, cross_mask)``. Trace entries gain a ``layer`` key.
    """
    for i, block in enumerate(blocks):
        local = [] if trace is not None else None
        if isinstance(block, EncoderBlockParams):
            x = encoder_block(x, *args, block, trace=local)
        elif isinstance(block, DecoderBlockParams):
            x = decoder_block(x, *args, block, trace=local)
        else:
            raise TypeError(f"not a transformer block: {type(block).__name__}")
        if trace is not None:
            trace.extend(dict(entry, layer=i) for entry in local)
    return x
