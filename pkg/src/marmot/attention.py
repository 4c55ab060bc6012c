"""Scaled dot-product and multi-head attention, masks, and embedding tables.

Attention masks are plain boolean arrays of shape ``(n_queries, n_keys)``
where ``True`` means the query may attend to the key. Blocked scores are
replaced by -inf before the softmax, which excludes them from the
normaliser so their weights are exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from marmot.tensor import ShapeError, Tensor, concat, masked_fill, matmul, softmax, take_rows, weighted_sum

N_TOKEN_TYPES = 3
TEXT_TYPE, CAPTION_TYPE, IMAGE_TYPE = 0, 1, 2


def full_mask(n_q: int, n_k: int) -> np.ndarray:
    return np.ones((n_q, n_k), dtype=bool)


@dataclass
class MultiHeadParams:
    """Projection weights for ``heads`` attention heads.

    ``w_q``, ``w_k`` and ``w_v`` are ``d x d``; head ``h`` uses columns
    ``h*d_head:(h+1)*d_head``, which is the same as keeping one ``d x d_head``
    matrix per head. ``w_o`` maps the concatenated head outputs back to ``d``.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if self.heads < 1 or d % self.heads:
            raise ShapeError(f"model dim {d} is not divisible by {self.heads} heads")
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            if w.shape != (d, d):
                raise ShapeError(f"attention weight has shape {w.shape}, expected {(d, d)}")

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    @classmethod
    def init(cls, d: int, heads: int, rng: np.random.Generator, std: float = 0.02):
        mats = [Tensor(rng.normal(0.0, std, (d, d)), requires_grad=True) for _ in range(4)]
        return cls(*mats, heads=heads)


@dataclass
class EmbeddingTables:
    token: Tensor  # vocab x d
    position: Tensor  # max_len x d, learned absolute, 0-indexed
    token_type: Tensor  # 3 x d: text, caption, translated image

    def __post_init__(self):
        if self.token_type.shape[0] != N_TOKEN_TYPES:
            raise ShapeError(f"token_type table needs {N_TOKEN_TYPES} rows, got {self.token_type.shape[0]}")
        d = self.token.shape[1]
        if self.position.shape[1] != d or self.token_type.shape[1] != d:
            raise ShapeError("embedding tables disagree on the model dimension")

    @classmethod
    def init(cls, vocab: int, max_len: int, d: int, rng: np.random.Generator, std: float = 0.02):
        return cls(
            token=Tensor(rng.normal(0.0, std, (vocab, d)), requires_grad=True),
            position=Tensor(rng.normal(0.0, std, (max_len, d)), requires_grad=True),
            token_type=Tensor(rng.normal(0.0, std, (N_TOKEN_TYPES, d)), requires_grad=True),
        )


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None):
    """Return ``(z, weights)`` for one attention head.

    Scores are ``q_i . k_j / sqrt(d_head)``; blocked pairs get -inf and thus
    weight 0. Rows with nothing allowed produce zero weights and a zero output.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention operands must be 2-D")
    d_head = q.shape[1]
    if d_head == 0:
        raise ShapeError("d_head must be positive")
    if k.shape[1] != d_head or k.shape[0] != v.shape[0]:
        raise ShapeError(f"inconsistent attention shapes q={q.shape} k={k.shape} v={v.shape}")
    scores = matmul(q, k.T) * (1.0 / math.sqrt(d_head))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != scores.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match scores {scores.shape}")
        scores = masked_fill(scores, ~mask)
    weights = softmax(scores, axis=-1)
    return weighted_sum(weights, v), weights


def multi_head(
    x_q: Tensor,
    x_kv: Tensor,
    params: MultiHeadParams,
    mask: Optional[np.ndarray] = None,
    trace: Optional[list] = None,
) -> Tensor:
    """Multi-head attention; pass ``x_kv is x_q`` for self-attention.

    When ``trace`` is a list, one ``(head, weights)`` pair per head is
    appended to it.
    """
    if x_q.ndim != 2 or x_kv.ndim != 2 or x_q.shape[1] != params.d or x_kv.shape[1] != params.d:
        raise ShapeError(f"inputs {x_q.shape}, {x_kv.shape} do not match model dim {params.d}")
    q = matmul(x_q, params.w_q)
    k = matmul(x_kv, params.w_k)
    v = matmul(x_kv, params.w_v)
    dh = params.d_head
    outputs = []
    for h in range(params.heads):
        cols = slice(h * dh, (h + 1) * dh)
        z, w = scaled_dot_attention(q[:, cols], k[:, cols], v[:, cols], mask)
        outputs.append(z)
        if trace is not None:
            trace.append((h, w.data.copy()))
    merged = outputs[0] if params.heads == 1 else concat(outputs, axis=1)
    return matmul(merged, params.w_o)


def embed(token_ids, segment_types, positions, tables: EmbeddingTables) -> Tensor:
    """Sum of token, position and token-type embedding rows for each position."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    segment_types = np.asarray(segment_types, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    if not token_ids.shape == segment_types.shape == positions.shape:
        raise ShapeError("token_ids, segment_types and positions must have equal length")
    return (
        take_rows(tables.token, token_ids)
        + take_rows(tables.position, positions)
        + take_rows(tables.token_type, segment_types)
    )


def segment_positions(lengths) -> np.ndarray:
    """0-indexed positions that restart at the start of every segment."""
    if not len(lengths):
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.arange(n, dtype=np.int64) for n in lengths])


def build_fusion_mask(present) -> np.ndarray:
    """Allowed iff both query and key positions are present.

    Accepts a boolean presence vector or any object with a ``present``
    attribute (such as a segmented sequence).
    """
    present = np.asarray(getattr(present, "present", present), dtype=bool)
    return np.logical_and.outer(present, present)
