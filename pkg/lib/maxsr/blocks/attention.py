"""
Multi-head self-attention over token sets and its two spatial arrangements.

Block attention runs inside each window of the padded canvas, grid attention
inside each dilated grid cell. Both pad, partition, attend, reverse and crop,
so they return exactly the input shape.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from maxsr.blocks import geometry
from maxsr.blocks.geometry import AttentionMode, PartitionPlan
from maxsr.errors import ShapeError
from maxsr.utilities.tensor import (
    Tensor,
    add,
    batched_matmul,
    linear,
    reshape,
    scale,
    slice_last,
    softmax_lastdim,
    take,
    transpose,
)

logger = logging.getLogger(__name__)

# Finite stand-in for -inf on masked keys.
MASKED_LOGIT = -1e9


@dataclass
class AttentionParams:
    """Parameters of one multi-head self-attention.

    Attributes:
        heads: int
            Number of attention heads.
        qkv_weight, qkv_bias: Tensor
            Fused width -> 3 * width projection producing queries, keys, values.
        proj_weight, proj_bias: Tensor
            Output projection width -> width.
        rpe_table: Tensor, optional
            Relative position bias table [heads, (2 * fh - 1) * (2 * fw - 1)]
            built for the footage `rpe_footage`; present iff RPE is enabled.
        rpe_footage: (int, int)
            The (fh, fw) footage the table was sized for.
    """

    heads: int
    qkv_weight: Tensor
    qkv_bias: Tensor
    proj_weight: Tensor
    proj_bias: Tensor
    rpe_table: Optional[Tensor] = None
    rpe_footage: Tuple[int, int] = (8, 8)

    def __post_init__(self) -> None:
        width = self.qkv_weight.shape[0]
        if self.heads < 1 or width % self.heads:
            raise ShapeError(f"Width {width} is not divisible by {self.heads} heads")
        if self.qkv_weight.shape != (width, 3 * width):
            raise ShapeError(f"qkv weight must be [{width}, {3 * width}]")

    @property
    def width(self) -> int:
        return self.qkv_weight.shape[0]

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def position_bias(self, win_h: int, win_w: int) -> Optional[Tensor]:
        if self.rpe_table is None:
            return None
        table = self.rpe_table
        if (win_h, win_w) != self.rpe_footage:
            table = resize_position_table(table, self.rpe_footage, (win_h, win_w))
        return relative_position_bias(win_h, win_w, table, self.heads)


def relative_position_index(win_h: int, win_w: int) -> np.ndarray:
    """[T, T] offsets of pos_i - pos_j into a (2 win_h - 1) x (2 win_w - 1) table."""
    rows, cols = np.meshgrid(np.arange(win_h), np.arange(win_w), indexing="ij")
    rows, cols = rows.reshape(-1), cols.reshape(-1)
    d_row = rows[:, None] - rows[None, :] + (win_h - 1)
    d_col = cols[:, None] - cols[None, :] + (win_w - 1)

    return d_row * (2 * win_w - 1) + d_col


def relative_position_bias(
    win_h: int, win_w: int, table: Tensor, heads: int
) -> Tensor:
    """bias(h, i, j) = table[h, offset(pos_i - pos_j)] as a [heads, T, T] tensor."""
    expected = (heads, (2 * win_h - 1) * (2 * win_w - 1))
    if table.shape != expected:
        raise ShapeError(f"Position table {table.shape} != {expected}")

    return take(table, relative_position_index(win_h, win_w))


def _linear_resize_matrix(src: int, dst: int) -> np.ndarray:
    """[dst, src] corner-aligned linear interpolation weights."""
    weights = np.zeros((dst, src))
    if src == 1:
        weights[:, 0] = 1.0
        return weights
    positions = (
        np.full(dst, (src - 1) / 2.0)
        if dst == 1
        else np.arange(dst) * (src - 1) / (dst - 1)
    )
    lower = np.clip(np.floor(positions).astype(int), 0, src - 2)
    frac = positions - lower
    weights[np.arange(dst), lower] = 1.0 - frac
    weights[np.arange(dst), lower + 1] += frac

    return weights


def resize_position_table(
    table: Tensor, footage: Tuple[int, int], target: Tuple[int, int]
) -> Tensor:
    """Bilinearly resample a position table built for `footage` to `target`."""
    heads = table.shape[0]
    src_h, src_w = 2 * footage[0] - 1, 2 * footage[1] - 1
    dst_h, dst_w = 2 * target[0] - 1, 2 * target[1] - 1
    rows = _linear_resize_matrix(src_h, dst_h).astype(table.dtype)
    cols = _linear_resize_matrix(src_w, dst_w).T.astype(table.dtype)

    grid = reshape(table, (heads, src_h, src_w))
    grid = batched_matmul(Tensor(np.broadcast_to(rows, (heads, dst_h, src_h))), grid)
    grid = batched_matmul(grid, Tensor(np.broadcast_to(cols, (heads, src_w, dst_w))))

    return reshape(grid, (heads, dst_h * dst_w))


def multihead_self_attention(
    tokens: Tensor,
    params: AttentionParams,
    rpe: Optional[Tensor] = None,
    key_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """softmax(Q K^T / sqrt(d) + rpe) V per head, heads concatenated and projected.

    Args:
      tokens: Tensor
        [B', T, C] token sets, each attended independently.
      params: AttentionParams
        Projection weights; C must equal heads * head_dim.
      rpe: Tensor, optional
        [heads, T, T] additive position bias.
      key_mask: np.ndarray, optional
        [B', T] booleans, False for keys that must receive no attention.
    """
    count, length, width = tokens.shape
    if width != params.width:
        raise ShapeError(
            f"Tokens of width {width} for attention of width {params.width}"
        )
    heads, head_dim = params.heads, params.head_dim

    qkv = linear(tokens, params.qkv_weight, params.qkv_bias)

    def split_heads(start: int) -> Tensor:
        part = slice_last(qkv, start, start + width)
        return transpose(reshape(part, (count, length, heads, head_dim)), (0, 2, 1, 3))

    query, key, value = split_heads(0), split_heads(width), split_heads(2 * width)
    scores = scale(
        batched_matmul(query, transpose(key, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim)
    )
    if rpe is not None:
        scores = add(scores, reshape(rpe, (1, heads, length, length)))
    if key_mask is not None:
        logits = np.where(key_mask, 0.0, MASKED_LOGIT).astype(scores.dtype)
        mask = Tensor(logits.reshape(count, 1, 1, length), dtype=scores.dtype)
        scores = add(scores, mask)

    attended = batched_matmul(softmax_lastdim(scores), value)
    merged = reshape(transpose(attended, (0, 2, 1, 3)), (count, length, width))

    return linear(merged, params.proj_weight, params.proj_bias)


def _batch_mask(plan: PartitionPlan, kind: str, batch: int) -> np.ndarray:
    return np.tile(geometry.valid_token_mask(plan, kind), (batch, 1))


def adaptive_block_attention(
    x: Tensor,
    params: AttentionParams,
    mode: AttentionMode,
    mask_padding: bool = False,
) -> Tensor:
    """Self-attention inside each window of the padded canvas; shape preserving."""
    if x.ndim != 4:
        raise ShapeError(f"Block attention needs [N, C, H, W], got {x.shape}")
    plan = geometry.adaptive_footage(x.shape[2], x.shape[3], mode)
    tokens = geometry.window_partition(geometry.pad_for_plan(x, plan), plan)
    mask = _batch_mask(plan, "block", x.shape[0]) if mask_padding else None
    out = multihead_self_attention(
        tokens, params, params.position_bias(plan.win_h, plan.win_w), mask
    )

    return geometry.crop_to_original(geometry.window_reverse(out, plan), plan)


def adaptive_grid_attention(
    x: Tensor,
    params: AttentionParams,
    mode: AttentionMode,
    mask_padding: bool = False,
) -> Tensor:
    """Self-attention inside each dilated grid cell of the padded canvas."""
    if x.ndim != 4:
        raise ShapeError(f"Grid attention needs [N, C, H, W], got {x.shape}")
    plan = geometry.adaptive_footage(x.shape[2], x.shape[3], mode)
    tokens = geometry.grid_partition(geometry.pad_for_plan(x, plan), plan)
    mask = _batch_mask(plan, "grid", x.shape[0]) if mask_padding else None
    out = multihead_self_attention(
        tokens, params, params.position_bias(plan.grid_h, plan.grid_w), mask
    )

    return geometry.crop_to_original(geometry.grid_reverse(out, plan), plan)
