"""
Index math of adaptive Max-SA.

A `PartitionPlan` fixes the zero-padded canvas, the block (window) footage and
the grid footage of one attention pass. Window and grid partitions map the
padded canvas [N, C, pad_h, pad_w] to token sets [N * count, tokens, C] and
back; both maps are bijections on the padded pixels. Padding is placed at the
bottom and right so the original content stays at the top-left.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from maxsr.errors import ConfigError, ShapeError
from maxsr.utilities.tensor import Function, Grads, Tensor, crop2d, pad2d

EXACT = "adaptive_exact"
APPROX = "adaptive_approx"
FIXED = "fixed"
GLOBAL = "global"

_ALIASES = {
    "exact": EXACT,
    "adaptive": EXACT,
    EXACT: EXACT,
    "approx": APPROX,
    APPROX: APPROX,
    GLOBAL: GLOBAL,
}


@dataclass(frozen=True)
class AttentionMode:
    """How attention footage is chosen: adaptive (exact/approx), fixed(P) or global."""

    kind: str = EXACT
    footage: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind not in (EXACT, APPROX, FIXED, GLOBAL):
            raise ConfigError(f"Unknown attention mode {self.kind!r}")
        if self.kind == FIXED and (self.footage is None or self.footage < 1):
            raise ConfigError("Fixed attention mode needs a footage P >= 1")
        if self.kind != FIXED and self.footage is not None:
            raise ConfigError(f"Mode {self.kind} takes no footage")

    def __str__(self) -> str:
        return f"fixed:{self.footage}" if self.kind == FIXED else self.kind

    @classmethod
    def parse(cls, text: str) -> "AttentionMode":
        """Read 'exact', 'approx', 'global' or 'fixed:P'."""
        text = text.strip().lower()
        if text.startswith("fixed"):
            _, _, footage = text.partition(":")
            try:
                return cls(FIXED, int(footage))
            except ValueError as err:
                raise ConfigError(f"Bad fixed attention mode {text!r}") from err
        if text not in _ALIASES:
            raise ConfigError(f"Unknown attention mode {text!r}")

        return cls(_ALIASES[text])


@dataclass(frozen=True)
class PartitionPlan:
    """Complete geometry of one block-attention plus grid-attention pass."""

    orig_h: int
    orig_w: int
    mode: AttentionMode
    pad_h: int
    pad_w: int
    win_h: int
    win_w: int
    grid_h: int
    grid_w: int
    n_win_h: int
    n_win_w: int

    @property
    def n_win(self) -> int:
        return self.n_win_h * self.n_win_w

    @property
    def window_tokens(self) -> int:
        return self.win_h * self.win_w

    @property
    def stride_h(self) -> int:
        return self.pad_h // self.grid_h

    @property
    def stride_w(self) -> int:
        return self.pad_w // self.grid_w

    @property
    def n_cell(self) -> int:
        return self.stride_h * self.stride_w

    @property
    def cell_tokens(self) -> int:
        return self.grid_h * self.grid_w

    def geometry(self) -> Tuple[int, ...]:
        """Every extent of the plan, without the mode that produced it."""
        return (
            self.orig_h,
            self.orig_w,
            self.pad_h,
            self.pad_w,
            self.win_h,
            self.win_w,
            self.grid_h,
            self.grid_w,
            self.n_win_h,
            self.n_win_w,
        )


def ceil_sqrt(n: int) -> int:
    root = math.isqrt(n)
    return root if root * root == n else root + 1


def _axis(extent: int, mode: AttentionMode) -> Tuple[int, int, int, int]:
    """(window, window count, padded extent, grid) along one axis."""
    if mode.kind == EXACT:
        window = ceil_sqrt(extent)
        return window, window, window * window, window
    if mode.kind == APPROX:
        window = ceil_sqrt(extent)
        count = -(-extent // window)
        return window, count, window * count, count
    if mode.kind == FIXED:
        assert mode.footage is not None
        window = mode.footage
        count = -(-extent // window)
        return window, count, window * count, window

    return extent, 1, extent, extent


def adaptive_footage(h: int, w: int, mode: AttentionMode) -> PartitionPlan:
    """Plan the padded canvas and both footages for an h x w feature map."""
    if h < 1 or w < 1:
        raise ShapeError(f"Feature extents must be positive, got {h}x{w}")
    win_h, n_win_h, pad_h, grid_h = _axis(h, mode)
    win_w, n_win_w, pad_w, grid_w = _axis(w, mode)

    return PartitionPlan(
        orig_h=h,
        orig_w=w,
        mode=mode,
        pad_h=pad_h,
        pad_w=pad_w,
        win_h=win_h,
        win_w=win_w,
        grid_h=grid_h,
        grid_w=grid_w,
        n_win_h=n_win_h,
        n_win_w=n_win_w,
    )


def attention_cost(plan: PartitionPlan) -> int:
    """Query-key pairs of one block pass plus one grid pass."""
    return (
        plan.n_win * plan.window_tokens**2 + plan.n_cell * plan.cell_tokens**2
    )


# Raw array maps, shared by the differentiable operations and the masks.


def _check_canvas(shape: Tuple[int, ...], plan: PartitionPlan) -> None:
    if len(shape) != 4 or shape[2:] != (plan.pad_h, plan.pad_w):
        raise ShapeError(
            f"Canvas {shape} does not match plan {plan.pad_h}x{plan.pad_w}"
        )


def _check_tokens(shape: Tuple[int, ...], count: int, tokens: int) -> None:
    if len(shape) != 3 or shape[1] != tokens or shape[0] % count:
        raise ShapeError(f"Token tensor {shape} does not match {count}x{tokens}")


def blocks_from_canvas(canvas: np.ndarray, plan: PartitionPlan) -> np.ndarray:
    _check_canvas(canvas.shape, plan)
    n, c = canvas.shape[:2]
    out = canvas.reshape(n, c, plan.n_win_h, plan.win_h, plan.n_win_w, plan.win_w)
    out = out.transpose(0, 2, 4, 3, 5, 1)
    return np.ascontiguousarray(out.reshape(n * plan.n_win, plan.window_tokens, c))


def canvas_from_blocks(tokens: np.ndarray, plan: PartitionPlan) -> np.ndarray:
    _check_tokens(tokens.shape, plan.n_win, plan.window_tokens)
    n, c = tokens.shape[0] // plan.n_win, tokens.shape[2]
    out = tokens.reshape(n, plan.n_win_h, plan.n_win_w, plan.win_h, plan.win_w, c)
    out = out.transpose(0, 5, 1, 3, 2, 4)
    return np.ascontiguousarray(out.reshape(n, c, plan.pad_h, plan.pad_w))


def cells_from_canvas(canvas: np.ndarray, plan: PartitionPlan) -> np.ndarray:
    if plan.pad_h % plan.grid_h or plan.pad_w % plan.grid_w:
        raise ShapeError("Grid extents must divide the padded extents")
    _check_canvas(canvas.shape, plan)
    n, c = canvas.shape[:2]
    out = canvas.reshape(n, c, plan.grid_h, plan.stride_h, plan.grid_w, plan.stride_w)
    out = out.transpose(0, 3, 5, 2, 4, 1)
    return np.ascontiguousarray(out.reshape(n * plan.n_cell, plan.cell_tokens, c))


def canvas_from_cells(tokens: np.ndarray, plan: PartitionPlan) -> np.ndarray:
    if plan.pad_h % plan.grid_h or plan.pad_w % plan.grid_w:
        raise ShapeError("Grid extents must divide the padded extents")
    _check_tokens(tokens.shape, plan.n_cell, plan.cell_tokens)
    n, c = tokens.shape[0] // plan.n_cell, tokens.shape[2]
    out = tokens.reshape(n, plan.stride_h, plan.stride_w, plan.grid_h, plan.grid_w, c)
    out = out.transpose(0, 5, 3, 1, 4, 2)
    return np.ascontiguousarray(out.reshape(n, c, plan.pad_h, plan.pad_w))


class WindowPartition(Function):
    def forward(  # type: ignore[override]
        self, x: np.ndarray, plan: Optional[PartitionPlan] = None
    ) -> np.ndarray:
        assert plan is not None
        self.plan = plan
        return blocks_from_canvas(x, plan)

    def backward(self, grad: np.ndarray) -> Grads:
        return (canvas_from_blocks(grad, self.plan),)


class WindowReverse(Function):
    def forward(  # type: ignore[override]
        self, tokens: np.ndarray, plan: Optional[PartitionPlan] = None
    ) -> np.ndarray:
        assert plan is not None
        self.plan = plan
        return canvas_from_blocks(tokens, plan)

    def backward(self, grad: np.ndarray) -> Grads:
        return (blocks_from_canvas(grad, self.plan),)


class GridPartition(Function):
    def forward(  # type: ignore[override]
        self, x: np.ndarray, plan: Optional[PartitionPlan] = None
    ) -> np.ndarray:
        assert plan is not None
        self.plan = plan
        return cells_from_canvas(x, plan)

    def backward(self, grad: np.ndarray) -> Grads:
        return (canvas_from_cells(grad, self.plan),)


class GridReverse(Function):
    def forward(  # type: ignore[override]
        self, tokens: np.ndarray, plan: Optional[PartitionPlan] = None
    ) -> np.ndarray:
        assert plan is not None
        self.plan = plan
        return canvas_from_cells(tokens, plan)

    def backward(self, grad: np.ndarray) -> Grads:
        return (cells_from_canvas(grad, self.plan),)


def pad_for_plan(x: Tensor, plan: PartitionPlan) -> Tensor:
    if x.ndim != 4 or x.shape[2:] != (plan.orig_h, plan.orig_w):
        raise ShapeError(
            f"Input {x.shape} does not match plan {plan.orig_h}x{plan.orig_w}"
        )
    return pad2d(x, plan.pad_h, plan.pad_w)


def crop_to_original(x: Tensor, plan: PartitionPlan) -> Tensor:
    return crop2d(x, plan.orig_h, plan.orig_w)


def window_partition(x: Tensor, plan: PartitionPlan) -> Tensor:
    return WindowPartition.apply(x, plan=plan)


def window_reverse(tokens: Tensor, plan: PartitionPlan) -> Tensor:
    return WindowReverse.apply(tokens, plan=plan)


def grid_partition(x: Tensor, plan: PartitionPlan) -> Tensor:
    return GridPartition.apply(x, plan=plan)


def grid_reverse(tokens: Tensor, plan: PartitionPlan) -> Tensor:
    return GridReverse.apply(tokens, plan=plan)


def valid_token_mask(plan: PartitionPlan, kind: str) -> np.ndarray:
    """[count, tokens] booleans, False where a token is introduced padding."""
    canvas = np.zeros((1, 1, plan.pad_h, plan.pad_w), dtype=np.float32)
    canvas[..., : plan.orig_h, : plan.orig_w] = 1.0
    split = blocks_from_canvas if kind == "block" else cells_from_canvas

    return split(canvas, plan)[..., 0] > 0.5
