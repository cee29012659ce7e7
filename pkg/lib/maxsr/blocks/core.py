"""
The four parts of the network: shallow feature extraction (SFEB), the adaptive
MaxViT transformer block (AMTB), hierarchical feature fusion (HFFB) and the
pixel-shuffle reconstruction block (RB).

Each part comes as a pair: an ``add_*`` function that declares its parameters
on a `StateConstructor` and a ``*_forward`` function that reads them back
through a `ParamView`. Names declared by one are exactly the names read by the
other.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

from maxsr.blocks.attention import (
    AttentionParams,
    adaptive_block_attention,
    adaptive_grid_attention,
)
from maxsr.blocks.geometry import AttentionMode
from maxsr.errors import ConfigError, ShapeError
from maxsr.utilities.constructors import ParamView, StateConstructor
from maxsr.utilities.tensor import (
    Tensor,
    add,
    batch_norm,
    concat_channels,
    conv2d,
    gelu,
    global_avg_pool,
    layer_norm,
    mul,
    pixel_shuffle,
    sigmoid,
)

logger = logging.getLogger(__name__)

EXPANSION = 4
FFN_RATIO = 4
LAYOUTS = {
    "block_grid": ("block", "grid"),
    "block_block": ("block", "block"),
    "grid_grid": ("grid", "grid"),
}
UPSAMPLE_FACTORS = {2: (2,), 3: (3,), 4: (2, 2), 8: (2, 2, 2)}


@dataclass(frozen=True)
class StagePlan:
    """How B cascaded blocks split into S stages of L = B / S blocks.

    Attributes:
        blocks: int
            Total AMTB count B.
        stages: int
            Stage count S; B must be a multiple of it.
    """

    blocks: int
    stages: int

    def __post_init__(self) -> None:
        if self.blocks < 1 or self.stages < 1:
            raise ConfigError("Block and stage counts must be positive")
        if self.blocks % self.stages:
            raise ConfigError(
                f"{self.blocks} blocks cannot be divided into {self.stages} stages"
            )

    @property
    def per_stage(self) -> int:
        return self.blocks // self.stages

    @property
    def fusion_indices(self) -> Tuple[int, ...]:
        """1-based indices of the blocks whose outputs feed the fusion block."""
        return tuple(range(self.per_stage, self.blocks + 1, self.per_stage))


def upsample_factors(scale: int) -> Tuple[int, ...]:
    """Pixel-shuffle factors of the reconstruction block; x4 and x8 chain x2 stages."""
    if scale not in UPSAMPLE_FACTORS:
        raise ConfigError(f"Unsupported scale x{scale}; use one of 2, 3, 4, 8")
    return UPSAMPLE_FACTORS[scale]


# Parameter declarations


def add_sfeb(constructor: StateConstructor, width: int):
    constructor.add_conv("sfeb.conv0", 3, width, 3)
    constructor.add_conv("sfeb.conv1", width, width, 3)

    return


def add_amtb(
    constructor: StateConstructor,
    prefix: str,
    width: int,
    heads: int,
    rpe: bool = False,
    rpe_footage: Tuple[int, int] = (8, 8),
    se_ratio: float = 0.25,
):
    hidden = EXPANSION * width
    squeezed = max(1, int(hidden * se_ratio))
    mb = f"{prefix}.mbconv"
    constructor.add_batch_norm(f"{mb}.norm0", width)
    constructor.add_conv(f"{mb}.expand", width, hidden, 1)
    constructor.add_batch_norm(f"{mb}.norm1", hidden)
    constructor.add_conv(f"{mb}.depthwise", hidden, hidden, 3, groups=hidden)
    constructor.add_batch_norm(f"{mb}.norm2", hidden)
    constructor.add_conv(f"{mb}.se.reduce", hidden, squeezed, 1)
    constructor.add_conv(f"{mb}.se.expand", squeezed, hidden, 1)
    constructor.add_conv(f"{mb}.project", hidden, width, 1)

    for index in range(2):
        attn = f"{prefix}.attn{index}"
        constructor.add_layer_norm(f"{attn}.norm", width)
        constructor.add_linear(f"{attn}.qkv", width, 3 * width)
        constructor.add_linear(f"{attn}.proj", width, width)
        if rpe:
            constructor.add_position_table(f"{attn}.rpe_table", heads, rpe_footage)
        constructor.add_layer_norm(f"{attn}.ffn_norm", width)
        constructor.add_conv(f"{attn}.fc1", width, FFN_RATIO * width, 1)
        constructor.add_conv(f"{attn}.fc2", FFN_RATIO * width, width, 1)

    return


def add_hffb(constructor: StateConstructor, width: int, stages: int):
    constructor.add_conv("hffb.fuse", stages * width, width, 1)
    constructor.add_conv("hffb.conv", width, width, 3)

    return


def add_rb(constructor: StateConstructor, width: int, scale: int):
    for index, factor in enumerate(upsample_factors(scale)):
        constructor.add_conv(f"rb.up{index}", width, width * factor * factor, 3)
    constructor.add_conv("rb.out", width, 3, 3)

    return


# Forward maps


def _conv(x: Tensor, view: ParamView, name: str, **kwargs) -> Tensor:
    return conv2d(x, view[f"{name}.weight"], view[f"{name}.bias"], **kwargs)


def _batch_norm(x: Tensor, view: ParamView, name: str) -> Tensor:
    return batch_norm(
        x,
        view[f"{name}.weight"],
        view[f"{name}.bias"],
        view.buffer(f"{name}.running_mean"),
        view.buffer(f"{name}.running_var"),
        training=view.training,
    )


def _layer_norm(x: Tensor, view: ParamView, name: str) -> Tensor:
    return layer_norm(x, view[f"{name}.weight"], view[f"{name}.bias"], axis=1)


def sfeb_forward(x: Tensor, view: ParamView) -> Tuple[Tensor, Tensor]:
    """Two same-padded 3x3 convolutions; both feature maps are returned.

    Returns:
      (F_-1, F_0): the first feeds the fusion residual, the second the blocks.
    """
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"Expected an [N, 3, H, W] image batch, got {x.shape}")
    shallow = _conv(x, view, "conv0", pad=1)

    return shallow, _conv(shallow, view, "conv1", pad=1)


def squeeze_excite(x: Tensor, view: ParamView) -> Tensor:
    """Gate channels by sigmoid(expand(gelu(reduce(mean over space))))."""
    squeezed = gelu(_conv(global_avg_pool(x), view, "reduce"))
    gate = sigmoid(_conv(squeezed, view, "expand"))

    return mul(x, gate)


def mbconv_se_forward(x: Tensor, view: ParamView) -> Tensor:
    """Inverted bottleneck with squeeze-excitation, residual around the whole block.

    norm -> 1x1 expand -> norm -> GELU -> depthwise 3x3 -> norm -> GELU -> SE
    -> 1x1 project, added back onto the input. Stride is 1 throughout.
    """
    hidden = view["depthwise.weight"].shape[0]
    branch = _conv(_batch_norm(x, view, "norm0"), view, "expand")
    branch = gelu(_batch_norm(branch, view, "norm1"))
    branch = _conv(branch, view, "depthwise", pad=1, groups=hidden)
    branch = gelu(_batch_norm(branch, view, "norm2"))
    branch = squeeze_excite(branch, view.child("se"))

    return add(x, _conv(branch, view, "project"))


def attention_params(
    view: ParamView, heads: int, rpe_footage: Tuple[int, int] = (8, 8)
) -> AttentionParams:
    return AttentionParams(
        heads=heads,
        qkv_weight=view["qkv.weight"],
        qkv_bias=view["qkv.bias"],
        proj_weight=view["proj.weight"],
        proj_bias=view["proj.bias"],
        rpe_table=view["rpe_table"] if "rpe_table" in view else None,
        rpe_footage=rpe_footage,
    )


def attention_pass(
    x: Tensor,
    view: ParamView,
    kind: str,
    mode: AttentionMode,
    heads: int,
    mask_padding: bool = False,
    rpe_footage: Tuple[int, int] = (8, 8),
) -> Tensor:
    """Pre-norm block or grid attention with residual, then a pre-norm residual FFN."""
    attend = adaptive_block_attention if kind == "block" else adaptive_grid_attention
    params = attention_params(view, heads, rpe_footage)
    x = add(x, attend(_layer_norm(x, view, "norm"), params, mode, mask_padding))

    hidden = gelu(_conv(_layer_norm(x, view, "ffn_norm"), view, "fc1"))
    return add(x, _conv(hidden, view, "fc2"))


def amtb_forward(
    x: Tensor,
    view: ParamView,
    mode: AttentionMode,
    heads: int,
    layout: str = "block_grid",
    mask_padding: bool = False,
    rpe_footage: Tuple[int, int] = (8, 8),
) -> Tensor:
    """
    One adaptive MaxViT block: MBConv with SE, then two attention passes.

    Args:
      x: Tensor
        [N, W, h, w] features; the output has the same shape.
      view: ParamView
        The block's parameters ("amtb.<b>").
      mode: AttentionMode
        Footage rule shared by both attention passes.
      heads: int
        Attention heads per pass.
      layout: str
        "block_grid" runs block then grid attention; "block_block" and
        "grid_grid" repeat one of them.
      mask_padding: bool
        Exclude padded tokens from the attention softmax.
      rpe_footage: (int, int)
        Footage the position tables were sized for, if present.

    Raises:
      ConfigError: unknown layout.
      ShapeError: channel count differs from the block width.
    """
    if layout not in LAYOUTS:
        raise ConfigError(f"Unknown attention layout {layout!r}")
    width = view["mbconv.project.weight"].shape[0]
    if x.ndim != 4 or x.shape[1] != width:
        raise ShapeError(f"Block of width {width} got input {x.shape}")

    x = mbconv_se_forward(x, view.child("mbconv"))
    for index, kind in enumerate(LAYOUTS[layout]):
        x = attention_pass(
            x,
            view.child(f"attn{index}"),
            kind,
            mode,
            heads,
            mask_padding=mask_padding,
            rpe_footage=rpe_footage,
        )

    return x


def hffb_forward(
    shallow: Tensor, stage_outputs: Sequence[Tensor], view: ParamView
) -> Tensor:
    """conv3x3(conv1x1(concat(stage outputs))) + F_-1."""
    width = shallow.shape[1]
    expected = view["fuse.weight"].shape[1] // width
    if len(stage_outputs) != expected:
        raise ShapeError(
            f"Fusion expects {expected} stage outputs, got {len(stage_outputs)}"
        )
    for output in stage_outputs:
        if output.shape != shallow.shape:
            raise ShapeError(f"Stage output {output.shape} != {shallow.shape}")

    fused = _conv(concat_channels(list(stage_outputs)), view, "fuse")
    return add(_conv(fused, view, "conv", pad=1), shallow)


def rb_forward(features: Tensor, view: ParamView, scale: int) -> Tensor:
    """Conv + pixel shuffle per upsampling factor, then a 3x3 conv down to RGB."""
    out = features
    for index, factor in enumerate(upsample_factors(scale)):
        out = pixel_shuffle(_conv(out, view, f"up{index}", pad=1), factor)

    return _conv(out, view, "out", pad=1)


def stage_outputs(collected: List[Tensor], plan: StagePlan) -> List[Tensor]:
    """Pick the outputs of the last block of every stage from all block outputs."""
    if len(collected) != plan.blocks:
        raise ShapeError(f"Expected {plan.blocks} block outputs, got {len(collected)}")
    return [collected[index - 1] for index in plan.fusion_indices]
