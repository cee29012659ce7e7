"""
This submodule contains the building blocks of the network: partition geometry
for adaptive attention, the attention operations themselves, and the SFEB,
AMTB, HFFB and RB blocks composed from them.

End users of the package can ignore it; `maxsr.MaxSR` assembles these blocks.
"""

from .attention import (
    AttentionParams,
    adaptive_block_attention,
    adaptive_grid_attention,
    multihead_self_attention,
    relative_position_bias,
)
from .core import StagePlan, upsample_factors
from .geometry import AttentionMode, PartitionPlan, adaptive_footage, attention_cost

__all__ = [
    "AttentionParams",
    "adaptive_block_attention",
    "adaptive_grid_attention",
    "multihead_self_attention",
    "relative_position_bias",
    "StagePlan",
    "upsample_factors",
    "AttentionMode",
    "PartitionPlan",
    "adaptive_footage",
    "attention_cost",
]
