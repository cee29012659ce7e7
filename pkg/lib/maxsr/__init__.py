"""maxsr.py  Single image super-resolution with adaptive multi-axis attention."""

from maxsr.blocks import AttentionMode
from maxsr.network import MaxSR, ModelConfig

__all__ = ["MaxSR", "ModelConfig", "AttentionMode"]

__version__ = "0.1.dev1"
