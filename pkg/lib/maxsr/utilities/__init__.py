"""
This submodule contains the machinery everything else is built on: the tensor
engine and its finite-difference oracle, state and checkpoint constructors,
parsers for files coming in, and helpers for files going out.

End users of the package rarely need it directly; the MaxSR class and the
pipelines wrap it.
"""

from .constructors import CheckpointConstructor, ModelState, ParamView, StateConstructor
from .general import Files, Settings
from .parsers import Parse

__all__ = [
    "CheckpointConstructor",
    "ModelState",
    "ParamView",
    "StateConstructor",
    "Files",
    "Settings",
    "Parse",
]
