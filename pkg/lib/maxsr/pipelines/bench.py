"""Attention cost scaling: closed-form query-key counts, timings, log-log slope."""

import logging
import time
from typing import Dict, Optional, Sequence, Union

import numpy as np
import pandas as pd

from maxsr.blocks.attention import (
    AttentionParams,
    adaptive_block_attention,
    adaptive_grid_attention,
)
from maxsr.blocks.geometry import AttentionMode, adaptive_footage, attention_cost
from maxsr.errors import ShapeError
from maxsr.utilities.constructors import StateConstructor
from maxsr.utilities.parsers import Parse
from maxsr.utilities.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

DEFAULT_SIZES = (16, 32, 64, 128, 256)
BENCH_COLUMNS = ("size", "tokens", "cost", "seconds")
# Query-key pairs above this are counted but not timed.
MAX_TIMED_COST = 50_000_000


def fit_loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("Need at least two paired points to fit a slope")
    slope, _ = np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)

    return float(slope)


def _timing_params(width: int, heads: int, seed: int) -> AttentionParams:
    constructor = StateConstructor(seed)
    constructor.add_linear("qkv", width, 3 * width)
    constructor.add_linear("proj", width, width)
    params = constructor.build().params

    return AttentionParams(
        heads,
        params["qkv.weight"],
        params["qkv.bias"],
        params["proj.weight"],
        params["proj.bias"],
    )


def time_attention(
    size: int, mode: AttentionMode, width: int = 8, heads: int = 2, seed: int = 0
) -> float:
    """Wall seconds of one block pass plus one grid pass on a size x size map."""
    params = _timing_params(width, heads, seed)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, width, size, size)))
    with no_grad():
        start = time.perf_counter()
        adaptive_grid_attention(adaptive_block_attention(x, params, mode), params, mode)

    return time.perf_counter() - start


def bench_attention(
    sizes: Sequence[int] = DEFAULT_SIZES,
    mode: Union[str, AttentionMode] = "exact",
    timed: bool = True,
    as_frame: Optional[bool] = True,
) -> Union[Dict[str, list], pd.DataFrame]:
    """
    Attention cost and wall time per square feature-map size.

    Args:
      sizes: sequence of int
        Feature map extents H = W to measure.
      mode: str or AttentionMode
        Footage rule ("exact", "approx", "fixed:P" or "global").
      timed: bool
        Also time a forward pass; sizes whose cost exceeds MAX_TIMED_COST
        report NaN seconds.
      as_frame: bool
        Return a DataFrame (default) or a dict of lists.

    Returns:
      One row per size: size, tokens (H * W), cost (query-key pairs), seconds.
    """
    if isinstance(mode, str):
        mode = AttentionMode.parse(mode)
    if any(size < 1 for size in sizes):
        raise ShapeError(f"Sizes must be >= 1, got {list(sizes)}")

    columns: Dict[str, list] = {name: [] for name in BENCH_COLUMNS}
    for size in sizes:
        cost = attention_cost(adaptive_footage(size, size, mode))
        seconds = float("nan")
        if timed and cost <= MAX_TIMED_COST:
            seconds = time_attention(size, mode)
        logger.debug("size %d: cost %d, %.4fs", size, cost, seconds)
        columns["size"].append(size)
        columns["tokens"].append(size * size)
        columns["cost"].append(cost)
        columns["seconds"].append(seconds)

    return Parse.table(columns, as_frame)


def cost_slope(
    sizes: Sequence[int] = DEFAULT_SIZES, mode: Union[str, AttentionMode] = "exact"
) -> float:
    """Fitted exponent of attention cost in the token count H * W."""
    table = bench_attention(sizes, mode, timed=False, as_frame=False)
    assert isinstance(table, dict)

    return fit_loglog_slope(table["tokens"], table["cost"])
