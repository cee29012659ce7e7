"""
Finite-difference gradient-check suites.

Every suite builds a small 64-bit problem, reduces the operation's output to a
scalar through a fixed random projection and compares backward against
central differences on a sample of elements of every leaf.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from maxsr.blocks import attention, core
from maxsr.blocks.geometry import AttentionMode
from maxsr.network import ModelConfig, build_model, forward
from maxsr.pipelines.train import mae_loss
from maxsr.utilities.constructors import ParamView, StateConstructor
from maxsr.utilities.gradcheck import finite_diff_grad, relative_error, sample_indices
from maxsr.utilities.parsers import Parse
from maxsr.utilities import tensor as T
from maxsr.utilities.tensor import Tensor, backward, default_dtype

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
SAMPLES_PER_LEAF = 12

Problem = Tuple[Callable[[], Tensor], List[Tensor]]


@dataclass(frozen=True)
class SuiteResult:
    name: str
    checked: int
    max_rel_error: float
    passed: bool


def _leaf(
    rng: np.random.Generator, *shape: int, away_from_zero: bool = False
) -> Tensor:
    values = rng.standard_normal(shape)
    if away_from_zero:
        values = np.sign(values) * (np.abs(values) + 0.1)
    return Tensor(values, requires_grad=True)


def _projected(
    out: Callable[[], Tensor], shape: Tuple[int, ...], rng: np.random.Generator
) -> Callable[[], Tensor]:
    weights = Tensor(rng.standard_normal(shape))
    return lambda: (out() * weights).sum()


def _conv_problem(rng: np.random.Generator) -> Problem:
    x, w, b = _leaf(rng, 2, 3, 5, 5), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
    same = _projected(lambda: T.conv2d(x, w, b, pad=1), (2, 4, 5, 5), rng)
    strided = _projected(
        lambda: T.conv2d(x, w, b, stride=2, pad=1), (2, 4, 3, 3), rng
    )

    return (lambda: same() + strided()), [x, w, b]


def _grouped_conv_problem(rng: np.random.Generator) -> Problem:
    x, w, b = _leaf(rng, 1, 4, 5, 5), _leaf(rng, 4, 1, 3, 3), _leaf(rng, 4)
    grouped = _projected(lambda: T.conv2d(x, w, b, pad=1, groups=4), (1, 4, 5, 5), rng)

    return grouped, [x, w, b]


def _matmul_problem(rng: np.random.Generator) -> Problem:
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 5)
    return _projected(lambda: T.batched_matmul(a, b), (2, 3, 5), rng), [a, b]


def _linear_problem(rng: np.random.Generator) -> Problem:
    x, w, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
    return _projected(lambda: T.linear(x, w, b), (2, 3, 5), rng), [x, w, b]


def _softmax_problem(rng: np.random.Generator) -> Problem:
    x = _leaf(rng, 3, 5)
    return _projected(lambda: T.softmax_lastdim(x), (3, 5), rng), [x]


def _layer_norm_problem(rng: np.random.Generator) -> Problem:
    x, gamma, beta = _leaf(rng, 2, 4, 3, 3), _leaf(rng, 4), _leaf(rng, 4)
    normed = _projected(lambda: T.layer_norm(x, gamma, beta), (2, 4, 3, 3), rng)

    return normed, [x, gamma, beta]


def _batch_norm_problem(rng: np.random.Generator) -> Problem:
    x, gamma, beta = _leaf(rng, 3, 4, 2, 2), _leaf(rng, 4), _leaf(rng, 4)
    mean, var = np.zeros(4), np.ones(4)

    def normed() -> Tensor:
        return T.batch_norm(x, gamma, beta, mean, var, training=True)

    return _projected(normed, (3, 4, 2, 2), rng), [x, gamma, beta]


def _elementwise_problem(rng: np.random.Generator) -> Problem:
    a, b = _leaf(rng, 2, 3, 2, 2, away_from_zero=True), _leaf(rng, 1, 3, 1, 1)

    def composed() -> Tensor:
        mixed = T.add(T.mul(a, b), T.scale(a, 0.5, shift=0.25))
        return T.concat_channels([T.gelu(mixed), T.sigmoid(mixed), T.relu(a)])

    return _projected(composed, (2, 9, 2, 2), rng), [a, b]


def _reshaping_problem(rng: np.random.Generator) -> Problem:
    x = _leaf(rng, 1, 8, 2, 3)

    def shuffled() -> Tensor:
        up = T.pixel_shuffle(x, 2)
        return T.add(T.pixel_unshuffle(up, 2), T.global_avg_pool(x))

    return _projected(shuffled, (1, 8, 2, 3), rng), [x]


def _mae_problem(rng: np.random.Generator) -> Problem:
    prediction = _leaf(rng, 2, 3, 4, 4)
    signs = rng.choice([-1.0, 1.0], (2, 3, 4, 4))
    offsets = rng.uniform(0.1, 1.0, (2, 3, 4, 4)) * signs
    target = Tensor(prediction.data + offsets)
    return (lambda: mae_loss(prediction, target)), [prediction]


def _position_bias_problem(rng: np.random.Generator) -> Problem:
    table = _leaf(rng, 2, 25)

    def biased() -> Tensor:
        resized = attention.resize_position_table(table, (3, 3), (2, 3))
        return attention.relative_position_bias(2, 3, resized, 2)

    return _projected(biased, (2, 6, 6), rng), [table]


def _attention_view(
    rng: np.random.Generator, width: int = 4, heads: int = 2
) -> ParamView:
    constructor = StateConstructor(int(rng.integers(1 << 31)))
    core.add_amtb(constructor, "amtb", width, heads, rpe=True, rpe_footage=(2, 2))
    state = constructor.build()
    for tensor in state.params.values():
        tensor.data += 0.1 * rng.standard_normal(tensor.shape)

    return ParamView(state, "amtb", training=True)


def _attention_problem(kind: str) -> Callable[[np.random.Generator], Problem]:
    def build(rng: np.random.Generator) -> Problem:
        view = _attention_view(rng)
        params = core.attention_params(
            view.child("attn0"), heads=2, rpe_footage=(2, 2)
        )
        x = _leaf(rng, 1, 4, 5, 5)
        attend = (
            attention.adaptive_block_attention
            if kind == "block"
            else attention.adaptive_grid_attention
        )
        assert params.rpe_table is not None
        leaves = [
            x,
            params.qkv_weight,
            params.qkv_bias,
            params.proj_weight,
            params.proj_bias,
            params.rpe_table,
        ]
        attended = _projected(
            lambda: attend(x, params, AttentionMode()), (1, 4, 5, 5), rng
        )

        return attended, leaves

    return build


def _amtb_problem(rng: np.random.Generator) -> Problem:
    view = _attention_view(rng)
    x = _leaf(rng, 2, 4, 5, 5)

    def block() -> Tensor:
        return core.amtb_forward(x, view, AttentionMode(), heads=2, rpe_footage=(2, 2))

    return _projected(block, (2, 4, 5, 5), rng), [x] + list(view.state.params.values())


def _network_problem(rng: np.random.Generator) -> Problem:
    config = ModelConfig.preset("toy", scale=2, rpe=True, rpe_footage=2)
    state = build_model(config, seed=int(rng.integers(1 << 31)))
    for tensor in state.params.values():
        tensor.data += 0.1 * rng.standard_normal(tensor.shape)
    x = Tensor(rng.uniform(0, 1, (2, 3, 8, 8)), requires_grad=True)

    def network() -> Tensor:
        return forward(state, config, x, training=True)

    return _projected(network, (2, 3, 16, 16), rng), [x] + list(state.params.values())


SUITES: Dict[str, Callable[[np.random.Generator], Problem]] = {
    "conv2d": _conv_problem,
    "conv2d_grouped": _grouped_conv_problem,
    "batched_matmul": _matmul_problem,
    "linear": _linear_problem,
    "softmax": _softmax_problem,
    "layer_norm": _layer_norm_problem,
    "batch_norm": _batch_norm_problem,
    "elementwise": _elementwise_problem,
    "pixel_shuffle": _reshaping_problem,
    "mae_loss": _mae_problem,
    "position_bias": _position_bias_problem,
    "block_attention": _attention_problem("block"),
    "grid_attention": _attention_problem("grid"),
    "amtb": _amtb_problem,
    "network": _network_problem,
}


def run_suite(
    name: str,
    seed: int = 0,
    corrupt: bool = False,
    samples: int = SAMPLES_PER_LEAF,
    tolerance: float = TOLERANCE,
) -> SuiteResult:
    """
    Compare backward with central differences for one suite.

    Args:
      name: str
        A key of SUITES.
      seed: int
        Seeds inputs, parameters, projections and sampled elements.
      corrupt: bool
        Scale the analytic gradients by 1.5 before comparing, a negative
        control that must fail.
      samples: int
        Elements checked per leaf.
      tolerance: float
        Largest relative error that passes.
    """
    if name not in SUITES:
        raise KeyError(f"Unknown gradient-check suite {name!r}")
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        loss_fn, leaves = SUITES[name](rng)
        for leaf in leaves:
            leaf.zero_grad()
        backward(loss_fn())

        analytic, numeric = [], []
        for leaf in leaves:
            indices = sample_indices(leaf.shape, samples, rng)
            estimate = finite_diff_grad(lambda _: loss_fn(), leaf, indices=indices)
            grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            rows = tuple(np.array(axis) for axis in zip(*indices))
            analytic.append(grad[rows])
            numeric.append(estimate[rows])

    analytic_all = np.concatenate(analytic)
    if corrupt:
        analytic_all = analytic_all * 1.5
    error = relative_error(analytic_all, np.concatenate(numeric))
    result = SuiteResult(name, int(analytic_all.size), error, error < tolerance)
    verdict = "ok" if result.passed else "FAIL"
    logger.info("gradcheck %-16s rel err %.2e %s", name, error, verdict)

    return result


def run_gradcheck(
    seed: int = 0,
    suites: Optional[Sequence[str]] = None,
    corrupt: Optional[str] = None,
) -> List[SuiteResult]:
    """Run the named suites (all by default); `corrupt` names one to sabotage."""
    names = list(suites) if suites else list(SUITES)
    return [run_suite(name, seed, corrupt=(name == corrupt)) for name in names]


def gradcheck_report(
    results: Sequence[SuiteResult], as_frame: Optional[bool] = True
) -> Union[Dict[str, list], pd.DataFrame]:
    columns = {
        "suite": [r.name for r in results],
        "checked": [r.checked for r in results],
        "max_rel_error": [r.max_rel_error for r in results],
        "passed": [r.passed for r in results],
    }
    return Parse.table(columns, as_frame)
