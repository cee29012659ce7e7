"""Central finite differences, the oracle every gradient test compares against."""

from typing import Callable, Iterable, Optional, Tuple

import numpy as np

from maxsr.utilities.tensor import Tensor, no_grad

ScalarFn = Callable[[Tensor], Tensor]


def finite_diff_grad(
    f: ScalarFn,
    x: Tensor,
    eps: float = 1e-5,
    indices: Optional[Iterable[Tuple[int, ...]]] = None,
) -> np.ndarray:
    """Estimate d f / d x by (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).

    Args:
      f: Callable
        Maps `x` to a scalar tensor. It is re-evaluated twice per element.
      x: Tensor
        The point of evaluation; must be 64-bit. Its data is perturbed in
        place one element at a time and restored exactly afterwards.
      eps: float
        The half-width of the central difference.
      indices: iterable of index tuples, optional
        Only these elements are estimated; the others stay zero. Defaults to
        every element.

    Returns:
      An array shaped like `x` holding the estimated gradient.

    Raises:
      ValueError: if `x` is not a float64 tensor.
    """
    if x.dtype != np.float64:
        raise ValueError("Finite differences need 64-bit tensors")

    estimate = np.zeros_like(x.data)
    targets = indices if indices is not None else np.ndindex(*x.shape)
    with no_grad():
        for index in targets:
            original = x.data[index]
            x.data[index] = original + eps
            upper = f(x).item()
            x.data[index] = original - eps
            lower = f(x).item()
            x.data[index] = original
            estimate[index] = (upper - lower) / (2.0 * eps)

    return estimate


def relative_error(
    analytic: np.ndarray,
    numeric: np.ndarray,
    mask: Optional[np.ndarray] = None,
    floor: float = 1e-3,
) -> float:
    """Largest per-element |a - n| / max(|a|, |n|).

    Entries smaller than `floor` times the largest gradient magnitude are
    measured against that floor instead, so round-off on gradients that are
    zero up to noise does not count as disagreement.
    """
    if mask is not None:
        analytic, numeric = analytic[mask], numeric[mask]
    if analytic.size == 0:
        return 0.0
    magnitude = np.maximum(np.abs(analytic), np.abs(numeric))
    scale = max(float(magnitude.max()), 1e-12)
    denominator = np.maximum(magnitude, floor * scale)

    return float((np.abs(analytic - numeric) / denominator).max())


def sample_indices(
    shape: Tuple[int, ...], limit: int, rng: np.random.Generator
) -> list:
    """At most `limit` distinct element positions of an array of `shape`."""
    total = int(np.prod(shape))
    if total <= limit:
        return list(np.ndindex(*shape))
    flat = rng.choice(total, size=limit, replace=False)

    return [tuple(int(i) for i in np.unravel_index(f, shape)) for f in sorted(flat)]
