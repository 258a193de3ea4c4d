"""Central finite differences against TensorFlow autodiff."""
from typing import Callable, Optional, Sequence

import numpy as np
import tensorflow as tf

DEFAULT_STEP = 1e-5


def central_difference(
    loss_fn: Callable[[], tf.Tensor],
    variables: Sequence[tf.Variable],
    step: float = DEFAULT_STEP,
    indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Numerical gradient of ``loss_fn`` w.r.t. the flattened ``variables``.

    Each variable is perturbed in place and restored afterwards. ``indices``
    restricts the check to a subset of flat positions (others stay zero).
    """
    sizes = [int(np.prod(v.shape)) for v in variables]
    offsets = np.cumsum([0] + sizes)
    total = int(offsets[-1])
    positions = range(total) if indices is None else indices

    grad = np.zeros(total, dtype=np.float64)
    for flat in positions:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        var = variables[k]
        original = var.numpy()
        bumped = original.copy().ravel()
        local = flat - offsets[k]

        bumped[local] = original.ravel()[local] + step
        var.assign(bumped.reshape(original.shape))
        plus = float(loss_fn())
        bumped[local] = original.ravel()[local] - step
        var.assign(bumped.reshape(original.shape))
        minus = float(loss_fn())
        var.assign(original)

        grad[flat] = (plus - minus) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """max |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))
