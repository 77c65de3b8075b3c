"""Central finite-difference checking of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


class NumericError(ArithmeticError):
    """Raised when a checked function is non-finite at a probe point."""


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    details: bool = False,
):
    """Compare analytic gradients of a scalar ``f`` against central differences.

    Every coordinate of every input with ``requires_grad`` is probed. The
    relative error per coordinate is
    ``|analytic - cd| / max(|analytic|, |cd|, 1e-8)``.

    Args:
        f: callable taking ``*inputs`` and returning a scalar Tensor.
        inputs: Tensors in float64.
        h: probe step.
        details: also return ``(input_index, flat_coordinate)`` of the worst
            coordinate.

    Returns:
        The maximum relative error (and the worst location when ``details``).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs float64 inputs; finite differences are unreliable at 32-bit")
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    out = f(*inputs)
    backward(out)
    worst, where = 0.0, None
    for ti, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        an_flat = analytic.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = f(*inputs).item()
            flat[k] = orig - h
            fm = f(*inputs).item()
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite value at input {ti}, coordinate {tuple(int(i) for i in np.unravel_index(k, t.shape))}")
            cd = (fp - fm) / (2.0 * h)
            a = float(an_flat[k])
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            if err > worst:
                worst, where = err, (ti, k)
    return (worst, where) if details else worst
