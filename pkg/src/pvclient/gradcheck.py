"""Central finite-difference gradient checking against the autodiff tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward, no_grad


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to every entry of ``t``."""
    flat = t.data.reshape(-1)
    out = np.zeros(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            out[i] = (up - down) / (2.0 * h)
    return out.reshape(t.shape)


# Central differences at h=1e-5 carry ~1e-11 of rounding noise; gradients that are
# identically zero (e.g. a bias removed by a following layer norm) would otherwise
# turn that noise into a huge "relative" error.
SCALE_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), SCALE_FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5) -> dict[str, float]:
    """Return the relative error per tensor between tape gradients and finite differences.

    ``fn`` must rebuild the graph from the current contents of ``tensors`` on every
    call and return a scalar. Errors are max-norm relative to the larger of the two
    gradient magnitudes.
    """
    for t in tensors:
        t.zero_grad()
    backward(fn())
    errors = {}
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        errors[t.name or f"t{i}"] = relative_error(analytic, numerical_grad(fn, t, h))
    return errors
