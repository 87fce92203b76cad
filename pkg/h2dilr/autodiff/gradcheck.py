"""Central finite-difference gradient checking."""

from collections.abc import Callable, Sequence

import numpy as np

from h2dilr.autodiff.tensor import Graph, Tensor

EPS = 1e-5
TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - fd| / max(1, |fd|) over all entries."""
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)), initial=0.0))


def numeric_gradient(fn: Callable[[], Tensor], tensor: Tensor, eps: float = EPS) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``tensor.data`` (mutated in place)."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus = fn().item()
        flat[i] = original - eps
        minus = fn().item()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * eps)
    return grad


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = EPS,
    tolerance: float = TOLERANCE,
) -> float:
    """Compare backward() against central differences for every input that requires grad.

    ``fn`` maps the inputs to a scalar tensor. Returns the worst relative error
    and raises AssertionError when it exceeds ``tolerance``.
    """
    for tensor in inputs:
        tensor.grad = None
    with Graph():
        loss = fn(*inputs)
        loss.backward()
    worst = 0.0
    for position, tensor in enumerate(inputs):
        if not tensor.requires_grad:
            continue
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        numeric = numeric_gradient(lambda: fn(*inputs), tensor, eps)
        error = relative_error(analytic, numeric)
        if error >= tolerance:
            raise AssertionError(f"input {position}: relative gradient error {error:.3e} >= {tolerance:.0e}")
        worst = max(worst, error)
    return worst
