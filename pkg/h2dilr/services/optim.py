"""AdamW with decoupled weight decay and the cosine learning-rate schedule."""

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from h2dilr.autodiff.tensor import Parameter
from h2dilr.core.errors import NonFiniteError, ShapeError


@dataclass
class MomentState:
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adamw_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray | None],
    state: dict[str, MomentState],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.01,
    eps: float = 1e-8,
) -> None:
    """In-place AdamW update; parameters with a None gradient are skipped entirely.

    All gradients are validated before any parameter moves.
    """
    if len(params) != len(grads):
        raise ShapeError(f"adamw_step: {len(params)} parameters but {len(grads)} gradients")
    for param, grad in zip(params, grads):
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise ShapeError(f"adamw_step: gradient {grad.shape} for '{param.name}' of shape {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"adamw_step: non-finite gradient for '{param.name}'; step aborted")

    beta1, beta2 = betas
    for param, grad in zip(params, grads):
        if grad is None:
            continue
        slot = state.setdefault(param.name or f"param_{id(param)}", MomentState())
        if slot.m is None:
            slot.m = np.zeros_like(param.data)
            slot.v = np.zeros_like(param.data)
        slot.step += 1
        if weight_decay:
            param.data = param.data - lr * weight_decay * param.data
        slot.m = beta1 * slot.m + (1.0 - beta1) * grad
        slot.v = beta2 * slot.v + (1.0 - beta2) * grad * grad
        m_hat = slot.m / (1.0 - beta1**slot.step)
        v_hat = slot.v / (1.0 - beta2**slot.step)
        param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class AdamW:
    """Stateful wrapper over ``adamw_step``; moments are keyed by parameter name."""

    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8
    state: dict[str, MomentState] = field(default_factory=dict)

    def step(self, params: Sequence[Parameter], lr: float) -> None:
        """Update trainable parameters from their ``.grad`` and clear the gradients."""
        trainable = [p for p in params if p.requires_grad]
        adamw_step(trainable, [p.grad for p in trainable], self.state, lr, self.betas, self.weight_decay, self.eps)
        for param in params:
            param.grad = None


def cosine_lr(step: int, total_steps: int, base: float) -> float:
    """base * 0.5 * (1 + cos(pi * step / total)); exactly base at 0 and 0 at the end."""
    if total_steps <= 0:
        raise ValueError(f"cosine_lr: total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return 0.0
    return max(0.0, base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps)))
