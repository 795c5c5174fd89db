"""Flow-matching paths, the joint two-modality objective, and Euler sampling.

Training regresses the constant velocity of a straight noise-to-data path;
sampling integrates the learned field from t=1 (noise) down to t=0 with a
fixed-step explicit Euler scheme, both modalities advanced jointly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch


@dataclass
class FlowSample:
    """One interpolation point on the straight path from data to noise."""

    t: float
    x_0: torch.Tensor
    x_1: torch.Tensor
    x_t: torch.Tensor
    u_target: torch.Tensor


def make_flow_sample(x_0: torch.Tensor, t: float, generator: Optional[torch.Generator] = None) -> FlowSample:
    """x_t = (1-t) x_0 + t x_1 with x_1 ~ N(0, I); the target velocity is x_1 - x_0."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    x_1 = torch.randn(x_0.shape, generator=generator, dtype=x_0.dtype, device=x_0.device)
    x_t = (1.0 - t) * x_0 + t * x_1
    return FlowSample(t=t, x_0=x_0, x_1=x_1, x_t=x_t, u_target=x_1 - x_0)


def sample_timesteps(n: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Uniform flow times on [0, 1)."""
    return torch.rand(n, generator=generator)


@dataclass
class JointLossReport:
    loss_v: float
    loss_a: float
    lam: float
    total: float


def joint_loss(
    pred_v: Optional[torch.Tensor],
    pred_a: Optional[torch.Tensor],
    target_v: Optional[torch.Tensor],
    target_a: Optional[torch.Tensor],
    lam: float = 1.0,
) -> tuple[torch.Tensor, JointLossReport]:
    """Mean-squared velocity error per modality, video + lam * audio.

    Predictions cover noisy-token elements only (reference tokens never enter
    the loss). A modality may be absent (None) for unimodal batches.
    """
    zero = None
    loss_v = loss_a = None
    if (pred_v is None) != (target_v is None) or (pred_a is None) != (target_a is None):
        raise ValueError("prediction/target modalities do not match")
    if pred_v is None and pred_a is None:
        raise ValueError("at least one modality is required")
    if pred_v is not None:
        if pred_v.shape != target_v.shape:
            raise ValueError(f"video shape mismatch: {tuple(pred_v.shape)} vs {tuple(target_v.shape)}")
        loss_v = torch.mean((pred_v - target_v) ** 2)
        zero = loss_v.new_zeros(())
    if pred_a is not None:
        if pred_a.shape != target_a.shape:
            raise ValueError(f"audio shape mismatch: {tuple(pred_a.shape)} vs {tuple(target_a.shape)}")
        loss_a = torch.mean((pred_a - target_a) ** 2)
        zero = loss_a.new_zeros(())
    loss_v = loss_v if loss_v is not None else zero
    loss_a = loss_a if loss_a is not None else zero
    total = loss_v + lam * loss_a
    report = JointLossReport(
        loss_v=float(loss_v.detach()), loss_a=float(loss_a.detach()), lam=lam, total=float(total.detach())
    )
    return total, report


def euler_integrate(
    velocity_fn: Callable[[Sequence[Optional[torch.Tensor]], float], Sequence[Optional[torch.Tensor]]],
    init: Sequence[Optional[torch.Tensor]],
    steps: int,
) -> list[Optional[torch.Tensor]]:
    """Integrate dx/dt = u from t=1 down to t=0 in uniform explicit-Euler steps.

    ``init`` holds the state at t=1 (one entry per modality, None allowed);
    ``velocity_fn(state, t)`` returns matching velocity estimates.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    state = list(init)
    dt = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i * dt
        vel = velocity_fn(state, t)
        state = [x - dt * u if x is not None else None for x, u in zip(state, vel)]
    return state
