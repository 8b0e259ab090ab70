"""Binary uncertainty ground truth, its decaying threshold schedule, and the loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import torch

from .errors import InvalidArgumentError

Tensor = torch.Tensor

REL_EPS = 1e-8  # guards the relative-error denominator at zero-flow points


@dataclass
class ThresholdSchedule:
    """Absolute (meters) and relative thresholds, step-decayed during training."""

    e1_init: float = 0.5
    e2_init: float = 0.5
    decay: float = 0.8
    floor: float = 0.02
    interval: int = 10

    def __post_init__(self):
        if not (0.0 < self.decay < 1.0):
            raise InvalidArgumentError("decay must be in (0,1)")
        if self.floor <= 0:
            raise InvalidArgumentError("floor must be positive")
        if self.e1_init < self.floor or self.e2_init < self.floor:
            raise InvalidArgumentError("initial thresholds must not start below the floor")
        if self.interval < 1:
            raise InvalidArgumentError("interval must be >= 1")


def thresholds_at(sched: ThresholdSchedule, epoch: int) -> Tuple[float, float]:
    """Step decay every `interval` epochs, clamped at the floor."""
    if epoch < 0:
        raise InvalidArgumentError("epoch must be >= 0")
    factor = sched.decay ** (epoch // sched.interval)
    e1 = max(sched.floor, sched.e1_init * factor)
    e2 = max(sched.floor, sched.e2_init * factor)
    return e1, e2


def build_uncertainty_gt(sf_l: Tensor, sf_gt: Tensor, e1: float, e2: float) -> Tensor:
    """Binary per-point label: 0 where both absolute and relative flow errors are
    strictly below their thresholds, 1 otherwise. Output shape (...,N,1)."""
    if sf_l.shape != sf_gt.shape:
        raise InvalidArgumentError("flow shapes differ")
    e_ab = torch.linalg.vector_norm(sf_l - sf_gt, dim=-1)
    gt_norm = torch.linalg.vector_norm(sf_gt, dim=-1)
    e_re = e_ab / torch.clamp(gt_norm, min=REL_EPS)
    reliable = (e_ab < e1) & (e_re < e2)
    return torch.where(reliable, 0.0, 1.0).to(sf_l.dtype)[..., None]


def continuous_uncertainty_gt(sf_l: Tensor, sf_gt: Tensor, e1: float, e2: float) -> Tensor:
    """Ablation variant: monotone continuous relaxation of the binary rule on [0,1]."""
    if sf_l.shape != sf_gt.shape:
        raise InvalidArgumentError("flow shapes differ")
    e_ab = torch.linalg.vector_norm(sf_l - sf_gt, dim=-1)
    gt_norm = torch.linalg.vector_norm(sf_gt, dim=-1)
    e_re = e_ab / torch.clamp(gt_norm, min=REL_EPS)
    u = torch.maximum(e_ab / e1, e_re / e2)
    return torch.clamp(u, max=1.0).to(sf_l.dtype)[..., None]


def uncertainty_loss(u0_gt: Tensor, u0_hat: Tensor) -> Tensor:
    """Mean squared error between constructed and predicted uncertainty residuals."""
    if u0_gt.shape != u0_hat.shape:
        raise InvalidArgumentError("uncertainty shapes differ")
    d = u0_gt - u0_hat
    return (d * d).mean()
