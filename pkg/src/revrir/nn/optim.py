"""AdamW with decoupled weight decay, and learning-rate schedules."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import StateError, ValidationError
from .tensor import Tensor


class AdamW:
    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        """``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``."""
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise StateError(f"parameters {missing} have no gradient; call backward() first")
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = p.data - lr * update

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"step": np.array(float(self.step_count))}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m.{i}"] = m
            state[f"v.{i}"] = v
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step"])
        self.m = [np.array(state[f"m.{i}"], dtype=np.float64) for i in range(len(self.params))]
        self.v = [np.array(state[f"v.{i}"], dtype=np.float64) for i in range(len(self.params))]


class ScheduleKind(str, enum.Enum):
    LINEAR_WARMUP = "linear_warmup"
    POLYNOMIAL = "polynomial"


@dataclass(frozen=True)
class LrSchedule:
    kind: ScheduleKind
    base_lr: float
    total_steps: int
    warmup_ratio: float = 0.0
    power: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.base_lr < 0:
            raise ValidationError("base_lr must be non-negative")
        if self.total_steps < 1:
            raise ValidationError("total_steps must be at least 1")
        if not 0 <= self.warmup_ratio <= 1:
            raise ValidationError("warmup_ratio must lie in [0, 1]")
        if not self.power > 0:
            raise ValidationError("power must be positive")

    @property
    def warmup_steps(self) -> int:
        return round(self.warmup_ratio * self.total_steps)


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate before optimizer step number ``step`` (0-based)."""
    total = schedule.total_steps
    if not 0 <= step <= total:
        raise ValidationError(f"step {step} outside [0, {total}]")
    base = schedule.base_lr
    if schedule.kind is ScheduleKind.POLYNOMIAL:
        return base * (1.0 - step / total) ** schedule.power
    warm = schedule.warmup_steps
    if step < warm:
        return base * step / warm
    if warm == total:
        return base
    return base * (total - step) / (total - warm)
