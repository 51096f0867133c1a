# src/utils/lr_schedule.py

import math
from dataclasses import dataclass, field
from typing import Dict, List


@dataclass
class OneCycleSchedule:
    """
    One-cycle 学习率

    lr: initial → max（余弦上升，pct_start 部分）→ min（余弦下降）
    initial = max_lr / div_factor, min = initial / final_div_factor
    """

    # ============ 周期配置 ============
    max_lr: float = 1e-4
    total_steps: int = 1000
    pct_start: float = 0.4
    div_factor: float = 10.0
    final_div_factor: float = 1e4

    # ============ 记录 ============
    history: List[float] = field(default_factory=list)

    @property
    def initial_lr(self) -> float:
        return self.max_lr / self.div_factor

    @property
    def min_lr(self) -> float:
        return self.initial_lr / self.final_div_factor

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.total_steps * self.pct_start)))

    def lr_at(self, step: int) -> float:
        """第 step 步（从 0 开始）的学习率"""
        if self.total_steps <= 1:
            return self.max_lr
        step = min(max(step, 0), self.total_steps - 1)
        warm = self.warmup_steps
        if step < warm:
            t = step / warm
            return _cosine(self.initial_lr, self.max_lr, t)
        t = (step - warm) / max(1, self.total_steps - 1 - warm)
        return _cosine(self.max_lr, self.min_lr, t)

    def step(self, step: int) -> float:
        """取学习率并记录"""
        lr = self.lr_at(step)
        self.history.append(lr)
        return lr

    def get_summary(self) -> Dict:
        return {
            "max_lr": self.max_lr,
            "initial_lr": self.initial_lr,
            "min_lr": self.min_lr,
            "total_steps": self.total_steps,
            "warmup_steps": self.warmup_steps,
            "steps_taken": len(self.history),
        }


def _cosine(start: float, end: float, t: float) -> float:
    return end + (start - end) * (1.0 + math.cos(math.pi * t)) / 2.0


def create_schedule(max_lr: float, total_steps: int, pct_start: float = 0.4) -> OneCycleSchedule:
    return OneCycleSchedule(max_lr=max_lr, total_steps=max(1, total_steps), pct_start=pct_start)
