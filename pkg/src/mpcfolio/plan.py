from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class AllocationPlan:
    """H-step weights from one MPC solve; only ``first`` is ever executed."""

    weights: np.ndarray  # (H, n)
    objective: float
    iterations: int = 0
    trace: tuple = field(default=(), compare=False)

    @property
    def first(self):
        return self.weights[0]

    @property
    def horizon(self):
        return self.weights.shape[0]

    def turnover(self, anchor):
        prev = np.vstack([anchor, self.weights[:-1]])
        return float(np.abs(self.weights - prev).sum())
