"""Mean-variance MPC.

Each period maximise, over long-only budget plans,

    sum_tau  r_hat' pi_tau - gamma_risk pi_tau' Sigma_hat pi_tau
             - gamma_trade ||pi_tau - pi_{tau-1}||_1

which is :func:`mpcfolio.qp.solve` with ``Q = 2 gamma_risk Sigma_hat`` and
``c = -r_hat``.
"""
from dataclasses import dataclass

import numpy as np

from . import qp as _qp
from .errors import ValidationError
from .plan import AllocationPlan

DEFAULT_HORIZON = 5
DEFAULT_GAMMA_RISK = 5.0
DEFAULT_GAMMA_TRADE = 0.01


@dataclass(frozen=True)
class MeanVarianceSpec:
    current_allocation: np.ndarray
    gamma_risk: float = DEFAULT_GAMMA_RISK
    gamma_trade: float = DEFAULT_GAMMA_TRADE
    horizon: int = DEFAULT_HORIZON

    def __post_init__(self):
        a = np.asarray(self.current_allocation, dtype=float).ravel()
        _qp.check_simplex(a, "current_allocation")
        if self.gamma_risk < 0 or self.gamma_trade < 0:
            raise ValidationError("gamma_risk and gamma_trade must be >= 0")
        if int(self.horizon) < 1:
            raise ValidationError("horizon must be >= 1")
        object.__setattr__(self, "current_allocation", a)
        object.__setattr__(self, "horizon", int(self.horizon))


def build_qp(spec, forecast):
    fc = forecast.head(spec.horizon)
    return _qp.QuadraticProgram(
        Q=2.0 * spec.gamma_risk * fc.sigma_hat,
        c=-fc.mu_hat,
        gamma_trade=spec.gamma_trade,
        anchor=spec.current_allocation,
    )


def solve_mv(spec, forecast, tol=_qp.DEFAULT_TOL, warm_start=None):
    """Optimal H-step mean-variance plan; ``objective`` is the maximised value."""
    if forecast.n_assets != spec.current_allocation.size:
        raise ValidationError("forecast and allocation disagree on the number of assets")
    sol = _qp.solve(build_qp(spec, forecast), tol=tol, warm_start=warm_start)
    return AllocationPlan(weights=sol.weights, objective=-sol.objective, iterations=sol.iterations)


def crra_to_gamma(gamma_crra):
    """Mean-variance coefficient approximating CRRA utility ``W**g / g``."""
    return (1.0 - gamma_crra) / 2.0


def expected_net_return(plan, forecast, cost_rate, anchor):
    """Forecast return of a plan (or its weights) net of proportional trading costs.

    Uses the start-of-period weights of the previous step in place of the
    drifted ones, which is accurate when per-period returns are small.
    """
    w = np.asarray(getattr(plan, "weights", plan), dtype=float)
    w = w.reshape(-1, w.shape[-1])
    mu = forecast.mu_hat[: w.shape[0]]
    prev = np.vstack([np.asarray(anchor, dtype=float), w[:-1]])
    return float(np.sum(mu * w) - cost_rate * np.abs(w - prev).sum())
