"""Risk-parity MPC.

The per-period residual is ``g_i(pi) = pi_i (Sigma pi)_i / (pi' Sigma pi) - b_i``
and the plan minimises ``sum_tau ||g(pi_tau)||^2 + gamma_trade * L1 trades``.
That objective is nonconvex. :func:`solve_rp_sca` linearises ``g`` around
the current plan, adds a proximal term, solves the resulting convex QP
with :mod:`mpcfolio.qp` and takes a damped step towards the QP optimum.
:func:`solve_rp_reference` attacks the nonconvex problem directly with
multi-start projected gradient, as a baseline.
"""
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import qp as _qp
from .errors import DegenerateRiskError, NonConvergenceError, ValidationError
from .plan import AllocationPlan

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-16
ZERO_WEIGHT = 1e-6


@dataclass(frozen=True)
class ScaSettings:
    gamma0: float = 0.8
    gamma_rate: float = 1e-7  # gamma_{k+1} = 1 - gamma_rate * gamma_k
    delta_divisor: float = 40.0  # delta_tau = trace(Sigma_tau) / (delta_divisor * n)
    delta: float = None  # fixed proximal weight, overrides the trace rule
    tol: float = 1e-10  # absolute objective improvement
    max_outer: int = 100
    max_backtracks: int = 40
    qp_tol: float = _qp.DEFAULT_TOL
    # rerun from the per-period parity portfolio when the first run parks a
    # budgeted asset at zero weight (a spurious stationary point)
    restart: bool = True


@dataclass(frozen=True)
class RiskParitySpec:
    current_allocation: np.ndarray
    gamma_trade: float = 0.5
    horizon: int = 15
    budgets: np.ndarray = None
    sca: ScaSettings = field(default_factory=ScaSettings)

    def __post_init__(self):
        a = np.asarray(self.current_allocation, dtype=float).ravel()
        _qp.check_simplex(a, "current_allocation")
        n = a.size
        b = np.full(n, 1.0 / n) if self.budgets is None else np.asarray(self.budgets, dtype=float).ravel()
        if b.size != n:
            raise ValidationError("budgets and allocation differ in length")
        if np.any(b < 0) or np.any(b > 1) or abs(b.sum() - 1.0) > 1e-10:
            raise ValidationError("risk budgets must lie in [0, 1] and sum to 1")
        if self.gamma_trade < 0:
            raise ValidationError("gamma_trade must be >= 0")
        if int(self.horizon) < 1:
            raise ValidationError("horizon must be >= 1")
        object.__setattr__(self, "current_allocation", a)
        object.__setattr__(self, "budgets", b)
        object.__setattr__(self, "horizon", int(self.horizon))


@dataclass(frozen=True)
class RiskContributionReport:
    contributions: np.ndarray
    l1_deviation: float


def _portfolio_variance(w, sigma):
    sw = sigma @ w
    v = float(w @ sw)
    if not v > VARIANCE_FLOOR:
        raise DegenerateRiskError(f"portfolio variance {v:.3e} is not positive")
    return sw, v


def risk_contributions(weights, sigma, budgets=None):
    """Normalised risk contributions ``pi_i (Sigma pi)_i / pi' Sigma pi``."""
    w = np.asarray(weights, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    sw, v = _portfolio_variance(w, sigma)
    rc = w * sw / v
    b = np.full(w.size, 1.0 / w.size) if budgets is None else np.asarray(budgets, dtype=float)
    return RiskContributionReport(contributions=rc, l1_deviation=float(np.abs(rc - b).sum()))


def rp_residual(weights, sigma, budgets):
    """``g(pi)``: risk contributions minus budgets."""
    w = np.asarray(weights, dtype=float)
    sw, v = _portfolio_variance(w, sigma)
    return w * sw / v - budgets


def rp_gradient(weights, sigma, budgets=None):
    """Jacobian of ``g``; row ``i`` is the gradient of ``g_i``.

    The budgets shift ``g`` by a constant and do not enter the result.
    """
    w = np.asarray(weights, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    sw, v = _portfolio_variance(w, sigma)
    jac = (np.diag(sw) + w[:, None] * sigma) / v
    jac -= 2.0 * np.outer(w * sw, sw) / (v * v)
    return jac


def _batch_residual_and_jacobian(W, S, b):
    """g and its Jacobian for every row of an (H, n) plan."""
    SW = np.einsum("hij,hj->hi", S, W)
    v = np.einsum("hi,hi->h", W, SW)
    if np.any(~(v > VARIANCE_FLOOR)):
        raise DegenerateRiskError("portfolio variance is not positive")
    g = W * SW / v[:, None] - b
    H, n = W.shape
    jac = W[:, :, None] * S
    idx = np.arange(n)
    jac[:, idx, idx] += SW
    jac /= v[:, None, None]
    jac -= 2.0 * (W * SW)[:, :, None] * SW[:, None, :] / (v * v)[:, None, None]
    return g, jac


def rp_objective(plan_weights, forecast, spec):
    """Risk-parity least-squares objective of a plan, trade penalty included."""
    W = np.asarray(plan_weights, dtype=float).reshape(spec.horizon, -1)
    S = forecast.sigma_hat[: spec.horizon]
    SW = np.einsum("hij,hj->hi", S, W)
    v = np.einsum("hi,hi->h", W, SW)
    if np.any(~(v > VARIANCE_FLOOR)):
        raise DegenerateRiskError("portfolio variance is not positive")
    g = W * SW / v[:, None] - spec.budgets
    prev = np.vstack([spec.current_allocation, W[:-1]])
    return float((g * g).sum() + spec.gamma_trade * np.abs(W - prev).sum())


def plan_rc_error(plan_weights, forecast, budgets):
    """Mean over the horizon of the l1 distance between contributions and budgets."""
    W = np.atleast_2d(plan_weights)
    errs = [
        risk_contributions(W[t], forecast.sigma_hat[t], budgets).l1_deviation
        for t in range(W.shape[0])
    ]
    return float(np.mean(errs))


def _deltas(forecast, spec):
    H = spec.horizon
    if spec.sca.delta is not None:
        return np.full(H, float(spec.sca.delta))
    n = forecast.n_assets
    tr = np.trace(forecast.sigma_hat[:H], axis1=1, axis2=2)
    return tr / (spec.sca.delta_divisor * n)


def build_subproblem(plan_iterate, forecast, spec, return_constant=False):
    """Convex QP obtained by linearising ``g`` at ``plan_iterate``.

    Per period: ``Q = 2 A'A + delta I`` and ``q = 2 A'g - Q pi_k`` with ``A``
    the Jacobian of ``g``. With ``return_constant`` also returns the
    per-period constant that makes ``1/2 pi'Q pi + q'pi + const`` equal
    ``||A (pi - pi_k) + g||^2 + delta/2 ||pi - pi_k||^2``.
    """
    Wk = np.asarray(plan_iterate, dtype=float).reshape(spec.horizon, -1)
    for row in Wk:
        _qp.check_simplex(row, "plan iterate", atol=1e-6)
    S = forecast.sigma_hat[: spec.horizon]
    g, A = _batch_residual_and_jacobian(Wk, S, spec.budgets)
    delta = _deltas(forecast, spec)
    n = Wk.shape[1]
    AtA = np.einsum("hki,hkj->hij", A, A)
    Q = 2.0 * AtA + delta[:, None, None] * np.eye(n)
    q = 2.0 * np.einsum("hki,hk->hi", A, g) - np.einsum("hij,hj->hi", Q, Wk)
    sub = _qp.QuadraticProgram(Q=Q, c=q, gamma_trade=spec.gamma_trade, anchor=spec.current_allocation)
    if not return_constant:
        return sub
    Ag = np.einsum("hki,hk->hi", A, g)
    const = (
        np.einsum("hk,hk->h", g, g)
        - 2.0 * np.einsum("hi,hi->h", Ag, Wk)
        + np.einsum("hi,hij,hj->h", Wk, AtA, Wk)
        + 0.5 * delta * np.einsum("hi,hi->h", Wk, Wk)
    )
    return sub, const


def risk_parity_weights(sigma, budgets=None, tol=1e-26, max_iter=100):
    """Long-only risk-budgeting portfolio for one covariance matrix.

    Minimises the convex ``1/2 y'Sigma y - b'log y`` by damped Newton and
    normalises; at the optimum ``y_i (Sigma y)_i = b_i``, so contributions
    equal the budgets. Assets with zero budget get zero weight.
    """
    sigma = np.asarray(sigma, dtype=float)
    n = sigma.shape[0]
    b = np.full(n, 1.0 / n) if budgets is None else np.asarray(budgets, dtype=float)
    on = b > 0
    S, bb = sigma[np.ix_(on, on)], b[on]
    y = bb / np.sqrt(np.diag(S))
    y *= np.sqrt(bb.sum() / (y @ S @ y))

    def f(v):
        return 0.5 * v @ S @ v - bb @ np.log(v)

    for _ in range(max_iter):
        grad = S @ y - bb / y
        dy = -np.linalg.solve(S + np.diag(bb / (y * y)), grad)
        decrement = -grad @ dy
        if decrement < tol:
            break
        step = 1.0
        while np.any(y + step * dy <= 0):
            step *= 0.5
        if decrement > 1e-6:
            # damped phase; full steps once inside the quadratic region
            fy = f(y)
            while step > 1e-12 and f(y + step * dy) > fy - 0.25 * step * decrement:
                step *= 0.5
        y = y + step * dy
    w = np.zeros(n)
    w[on] = y / y.sum()
    return w


def _sca_run(spec, fc, W, label):
    cfg = spec.sca
    f = rp_objective(W, fc, spec)
    trace = [dict(iteration=0, objective=f, step_size=0.0,
                  rc_deviation=plan_rc_error(W, fc, spec.budgets), seconds=0.0, start=label)]
    gamma = cfg.gamma0
    for k in range(1, cfg.max_outer + 1):
        t0 = time.perf_counter()
        sub = build_subproblem(W, fc, spec)
        try:
            W_hat = _qp.solve(sub, tol=cfg.qp_tol, warm_start=W).weights
        except NonConvergenceError as exc:
            logger.debug("SCA subproblem inexact: %s", exc)
            W_hat = exc.best.weights
        D = W_hat - W
        step = gamma
        f_new = np.inf
        for _ in range(cfg.max_backtracks):
            W_try = W + step * D
            try:
                f_new = rp_objective(W_try, fc, spec)
            except DegenerateRiskError:
                f_new = np.inf
            if f_new <= f:
                break
            step *= 0.5
        dt = time.perf_counter() - t0
        if not f_new <= f:
            # no descent left at working precision
            return W, f, trace, True
        improvement = f - f_new
        W, f = W_try, f_new
        trace.append(dict(iteration=k, objective=f, step_size=step,
                          rc_deviation=plan_rc_error(W, fc, spec.budgets), seconds=dt, start=label))
        gamma = 1.0 - cfg.gamma_rate * gamma
        if improvement < cfg.tol:
            return W, f, trace, True
    return W, f, trace, False


def solve_rp_sca(spec, forecast):
    """Successive convex approximation for the risk-parity plan.

    All H steps start at the current allocation. Each outer iteration
    solves the linearised QP and moves ``pi <- pi + gamma_k (pi_hat - pi)``
    with ``gamma_{k+1} = 1 - gamma_rate * gamma_k``. A step that would
    raise the true objective is halved until it does not, so the objective
    trace never increases. Stops once the improvement drops below
    ``spec.sca.tol``.

    The objective is nonconvex: a hedging asset (negative marginal risk)
    can be driven to zero weight, where its contribution is stuck at zero.
    If that happens to an asset with a positive budget and
    ``spec.sca.restart`` is set, the iteration is rerun from the
    per-period parity portfolios and the better plan is kept.

    The returned plan's ``trace`` holds one dict per iteration of the run
    that produced it, with keys ``iteration, objective, step_size,
    rc_deviation, seconds, start`` (``start`` is "holdings" or "parity").
    """
    if forecast.horizon < spec.horizon:
        raise ValidationError(f"forecast horizon {forecast.horizon} < plan horizon {spec.horizon}")
    if forecast.n_assets != spec.current_allocation.size:
        raise ValidationError("forecast and allocation disagree on the number of assets")
    cfg = spec.sca
    fc = forecast.head(spec.horizon)
    W0 = np.tile(spec.current_allocation, (spec.horizon, 1))
    W, f, trace, converged = _sca_run(spec, fc, W0, "holdings")
    if cfg.restart and np.any((W < ZERO_WEIGHT) & (spec.budgets > 0)):
        P0 = np.array([risk_parity_weights(S, spec.budgets) for S in fc.sigma_hat])
        W2, f2, trace2, converged2 = _sca_run(spec, fc, P0, "parity")
        logger.debug("SCA restart from parity: objective %.3e -> %.3e", f, f2)
        if f2 < f:
            W, f, trace, converged = W2, f2, trace2, converged2
    plan = AllocationPlan(weights=_renormalise(W), objective=f, iterations=len(trace) - 1, trace=tuple(trace))
    if not converged:
        raise NonConvergenceError(
            f"SCA did not converge in {cfg.max_outer} outer iterations", best=plan, trace=tuple(trace)
        )
    return plan


def _renormalise(W):
    W = np.clip(W, 0.0, None)
    return W / W.sum(axis=1, keepdims=True)


def project_simplex(V):
    """Euclidean projection of each row of ``V`` onto the probability simplex."""
    V = np.atleast_2d(V)
    n = V.shape[1]
    U = -np.sort(-V, axis=1)
    css = np.cumsum(U, axis=1) - 1.0
    ind = np.arange(1, n + 1)
    cond = U - css / ind > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(V.shape[0]), rho] / (rho + 1)
    return np.maximum(V - theta[:, None], 0.0)


@dataclass(frozen=True)
class ReferenceSettings:
    n_starts: int = 8
    seed: int = 0
    max_iter: int = 10_000
    tol: float = 1e-10  # absolute objective improvement, same rule as the SCA driver
    armijo: float = 1e-4
    method: str = "pg"  # "pg" (projected gradient) or "slsqp" (scipy, slack-split L1)

    def __post_init__(self):
        if self.method not in ("pg", "slsqp"):
            raise ValidationError(f"unknown reference method {self.method!r}; use 'pg' or 'slsqp'")
        if self.n_starts < 1:
            raise ValidationError("n_starts must be >= 1")


def _reference_gradient(W, S, spec):
    g, J = _batch_residual_and_jacobian(W, S, spec.budgets)
    grad = 2.0 * np.einsum("hki,hk->hi", J, g)
    if spec.gamma_trade > 0:
        prev = np.vstack([spec.current_allocation, W[:-1]])
        sgn = np.sign(W - prev)
        grad += spec.gamma_trade * sgn
        grad[:-1] -= spec.gamma_trade * sgn[1:]
    return grad


def _projected_gradient(W, fc, spec, cfg):
    S = fc.sigma_hat
    f = rp_objective(W, fc, spec)
    step = 1.0
    it = 0
    for it in range(1, cfg.max_iter + 1):
        grad = _reference_gradient(W, S, spec)
        accepted = False
        while step > 1e-16:
            W_try = project_simplex(W - step * grad)
            try:
                f_try = rp_objective(W_try, fc, spec)
            except DegenerateRiskError:
                f_try = np.inf
            if f_try <= f - cfg.armijo / step * np.sum((W_try - W) ** 2):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        improvement = f - f_try
        W, f = W_try, f_try
        step *= 2.0
        if improvement < cfg.tol:
            break
    return W, f, it


def _slsqp(W0, fc, spec, cfg):
    # x = [pi, u+, u-]; pi_t - pi_{t-1} = u+ - u-, so the L1 penalty is linear
    from scipy.optimize import minimize

    S = fc.sigma_hat
    H, n = W0.shape
    N = H * n
    A = np.zeros((H + N, 3 * N))
    rhs = np.zeros(H + N)
    for t in range(H):
        A[t, t * n:(t + 1) * n] = 1.0
    rhs[:H] = 1.0
    A[H:, :N] = np.eye(N) - np.eye(N, k=-n)
    A[H:, N:2 * N] = -np.eye(N)
    A[H:, 2 * N:] = np.eye(N)
    rhs[H:H + n] = spec.current_allocation
    lin = np.concatenate([np.zeros(N), np.full(2 * N, spec.gamma_trade)])

    def fun(x):
        W = x[:N].reshape(H, n)
        g, J = _batch_residual_and_jacobian(W, S, spec.budgets)
        grad = lin.copy()
        grad[:N] = 2.0 * np.einsum("hki,hk->hi", J, g).ravel()
        return float((g * g).sum() + lin @ x), grad

    prev = np.vstack([spec.current_allocation, W0[:-1]])
    d = (W0 - prev).ravel()
    x0 = np.concatenate([W0.ravel(), np.maximum(d, 0.0), np.maximum(-d, 0.0)])
    res = minimize(
        fun, x0, jac=True, method="SLSQP",
        bounds=[(0.0, None)] * (3 * N),
        constraints=[dict(type="eq", fun=lambda x: A @ x - rhs, jac=lambda x: A)],
        options=dict(maxiter=cfg.max_iter),
    )
    W = _renormalise(res.x[:N].reshape(H, n))
    try:
        f = rp_objective(W, fc, spec)
    except DegenerateRiskError:
        f = np.inf
    return W, f, max(int(res.nit), 1)


def solve_rp_reference(spec, forecast, settings=None):
    """Multi-start local solver on the nonconvex objective.

    The local method is projected (sub)gradient by default, or scipy's SLSQP
    on the slack-split problem with ``method="slsqp"``. Starts: the equal-weight plan plus ``n_starts - 1`` Dirichlet draws from
    ``default_rng(seed)``. Returns the best local solution found; ``trace``
    records ``(start, objective, iterations, seconds)`` per start.
    """
    cfg = settings or ReferenceSettings()
    if forecast.horizon < spec.horizon:
        raise ValidationError(f"forecast horizon {forecast.horizon} < plan horizon {spec.horizon}")
    fc = forecast.head(spec.horizon)
    H, n = spec.horizon, spec.current_allocation.size
    rng = np.random.default_rng(cfg.seed)
    starts = [np.full((H, n), 1.0 / n)]
    for _ in range(cfg.n_starts - 1):
        starts.append(np.tile(rng.dirichlet(np.ones(n)), (H, 1)))
    best = None
    trace = []
    total_iter = 0
    for s, W0 in enumerate(starts):
        t0 = time.perf_counter()
        local = _slsqp if cfg.method == "slsqp" else _projected_gradient
        W, f, it = local(W0, fc, spec, cfg)
        total_iter += it
        trace.append(dict(start=s, objective=f, iterations=it, seconds=time.perf_counter() - t0))
        if best is None or f < best[1]:
            best = (W, f)
    return AllocationPlan(weights=best[0], objective=best[1], iterations=total_iter, trace=tuple(trace))
