"""Joint multi-period QP over simplices with an L1 trade penalty.

Solves::

    min  sum_tau  1/2 pi_tau' Q_tau pi_tau + c_tau' pi_tau
                  + gamma_trade * ||pi_tau - pi_{tau-1}||_1
    s.t. pi_tau >= 0,  1' pi_tau = 1,   pi_0 = anchor (fixed)

The L1 terms are split exactly with nonnegative slacks
``u+ - u- = pi_tau - pi_{tau-1}`` so the problem becomes the smooth
standard-form QP ``min 1/2 x'Px + c'x  s.t.  Ax = b, x >= 0`` with
``x = [pi, u+, u-]``. That QP is solved with a Mehrotra predictor-corrector
interior-point method. The Newton systems are reduced to the multiplier
space; there the matrix is block-tridiagonal along the horizon and is
assembled block by block, never from dense ``A``.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .errors import NonConvergenceError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8


@dataclass(frozen=True)
class QuadraticProgram:
    Q: np.ndarray  # (H, n, n)
    c: np.ndarray  # (H, n)
    gamma_trade: float
    anchor: np.ndarray  # (n,)

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.c, dtype=float))
        H, n = c.shape
        Q = np.asarray(self.Q, dtype=float)
        if Q.shape == (n, n):
            Q = np.broadcast_to(Q, (H, n, n))
        if Q.shape != (H, n, n):
            raise ValidationError(f"Q has shape {Q.shape}, expected {(H, n, n)}")
        Q = 0.5 * (Q + np.swapaxes(Q, 1, 2))
        scale = max(np.abs(Q).max(initial=0.0), 1.0)
        for tau in range(H):
            if np.linalg.eigvalsh(Q[tau])[0] < -1e-10 * scale:
                raise ValidationError(f"Q[{tau}] is not positive semidefinite")
        g = float(self.gamma_trade)
        if not g >= 0.0:
            raise ValidationError("gamma_trade must be >= 0")
        a = np.asarray(self.anchor, dtype=float).ravel()
        if a.size != n:
            raise ValidationError(f"anchor has {a.size} entries, expected {n}")
        check_simplex(a, "anchor")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "gamma_trade", g)
        object.__setattr__(self, "anchor", a)

    @property
    def horizon(self):
        return self.c.shape[0]

    @property
    def n_assets(self):
        return self.c.shape[1]


@dataclass(frozen=True)
class QpSolution:
    weights: np.ndarray  # (H, n)
    objective: float
    kkt_residual: float
    iterations: int
    up: np.ndarray = None  # (H, n) positive trade slacks, None when gamma_trade == 0
    um: np.ndarray = None
    y: np.ndarray = None  # equality multipliers [budget (H), coupling (H*n)]
    z: np.ndarray = None  # bound multipliers, same layout as [pi, u+, u-]


def check_simplex(w, name="weights", atol=1e-8):
    w = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(w)):
        raise ValidationError(f"{name} must be finite")
    if np.any(w < -atol) or abs(w.sum() - 1.0) > atol:
        raise ValidationError(f"{name} must be nonnegative and sum to 1")


def objective_value(qp, weights):
    """Original (non-split) objective of a plan."""
    w = np.asarray(weights, dtype=float).reshape(qp.horizon, qp.n_assets)
    quad = 0.5 * np.einsum("hi,hij,hj->", w, qp.Q, w) + np.sum(qp.c * w)
    prev = np.vstack([qp.anchor, w[:-1]])
    return float(quad + qp.gamma_trade * np.abs(w - prev).sum())


class _Structure:
    """Products with A and A' for the split formulation, without forming A."""

    def __init__(self, H, n, slack):
        self.H, self.n, self.slack = H, n, slack
        self.hn = H * n
        self.N = self.hn * (3 if slack else 1)
        self.m = H + (self.hn if slack else 0)

    def rhs(self, anchor):
        b = np.zeros(self.m)
        b[: self.H] = 1.0
        if self.slack:
            b[self.H : self.H + self.n] = anchor
        return b

    def A(self, x):
        H, n, hn = self.H, self.n, self.hn
        pi = x[:hn].reshape(H, n)
        out = np.empty(self.m)
        out[:H] = pi.sum(axis=1)
        if self.slack:
            rc = pi.copy()
            rc[1:] -= pi[:-1]
            rc -= x[hn : 2 * hn].reshape(H, n)
            rc += x[2 * hn :].reshape(H, n)
            out[H:] = rc.ravel()
        return out

    def AT(self, y):
        H, n, hn = self.H, self.n, self.hn
        out = np.empty(self.N)
        pi = np.repeat(y[:H], n).reshape(H, n)
        if self.slack:
            yc = y[H:].reshape(H, n)
            pi = pi + yc
            pi[:-1] -= yc[1:]
            out[hn : 2 * hn] = -yc.ravel()
            out[2 * hn :] = yc.ravel()
        out[:hn] = pi.ravel()
        return out

    def schur(self, B, ds):
        """A K^-1 A' for K = blockdiag(B^-1) on pi and diag(1/ds) summed over slacks."""
        H, n = self.H, self.n
        M = np.zeros((self.m, self.m))
        ones_B = B.sum(axis=1)  # 1'B_tau, shape (H, n)
        idx = np.arange(H)
        M[idx, idx] = ones_B.sum(axis=1)
        if not self.slack:
            return M
        for t in range(H):
            r = H + t * n
            M[t, r : r + n] = ones_B[t]
            M[r : r + n, t] = ones_B[t]
            blk = B[t] + np.diag(ds[t])
            if t > 0:
                blk = blk + B[t - 1]
            M[r : r + n, r : r + n] = blk
            if t + 1 < H:
                r2 = r + n
                M[t, r2 : r2 + n] = -ones_B[t]
                M[r2 : r2 + n, t] = -ones_B[t]
                M[r : r + n, r2 : r2 + n] = -B[t]
                M[r2 : r2 + n, r : r + n] = -B[t]
        return M


def _kkt_parts(S, Q, c_full, b, x, y, z):
    hn = S.hn
    H, n = S.H, S.n
    Px = np.zeros(S.N)
    Px[:hn] = np.einsum("hij,hj->hi", Q, x[:hn].reshape(H, n)).ravel()
    r_d = Px + c_full - S.AT(y) - z
    r_p = S.A(x) - b
    return r_d, r_p


def kkt_residual(S, Q, c_full, b, x, y, z):
    """max of stationarity, primal feasibility and complementarity inf-norms."""
    r_d, r_p = _kkt_parts(S, Q, c_full, b, x, y, z)
    primal = max(np.abs(r_p).max(), max(0.0, -x.min()))
    comp = max(np.abs(x * z).max(), max(0.0, -z.min()))
    return max(np.abs(r_d).max(), primal, comp)


STRETCH = 1e-3  # internal target as a fraction of tol
REFINE_STEPS = 3
REG = 1e-10  # primal regularisation of the factorised system (unit-scaled problem)


def solve(qp, tol=DEFAULT_TOL, max_iter=100, warm_start=None):
    """Minimise ``qp``; returns a :class:`QpSolution`.

    ``warm_start`` is an (H, n) plan used to seed the interior point; the
    default is the anchor repeated over the horizon.
    """
    H, n = qp.horizon, qp.n_assets
    slack = qp.gamma_trade > 0.0
    S = _Structure(H, n, slack)
    hn = S.hn

    # scale the objective to unit size; the optimum is unchanged
    scale = max(np.abs(qp.Q).max(), np.abs(qp.c).max(), qp.gamma_trade, 1e-300)
    Qs = qp.Q / scale
    c_full = np.zeros(S.N)
    c_full[:hn] = qp.c.ravel() / scale
    if slack:
        c_full[hn:] = qp.gamma_trade / scale
    b = S.rhs(qp.anchor)

    start = np.tile(qp.anchor, (H, 1)) if warm_start is None else np.asarray(warm_start, float).reshape(H, n)
    x = np.empty(S.N)
    pi0 = 0.5 * np.clip(start, 0.0, None) + 0.5 / n
    x[:hn] = pi0.ravel()
    if slack:
        diff = pi0 - np.vstack([qp.anchor, pi0[:-1]])
        x[hn : 2 * hn] = np.maximum(diff, 0.0).ravel() + 0.1
        x[2 * hn :] = np.maximum(-diff, 0.0).ravel() + 0.1
    z = np.ones(S.N)
    y = np.zeros(S.m)

    Q_orig = qp.Q
    c_orig = c_full * scale

    def residual_orig(x, y, z):
        return kkt_residual(S, Q_orig, c_orig, b, x, y * scale, z * scale)

    def measure(x, y, z):
        # the tolerance must hold in original units and on the unit-scaled
        # problem, so the answer does not depend on the objective's scale
        return max(residual_orig(x, y, z), kkt_residual(S, Qs, c_full, b, x, y, z))

    # aim well below tol; accept tol once progress stalls
    target = STRETCH * tol
    history = []
    best = None
    eye_n = np.eye(n)
    it = 0
    for it in range(1, max_iter + 1):
        r_d, r_p = _kkt_parts(S, Qs, c_full, b, x, y, z)
        mu = x @ z / S.N
        res = measure(x, y, z)
        history.append(res)
        if best is None or res < best[0]:
            best = (res, x.copy(), y.copy(), z.copy(), it)
        if res <= target:
            break
        if best[0] <= tol and len(history) > 3 and min(history[-3:]) > 0.5 * history[-4]:
            break

        d = z / x
        # factor a slightly regularised K; refinement below corrects for it
        dr = d + REG
        Kpi = Qs + dr[:hn].reshape(H, n)[:, :, None] * eye_n
        try:
            B = np.linalg.inv(Kpi)
        except np.linalg.LinAlgError:
            B = np.linalg.pinv(Kpi)
        ds = 1.0 / dr[hn : 2 * hn].reshape(H, n) + 1.0 / dr[2 * hn :].reshape(H, n) if slack else None
        M = S.schur(B, ds)
        try:
            fac = sla.cho_factor(M, check_finite=False)
            msolve = lambda v: sla.cho_solve(fac, v, check_finite=False)  # noqa: E731
        except (sla.LinAlgError, ValueError):
            lu = sla.lu_factor(M + 1e-14 * np.trace(M) / S.m * np.eye(S.m), check_finite=False)
            msolve = lambda v: sla.lu_solve(lu, v, check_finite=False)  # noqa: E731

        def kinv(v):
            out = np.empty_like(v)
            out[:hn] = np.einsum("hij,hj->hi", B, v[:hn].reshape(H, n)).ravel()
            if slack:
                out[hn:] = v[hn:] / dr[hn:]
            return out

        def kmul(v):
            out = d * v
            out[:hn] += np.einsum("hij,hj->hi", Qs, v[:hn].reshape(H, n)).ravel()
            return out

        def reduced(r1, r2):
            kr = kinv(r1)
            dy = msolve(r2 - S.A(kr))
            return kr + kinv(S.AT(dy)), dy

        def newton(r1):
            # K dx - A'dy = r1, A dx = -r_p; refinement recovers the accuracy
            # the Schur complement loses when x/z spans many decades
            r2 = -r_p
            dx, dy = reduced(r1, r2)
            for _ in range(REFINE_STEPS):
                e1 = r1 - kmul(dx) + S.AT(dy)
                e2 = r2 - S.A(dx)
                ex, ey = reduced(e1, e2)
                dx, dy = dx + ex, dy + ey
            return dx, dy

        # predictor
        r1 = -r_d - z
        dx_a, dy_a = newton(r1)
        dz_a = -z - d * dx_a
        alpha_a = min(_max_step(x, dx_a), _max_step(z, dz_a))
        mu_a = (x + alpha_a * dx_a) @ (z + alpha_a * dz_a) / S.N
        sigma = (mu_a / mu) ** 3 if mu > 0 else 0.0

        # corrector
        corr = sigma * mu - dx_a * dz_a
        r1 = -r_d + (corr - x * z) / x
        dx, dy = newton(r1)
        dz = (corr - x * z - z * dx) / x
        alpha = min(1.0, 0.995 * min(_max_step(x, dx), _max_step(z, dz)))
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        x = np.maximum(x, 1e-300)
        z = np.maximum(z, 1e-300)
    else:
        res = measure(x, y, z)
        if res < best[0]:
            best = (res, x.copy(), y.copy(), z.copy(), it)

    res, x, y, z, it_best = best
    if slack:
        # the split is exact: keep only the net trade in the slacks unless
        # leftover primal error makes that worse than the raw iterate
        pi = x[:hn].reshape(H, n)
        delta = pi - np.vstack([qp.anchor, pi[:-1]])
        xc = x.copy()
        xc[hn : 2 * hn] = np.maximum(delta, 0.0).ravel()
        xc[2 * hn :] = np.maximum(-delta, 0.0).ravel()
        if measure(xc, y, z) <= res:
            x = xc
    res = measure(x, y, z)
    sol = _package(qp, S, x, y * scale, z * scale, residual_orig(x, y, z), it, slack)
    if res > tol:
        raise NonConvergenceError(
            f"QP interior point stopped after {it} iterations with KKT residual {res:.3e} > {tol:.1e}",
            best=sol,
        )
    return sol


def _package(qp, S, x, y, z, res, it, slack):
    H, n, hn = S.H, S.n, S.hn
    w = x[:hn].reshape(H, n).copy()
    up = x[hn : 2 * hn].reshape(H, n).copy() if slack else None
    um = x[2 * hn :].reshape(H, n).copy() if slack else None
    return QpSolution(
        weights=w,
        objective=objective_value(qp, w),
        kkt_residual=float(res),
        iterations=it,
        up=up,
        um=um,
        y=y,
        z=z,
    )


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))
