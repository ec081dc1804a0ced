"""Independent reference computations used by the tests."""
import itertools

import numpy as np


def dense_split_problem(Q, c, gamma, anchor):
    """Dense (P, q, A, b) for min 1/2 x'Px + q'x, Ax = b, x >= 0.

    x = [pi, u+, u-] when gamma > 0, else x = pi. Built from the problem
    statement, not from the solver's structured operators.
    """
    H, n = c.shape
    hn = H * n
    if gamma > 0:
        N, m = 3 * hn, H + hn
    else:
        N, m = hn, H
    P = np.zeros((N, N))
    q = np.zeros(N)
    for t in range(H):
        P[t * n:(t + 1) * n, t * n:(t + 1) * n] = Q[t]
        q[t * n:(t + 1) * n] = c[t]
    A = np.zeros((m, N))
    b = np.zeros(m)
    for t in range(H):
        A[t, t * n:(t + 1) * n] = 1.0
        b[t] = 1.0
    if gamma > 0:
        q[hn:] = gamma
        for t in range(H):
            for i in range(n):
                row = H + t * n + i
                A[row, t * n + i] = 1.0
                if t > 0:
                    A[row, (t - 1) * n + i] = -1.0
                else:
                    b[row] = anchor[i]
                A[row, hn + t * n + i] = -1.0
                A[row, 2 * hn + t * n + i] = 1.0
    return P, q, A, b


def dense_kkt_residual(Q, c, gamma, anchor, sol):
    P, q, A, b = dense_split_problem(Q, c, gamma, anchor)
    x = sol.weights.ravel()
    if gamma > 0:
        x = np.concatenate([x, sol.up.ravel(), sol.um.ravel()])
    y, z = sol.y, sol.z
    stat = np.abs(P @ x + q - A.T @ y - z).max()
    prim = max(np.abs(A @ x - b).max(), max(0.0, -x.min()))
    comp = max(np.abs(x * z).max(), max(0.0, -z.min()))
    return max(stat, prim, comp)


def plan_objective(Q, c, gamma, anchor, W):
    W = np.atleast_2d(W)
    prev = np.vstack([anchor, W[:-1]])
    return float(0.5 * np.einsum("hi,hij,hj->", W, Q, W) + np.sum(c * W) + gamma * np.abs(W - prev).sum())


def simplex_grid(n, step=0.01):
    k = int(round(1.0 / step))
    pts = [p for p in itertools.product(range(k + 1), repeat=n - 1) if sum(p) <= k]
    g = np.array([list(p) + [k - sum(p)] for p in pts], dtype=float)
    return g / k


def active_set_qp(Q, c):
    """Exact minimiser of 1/2 x'Qx + c'x on the simplex (Q positive definite).

    Enumerates supports; returns the unique KKT point.
    """
    n = c.size
    for size in range(1, n + 1):
        for S in itertools.combinations(range(n), size):
            S = list(S)
            K = np.zeros((size + 1, size + 1))
            K[:size, :size] = Q[np.ix_(S, S)]
            K[:size, size] = -1.0
            K[size, :size] = 1.0
            rhs = np.concatenate([-c[S], [1.0]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            x = np.zeros(n)
            x[S] = sol[:size]
            lam = sol[size]
            if x.min() < -1e-12:
                continue
            grad = Q @ x + c - lam
            if np.all(grad > -1e-10):
                return x
    raise RuntimeError("no KKT point found")


def simplex_projection_bisection(v, iters=200):
    """Euclidean projection onto the simplex by bisection on the threshold."""
    lo, hi = v.min() - 1.0, v.max()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.maximum(v - mid, 0.0).sum() > 1.0:
            lo = mid
        else:
            hi = mid
    return np.maximum(v - 0.5 * (lo + hi), 0.0)


def central_difference_jacobian(f, x, h=1e-6):
    fx = f(x)
    J = np.empty((fx.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        J[:, j] = (f(x + e) - f(x - e)) / (2 * h)
    return J
