"""Pure-Python forward-backward recursion (fallback for the compiled kernel)."""
import math

import numpy as np


def forward_backward(log_b, trans, init):
    """Scaled forward-backward pass for a K-state HMM.

    Parameters
    ----------
    log_b : ndarray, shape (T, K)
        Log emission density of each observation under each state.
    trans : ndarray, shape (K, K)
        Row-stochastic transition matrix.
    init : ndarray, shape (K,)
        State distribution of the first observation.

    Returns
    -------
    filtered : ndarray, shape (T, K)
        P(state_t | y_1..y_t).
    smoothed : ndarray, shape (T, K)
        P(state_t | y_1..y_T).
    xi_sum : ndarray, shape (K, K)
        Expected transition counts, summed over t.
    loglik : float
        Log-likelihood of the whole sequence.
    """
    log_b = np.asarray(log_b, dtype=float)
    T, K = log_b.shape
    trans = [list(map(float, row)) for row in trans]
    m = log_b.max(axis=1)
    b = np.exp(log_b - m[:, None]).tolist()
    loglik = float(m.sum())

    filt = [[0.0] * K for _ in range(T)]
    scale = [0.0] * T
    pred = [float(x) for x in init]
    for t in range(T):
        if t > 0:
            prev = filt[t - 1]
            pred = [sum(prev[i] * trans[i][j] for i in range(K)) for j in range(K)]
        row = [pred[i] * b[t][i] for i in range(K)]
        s = sum(row)
        scale[t] = s
        loglik += math.log(s)
        filt[t] = [x / s for x in row]

    smooth = [None] * T
    smooth[T - 1] = list(filt[T - 1])
    xi = [[0.0] * K for _ in range(K)]
    beta = [1.0] * K
    for t in range(T - 2, -1, -1):
        tmp = [b[t + 1][j] * beta[j] / scale[t + 1] for j in range(K)]
        ft = filt[t]
        for i in range(K):
            for j in range(K):
                xi[i][j] += ft[i] * trans[i][j] * tmp[j]
        beta = [sum(trans[i][j] * tmp[j] for j in range(K)) for i in range(K)]
        row = [ft[i] * beta[i] for i in range(K)]
        s = sum(row)
        smooth[t] = [x / s for x in row]

    return np.array(filt), np.array(smooth), np.array(xi), loglik
