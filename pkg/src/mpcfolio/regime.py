"""Two-state Gaussian HMM: EM fitting, Bayes filtering and H-step forecasts.

State 0 is the *normal* regime (positive drift, calm) and state 1 the
*contraction* regime. The HMM itself is fitted on a few driving columns;
the resulting labels then give per-regime moments for every asset.
"""
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import DegenerateRegimeError, ValidationError

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class EmConfig:
    min_obs: int = 250
    tol: float = 1e-6  # relative log-likelihood improvement
    max_iter: int = 500
    label_threshold: float = 0.5


@dataclass(frozen=True)
class EmDiagnostics:
    loglik_trace: tuple
    n_iter: int
    converged: bool
    smoothed_normal: np.ndarray
    filtered_normal: np.ndarray
    driving_columns: tuple
    hmm_means: np.ndarray
    hmm_covs: np.ndarray


@dataclass(frozen=True)
class RegimeModel:
    """Fitted two-regime parameters plus the current filtered probability."""

    mu_normal: np.ndarray
    mu_contraction: np.ndarray
    sigma_normal: np.ndarray
    sigma_contraction: np.ndarray
    p_nn: float
    p_cc: float
    q_current: float
    assets: tuple = None
    diagnostics: EmDiagnostics = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        mu_n = np.asarray(self.mu_normal, dtype=float).ravel()
        n = mu_n.size
        mu_c = np.asarray(self.mu_contraction, dtype=float).ravel()
        s_n = np.asarray(self.sigma_normal, dtype=float).reshape(n, n)
        s_c = np.asarray(self.sigma_contraction, dtype=float).reshape(n, n)
        if mu_c.size != n:
            raise ValidationError("regime means differ in length")
        for name in ("p_nn", "p_cc", "q_current"):
            p = float(getattr(self, name))
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name}={p} outside [0, 1]")
            object.__setattr__(self, name, p)
        object.__setattr__(self, "mu_normal", mu_n)
        object.__setattr__(self, "mu_contraction", mu_c)
        object.__setattr__(self, "sigma_normal", regularize_covariance(s_n))
        object.__setattr__(self, "sigma_contraction", regularize_covariance(s_c))
        if self.assets is not None:
            object.__setattr__(self, "assets", tuple(str(a) for a in self.assets))

    @property
    def n_assets(self):
        return self.mu_normal.size

    def to_dict(self):
        return {
            "assets": list(self.assets) if self.assets is not None else None,
            "mu_normal": self.mu_normal.tolist(),
            "mu_contraction": self.mu_contraction.tolist(),
            "sigma_normal": self.sigma_normal.tolist(),
            "sigma_contraction": self.sigma_contraction.tolist(),
            "p_nn": self.p_nn,
            "p_cc": self.p_cc,
            "q_current": self.q_current,
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(
                mu_normal=doc["mu_normal"],
                mu_contraction=doc["mu_contraction"],
                sigma_normal=doc["sigma_normal"],
                sigma_contraction=doc["sigma_contraction"],
                p_nn=doc["p_nn"],
                p_cc=doc["p_cc"],
                q_current=doc["q_current"],
                assets=doc.get("assets"),
            )
        except KeyError as exc:
            raise ValidationError(f"regime model document lacks {exc}") from None


def save_model(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh, indent=2)
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return RegimeModel.from_dict(json.load(fh))


@dataclass(frozen=True)
class ForecastPath:
    """H-step return/covariance forecasts (step k is period t+k+1)."""

    q_hat: np.ndarray
    mu_hat: np.ndarray
    sigma_hat: np.ndarray

    def __post_init__(self):
        mu = np.atleast_2d(np.asarray(self.mu_hat, dtype=float))
        H, n = mu.shape
        sig = np.asarray(self.sigma_hat, dtype=float).reshape(H, n, n)
        q = np.asarray(self.q_hat, dtype=float).reshape(H)
        if np.any((q < 0) | (q > 1)):
            raise ValidationError("q_hat outside [0, 1]")
        object.__setattr__(self, "q_hat", q)
        object.__setattr__(self, "mu_hat", mu)
        object.__setattr__(self, "sigma_hat", sig)

    @property
    def horizon(self):
        return self.mu_hat.shape[0]

    @property
    def n_assets(self):
        return self.mu_hat.shape[1]

    def head(self, H):
        if H > self.horizon:
            raise ValidationError(f"forecast horizon {self.horizon} shorter than {H}")
        return ForecastPath(self.q_hat[:H], self.mu_hat[:H], self.sigma_hat[:H])

    def to_dict(self):
        return {
            "horizon": self.horizon,
            "q_hat": self.q_hat.tolist(),
            "mu_hat": self.mu_hat.tolist(),
            "sigma_hat": self.sigma_hat.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["q_hat"], doc["mu_hat"], doc["sigma_hat"])


def regularize_covariance(sigma):
    """Symmetrise and lift the spectrum to at least 1e-10 * trace / n."""
    s = 0.5 * (sigma + sigma.T)
    n = s.shape[0]
    eps = 1e-10 * max(np.trace(s), 0.0) / n
    if eps == 0.0:
        eps = 1e-16
    lam_min = np.linalg.eigvalsh(s)[0]
    if lam_min < eps:
        s = s + (eps - min(lam_min, 0.0)) * np.eye(n)
    return s


def gaussian_logpdf(y, mean, cov):
    """Row-wise log density of N(mean, cov) at the rows of ``y``."""
    y = np.atleast_2d(y)
    d = mean.size
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, (y - mean).T)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (d * LOG_2PI + logdet + (z * z).sum(axis=0))


def forecast_regime_prob(q, p_nn, p_cc):
    """Probability of the normal regime one period ahead."""
    for name, v in (("q", q), ("p_nn", p_nn), ("p_cc", p_cc)):
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"{name}={v} outside [0, 1]")
    return q * p_nn + (1.0 - q) * (1.0 - p_cc)


def forecast_path(model, H):
    """Iterate the regime probability H steps and mix the regime moments.

    The covariance adds the between-regime spread as outer products, i.e.
    the exact covariance of the two-component Gaussian mixture.
    """
    H = int(H)
    if H < 1:
        raise ValidationError("forecast horizon must be >= 1")
    n = model.n_assets
    q_hat = np.empty(H)
    mu_hat = np.empty((H, n))
    sigma_hat = np.empty((H, n, n))
    q = model.q_current
    for k in range(H):
        q = forecast_regime_prob(q, model.p_nn, model.p_cc)
        mu = q * model.mu_normal + (1.0 - q) * model.mu_contraction
        dn = model.mu_normal - mu
        dc = model.mu_contraction - mu
        sig = (
            q * model.sigma_normal
            + (1.0 - q) * model.sigma_contraction
            + q * np.outer(dn, dn)
            + (1.0 - q) * np.outer(dc, dc)
        )
        q_hat[k] = q
        mu_hat[k] = mu
        sigma_hat[k] = 0.5 * (sig + sig.T)
    return ForecastPath(q_hat, mu_hat, sigma_hat)


def historical_model(window, assets=None):
    """Single-regime stand-in: both regimes equal the sample moments."""
    r = np.asarray(window, dtype=float)
    mu = r.mean(axis=0)
    cov = np.cov(r, rowvar=False).reshape(mu.size, mu.size)
    return RegimeModel(mu, mu, cov, cov, 1.0, 1.0, 1.0, assets=assets)


def filter_update(model, observation):
    """One Bayes filter step; returns the new probability of the normal regime."""
    y = np.asarray(observation, dtype=float).ravel()
    if y.size != model.n_assets:
        raise ValidationError(f"observation has {y.size} entries, model has {model.n_assets} assets")
    if not np.all(np.isfinite(y)):
        raise ValidationError("observation is not finite")
    prior = forecast_regime_prob(model.q_current, model.p_nn, model.p_cc)
    if prior <= 0.0 or prior >= 1.0:
        return prior
    ln = np.log(prior) + gaussian_logpdf(y, model.mu_normal, model.sigma_normal)[0]
    lc = np.log1p(-prior) + gaussian_logpdf(y, model.mu_contraction, model.sigma_contraction)[0]
    m = max(ln, lc)
    post = np.exp(ln - m) / (np.exp(ln - m) + np.exp(lc - m))
    return float(min(max(post, 0.0), 1.0))


def _moments(y, weights):
    w = weights / weights.sum()
    mean = w @ y
    dev = y - mean
    cov = (dev * w[:, None]).T @ dev
    return mean, regularize_covariance(cov)


def fit_em(window, driving_columns, config=None, assets=None):
    """Fit the two-regime HMM on ``window``.

    ``window`` is a ReturnsPanel (driving columns by name or index) or a
    raw T x n matrix (driving columns by index).

    EM (Baum-Welch) runs on ``driving_columns`` only, starting from a
    median split of the first driving column. Each row is then labelled
    normal when its smoothed normal-regime probability is >= 0.5 and the
    per-regime moments of *all* assets are estimated from those labels.
    """
    config = config or EmConfig()
    if hasattr(window, "returns"):
        r = window.returns
        assets = window.assets
    else:
        r = np.asarray(window, dtype=float)
    T, n = r.shape
    if T < config.min_obs:
        raise ValidationError(f"window has {T} rows, at least {config.min_obs} required")
    if not driving_columns:
        raise ValidationError("at least one driving column is required")
    if all(isinstance(c, (int, np.integer)) for c in driving_columns):
        cols = [int(c) for c in driving_columns]
    elif hasattr(window, "columns"):
        cols = window.columns(driving_columns)
    else:
        raise ValidationError("driving columns of a raw matrix must be integer indices")
    if len(set(cols)) != len(cols) or any(c < 0 or c >= n for c in cols):
        raise ValidationError(f"bad driving columns {driving_columns!r}")
    y = r[:, cols]

    # median split of the first driving column seeds the labels
    high = y[:, 0] >= np.median(y[:, 0])
    resp = np.column_stack([high, ~high]).astype(float)
    means = np.empty((2, len(cols)))
    covs = np.empty((2, len(cols), len(cols)))
    for k in range(2):
        means[k], covs[k] = _moments(y, resp[:, k])
    counts = np.ones((2, 2))
    lab = (~high).astype(int)
    np.add.at(counts, (lab[:-1], lab[1:]), 1.0)
    trans = counts / counts.sum(axis=1, keepdims=True)
    init = np.array([0.5, 0.5])

    trace = []
    converged = False
    log_b = np.empty((T, 2))
    for it in range(config.max_iter):
        for k in range(2):
            log_b[:, k] = gaussian_logpdf(y, means[k], covs[k])
        filt, smooth, xi, ll = kernels.forward_backward(log_b, trans, init)
        if trace and ll - trace[-1] < config.tol * abs(trace[-1]):
            trace.append(ll)
            converged = True
            break
        trace.append(ll)
        # M-step
        for k in range(2):
            means[k], covs[k] = _moments(y, smooth[:, k] + 1e-300)
        trans = xi / xi.sum(axis=1, keepdims=True)
        init = smooth[0]
    else:
        # final E-step so the returned probabilities match the final parameters
        for k in range(2):
            log_b[:, k] = gaussian_logpdf(y, means[k], covs[k])
        filt, smooth, xi, ll = kernels.forward_backward(log_b, trans, init)
        trace.append(ll)
        logger.warning("EM stopped at the %d-iteration cap", config.max_iter)

    normal = 0 if means[0, 0] >= means[1, 0] else 1
    other = 1 - normal
    p_normal_smooth = smooth[:, normal]
    is_normal = p_normal_smooth >= config.label_threshold

    n_norm = int(is_normal.sum())
    n_con = T - n_norm
    if min(n_norm, n_con) < n + 1:
        raise DegenerateRegimeError(
            f"regime sizes normal={n_norm}, contraction={n_con}; need at least {n + 1} each"
        )
    mu_n = r[is_normal].mean(axis=0)
    mu_c = r[~is_normal].mean(axis=0)
    s_n = np.cov(r[is_normal], rowvar=False)
    s_c = np.cov(r[~is_normal], rowvar=False)

    diag = EmDiagnostics(
        loglik_trace=tuple(trace),
        n_iter=len(trace) - 1,
        converged=converged,
        smoothed_normal=p_normal_smooth,
        filtered_normal=filt[:, normal],
        driving_columns=tuple(cols),
        hmm_means=means[[normal, other]],
        hmm_covs=covs[[normal, other]],
    )
    return RegimeModel(
        mu_normal=mu_n,
        mu_contraction=mu_c,
        sigma_normal=s_n,
        sigma_contraction=s_c,
        p_nn=float(trans[normal, normal]),
        p_cc=float(trans[other, other]),
        q_current=float(np.clip(filt[-1, normal], 0.0, 1.0)),
        assets=assets,
        diagnostics=diag,
    )


def with_q(model, q):
    return replace(model, q_current=float(q))
