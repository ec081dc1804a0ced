"""Rolling MPC backtest with proportional trading costs.

Wealth dynamics per period, with holdings ``pi`` and realised returns ``r``::

    W_end    = W * pi'(1 + r)
    pi_drift = pi * (1 + r) / pi'(1 + r)
    cost     = W_end * cost_rate * ||target - pi_drift||_1
    W_next   = W_end - cost,  holdings become ``target``

The first ``window`` rows only feed the estimators. From row ``window`` on,
each period is held, then at its close the model is refitted (or filtered
forward), an H-step plan is solved from the data up to and including that
row, and the first plan step becomes the next holdings.
"""
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import mpc_mv, mpc_rp
from .errors import MpcFolioError, UndefinedMetricError, ValidationError, WealthWipeoutError
from .qp import check_simplex
from .regime import EmConfig, filter_update, fit_em, forecast_path, historical_model, with_q

logger = logging.getLogger(__name__)

PERIODS_PER_YEAR = 252
STRATEGIES = ("fixed-mix", "buy-and-hold", "spo", "mpo", "spo-rp", "mpo-rp")

_MV_DEFAULTS = dict(horizon=mpc_mv.DEFAULT_HORIZON, gamma_risk=mpc_mv.DEFAULT_GAMMA_RISK,
                    gamma_trade=mpc_mv.DEFAULT_GAMMA_TRADE)
_RP_DEFAULTS = dict(horizon=15, gamma_trade=0.5)


@dataclass(frozen=True)
class PortfolioState:
    wealth: float
    weights: np.ndarray
    index: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        if not self.wealth > 0:
            raise ValidationError("wealth must be positive")
        check_simplex(w)
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class PeriodRecord:
    date: str
    wealth: float  # after costs, end of period
    weights: np.ndarray  # holdings after the trade
    trade: np.ndarray  # u = target - drifted weights
    cost: float
    gross_return: float  # pi'r before costs
    flagged: bool = False


@dataclass(frozen=True)
class MetricsReport:
    annual_return_pct: float
    annual_volatility_pct: float
    max_drawdown: float
    sharpe: float  # None when volatility is zero
    calmar: float  # None when drawdown is zero
    annual_turnover: float
    cumulative_return: float  # final wealth / initial wealth

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        return cls(**{f.name: doc[f.name] for f in fields(cls)})


@dataclass(frozen=True)
class BacktestLedger:
    assets: tuple
    initial_wealth: float
    initial_weights: np.ndarray
    records: tuple
    risk_free: np.ndarray = None
    metrics: MetricsReport = None

    @property
    def dates(self):
        return [r.date for r in self.records]

    @property
    def wealth(self):
        return np.array([r.wealth for r in self.records])

    @property
    def weights(self):
        return np.array([r.weights for r in self.records])

    @property
    def trades(self):
        return np.array([r.trade for r in self.records])

    @property
    def costs(self):
        return np.array([r.cost for r in self.records])

    @property
    def flagged_fraction(self):
        return float(np.mean([r.flagged for r in self.records])) if self.records else 0.0


@dataclass(frozen=True)
class BacktestConfig:
    strategy: str = "mpo"
    cost_rate: float = 0.001
    window: int = 2000
    refit_interval: int = 1
    horizon: int = None  # strategy default when None; spo/spo-rp force 1
    gamma_risk: float = None
    gamma_trade: float = None
    budgets: tuple = None
    driving_columns: tuple = None  # default: first two assets
    use_regime_model: bool = True
    risk_free: str = None  # name of a risk-free return column, excluded from trading
    initial_wealth: float = 1.0
    min_fit_obs: int = 250

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown strategy {self.strategy!r}; valid: {', '.join(STRATEGIES)}")
        if self.cost_rate < 0:
            raise ValidationError("cost_rate must be >= 0")
        if self.window < self.min_fit_obs:
            raise ValidationError(f"window {self.window} below minimum fit length {self.min_fit_obs}")
        if self.refit_interval < 1:
            raise ValidationError("refit_interval must be >= 1")

    def resolved(self):
        """(horizon, gamma_risk, gamma_trade) after strategy defaults."""
        defaults = _RP_DEFAULTS if self.strategy.endswith("-rp") else _MV_DEFAULTS
        H = self.horizon if self.horizon is not None else defaults["horizon"]
        if self.strategy in ("spo", "spo-rp"):
            H = 1
        g_risk = self.gamma_risk if self.gamma_risk is not None else _MV_DEFAULTS["gamma_risk"]
        g_trade = self.gamma_trade if self.gamma_trade is not None else defaults["gamma_trade"]
        return int(H), float(g_risk), float(g_trade)


def drift(weights, returns):
    growth = float(weights @ (1.0 + returns))
    return weights * (1.0 + returns) / growth, growth


def step(state, target, realized_returns, cost_rate, date=""):
    """Hold ``state`` through one period, then trade to ``target``."""
    r = np.asarray(realized_returns, dtype=float).ravel()
    target = np.asarray(target, dtype=float).ravel()
    check_simplex(target, "target")
    growth = float(state.weights @ (1.0 + r))
    if growth <= 0.0:
        raise WealthWipeoutError(f"portfolio return {growth - 1.0:.2%} wipes out wealth")
    w_end = state.wealth * growth
    drifted = state.weights * (1.0 + r) / growth
    trade = target - drifted
    cost = w_end * cost_rate * float(np.abs(trade).sum())
    new_state = PortfolioState(wealth=w_end - cost, weights=target, index=state.index + 1)
    rec = PeriodRecord(date=date, wealth=new_state.wealth, weights=target, trade=trade,
                       cost=cost, gross_return=growth - 1.0)
    return new_state, rec


class _Forecaster:
    """Keeps the regime model current: refit on cadence, filter in between."""

    def __init__(self, cfg, assets, driving):
        self.cfg = cfg
        self.assets = assets
        self.driving = driving
        self.model = None
        self.since_fit = None

    def update(self, window, latest):
        flagged = False
        if not self.cfg.use_regime_model:
            self.model = historical_model(window, self.assets)
            return flagged
        if self.model is None or self.since_fit >= self.cfg.refit_interval:
            try:
                self.model = fit_em(window, self.driving, EmConfig(min_obs=self.cfg.min_fit_obs),
                                    assets=self.assets)
                self.since_fit = 0
            except MpcFolioError as exc:
                logger.warning("regime refit failed (%s); keeping previous model", exc)
                flagged = True
                # retry at the next scheduled refit, not every period
                self.since_fit = 0
                if self.model is None:
                    self.model = historical_model(window, self.assets)
                else:
                    self.model = with_q(self.model, filter_update(self.model, latest))
        else:
            self.model = with_q(self.model, filter_update(self.model, latest))
        self.since_fit += 1
        return flagged


def _decide(cfg, strategy_params, forecaster, anchor):
    H, g_risk, g_trade = strategy_params
    fc = forecast_path(forecaster.model, H)
    if cfg.strategy in ("spo", "mpo"):
        spec = mpc_mv.MeanVarianceSpec(anchor, gamma_risk=g_risk, gamma_trade=g_trade, horizon=H)
        return mpc_mv.solve_mv(spec, fc).first
    spec = mpc_rp.RiskParitySpec(anchor, gamma_trade=g_trade, horizon=H, budgets=cfg.budgets)
    return mpc_rp.solve_rp_sca(spec, fc).first


def _clean(w):
    w = np.clip(np.asarray(w, dtype=float), 0.0, None)
    return w / w.sum()


def run(panel, config):
    """Backtest ``config.strategy`` over ``panel``; returns a ledger with metrics."""
    cfg = config
    rf = None
    if cfg.risk_free is not None:
        j = panel.columns([cfg.risk_free])[0]
        keep = [i for i in range(panel.n_assets) if i != j]
        rf_all = panel.returns[:, j]
        assets = tuple(panel.assets[i] for i in keep)
        R = panel.returns[:, keep]
    else:
        rf_all = None
        assets = panel.assets
        R = panel.returns
    T, n = R.shape
    if n < 2:
        raise ValidationError("need at least 2 tradable assets")
    if T <= cfg.window + 1:
        raise ValidationError(f"panel has {T} rows; needs more than window + 1 = {cfg.window + 1}")

    driving = list(cfg.driving_columns) if cfg.driving_columns else list(assets[:2])
    missing = [d for d in driving if str(d) not in assets]
    if missing:
        raise ValidationError(f"driving columns {missing} not among tradable assets")
    driving_idx = [assets.index(str(d)) for d in driving]

    params = cfg.resolved()
    needs_model = cfg.strategy not in ("fixed-mix", "buy-and-hold")
    forecaster = _Forecaster(cfg, assets, driving_idx) if needs_model else None

    w0 = np.full(n, 1.0 / n)
    state = PortfolioState(cfg.initial_wealth, w0, index=cfg.window)
    records = []
    for t in range(cfg.window, T):
        r = R[t]
        drifted, growth = drift(state.weights, r)
        flagged = False
        if cfg.strategy == "fixed-mix":
            target = w0
        elif cfg.strategy == "buy-and-hold":
            target = drifted
        else:
            flagged = forecaster.update(R[t + 1 - cfg.window : t + 1], r)
            try:
                target = _clean(_decide(cfg, params, forecaster, _clean(drifted)))
            except MpcFolioError as exc:
                logger.warning("%s: solver failed at %s (%s); holding", cfg.strategy, panel.dates[t], exc)
                target = drifted
                flagged = True
        state, rec = step(state, target, r, cfg.cost_rate, date=panel.dates[t])
        if flagged:
            rec = PeriodRecord(**{**rec.__dict__, "flagged": True})
        records.append(rec)

    ledger = BacktestLedger(
        assets=assets,
        initial_wealth=cfg.initial_wealth,
        initial_weights=w0,
        records=tuple(records),
        risk_free=None if rf_all is None else rf_all[cfg.window :],
    )
    return _with_metrics(ledger)


def _with_metrics(ledger):
    return replace(ledger, metrics=metrics(ledger))


def replay_wealth(initial_wealth, initial_weights, returns, targets, cost_rate):
    """Recompute the wealth path from executed targets and realised returns."""
    W = initial_wealth
    w = np.asarray(initial_weights, dtype=float)
    out = np.empty(len(targets))
    for k, (r, tgt) in enumerate(zip(returns, targets)):
        growth = w @ (1.0 + r)
        w_end = W * growth
        drifted = w * (1.0 + r) / growth
        W = w_end - w_end * cost_rate * np.abs(tgt - drifted).sum()
        w = tgt
        out[k] = W
    return out


def max_drawdown(wealth):
    """Largest peak-to-trough loss as a fraction of the peak."""
    w = np.asarray(wealth, dtype=float)
    peak = np.maximum.accumulate(w)
    return float(np.max((peak - w) / peak))


def sharpe_ratio(daily_returns, daily_risk_free=None):
    r = np.asarray(daily_returns, dtype=float)
    vol = math.sqrt(PERIODS_PER_YEAR) * r.std(ddof=1)
    if vol <= 1e-12:
        raise UndefinedMetricError("Sharpe ratio undefined for zero volatility")
    ann_rf = 0.0 if daily_risk_free is None else PERIODS_PER_YEAR * float(np.mean(daily_risk_free))
    return (PERIODS_PER_YEAR * r.mean() - ann_rf) / vol


def calmar_ratio(daily_returns, wealth):
    dd = max_drawdown(wealth)
    if dd <= 0.0:
        raise UndefinedMetricError("Calmar ratio undefined for zero drawdown")
    return PERIODS_PER_YEAR * float(np.mean(daily_returns)) / dd


def metrics(ledger):
    if len(ledger.records) < 2:
        raise ValidationError("metrics need at least 2 periods")
    wealth = np.concatenate([[ledger.initial_wealth], ledger.wealth])
    daily = wealth[1:] / wealth[:-1] - 1.0
    try:
        sharpe = float(sharpe_ratio(daily, ledger.risk_free))
    except UndefinedMetricError:
        sharpe = None
    try:
        calmar = float(calmar_ratio(daily, wealth))
    except UndefinedMetricError:
        calmar = None
    turnover = float(np.abs(ledger.trades).sum()) * PERIODS_PER_YEAR / len(ledger.records)
    return MetricsReport(
        annual_return_pct=100.0 * PERIODS_PER_YEAR * float(daily.mean()),
        annual_volatility_pct=100.0 * math.sqrt(PERIODS_PER_YEAR) * float(daily.std(ddof=1)),
        max_drawdown=max_drawdown(wealth),
        sharpe=sharpe,
        calmar=calmar,
        annual_turnover=turnover,
        cumulative_return=float(wealth[-1] / wealth[0]),
    )


def write_ledger_csv(ledger, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["date", "wealth", *(f"w_{a}" for a in ledger.assets), "cost",
                     "gross_return", "turnover", "flagged"])
        for r in ledger.records:
            wr.writerow([r.date, repr(r.wealth), *(repr(float(x)) for x in r.weights), repr(r.cost),
                         repr(r.gross_return), repr(float(np.abs(r.trade).sum())), int(r.flagged)])


def read_ledger_csv(path):
    """Rows of a ledger CSV as dicts of floats (dates and flags kept as str/bool)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        rows = []
        for row in rd:
            out = {"date": row["date"], "flagged": row["flagged"] == "1"}
            weights = [float(v) for k, v in row.items() if k.startswith("w_")]
            out["weights"] = np.array(weights)
            for k in ("wealth", "cost", "gross_return", "turnover"):
                out[k] = float(row[k])
            rows.append(out)
    return rows


def write_metrics_json(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_metrics_json(path):
    with open(path, encoding="utf-8") as fh:
        return MetricsReport.from_dict(json.load(fh))
