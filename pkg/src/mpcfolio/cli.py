"""Command-line entry point.

Every subcommand reads an optional JSON config (``--config``); flags given
on the command line override the matching config fields. Outputs go to
``--out`` (created if needed). Exit codes: 0 success, 2 usage or
validation error, 3 degraded run, 4 internal error.
"""
import argparse
import csv
import dataclasses
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import backtest, data, experiments, mpc_mv, mpc_rp, regime
from .errors import DegenerateRegimeError, MpcFolioError, NonConvergenceError, ValidationError

log = logging.getLogger("mpcfolio")

EXIT_OK, EXIT_USAGE, EXIT_DEGRADED, EXIT_INTERNAL = 0, 2, 3, 4
WORKERS_ENV = "MPCFOLIO_WORKERS"

COMMANDS = ("fit-regime", "forecast", "solve-mv", "solve-rp", "backtest", "sweep", "compare", "simulate")


@dataclass
class RunConfig:
    """Backtest settings plus sweep/compare grids and I/O locations."""

    input: str = None
    out: str = "."
    seed: int = None  # None means 0, or the market file's own seed for simulate
    # backtest
    strategy: str = "mpo"
    cost_rate: float = 0.001
    window: int = 2000
    refit_interval: int = 1
    horizon: int = None
    gamma_risk: float = None
    gamma_trade: float = None
    budgets: list = None
    driving_columns: list = None
    use_regime_model: bool = True
    risk_free: str = None
    initial_wealth: float = 1.0
    min_fit_obs: int = 250
    max_flagged_fraction: float = 0.05  # above this a backtest exits with 3
    # sweep grids
    horizons: list = field(default_factory=lambda: [1, 2, 5, 10, 15, 30])
    gamma_risks: list = field(default_factory=lambda: [1.0, 5.0, 10.0])
    gamma_trades: list = field(default_factory=lambda: [0.0, 0.01, 0.1])
    cost_rates: list = field(default_factory=lambda: [0.001])
    # compare
    n_instances: int = 50
    n_assets: int = 10
    reference_method: str = "pg"
    # single solves / forecasting
    model: str = None
    forecast: str = None
    current_allocation: list = None
    # simulate
    market: dict = None
    length: int = 1500

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValidationError(f"unknown config fields: {', '.join(unknown)}")
        return cls(**doc)

    def backtest_config(self, **override):
        kw = dict(
            strategy=self.strategy,
            cost_rate=self.cost_rate,
            window=self.window,
            refit_interval=self.refit_interval,
            horizon=self.horizon,
            gamma_risk=self.gamma_risk,
            gamma_trade=self.gamma_trade,
            budgets=tuple(self.budgets) if self.budgets is not None else None,
            driving_columns=tuple(self.driving_columns) if self.driving_columns is not None else None,
            use_regime_model=self.use_regime_model,
            risk_free=self.risk_free,
            initial_wealth=self.initial_wealth,
            min_fit_obs=self.min_fit_obs,
        )
        kw.update(override)
        return backtest.BacktestConfig(**kw)

    def validate_grids(self):
        for name in ("horizons", "gamma_risks", "gamma_trades", "cost_rates"):
            if not getattr(self, name):
                raise ValidationError(f"grid {name} is empty")


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text):
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its fields")
    common.add_argument("--input", help="returns CSV (date column plus one column per asset)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    bt = argparse.ArgumentParser(add_help=False)
    bt.add_argument("--strategy")
    bt.add_argument("--cost-rate", type=float)
    bt.add_argument("--window", type=int)
    bt.add_argument("--refit-interval", type=int)
    bt.add_argument("--horizon", type=int)
    bt.add_argument("--gamma-risk", type=float)
    bt.add_argument("--gamma-trade", type=float)
    bt.add_argument("--driving-columns", type=_str_list)
    bt.add_argument("--risk-free")
    bt.add_argument("--no-regime-model", dest="use_regime_model", action="store_const", const=False)
    bt.add_argument("--max-flagged-fraction", type=float)

    solve = argparse.ArgumentParser(add_help=False)
    solve.add_argument("--model", help="regime model JSON (from fit-regime)")
    solve.add_argument("--forecast", help="forecast JSON (from forecast)")
    solve.add_argument("--current-allocation", type=_float_list)

    p = argparse.ArgumentParser(prog="mpcfolio", description="Regime-aware multi-period portfolio MPC.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("fit-regime", parents=[common, bt], help="fit the two-regime model to a returns CSV")
    sub.add_parser("forecast", parents=[common, bt, solve], help="H-step mixture moment forecast")
    sub.add_parser("solve-mv", parents=[common, bt, solve], help="one mean-variance MPC solve")
    sub.add_parser("solve-rp", parents=[common, bt, solve], help="one risk-parity MPC solve")
    sub.add_parser("backtest", parents=[common, bt], help="rolling backtest: ledger CSV and metrics JSON")
    sw = sub.add_parser("sweep", parents=[common, bt], help="backtests over a hyperparameter grid")
    sw.add_argument("--horizons", type=_int_list)
    sw.add_argument("--gamma-risks", type=_float_list)
    sw.add_argument("--gamma-trades", type=_float_list)
    sw.add_argument("--cost-rates", type=_float_list)
    cp = sub.add_parser("compare", parents=[common], help="risk-parity solver accuracy/runtime table")
    cp.add_argument("--horizons", type=_int_list)
    cp.add_argument("--gamma-trades", type=_float_list)
    cp.add_argument("--n-instances", type=int)
    cp.add_argument("--n-assets", type=int)
    cp.add_argument("--reference-method", choices=("pg", "slsqp"))
    sm = sub.add_parser("simulate", parents=[common], help="simulate a regime-switching returns panel")
    sm.add_argument("--market", help="market spec JSON; default is the built-in desk market")
    sm.add_argument("--n-assets", type=int)
    sm.add_argument("--length", type=int)
    return p


def resolve_config(args):
    doc = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ValidationError("config must be a JSON object")
    flags = {k: v for k, v in vars(args).items() if k not in ("config", "command", "verbose") and v is not None}
    if isinstance(flags.get("market"), str):
        with open(flags["market"], encoding="utf-8") as fh:
            flags["market"] = json.load(fh)
    doc.update(flags)
    return RunConfig.from_dict(doc)


def _out_dir(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


def _require_input(cfg):
    if not cfg.input:
        raise ValidationError("--input is required")
    return data.load_returns(cfg.input)


def _write_json(doc, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _plan_doc(plan, assets=None):
    return {
        "assets": list(assets) if assets is not None else None,
        "weights": plan.weights.tolist(),
        "first": plan.first.tolist(),
        "objective": plan.objective,
        "iterations": plan.iterations,
        "trace": list(plan.trace),
    }


def _fit(panel, cfg):
    window = panel.slice(max(0, len(panel) - cfg.window), len(panel))
    driving = cfg.driving_columns or list(panel.assets[:2])
    return regime.fit_em(window, driving, regime.EmConfig(min_obs=cfg.min_fit_obs)), window


def cmd_fit_regime(cfg):
    panel = _require_input(cfg)
    model, window = _fit(panel, cfg)
    out = _out_dir(cfg)
    regime.save_model(model, os.path.join(out, "regime_model.json"))
    diag = model.diagnostics
    with open(os.path.join(out, "regime_probabilities.csv"), "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["date", "p_normal_smoothed", "p_normal_filtered", "label"])
        for d, s, f in zip(window.dates, diag.smoothed_normal, diag.filtered_normal):
            label = data.NORMAL if s >= 0.5 else data.CONTRACTION
            wr.writerow([d, repr(float(s)), repr(float(f)), label])
    log.info("p_nn=%.4f p_cc=%.4f q=%.4f after %d EM iterations",
             model.p_nn, model.p_cc, model.q_current, diag.n_iter)
    return EXIT_OK


def _load_forecast(cfg, horizon):
    if cfg.forecast:
        with open(cfg.forecast, encoding="utf-8") as fh:
            return regime.ForecastPath.from_dict(json.load(fh)).head(horizon), None
    if cfg.model:
        model = regime.load_model(cfg.model)
    elif cfg.input:
        model, _ = _fit(_require_input(cfg), cfg)
    else:
        raise ValidationError("one of --forecast, --model or --input is required")
    return regime.forecast_path(model, horizon), model.assets


def _allocation(cfg, n):
    if cfg.current_allocation is None:
        return np.full(n, 1.0 / n)
    a = np.asarray(cfg.current_allocation, dtype=float)
    if a.size != n:
        raise ValidationError(f"current allocation has {a.size} entries, forecast has {n} assets")
    return a


def cmd_forecast(cfg):
    H, _, _ = cfg.backtest_config(window=max(cfg.window, cfg.min_fit_obs)).resolved()
    fc, assets = _load_forecast(cfg, H)
    doc = fc.to_dict()
    doc["assets"] = list(assets) if assets is not None else None
    _write_json(doc, os.path.join(_out_dir(cfg), "forecast.json"))
    return EXIT_OK


def cmd_solve_mv(cfg):
    H, g_risk, g_trade = cfg.backtest_config(strategy="mpo", window=max(cfg.window, cfg.min_fit_obs)).resolved()
    fc, assets = _load_forecast(cfg, H)
    spec = mpc_mv.MeanVarianceSpec(_allocation(cfg, fc.n_assets), g_risk, g_trade, H)
    plan = mpc_mv.solve_mv(spec, fc)
    _write_json(_plan_doc(plan, assets), os.path.join(_out_dir(cfg), "plan_mv.json"))
    return EXIT_OK


def cmd_solve_rp(cfg):
    H, _, g_trade = cfg.backtest_config(strategy="mpo-rp", window=max(cfg.window, cfg.min_fit_obs)).resolved()
    fc, assets = _load_forecast(cfg, H)
    spec = mpc_rp.RiskParitySpec(_allocation(cfg, fc.n_assets), gamma_trade=g_trade, horizon=H,
                                 budgets=cfg.budgets)
    status = EXIT_OK
    try:
        plan = mpc_rp.solve_rp_sca(spec, fc)
    except NonConvergenceError as exc:
        log.warning("%s; writing best iterate", exc)
        plan, status = exc.best, EXIT_DEGRADED
    _write_json(_plan_doc(plan, assets), os.path.join(_out_dir(cfg), "plan_rp.json"))
    return status


def cmd_backtest(cfg):
    panel = _require_input(cfg)
    bt_cfg = cfg.backtest_config()
    ledger = backtest.run(panel, bt_cfg)
    out = _out_dir(cfg)
    backtest.write_ledger_csv(ledger, os.path.join(out, "ledger.csv"))
    backtest.write_metrics_json(ledger.metrics, os.path.join(out, "metrics.json"))
    frac = ledger.flagged_fraction
    if frac > cfg.max_flagged_fraction:
        log.warning("%.1f%% of periods fell back to a degraded decision", 100 * frac)
        return EXIT_DEGRADED
    return EXIT_OK


SWEEP_COLUMNS = ("index", "horizon", "gamma_risk", "gamma_trade", "cost_rate", "sharpe",
                 "annual_return_pct", "annual_volatility_pct", "max_drawdown", "calmar",
                 "annual_turnover", "flagged_fraction", "runtime_s", "error")


def _sweep_point(job):
    index, panel, bt_cfg = job
    row = dict(index=index, horizon=bt_cfg.horizon, gamma_risk=bt_cfg.gamma_risk,
               gamma_trade=bt_cfg.gamma_trade, cost_rate=bt_cfg.cost_rate, error="")
    t0 = time.perf_counter()
    try:
        ledger = backtest.run(panel, bt_cfg)
        m = ledger.metrics
        row.update(sharpe=m.sharpe, annual_return_pct=m.annual_return_pct,
                   annual_volatility_pct=m.annual_volatility_pct, max_drawdown=m.max_drawdown,
                   calmar=m.calmar, annual_turnover=m.annual_turnover,
                   flagged_fraction=ledger.flagged_fraction)
    except Exception as exc:  # recorded in-row; one bad point never aborts the grid
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["runtime_s"] = time.perf_counter() - t0
    return row


def sweep_grid(cfg):
    """Grid points in output order: horizon, then gamma_risk, gamma_trade, cost_rate."""
    return list(itertools.product(cfg.horizons, cfg.gamma_risks, cfg.gamma_trades, cfg.cost_rates))


def _workers():
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"{WORKERS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ValidationError(f"{WORKERS_ENV} must be >= 1")
    return n


def cmd_sweep(cfg):
    cfg.validate_grids()
    panel = _require_input(cfg)
    jobs = [
        (i, panel, cfg.backtest_config(horizon=H, gamma_risk=gr, gamma_trade=gt, cost_rate=c))
        for i, (H, gr, gt, c) in enumerate(sweep_grid(cfg))
    ]
    workers = _workers()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    rows.sort(key=lambda r: r["index"])
    with open(os.path.join(_out_dir(cfg), "sweep.csv"), "w", newline="", encoding="utf-8") as fh:
        wr = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n", restval="")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: ("" if v is None else v) for k, v in r.items() if k != "runtime_s"}
                        | {"runtime_s": r["runtime_s"]})
    failed = sum(1 for r in rows if r["error"])
    if failed:
        log.warning("%d of %d grid points failed", failed, len(rows))
        return EXIT_DEGRADED
    return EXIT_OK


def read_sweep_csv(path):
    """Rows of a sweep CSV; numeric fields as float (None when empty)."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rec = {}
            for k, v in row.items():
                if k == "error":
                    rec[k] = v
                elif k in ("index", "horizon"):
                    rec[k] = int(v) if v else None
                else:
                    rec[k] = float(v) if v else None
            out.append(rec)
    return out


COMPARE_SCALE = 1e-4  # errors are reported in units of 1e-4


def cmd_compare(cfg):
    horizons = cfg.horizons
    gammas = cfg.gamma_trades
    if not horizons or not gammas:
        raise ValidationError("compare needs nonempty horizons and gamma_trades")
    seed = cfg.seed or 0
    ref = mpc_rp.ReferenceSettings(seed=seed, method=cfg.reference_method)
    rows = experiments.compare_solvers(horizons, gammas, n_instances=cfg.n_instances,
                                       n_assets=cfg.n_assets, seed=seed, ref_settings=ref)
    cols = [f.name for f in dataclasses.fields(experiments.CompareRow)]
    with open(os.path.join(_out_dir(cfg), "compare.csv"), "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([c.replace("error", "error_e4") if "error" in c else c for c in cols])
        for r in rows:
            vals = []
            for c in cols:
                v = getattr(r, c)
                vals.append(repr(v / COMPARE_SCALE) if "error" in c else v)
            wr.writerow(vals)
    return EXIT_OK


def cmd_simulate(cfg):
    if cfg.market is not None:
        doc = dict(cfg.market)
        if cfg.seed is not None or "seed" not in doc:
            doc["seed"] = cfg.seed or 0
        spec = data.SyntheticMarketSpec.from_dict(doc)
    else:
        spec = experiments.desk_market_spec(cfg.seed or 0, n_assets=cfg.n_assets, horizon=cfg.length)
    panel, labels = data.simulate_market(spec)
    out = _out_dir(cfg)
    data.save_returns(panel, os.path.join(out, "returns.csv"))
    with open(os.path.join(out, "labels.csv"), "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["date", "regime"])
        wr.writerows(zip(panel.dates, labels))
    _write_json(spec.to_dict(), os.path.join(out, "market.json"))
    return EXIT_OK


HANDLERS = {
    "fit-regime": cmd_fit_regime,
    "forecast": cmd_forecast,
    "solve-mv": cmd_solve_mv,
    "solve-rp": cmd_solve_rp,
    "backtest": cmd_backtest,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
    "simulate": cmd_simulate,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return HANDLERS[args.command](cfg)
    except FileNotFoundError as exc:
        print(f"mpcfolio: error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, DegenerateRegimeError, TypeError, json.JSONDecodeError) as exc:
        print(f"mpcfolio: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MpcFolioError as exc:
        print(f"mpcfolio: error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - last-resort contract
        log.debug("internal error", exc_info=True)
        print(f"mpcfolio: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
