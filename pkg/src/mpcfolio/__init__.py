"""Regime-aware multi-period portfolio optimisation (mean-variance and risk parity MPC)."""
from .backtest import BacktestConfig, BacktestLedger, MetricsReport, run as run_backtest
from .data import ReturnsPanel, SyntheticMarketSpec, load_returns, simulate_market
from .kernels import BACKEND
from .mpc_mv import MeanVarianceSpec, solve_mv
from .mpc_rp import RiskParitySpec, rp_gradient, risk_contributions, solve_rp_reference, solve_rp_sca
from .plan import AllocationPlan
from .qp import QuadraticProgram, solve as solve_qp
from .regime import ForecastPath, RegimeModel, fit_em, forecast_path

__version__ = "0.1.0"
