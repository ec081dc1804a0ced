"""Return panels: CSV ingest/export and synthetic regime-switching markets.

Returns are plain decimal simple returns (0.01 == 1%). Dates are kept as
ISO-8601 strings; there is no trading calendar, one row is one period.

Synthetic draws use numpy's ``Generator(PCG64(seed))``. The consumption
order is fixed so that a seed reproduces a panel exactly:

1. ``horizon - 1`` uniforms on [0, 1) drive the regime chain (a switch
   happens when the uniform is >= the current self-transition probability);
2. a ``horizon x n_assets`` block of standard normals is drawn row-major and
   mapped through the Cholesky factor of the active regime's covariance.
"""
import csv
import datetime as _dt
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError

NORMAL = "normal"
CONTRACTION = "contraction"


@dataclass(frozen=True)
class ReturnsPanel:
    """Dated T x n matrix of simple returns."""

    dates: tuple
    assets: tuple
    returns: np.ndarray

    def __post_init__(self):
        dates = tuple(str(d) for d in self.dates)
        assets = tuple(str(a) for a in self.assets)
        r = np.array(self.returns, dtype=float)
        if r.ndim != 2:
            raise ValidationError("returns must be a 2-d matrix")
        if r.shape != (len(dates), len(assets)):
            raise ValidationError(
                f"returns shape {r.shape} does not match "
                f"{len(dates)} dates x {len(assets)} assets"
            )
        if len(assets) < 2:
            raise ValidationError("a returns panel needs at least 2 assets")
        if len(set(assets)) != len(assets):
            raise ValidationError("asset identifiers must be unique")
        if not np.all(np.isfinite(r)):
            raise ValidationError("returns contain missing or non-finite cells")
        if np.any(np.abs(r) >= 1.0):
            raise ValidationError("every |return| must be < 1")
        parsed = [_parse_date(d) for d in dates]
        for a, b in zip(parsed, parsed[1:]):
            if b <= a:
                raise ValidationError(f"dates not strictly increasing at {b.isoformat()}")
        r.setflags(write=False)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "assets", assets)
        object.__setattr__(self, "returns", r)

    @property
    def n_assets(self):
        return len(self.assets)

    def __len__(self):
        return len(self.dates)

    def slice(self, start, stop):
        """Rows ``[start, stop)`` as a new panel."""
        return ReturnsPanel(self.dates[start:stop], self.assets, self.returns[start:stop])

    def columns(self, names):
        """Indices of the named assets, in the given order."""
        idx = []
        for name in names:
            try:
                idx.append(self.assets.index(str(name)))
            except ValueError:
                raise ValidationError(f"unknown asset {name!r}") from None
        return idx


def _parse_date(text):
    try:
        return _dt.date.fromisoformat(text)
    except ValueError:
        try:
            return _dt.datetime.fromisoformat(text)
        except ValueError:
            raise ValidationError(f"not an ISO-8601 date: {text!r}") from None


def load_returns(path, delimiter=","):
    """Read a returns CSV (first column ``date``, one column per asset).

    Rows are returned sorted by date. A blank or non-numeric cell raises
    :class:`ParseError` naming its line and column; duplicate dates and
    panels with fewer than two assets raise :class:`ValidationError`.
    """
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", row=1) from None
        header = [h.strip() for h in header]
        if not header or header[0].lower() != "date":
            raise ParseError(f"{path}: first header column must be 'date'", row=1, column=header[0] if header else None)
        assets = header[1:]
        if len(assets) < 2:
            raise ValidationError(f"{path}: need at least 2 asset columns, found {len(assets)}")

        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(
                    f"{path}: line {lineno} has {len(rec)} cells, expected {len(header)}",
                    row=lineno,
                )
            date_text = rec[0].strip()
            try:
                date = _parse_date(date_text)
            except ValidationError:
                raise ParseError(f"{path}: line {lineno}, column 'date': bad date {date_text!r}",
                                 row=lineno, column="date") from None
            values = []
            for name, cell in zip(assets, rec[1:]):
                cell = cell.strip()
                try:
                    if not cell:
                        raise ValueError
                    values.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: line {lineno}, column {name!r}: cannot parse {cell!r}",
                        row=lineno, column=name,
                    ) from None
            rows.append((date, date_text, values))

    rows.sort(key=lambda item: item[0])
    for a, b in zip(rows, rows[1:]):
        if a[0] == b[0]:
            raise ValidationError(f"{path}: duplicate date {b[1]}")
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    return ReturnsPanel(
        dates=[r[1] for r in rows],
        assets=assets,
        returns=np.array([r[2] for r in rows], dtype=float),
    )


def save_returns(panel, path):
    # repr() of a float round-trips exactly through float()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["date", *panel.assets])
        for date, row in zip(panel.dates, panel.returns):
            writer.writerow([date, *(repr(float(x)) for x in row)])


@dataclass(frozen=True)
class SyntheticMarketSpec:
    """Parameters of a two-regime Gaussian market simulation."""

    n_assets: int
    mu_normal: np.ndarray
    mu_contraction: np.ndarray
    sigma_normal: np.ndarray
    sigma_contraction: np.ndarray
    p_nn: float
    p_cc: float
    horizon: int
    seed: int
    start_regime: str = NORMAL
    start_date: str = "2000-01-01"
    asset_names: tuple = field(default=None)

    def __post_init__(self):
        n = int(self.n_assets)
        if n < 1:
            raise ValidationError("n_assets must be positive")
        for name in ("mu_normal", "mu_contraction"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (n,):
                raise ValidationError(f"{name} must have length {n}")
            object.__setattr__(self, name, v)
        for name in ("sigma_normal", "sigma_contraction"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (n, n):
                raise ValidationError(f"{name} must be {n}x{n}")
            if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
                raise ValidationError(f"{name} is not symmetric")
            try:
                np.linalg.cholesky(m)
            except np.linalg.LinAlgError:
                raise ValidationError(f"{name} is not positive definite") from None
            object.__setattr__(self, name, m)
        for name in ("p_nn", "p_cc"):
            p = float(getattr(self, name))
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
            object.__setattr__(self, name, p)
        if int(self.horizon) < 1:
            raise ValidationError("horizon must be positive")
        if self.start_regime not in (NORMAL, CONTRACTION):
            raise ValidationError(f"start_regime must be {NORMAL!r} or {CONTRACTION!r}")
        names = self.asset_names
        if names is None:
            names = tuple(f"A{i + 1}" for i in range(n))
        elif len(names) != n:
            raise ValidationError("asset_names length must equal n_assets")
        object.__setattr__(self, "n_assets", n)
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "asset_names", tuple(str(a) for a in names))

    def to_dict(self):
        return {
            "n_assets": self.n_assets,
            "mu_normal": self.mu_normal.tolist(),
            "mu_contraction": self.mu_contraction.tolist(),
            "sigma_normal": self.sigma_normal.tolist(),
            "sigma_contraction": self.sigma_contraction.tolist(),
            "p_nn": self.p_nn,
            "p_cc": self.p_cc,
            "horizon": self.horizon,
            "seed": self.seed,
            "start_regime": self.start_regime,
            "start_date": self.start_date,
            "asset_names": list(self.asset_names),
        }

    @classmethod
    def from_dict(cls, doc):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown market spec fields: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ValidationError(f"bad market spec: {exc}") from None


def load_market_spec(path):
    with open(path, encoding="utf-8") as fh:
        return SyntheticMarketSpec.from_dict(json.load(fh))


def simulate_market(spec):
    """Draw a panel and its regime labels from ``spec``.

    Returns ``(panel, labels)`` where ``labels`` is an array of
    ``"normal"`` / ``"contraction"`` strings, one per row.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    T, n = spec.horizon, spec.n_assets

    u = rng.random(T - 1)
    is_normal = np.empty(T, dtype=bool)
    is_normal[0] = spec.start_regime == NORMAL
    for t in range(1, T):
        stay = spec.p_nn if is_normal[t - 1] else spec.p_cc
        is_normal[t] = is_normal[t - 1] if u[t - 1] < stay else not is_normal[t - 1]

    z = rng.standard_normal((T, n))
    chol_n = np.linalg.cholesky(spec.sigma_normal)
    chol_c = np.linalg.cholesky(spec.sigma_contraction)
    returns = np.where(
        is_normal[:, None],
        spec.mu_normal + z @ chol_n.T,
        spec.mu_contraction + z @ chol_c.T,
    )

    start = _dt.date.fromisoformat(spec.start_date)
    dates = [(start + _dt.timedelta(days=i)).isoformat() for i in range(T)]
    labels = np.where(is_normal, NORMAL, CONTRACTION)
    return ReturnsPanel(dates, spec.asset_names, returns), labels
