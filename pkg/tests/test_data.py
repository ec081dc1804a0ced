import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mpcfolio.data import (
    CONTRACTION,
    NORMAL,
    ReturnsPanel,
    SyntheticMarketSpec,
    load_market_spec,
    load_returns,
    save_returns,
    simulate_market,
)
from mpcfolio.errors import ParseError, ValidationError


def _write(tmp_path, text, name="r.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def _spec(**kw):
    base = dict(
        n_assets=2,
        mu_normal=[0.001, 0.0005],
        mu_contraction=[-0.002, 0.0],
        sigma_normal=[[1e-4, 2e-5], [2e-5, 4e-5]],
        sigma_contraction=[[4e-4, 1e-4], [1e-4, 1e-4]],
        p_nn=0.98,
        p_cc=0.9,
        horizon=500,
        seed=7,
    )
    base.update(kw)
    return SyntheticMarketSpec(**base)


class TestLoadReturns:
    def test_well_formed(self, tmp_path):
        p = _write(tmp_path, "date,A,B\n2020-01-01,0.01,-0.02\n2020-01-02,0,0.5\n2020-01-03,1e-3,-0.25\n")
        panel = load_returns(p)
        assert len(panel) == 3 and panel.n_assets == 2
        assert panel.assets == ("A", "B")
        np.testing.assert_array_equal(panel.returns[1], [0.0, 0.5])

    def test_blank_cell_names_coordinate(self, tmp_path):
        p = _write(tmp_path, "date,A,B\n2020-01-01,0.01,-0.02\n2020-01-02,,0.5\n")
        with pytest.raises(ParseError) as err:
            load_returns(p)
        assert err.value.row == 3 and err.value.column == "A"

    def test_garbage_cell(self, tmp_path):
        p = _write(tmp_path, "date,A,B\n2020-01-01,0.01,abc\n")
        with pytest.raises(ParseError) as err:
            load_returns(p)
        assert err.value.column == "B"

    def test_unsorted_rows_sorted(self, tmp_path):
        rows = [("2020-01-03", "0.3", "0.03"), ("2020-01-01", "0.1", "0.01"), ("2020-01-02", "0.2", "0.02")]
        text = "date,A,B\n" + "".join(",".join(r) + "\n" for r in rows)
        panel = load_returns(_write(tmp_path, text))
        oracle = sorted(rows)
        assert list(panel.dates) == [r[0] for r in oracle]
        np.testing.assert_array_equal(panel.returns[:, 0], [float(r[1]) for r in oracle])

    def test_duplicate_dates(self, tmp_path):
        p = _write(tmp_path, "date,A,B\n2020-01-01,0.01,0.0\n2020-01-01,0.02,0.0\n")
        with pytest.raises(ValidationError):
            load_returns(p)

    def test_single_asset(self, tmp_path):
        with pytest.raises(ValidationError):
            load_returns(_write(tmp_path, "date,A\n2020-01-01,0.01\n"))

    def test_bom_header(self, tmp_path):
        p = tmp_path / "bom.csv"
        p.write_bytes("﻿date,A,B\n2020-01-01,0.01,0.02\n".encode("utf-8"))
        assert load_returns(p).assets == ("A", "B")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_returns(tmp_path / "missing.csv")


class TestPanelInvariants:
    def test_rejects_large_return(self):
        with pytest.raises(ValidationError):
            ReturnsPanel(["2020-01-01"], ["A", "B"], [[1.0, 0.0]])

    def test_rejects_nan(self):
        with pytest.raises(ValidationError):
            ReturnsPanel(["2020-01-01"], ["A", "B"], [[np.nan, 0.0]])

    def test_rejects_decreasing_dates(self):
        with pytest.raises(ValidationError):
            ReturnsPanel(["2020-01-02", "2020-01-01"], ["A", "B"], np.zeros((2, 2)))

    def test_rejects_duplicate_assets(self):
        with pytest.raises(ValidationError):
            ReturnsPanel(["2020-01-01"], ["A", "A"], np.zeros((1, 2)))

    def test_returns_read_only(self):
        panel = ReturnsPanel(["2020-01-01"], ["A", "B"], np.zeros((1, 2)))
        with pytest.raises(ValueError):
            panel.returns[0, 0] = 0.5


@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(2, 4)),
              elements=st.floats(-0.99, 0.99, allow_subnormal=False)))
def test_save_load_round_trip(tmp_path_factory, r):
    T, n = r.shape
    dates = [f"2021-{1 + i // 28:02d}-{1 + i % 28:02d}" for i in range(T)]
    panel = ReturnsPanel(dates, [f"X{i}" for i in range(n)], r)
    p = tmp_path_factory.mktemp("rt") / "p.csv"
    save_returns(panel, p)
    back = load_returns(p)
    assert back.dates == panel.dates and back.assets == panel.assets
    np.testing.assert_array_equal(back.returns, panel.returns)


class TestSimulate:
    def test_absorbing_normal(self):
        _, labels = simulate_market(_spec(p_nn=1.0))
        assert set(labels) == {NORMAL}

    def test_deterministic(self):
        a, la = simulate_market(_spec())
        b, lb = simulate_market(_spec())
        np.testing.assert_array_equal(a.returns, b.returns)
        np.testing.assert_array_equal(la, lb)
        c, _ = simulate_market(_spec(seed=8))
        assert not np.array_equal(a.returns, c.returns)

    def test_identical_regimes_moment_oracle(self):
        mu = np.array([0.001, -0.0005, 0.0])
        a = np.array([[1.0, 0.3, 0.1], [0.3, 1.0, -0.2], [0.1, -0.2, 1.0]]) * 1e-4
        spec = SyntheticMarketSpec(3, mu, mu, a, a, 0.9, 0.8, 100_000, 11)
        panel, _ = simulate_market(spec)
        T = len(panel)
        se_mean = np.sqrt(np.diag(a) / T)
        assert np.all(np.abs(panel.returns.mean(0) - mu) < 4 * se_mean)
        S = np.cov(panel.returns, rowvar=False)
        # var of a sample covariance entry: (s_ii s_jj + s_ij^2) / T
        se_cov = np.sqrt((np.outer(np.diag(a), np.diag(a)) + a ** 2) / T)
        assert np.all(np.abs(S - a) < 4 * se_cov)

    def test_label_conditional_moments_and_transitions(self):
        spec = _spec(horizon=60_000, seed=3)
        panel, labels = simulate_market(spec)
        for lab, mu, sig in ((NORMAL, spec.mu_normal, spec.sigma_normal),
                             (CONTRACTION, spec.mu_contraction, spec.sigma_contraction)):
            x = panel.returns[labels == lab]
            se = np.sqrt(np.diag(sig) / len(x))
            assert np.all(np.abs(x.mean(0) - mu) < 4 * se)
        prev, nxt = labels[:-1], labels[1:]
        for lab, p in ((NORMAL, spec.p_nn), (CONTRACTION, spec.p_cc)):
            m = prev == lab
            freq = np.mean(nxt[m] == lab)
            se = np.sqrt(p * (1 - p) / m.sum())
            assert abs(freq - p) < 3 * se

    def test_not_positive_definite(self):
        with pytest.raises(ValidationError):
            _spec(sigma_normal=[[1e-4, 2e-4], [2e-4, 1e-4]])

    def test_bad_probability(self):
        with pytest.raises(ValidationError):
            _spec(p_nn=1.2)

    def test_spec_json_round_trip(self, tmp_path):
        spec = _spec()
        p = tmp_path / "m.json"
        p.write_text(json.dumps(spec.to_dict()))
        back = load_market_spec(p)
        np.testing.assert_array_equal(back.sigma_normal, spec.sigma_normal)
        assert back.seed == spec.seed and back.asset_names == spec.asset_names

    def test_unknown_spec_field(self):
        doc = _spec().to_dict()
        doc["bogus"] = 1
        with pytest.raises(ValidationError):
            SyntheticMarketSpec.from_dict(doc)
