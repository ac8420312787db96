import math

import numpy as np
import pytest

from conftest import dense_fe_regression
from gravshift.datamodel import TariffRecord, TradeFlowRecord
from gravshift.gravity import (
    EXPORT,
    IMPORT,
    GravityDesignRow,
    GravityError,
    GravityFit,
    NoVariationError,
    SigmaConfig,
    aggregate_predicted,
    build_design_rows,
    competitor_tariff_index,
    fit_gravity,
    predict_all,
    predict_flow,
    profile_sigma,
)
from gravshift.ingest import CrosswalkTable
from gravshift.simulate import ScenarioConfig, generate_trade


class TestTariffIndex:
    def test_unit_tariffs(self):
        assert competitor_tariff_index({"a": 1.0, "b": 3.0}, {"a": 1.0, "b": 1.0}, 3.0) == 0.0

    def test_single_competitor(self):
        for s in (1.5, 3.0, 8.0):
            assert competitor_tariff_index({"a": 5.0}, {"a": 1.1}, s) == pytest.approx(math.log(1.1), abs=1e-14)

    def test_power_mean(self):
        T = (0.5 * 1.0 + 0.5 * 1.21 ** 2) ** 0.5
        assert competitor_tariff_index({"a": 2.0, "b": 2.0}, {"a": 1.0, "b": 1.21}, 3.0) == \
            pytest.approx(math.log(T), abs=1e-14)

    def test_bounds(self, rng):
        for _ in range(100):
            flows = {str(i): float(v) for i, v in enumerate(rng.uniform(0.1, 10, 5))}
            taus = {k: float(v) for k, v in zip(flows, rng.uniform(1, 1.5, 5))}
            lt = competitor_tariff_index(flows, taus, float(rng.uniform(1.2, 9)))
            assert math.log(min(taus.values())) - 1e-12 <= lt <= math.log(max(taus.values())) + 1e-12

    def test_errors(self):
        with pytest.raises(GravityError):
            competitor_tariff_index({"a": 0.0}, {"a": 1.0}, 3.0)
        with pytest.raises(GravityError):
            competitor_tariff_index({"a": 1.0}, {"a": 1.0}, 1.0)
        with pytest.raises(GravityError):
            SigmaConfig(0.9)


def small_world(noise=0.0, scale=1.0, seed=0, **kw):
    cfg = ScenarioConfig(n_partners=5, n_competitors=3, n_products=4, years=(2000, 2001, 2002), flow_noise=noise,
                         seed=seed, **kw)
    w = generate_trade(cfg)
    if scale != 1.0:
        w.flows = [TradeFlowRecord(f.exporter, f.importer, f.product, f.year, f.value * scale) for f in w.flows]
    return w


def fit_side(w, side, sigma=3.0):
    rows = build_design_rows(w.flows, w.tariffs, w.competitors, side=side, sigma=sigma)
    return rows, fit_gravity(rows, side=side, sigma=sigma)


class TestFit:
    @pytest.mark.parametrize("side", [EXPORT, IMPORT])
    def test_noiseless_recovery(self, side):
        _, fit = fit_side(small_world(), side)
        assert fit.beta1 == pytest.approx(-2.0, abs=1e-8)
        assert fit.beta2 == pytest.approx(2.0, abs=1e-8)
        assert abs(fit.beta1 + fit.beta2) <= 1e-8

    def test_dense_dummy_oracle(self):
        # 5 partners x 4 products x 3 years, with noise so the oracle is non-trivial
        rows, fit = fit_side(small_world(noise=0.2, seed=3), EXPORT)
        y = np.array([r.focal_flow - r.offset for r in rows])
        X = np.array([[r.own_tariff, r.competitor_tariff_index] for r in rows])
        fam = [[r.fe_industry_year for r in rows], [r.fe_partner_country for r in rows]]
        assert np.allclose([fit.beta1, fit.beta2], dense_fe_regression(y, X, fam), atol=1e-8)

    def test_scale_invariance(self):
        _, a = fit_side(small_world(noise=0.1, seed=2), EXPORT)
        _, b = fit_side(small_world(noise=0.1, seed=2, scale=2.0), EXPORT)
        assert (a.beta1, a.beta2) == pytest.approx((b.beta1, b.beta2), abs=1e-9)

    def test_relabeling_invariance(self):
        rows, fit = fit_side(small_world(noise=0.1, seed=4), EXPORT)
        relabeled = [GravityDesignRow(r.focal_flow, r.offset, r.own_tariff, r.competitor_tariff_index,
                                      "g" + r.fe_industry_year[::-1], "p" + r.fe_partner_country[::-1],
                                      r.partner, r.product, r.year) for r in rows]
        other = fit_gravity(relabeled)
        assert (fit.beta1, fit.beta2) == pytest.approx((other.beta1, other.beta2), abs=1e-10)

    def test_no_variation(self):
        w = small_world(tariff_volatility=0.0)
        assert not w.tariffs
        with pytest.raises(NoVariationError):
            fit_side(w, EXPORT)

    def test_residual_is_fe_sum_on_exact_data(self):
        rows, fit = fit_side(small_world(), EXPORT)
        pred = predict_all(fit, rows)
        diff = {(r.product, r.partner, r.year): r.focal_flow - pred[(r.product, r.partner, r.year)] for r in rows}
        for r in rows:
            expect = fit.fe_industry_year[r.fe_industry_year] + fit.fe_partner_country[r.fe_partner_country]
            assert diff[(r.product, r.partner, r.year)] == pytest.approx(expect, abs=1e-8)

    def test_json_round_trip(self, tmp_path):
        _, fit = fit_side(small_world(noise=0.1), IMPORT)
        fit.save(tmp_path / "f.json")
        assert GravityFit.load(tmp_path / "f.json") == fit

    def test_singletons_dropped(self):
        rows, _ = fit_side(small_world(noise=0.1), EXPORT)
        lone = GravityDesignRow(1.0, 0.5, 0.1, 0.05, "solo|2000", rows[0].fe_partner_country, "P00", "solo", 2000)
        fit = fit_gravity(rows + [lone])
        assert fit.dropped_singletons == 1 and fit.n_obs == len(rows)

    def test_zero_focal_flow_is_predicted_not_fitted(self):
        w = small_world(noise=0.1)
        j = w.partners[0]
        w.flows = [TradeFlowRecord(f.exporter, f.importer, f.product, f.year, 0.0)
                   if (f.exporter, f.importer, f.year) == ("US", j, 2000) and f.product == w.products[0] else f
                   for f in w.flows]
        rows = build_design_rows(w.flows, w.tariffs, w.competitors)
        nan_rows = [r for r in rows if math.isnan(r.focal_flow)]
        assert len(nan_rows) == 1
        fit = fit_gravity(rows)
        assert math.isfinite(predict_flow(fit, nan_rows[0]))

    def test_profile_sigma_prefers_truth_on_exact_data(self):
        w = small_world()
        best, rss = profile_sigma(w.flows, w.tariffs, w.competitors, grid=[2.0, 3.0, 5.0])
        assert best == 3.0 and rss[3.0] == pytest.approx(0.0, abs=1e-12)


class TestPredict:
    def fit(self, b1=-2.0, b2=2.0):
        return GravityFit(b1, b2, 0.1, 0.1, {}, {}, 1.0, 10, 5, 1, 0.0)

    def row(self, own=0.1, lt=0.05, offset=3.0, prod="p", partner="j", year=2000):
        return GravityDesignRow(0.0, offset, own, lt, f"{prod}|{year}", partner, partner, prod, year)

    def test_formula(self):
        assert predict_flow(self.fit(0.0, 0.0), self.row()) == 3.0
        assert predict_flow(self.fit(), self.row(own=0.0)) == pytest.approx(3.0 + 2.0 * 0.05)

    def test_monotone_in_own_tariff(self):
        vals = [predict_flow(self.fit(), self.row(own=t)) for t in np.linspace(0, 0.5, 10)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_aggregation(self):
        pred = {("p", "j1", 2000): math.log(3.0), ("p", "j2", 2000): math.log(7.0)}
        assert aggregate_predicted(pred) == pytest.approx({("p", 2000): 10.0})
        one = {("p", "j", 2000): 1.3}
        assert aggregate_predicted(one, CrosswalkTable({"p": (("p", 1.0),)})) == pytest.approx(
            {("p", 2000): math.exp(1.3)})

    def test_crosswalk_split(self):
        pred = {("a", "j", 2000): math.log(10.0), ("b", "j", 2000): math.log(20.0), ("c", "j", 2000): 0.0}
        xw = CrosswalkTable({"a": (("g1", 1.0),), "b": (("g1", 0.5), ("g2", 0.5)), "c": (("g2", 1.0),)})
        assert aggregate_predicted(pred, xw) == pytest.approx({("g1", 2000): 20.0, ("g2", 2000): 11.0})

    def test_partner_filter(self):
        pred = {("p", "j1", 2000): 0.0, ("p", "j2", 2000): 0.0}
        assert aggregate_predicted(pred, partners={"j1"}) == pytest.approx({("p", 2000): 1.0})


def test_import_side_uses_reverse_flows():
    flows = [TradeFlowRecord("J", "US", "p", 2000, 4.0), TradeFlowRecord("J", "C1", "p", 2000, 2.0),
             TradeFlowRecord("J", "C2", "p", 2000, 6.0), TradeFlowRecord("US", "J", "p", 2000, 99.0)]
    tariffs = [TariffRecord("US", "J", "p", 2000, 1.1), TariffRecord("C2", "J", "p", 2000, 1.2)]
    (r,) = build_design_rows(flows, tariffs, ["C1", "C2"], side=IMPORT)
    assert r.focal_flow == pytest.approx(math.log(4.0))
    assert r.offset == pytest.approx(math.log(8.0))
    assert r.own_tariff == pytest.approx(math.log(1.1))
    assert r.competitor_tariff_index == pytest.approx(0.5 * math.log(0.25 + 0.75 * 1.2 ** 2))
