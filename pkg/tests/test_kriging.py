import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from liqforecast.geo import KM_PER_DEGREE, haversine_km
from liqforecast.kriging import (ResidualSite, SemivariogramModel, apply_kriging_update,
                                 empirical_semivariogram, fit_exponential_model, krige_at,
                                 load_residual_sites, residuals_to_csv, variogram_grid)
from liqforecast.raster import GeoGrid, GridSpec


def km_east(km, lat=0.0):
    return km / (KM_PER_DEGREE * math.cos(math.radians(lat)))


def site_cloud(n, seed=0, lon0=-122.5, lat0=45.5, span=0.4):
    rng = np.random.default_rng(seed)
    return [ResidualSite(lon0 + rng.uniform(-span, span), lat0 + rng.uniform(-span, span),
                         float(rng.normal()), f"s{i}") for i in range(n)]


def test_haversine_matches_oracle():
    for args in [(0, 0, 0.01, 0), (-122.5, 45.5, -121.9, 46.1), (10, -30, 170, 40)]:
        assert haversine_km(*args) == pytest.approx(oracles.haversine_km(*args), rel=1e-12)


class TestEmpirical:
    def test_two_sites(self):
        s = [ResidualSite(0, 0, 1.0), ResidualSite(km_east(10.0), 0, 3.0)]
        emp = empirical_semivariogram(s)
        assert len(emp) == 1
        lag, gamma, m = emp[0]
        assert gamma == pytest.approx(2.0) and m == 1 and lag == pytest.approx(10.0, rel=1e-9)

    def test_identical_residuals(self):
        s = [ResidualSite(x.lon, x.lat, 0.7) for x in site_cloud(20)]
        assert all(g == 0 for _, g, _ in empirical_semivariogram(s))

    def test_pair_counts(self):
        s = site_cloud(25)
        d = max(haversine_km(a.lon, a.lat, b.lon, b.lat) for a in s for b in s)
        emp = empirical_semivariogram(s, max_lag_km=d)
        assert sum(m for *_, m in emp) == 25 * 24 // 2
        emp_half = empirical_semivariogram(s)
        n_half = sum(1 for i, a in enumerate(s) for b in s[i + 1:]
                     if haversine_km(a.lon, a.lat, b.lon, b.lat) <= d / 2)
        assert sum(m for *_, m in emp_half) == n_half

    def test_coincident(self):
        with pytest.raises(ValueError):
            empirical_semivariogram([ResidualSite(1, 1, 0.0), ResidualSite(1, 1, 2.0)])


class TestFit:
    def test_round_trip(self):
        h = np.linspace(1, 60, 30)
        g = 4.0 * (1 - np.exp(-3 * h / 20.0))
        m = fit_exponential_model([(a, b, 10) for a, b in zip(h, g)])
        assert abs(m.c0) <= 0.05 * m.sill
        assert m.c1 == pytest.approx(4.0, rel=0.05)
        assert m.a_km == pytest.approx(20.0, rel=0.05)

    def test_dominates_grid(self, rng):
        h = np.linspace(1, 50, 20)
        g = 1.0 + 3.0 * (1 - np.exp(-3 * h / 15.0)) + rng.normal(0, 0.2, h.size)
        w = rng.integers(1, 40, h.size).astype(float)
        m = fit_exponential_model(list(zip(h, g, w)))
        wsse = lambda c0, c1, a: np.sum(w * (g - c0 - c1 * (1 - np.exp(-3 * h / a))) ** 2)
        c0s, c1s, As = variogram_grid(h, g)
        best = min(wsse(a, b, c) for a in c0s for b in c1s for c in As)
        assert wsse(m.c0, m.c1, m.a_km) <= best + 1e-12

    def test_fallback(self):
        # five sites on a line 2 km apart, residuals with variance 1
        r = np.array([-1.0, 1.0, -1.0, 1.0, 0.0])
        r = (r - r.mean()) / r.std()
        s = [ResidualSite(km_east(2.0 * i), 0.0, float(v)) for i, v in enumerate(r)]
        m = fit_exponential_model([], s)
        assert (m.c0, m.c1) == pytest.approx((0.1, 0.9))
        assert m.a_km == pytest.approx(20.0, rel=1e-9)

    def test_degenerate(self):
        s = [ResidualSite(x.lon, x.lat, 1.5) for x in site_cloud(40)]
        m = fit_exponential_model(empirical_semivariogram(s), s)
        assert m.degenerate and m.c0 == 0 and m.c1 > 0

    def test_too_few_bins(self):
        with pytest.raises(ValueError):
            fit_exponential_model([(1.0, 1.0, 3), (2.0, 1.5, 3)])


class TestKrige:
    def test_single_site_closed_form(self):
        m = SemivariogramModel(0.0, 1.0, 30.0)
        s = [ResidualSite(0.0, 0.0, 2.0)]
        est, var = krige_at(km_east(10.0), 0.0, s, m)
        assert est == pytest.approx(2 * math.exp(-1), rel=1e-9)
        assert est == pytest.approx(0.7358, abs=1e-4)
        assert var == pytest.approx(1 - math.exp(-2), rel=1e-9)

    def test_exact_at_sites(self):
        m = SemivariogramModel(0.0, 2.0, 15.0)
        s = site_cloud(30, seed=4)
        for x in s:
            est, var = krige_at(x.lon, x.lat, s, m)
            assert abs(est - x.residual) <= 1e-8
            assert var <= 1e-8 * m.sill

    def test_matches_dense_oracle(self):
        m = SemivariogramModel(0.3, 1.7, 60.0)
        s = site_cloud(12, seed=8, span=0.2)
        q = (-122.47, 45.52)
        est, var = krige_at(*q, s, m)
        ref_est, ref_var = oracles.simple_krige([(x.lon, x.lat, x.residual) for x in s], q,
                                                m.c0, m.c1, m.a_km)
        assert est == pytest.approx(ref_est, rel=1e-9, abs=1e-12)
        assert var == pytest.approx(ref_var, rel=1e-9, abs=1e-12)

    def test_far_field(self):
        m = SemivariogramModel(0.2, 1.0, 10.0)
        s = site_cloud(10, seed=1, span=0.05)
        est, var = krige_at(-110.0, 45.5, s, m)
        assert est == 0.0 and var == pytest.approx(m.sill)

    def test_decay_bound(self):
        m = SemivariogramModel(0.0, 1.0, 40.0)
        s = site_cloud(15, seed=2, span=0.1)
        rmax = max(abs(x.residual) for x in s)
        for dlon in (0.3, 0.5, 0.8):
            q = (-122.5 + dlon, 45.5)
            hmin = min(haversine_km(*q, x.lon, x.lat) for x in s)
            est, _ = krige_at(*q, s, m, max_radius_km=1e9)
            assert abs(est) <= rmax * len(s) * math.exp(-3 * hmin / m.a_km)

    def test_duplicates_averaged(self):
        m = SemivariogramModel(0.0, 1.0, 20.0)
        s = [ResidualSite(0, 0, 1.0), ResidualSite(0, 0, 3.0), ResidualSite(0.2, 0, -1.0)]
        est, _ = krige_at(0.0, 0.0, s, m)
        assert est == pytest.approx(2.0, abs=1e-8)

    @given(st.floats(0.0, 2.0), st.floats(0.1, 3.0), st.floats(5.0, 50.0))
    def test_influence_monotone_along_ray(self, c0, c1, a):
        m = SemivariogramModel(c0, c1, a)
        s = [ResidualSite(0.0, 0.0, 1.0)]
        infl = [1 - krige_at(km_east(d), 0.0, s, m)[1] / m.sill for d in np.linspace(0, 3 * a, 25)]
        assert all(0 <= v <= 1 for v in infl)
        assert all(b <= a_ + 1e-12 for a_, b in zip(infl, infl[1:]))


class TestUpdate:
    spec = GridSpec(20, 20, 0.01, -122.6, 45.4)

    def ml(self):
        lon, lat = self.spec.cell_centers()
        return GeoGrid.from_array(self.spec, 5 + 10 * (lon + 122.6) + 3 * (lat - 45.4))

    def test_zero_residuals(self):
        ml = self.ml()
        s = [ResidualSite(*self.spec.cell_center(5, 5), 0.0), ResidualSite(*self.spec.cell_center(12, 3), 0.0)]
        up = apply_kriging_update(ml, s, SemivariogramModel(0.1, 1.0, 5.0))
        assert up.updated == ml
        assert up.influence.values[5, 5] > 0.5

    def test_site_cell_exact(self):
        ml = self.ml()
        s = [ResidualSite(*self.spec.cell_center(4, 4), 0.75), ResidualSite(*self.spec.cell_center(15, 10), -0.5)]
        up = apply_kriging_update(ml, s, SemivariogramModel(0.0, 1.0, 3.0))
        assert up.updated.values[4, 4] == pytest.approx(ml.values[4, 4] + 0.75, abs=1e-8)
        assert up.influence.values[4, 4] == pytest.approx(1.0, abs=1e-8)

    def test_far_cells_unchanged(self):
        ml = self.ml()
        s = [ResidualSite(*self.spec.cell_center(0, 0), 4.0)]
        m = SemivariogramModel(0.0, 1.0, 1.0)
        up = apply_kriging_update(ml, s, m)
        assert up.updated.values[19, 19] == ml.values[19, 19]
        assert up.influence.values[19, 19] == 0.0
        low = up.influence.values < 1e-6
        assert np.array_equal(up.updated.values[low], ml.values[low])

    def test_clamp_counted(self):
        ml = GeoGrid.full(self.spec, 0.5)
        s = [ResidualSite(*self.spec.cell_center(10, 10), -3.0)]
        up = apply_kriging_update(ml, s, SemivariogramModel(0.0, 1.0, 2.0), floor=0.0)
        assert up.n_clamped > 0 and up.updated.valid_values().min() == 0.0

    def test_nodata_passes(self):
        d = self.ml().masked()
        d[3, 3] = np.nan
        ml = GeoGrid.from_array(self.spec, d)
        up = apply_kriging_update(ml, [ResidualSite(*self.spec.cell_center(3, 3), 1.0)],
                                  SemivariogramModel(0.0, 1.0, 2.0))
        assert not up.updated.valid[3, 3] and not up.influence.valid[3, 3]

    def test_empty_sites(self):
        ml = self.ml()
        up = apply_kriging_update(ml, [], None)
        assert up.updated == ml and np.all(up.influence.valid_values() == 0)


def test_residual_csv_round_trip():
    text = residuals_to_csv([("c1", -122.1, 45.2, 10.0, 7.5), ("c2", -122.0, 45.3, 3.0, 4.0)])
    s = load_residual_sites(text)
    assert [x.residual for x in s] == [2.5, -1.0]
    assert load_residual_sites("") == []
