import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from liqforecast.geo import pairwise_km
from liqforecast.ingest import CaseHistory
from liqforecast.raster import GeoGrid, GridSpec
from liqforecast.stats import (DEFAULT_LEVEL, DEFAULT_N_DRAWS, EvaluationSample, ModelScore,
                               bootstrap_ci, brier, brier_score, build_samples, cluster_stratify, cohens_d,
                               compare_models, inverse_distance_weights, ks_two_sample, morans_i,
                               render_table, rook_weights, sample_negative_cells, samples_morans_i)

floats01 = st.floats(0, 1, allow_nan=False)


class TestBrier:
    def test_anchors(self):
        assert brier_score([1, 0, 1], [1, 0, 1]) == 0
        assert brier_score([0.5] * 7, [1, 0, 1, 1, 0, 0, 1]) == 0.25
        assert abs(brier_score([0.8, 0.2], [1, 0]) - 0.04) <= 1e-12

    @given(st.lists(st.tuples(floats01, st.integers(0, 1)), min_size=1, max_size=40))
    def test_matches_oracle_and_complement(self, pairs):
        p = [a for a, _ in pairs]
        o = [b for _, b in pairs]
        bs = brier_score(p, o)
        assert bs == pytest.approx(oracles.brier(p, o), abs=1e-12)
        assert 0 <= bs <= 1
        assert brier_score([1 - v for v in p], [1 - v for v in o]) == pytest.approx(bs, abs=1e-12)

    @pytest.mark.parametrize("p,o", [([1.2], [1]), ([0.5], [2]), ([0.1, 0.2], [1]), ([], [])])
    def test_rejects(self, p, o):
        with pytest.raises(ValueError):
            brier_score(p, o)

    def test_samples(self):
        s = [EvaluationSample("a", 0, 0, 0.8, 1), EvaluationSample("b", 0, 0, 0.2, 0)]
        assert brier(s) == pytest.approx(0.04)
        assert s[0].squared_error == pytest.approx(0.04)


class TestBootstrap:
    def test_defaults(self):
        assert DEFAULT_N_DRAWS == 10_000 and DEFAULT_LEVEL == 0.99
        r = bootstrap_ci(np.arange(20.0))
        assert r.draws.size == 10_000

    def test_nested_levels(self, rng):
        x = rng.random(30)
        a = bootstrap_ci(x, level=0.99, seed=3)
        b = bootstrap_ci(x, level=0.90, seed=3)
        assert a.lower <= b.lower <= x.mean() <= b.upper <= a.upper

    def test_constant(self):
        r = bootstrap_ci(np.full(10, 0.3))
        assert r.lower == pytest.approx(0.3) and r.upper == pytest.approx(0.3)

    def test_deterministic_across_jobs(self, rng):
        x = rng.random(25)
        a = bootstrap_ci(x, seed=5)
        b = bootstrap_ci(x, seed=5, n_jobs=4)
        np.testing.assert_array_equal(a.draws, b.draws)
        assert not np.array_equal(a.draws, bootstrap_ci(x, seed=6).draws)

    def test_percentile_matches_oracle(self, rng):
        r = bootstrap_ci(rng.random(15), n_draws=2000, level=0.9, seed=1)
        d = r.draws.tolist()
        assert r.lower == pytest.approx(oracles.quantile_type7(d, 0.05), abs=1e-12)
        assert r.upper == pytest.approx(oracles.quantile_type7(d, 0.95), abs=1e-12)

    def test_cluster_draws_are_pooled_means(self):
        x = np.array([0.0, 0.0, 1.0, 1.0, 1.0])
        r = bootstrap_ci(x, n_draws=500, cluster_labels=[0, 0, 1, 1, 1])
        assert r.clustered
        # possible pooled means: all cluster 0, all cluster 1, or 3/5
        assert set(np.round(r.draws, 12).tolist()) <= {0.0, 1.0, 0.6}

    def test_errors(self):
        with pytest.raises(ValueError):
            bootstrap_ci([1.0])
        with pytest.raises(ValueError):
            bootstrap_ci([1.0, 2.0], level=1.0)
        with pytest.raises(ValueError):
            bootstrap_ci([1.0, 2.0, 3.0], cluster_labels=[0, 0, 0])

    def test_coverage(self):
        covered = 0
        rng = np.random.default_rng(2024)
        for rep in range(100):
            x = rng.beta(2, 5, size=60)
            r = bootstrap_ci(x, seed=rep)
            covered += r.lower <= 2 / 7 <= r.upper
        assert covered >= 95


class TestMoran:
    def test_checkerboard(self):
        x = [1.0, 0.0, 0.0, 1.0]
        w = rook_weights(2, 2)
        assert morans_i(x, w) == pytest.approx(-1.0, abs=1e-12)
        assert morans_i(x, w) == pytest.approx(oracles.morans_i(x, w.tolist()), abs=1e-12)

    def test_gradient(self):
        x = np.add.outer(np.arange(6.0), np.arange(6.0)).ravel()
        assert morans_i(x, rook_weights(6, 6)) > 0.5

    def test_constant_is_none(self):
        assert morans_i(np.ones(5), np.ones((5, 5))) is None

    @given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=9, max_size=9))
    def test_oracle_rook(self, vals):
        x = np.array(vals)
        if np.ptp(x) < 1e-6:
            return
        w = rook_weights(3, 3)
        assert morans_i(x, w) == pytest.approx(oracles.morans_i(vals, w.tolist()), rel=1e-9, abs=1e-9)

    def test_iid_noise_near_zero(self):
        rng = np.random.default_rng(7)
        lon = rng.uniform(-123, -122, 150)
        lat = rng.uniform(45, 46, 150)
        w = inverse_distance_weights(lon, lat, cutoff_km=20)
        small = sum(abs(morans_i(rng.normal(size=150), w)) < 0.2 for _ in range(100))
        assert small >= 95

    def test_weights(self):
        lon = np.array([0.0, 0.1, 0.2, 5.0])
        lat = np.zeros(4)
        w = inverse_distance_weights(lon, lat)
        assert np.all(np.diag(w) == 0) and np.all(w[3] == 0)
        np.testing.assert_allclose(w[:3].sum(axis=1), 1.0)
        raw = inverse_distance_weights(lon, lat, row_standardize=False)
        d = pairwise_km(lon, lat)
        assert raw[0, 1] == pytest.approx(1 / d[0, 1])


def blobs(n_each=10, seed=0):
    rng = np.random.default_rng(seed)
    lon = np.concatenate([rng.normal(-122.5, 0.02, n_each), rng.normal(-120.0, 0.02, n_each)])
    lat = np.concatenate([rng.normal(45.5, 0.02, n_each), rng.normal(46.5, 0.02, n_each)])
    return lon, lat


class TestClustering:
    def test_two_blobs(self):
        lon, lat = blobs()
        lab = cluster_stratify(lon, lat, 2)
        assert lab.tolist() == [0] * 10 + [1] * 10

    def test_n_equals_n(self):
        lon, lat = blobs(4)
        assert sorted(cluster_stratify(lon, lat, 8).tolist()) == list(range(8))

    def test_default_count(self):
        lon, lat = blobs(30)
        assert len(set(cluster_stratify(lon, lat).tolist())) == 6
        lon, lat = blobs(5)
        assert len(set(cluster_stratify(lon, lat).tolist())) == 5

    def test_permutation_invariant(self, rng):
        lon, lat = rng.uniform(-123, -121, 25), rng.uniform(45, 47, 25)
        lab = cluster_stratify(lon, lat, 5)
        perm = rng.permutation(25)
        lab2 = cluster_stratify(lon[perm], lat[perm], 5)
        parts = lambda lab_, idx: {frozenset(idx[lab_ == k].tolist()) for k in set(lab_.tolist())}
        assert parts(lab, np.arange(25)) == parts(lab2, perm)

    def test_complete_linkage_diameter(self):
        # chain of points: complete linkage keeps cluster diameters small
        lon = np.linspace(-122, -121, 12)
        lat = np.full(12, 45.0)
        lab = cluster_stratify(lon, lat, 3)
        d = pairwise_km(lon, lat)
        diam = [d[np.ix_(lab == k, lab == k)].max() for k in range(3)]
        assert max(diam) < 0.5 * d.max()

    def test_bad_count(self):
        with pytest.raises(ValueError):
            cluster_stratify([0, 1, 2], [0, 0, 0], 4)


class TestDistributions:
    def test_ks_cases(self):
        assert ks_two_sample([1, 2, 3], [1, 2, 3]) == 0
        assert ks_two_sample([1, 2], [5, 6]) == 1
        assert ks_two_sample([1, 2, 3], [2, 3, 4]) == pytest.approx(1 / 3, abs=1e-15)

    @given(st.lists(st.integers(0, 20), min_size=1, max_size=25),
           st.lists(st.integers(0, 20), min_size=1, max_size=25))
    def test_ks_oracle_and_symmetry(self, a, b):
        k = ks_two_sample(a, b)
        assert k == pytest.approx(oracles.ks_sweep(a, b), abs=1e-12)
        assert k == ks_two_sample(b, a)

    @given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=3, max_size=20),
           st.lists(st.floats(-100, 100, allow_nan=False), min_size=3, max_size=20),
           st.floats(0.01, 100))
    def test_d_antisymmetry_and_scale(self, a, b, c):
        d = cohens_d(a, b)
        if d is None:
            return
        # guard against pooled SD below float resolution of the mean difference
        if np.sqrt(np.var(a) + np.var(b)) < 1e-6:
            return
        assert cohens_d(b, a) == pytest.approx(-d, abs=1e-12)
        assert cohens_d(np.array(a) * c, np.array(b) * c) == pytest.approx(d, rel=1e-9, abs=1e-12)
        assert d == pytest.approx(oracles.cohens_d(a, b), rel=1e-9, abs=1e-9)

    def test_d_zero_sd(self):
        assert cohens_d([1, 1], [1, 1]) is None


SPEC = GridSpec(40, 40, 0.05, -123.5, 44.5)


def cases(rng, n_pos=9, n_neg=15):
    lon = rng.uniform(-123.4, -121.6, n_pos + n_neg)
    lat = rng.uniform(44.6, 46.4, n_pos + n_neg)
    obs = [1] * n_pos + [0] * n_neg
    return [CaseHistory(f"S{i}", float(a), float(b), o) for i, (a, b, o) in enumerate(zip(lon, lat, obs))]


def oracle_grid(case_list, p_pos=1.0, p_neg=0.0, fill=0.3):
    v = np.full(SPEC.shape, fill)
    for c in case_list:
        v[SPEC.locate(c.lon, c.lat)] = p_pos if c.observed else p_neg
    return GeoGrid.from_array(SPEC, v)


class TestCompare:
    def test_perfect_oracle(self, rng):
        cs = cases(rng)
        rep = compare_models(cs, {"Oracle": oracle_grid(cs)}, "Base", GeoGrid.full(SPEC, 0.5),
                             n_draws=2000)
        row = rep.rows[1]
        assert (row.mean_bs, row.ci_lower, row.ci_upper) == (0, 0, 0)
        assert rep.rows[0].mean_bs == 0.25 and rep.n_samples == 24

    def test_identical_models(self, rng):
        cs = cases(rng)
        g = oracle_grid(cs, 0.7, 0.2)
        rep = compare_models(cs, {"Same": g}, "Base", g, n_draws=2000)
        assert rep.rows[1].ks == 0 and rep.rows[1].cohens_d == 0
        assert "0.00" in rep.to_table()

    def test_dropped_sites(self, rng):
        cs = cases(rng) + [CaseHistory("off", 10.0, 10.0, 1)]
        rep = compare_models(cs, {"C": GeoGrid.full(SPEC, 0.4)}, "B", GeoGrid.full(SPEC, 0.5),
                             n_draws=500)
        assert rep.dropped_sites == ["off"] and rep.n_samples == 24

    def test_stratification_boundary(self, rng):
        cs = cases(rng)
        cand = oracle_grid(cs, 0.6, 0.1)
        base = oracle_grid(cs, 0.3, 0.4)
        i_max = max(samples_morans_i(build_samples(cs, g)) for g in (cand, base))
        kw = dict(n_draws=500, seed=2)
        above = compare_models(cs, {"C": cand}, "B", base, stratify_threshold=i_max - 1e-9, **kw)
        at = compare_models(cs, {"C": cand}, "B", base, stratify_threshold=i_max, **kw)
        assert above.stratified and above.n_clusters == 5 and above.rows[0].ci_lower >= 0
        assert not at.stratified and at.n_clusters is None

    def test_clustered_errors_engage_default(self):
        # two distant groups: one predicted badly, one well
        cs = [CaseHistory(f"A{i}", -123.3 + 0.01 * i, 44.7, 1) for i in range(12)]
        cs += [CaseHistory(f"B{i}", -121.7 + 0.01 * i, 46.3, 1) for i in range(12)]
        v = np.full(SPEC.shape, 0.95)
        for c in cs[:12]:
            v[SPEC.locate(c.lon, c.lat)] = 0.05 + 0.01 * (int(c.site_id[1:]) % 3)
        rep = compare_models(cs, {"C": GeoGrid.from_array(SPEC, v)}, "B", GeoGrid.full(SPEC, 0.5),
                             n_draws=500)
        assert rep.rows[1].morans_i > 0.3 and rep.stratified

    def test_report_json(self, rng):
        cs = cases(rng)
        rep = compare_models(cs, {"C": GeoGrid.full(SPEC, 0.4)}, "B", GeoGrid.full(SPEC, 0.5),
                             n_draws=500)
        d = rep.to_dict()
        assert d["baseline"] == "B" and len(d["rows"]) == 2 and "stratified" in d


def test_render_reference_row():
    rows = [ModelScore("Baseline", 0.393, 0.371, 0.414, 24, is_baseline=True),
            ModelScore("Ensemble", 0.146, 0.138, 0.155, 24, ks=0.57, cohens_d=-1.59)]
    text = render_table(rows)
    lines = text.splitlines()
    assert [c.strip() for c in lines[0].split("|")] == ["Model", "Mean BS", "CI", "KS", "Cohen's d"]
    ens = [c.strip() for c in lines[3].split("|")]
    assert ens == ["Ensemble", "0.146", "0.138 - 0.155", "0.57", "-1.59"]
    assert [c.strip() for c in lines[2].split("|")][3:] == ["-", "-"]
    assert lines[-1] == "CI level: 99%"


def test_render_negative_zero():
    text = render_table([ModelScore("M", -0.0, -0.0001, 0.0, 3, ks=0.0, cohens_d=-0.001)])
    assert "-0.00" not in text and "-0.000" not in text


def test_negative_cells(rng):
    g = GeoGrid.full(GridSpec(5, 5, 0.1, 0, 0), 1.0)
    pos = [g.spec.cell_center(r, c) for r in range(5) for c in range(4)]
    neg = sample_negative_cells(g, pos, 5, seed=1)
    assert sorted(neg) == sorted(g.spec.cell_center(r, 4) for r in range(5))
    with pytest.raises(ValueError):
        sample_negative_cells(g, pos, 6)
