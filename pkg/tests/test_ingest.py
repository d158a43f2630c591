import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from liqforecast.errors import InputError
from liqforecast.ingest import (load_assets, load_case_histories, load_cpt_csv, load_network,
                                parse_shakemap_grid)


def shakemap(rows, units="%g", magnitude='magnitude="7.1"', fields=None, nlon=2, nlat=2,
             extent=(-122.0, 45.0, -121.9, 45.1)):
    fields = fields or [("LON", "dd"), ("LAT", "dd"), ("PGA", units)]
    fxml = "".join(f'<grid_field index="{i + 1}" name="{n}" units="{u}"/>'
                   for i, (n, u) in enumerate(fields))
    data = "\n".join(" ".join(str(v) for v in r) for r in rows)
    return (f'<shakemap_grid xmlns="http://earthquake.usgs.gov/eqcenter/shakemap" '
            f'event_id="ev1"><event {magnitude} event_description="test"/>'
            f'<grid_specification lon_min="{extent[0]}" lat_min="{extent[1]}" '
            f'lon_max="{extent[2]}" lat_max="{extent[3]}" nlon="{nlon}" nlat="{nlat}"/>'
            f'{fxml}<grid_data>\n{data}\n</grid_data></shakemap_grid>')


ROWS = [(-122.0, 45.1, 10), (-121.9, 45.1, 20), (-122.0, 45.0, 30), (-121.9, 45.0, 40)]


class TestShakeMap:
    def test_fixture(self):
        ev = parse_shakemap_grid(shakemap(ROWS))
        assert ev.magnitude == 7.1
        assert ev.event_id == "ev1"
        g = ev.pga
        assert g.spec.n_rows == 2 and g.spec.n_cols == 2
        assert g.spec.cell_size_deg == pytest.approx(0.1)
        # row 0 is the northern row
        np.testing.assert_allclose(g.values, [[0.10, 0.20], [0.30, 0.40]], atol=1e-12)
        assert ev.msf == pytest.approx(6.9 * np.exp(-7.1 / 4) - 0.058)

    def test_placement_by_coordinates(self):
        shuffled = [ROWS[3], ROWS[0], ROWS[2], ROWS[1]]
        a = parse_shakemap_grid(shakemap(ROWS)).pga
        b = parse_shakemap_grid(shakemap(shuffled)).pga
        assert a == b

    def test_units_g_verbatim(self):
        rows = [(x, y, v / 100) for x, y, v in ROWS]
        g = parse_shakemap_grid(shakemap(rows, units="g")).pga
        np.testing.assert_allclose(g.values, [[0.10, 0.20], [0.30, 0.40]], atol=1e-12)

    def test_pga_absent(self):
        xml = shakemap([r[:2] + (1.0,) for r in ROWS], fields=[("LON", "dd"), ("LAT", "dd"), ("MMI", "")])
        with pytest.raises(InputError, match="PGA field absent"):
            parse_shakemap_grid(xml)

    def test_count_mismatch(self):
        with pytest.raises(InputError, match="expected 4 grid nodes, found 3"):
            parse_shakemap_grid(shakemap(ROWS[:3]))

    def test_missing_magnitude(self):
        with pytest.raises(InputError, match="magnitude"):
            parse_shakemap_grid(shakemap(ROWS, magnitude=""))

    def test_magnitude_out_of_range(self):
        with pytest.raises(InputError):
            parse_shakemap_grid(shakemap(ROWS, magnitude='magnitude="3.0"'))

    def test_extra_columns(self):
        fields = [("LON", "dd"), ("LAT", "dd"), ("MMI", ""), ("PGA", "%g"), ("PGV", "cms")]
        rows = [(x, y, 5.0, v, 9.0) for x, y, v in ROWS]
        g = parse_shakemap_grid(shakemap(rows, fields=fields)).pga
        assert g.values[1, 1] == pytest.approx(0.4)

    @given(st.integers(2, 6), st.integers(2, 6), st.randoms(use_true_random=False),
           st.lists(st.floats(0, 300, allow_nan=False), min_size=36, max_size=36))
    def test_every_value_matches_source_token(self, nlon, nlat, rnd, vals):
        lons = -122 + 0.05 * np.arange(nlon)
        lats = 45 + 0.05 * np.arange(nlat)
        rows = []
        k = 0
        for la in lats:
            for lo in lons:
                rows.append((round(lo, 4), round(la, 4), vals[k]))
                k += 1
        rnd.shuffle(rows)
        ev = parse_shakemap_grid(shakemap(rows, nlon=nlon, nlat=nlat,
                                          extent=(lons[0], lats[0], lons[-1], lats[-1])))
        for lo, la, v in rows:
            loc = ev.pga.spec.locate(lo, la)
            assert abs(ev.pga.values[loc] - v / 100) <= 1e-9


CPT = "cpt_id,lon,lat,gwt_depth\nC1,-122.5,45.5,1.5\nz,qc,fs\n{rows}"


class TestCpt:
    def test_three_rows(self):
        c = load_cpt_csv(CPT.format(rows="1,5000,50\n2,6000,60\n3,7000,70\n"))
        assert c.z.tolist() == [1, 2, 3] and c.qc.tolist() == [5000, 6000, 7000]
        assert c.gwt_depth == 1.5

    def test_duplicate_depth(self):
        with pytest.raises(InputError, match="duplicate depth 1.0"):
            load_cpt_csv(CPT.format(rows="1,5000,50\n1,6000,60\n3,7000,70\n"))

    def test_reordered(self):
        c = load_cpt_csv(CPT.format(rows="3,7000,70\n1,5000,50\n2,6000,60\n"))
        assert c.z.tolist() == [1, 2, 3]
        assert c.qc.tolist() == [5000, 6000, 7000]

    def test_qc_nonpositive_names_row(self):
        with pytest.raises(InputError, match=r"qc must be > 0 \(row z=2.0\)") as exc:
            load_cpt_csv(CPT.format(rows="1,5000,50\n2,0,60\n"))
        assert exc.value.line == 5

    def test_comments_skipped(self):
        c = load_cpt_csv("# site survey\n" + CPT.format(rows="1,5000,50\n# note\n2,6000,60\n"))
        assert len(c.z) == 2


class TestCaseHistories:
    def test_counts(self):
        lines = ["site_id,lon,lat,observed"]
        lines += [f"P{i},-122.{i},45.5,1" for i in range(9)]
        lines += [f"N{i},-122.{i},45.6,0" for i in range(15)]
        cases = load_case_histories("\n".join(lines) + "\n")
        assert len(cases) == 24
        assert sum(c.observed for c in cases) == 9

    @pytest.mark.parametrize("bad", ["0.5", "yes", "2", ""])
    def test_strict_observed(self, bad):
        text = f"site_id,lon,lat,observed\nA,-122,45,1\nB,-122,45,{bad}\n"
        with pytest.raises(InputError) as exc:
            load_case_histories(text)
        assert exc.value.line == 3


def test_assets():
    a = load_assets("id,lon,lat,category\nD1,-122.1,45.2,dam\n")
    assert a[0].id == "D1" and a[0].category == "dam"


class TestNetwork:
    def doc(self, coords, props=None):
        return json.dumps({"type": "FeatureCollection", "features": [
            {"type": "Feature", "properties": props if props is not None else {"id": "R1"},
             "geometry": {"type": "LineString", "coordinates": coords}}]})

    def test_three_vertices(self):
        segs = load_network(self.doc([[0, 0], [1, 0], [1, 1]]))
        assert len(segs) == 1 and len(segs[0].vertices) == 3 and segs[0].id == "R1"

    def test_too_few(self):
        with pytest.raises(InputError, match="at least 2"):
            load_network(self.doc([[0, 0]]))

    def test_consecutive_duplicates(self):
        with pytest.raises(InputError, match="duplicate vertex"):
            load_network(self.doc([[0, 0], [0, 0], [1, 1]]))

    def test_missing_id(self):
        with pytest.raises(InputError, match="id"):
            load_network(self.doc([[0, 0], [1, 1]], props={}))


def test_loaders_all_or_nothing():
    text = "id,lon,lat,category\nA,-122,45,x\nB,notanumber,45,y\n"
    with pytest.raises(InputError):
        load_assets(text)
