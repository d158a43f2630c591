"""Deterministic demo inputs for every command.

``write_demo(out_dir)`` regenerates the bundled ``data/demo`` directory byte
for byte. Run ``python -m liqforecast.synthetic OUT_DIR`` to refresh it.
"""

from __future__ import annotations

import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from .geotech import MI_TYPES, CptProfile, build_all_curves, curves_to_csv
from .raster import GeoGrid, GridSpec, write_esri_ascii

DEMO_SEED = 20240917
DEMO_SPEC = GridSpec(50, 50, 0.01, -122.9, 45.3)
DEMO_MAGNITUDE = 7.1
EPICENTER = (-122.62, 45.58)
N_RESIDUAL_SITES = 10
N_TRAIN_CPTS = 40
N_DEMO_CPTS = 5
N_POSITIVE = 9
N_NEGATIVE = 15
RASTER_STEM = {"LPI": "lpi", "LPI_ISH": "lpiish", "LSN": "lsn"}
# amplitude/rate ranges per MI type for the A/B rasters
_A_RANGE = {"LPI": (4.0, 30.0), "LPI_ISH": (3.0, 25.0), "LSN": (8.0, 45.0)}
_B_RANGE = {"LPI": (1.0, 4.0), "LPI_ISH": (0.8, 3.5), "LSN": (1.2, 5.0)}


def demo_path() -> Path:
    """Location of the bundled demo directory inside the installed package."""
    return Path(__file__).parent / "data" / "demo"


def _smooth_field(rng, spec, n_bumps=6):
    """Sum of Gaussian bumps scaled into [0, 1]."""
    lon, lat = spec.cell_centers()
    w, s, e, n = spec.extent
    out = np.zeros(spec.shape)
    for _ in range(n_bumps):
        cx, cy = rng.uniform(w, e), rng.uniform(s, n)
        r = rng.uniform(0.05, 0.2)
        out += rng.uniform(0.3, 1.0) * np.exp(-((lon - cx) ** 2 + (lat - cy) ** 2) / (2 * r * r))
    return (out - out.min()) / (out.max() - out.min())


def demo_model_rasters(seed: int = DEMO_SEED, spec: GridSpec = DEMO_SPEC):
    rng = np.random.default_rng(seed)
    out = {}
    for t in MI_TYPES:
        lo, hi = _A_RANGE[t]
        out[(t, "A")] = GeoGrid.from_array(spec, np.round(lo + (hi - lo) * _smooth_field(rng, spec), 4))
        lo, hi = _B_RANGE[t]
        out[(t, "B")] = GeoGrid.from_array(spec, np.round(lo + (hi - lo) * _smooth_field(rng, spec), 4))
    return out


def demo_mask(spec: GridSpec = DEMO_SPEC):
    """Steep corner block plus a small lake."""
    m = np.zeros(spec.shape)
    m[:6, 42:] = 1
    m[30:34, 10:15] = 1
    return GeoGrid.from_array(spec, m)


def shakemap_xml(event_id, magnitude, pga_pctg_fn, lon_min=-122.92, lat_min=45.28,
                 spacing=0.02, n=28, description="synthetic scenario"):
    """ShakeMap-style grid XML with LON, LAT and PGA (``%g``) fields.

    Nodes are listed north to south as real ShakeMaps do.
    """
    lons = lon_min + spacing * np.arange(n)
    lats = lat_min + spacing * np.arange(n)
    lines = []
    for lat in lats[::-1]:
        for lon in lons:
            lines.append(f"{lon:.4f} {lat:.4f} {pga_pctg_fn(lon, lat):.4f}")
    return (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<shakemap_grid xmlns="http://earthquake.usgs.gov/eqcenter/shakemap" '
        f'event_id="{event_id}" shakemap_version="1">\n'
        f'<event event_id="{event_id}" magnitude="{magnitude}" '
        f'lat="{EPICENTER[1]}" lon="{EPICENTER[0]}" event_description="{description}"/>\n'
        f'<grid_specification lon_min="{lons[0]:.4f}" lat_min="{lats[0]:.4f}" '
        f'lon_max="{lons[-1]:.4f}" lat_max="{lats[-1]:.4f}" '
        f'nominal_lon_spacing="{spacing}" nominal_lat_spacing="{spacing}" nlon="{n}" nlat="{n}"/>\n'
        '<grid_field index="1" name="LON" units="dd"/>\n'
        '<grid_field index="2" name="LAT" units="dd"/>\n'
        '<grid_field index="3" name="PGA" units="%g"/>\n'
        "<grid_data>\n" + "\n".join(lines) + "\n</grid_data>\n</shakemap_grid>\n"
    )


def _attenuation(lon, lat):
    dx = (lon - EPICENTER[0]) * 111.195 * np.cos(np.radians(lat))
    dy = (lat - EPICENTER[1]) * 111.195
    return 55.0 * np.exp(-np.hypot(dx, dy) / 25.0) + 8.0


def _write_csv(rows):
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def demo_cpts(seed: int = DEMO_SEED, n: int = N_TRAIN_CPTS, spec: GridSpec = DEMO_SPEC):
    """Synthetic CPT soundings with loose sand lenses of varying depth."""
    rng = np.random.default_rng([seed, 1])
    w, s, e, nn = spec.extent
    out = []
    z = np.round(np.arange(0.1, 15.01, 0.1), 2)
    for i in range(n):
        lon = round(float(rng.uniform(w + 0.02, e - 0.02)), 5)
        lat = round(float(rng.uniform(s + 0.02, nn - 0.02)), 5)
        gwt = round(float(rng.uniform(0.5, 4.0)), 2)
        base = rng.uniform(6000, 12000)
        lens_top = rng.uniform(1.0, 8.0)
        lens_thick = rng.uniform(1.0, 5.0)
        lens_qc = rng.uniform(1500, 5000)
        qc = base + 400 * z
        in_lens = (z >= lens_top) & (z <= lens_top + lens_thick)
        qc = np.where(in_lens, lens_qc + 100 * z, qc)
        qc = np.round(qc * np.exp(rng.normal(0, 0.05, z.size)), 1)
        fs = np.round(0.01 * qc, 2)
        out.append(CptProfile(f"CPT{i:03d}", lon, lat, gwt, z, qc, fs))
    return out


def cpt_csv(cpt: CptProfile) -> str:
    rows = [["cpt_id", "lon", "lat", "gwt_depth"],
            [cpt.cpt_id, repr(cpt.lon), repr(cpt.lat), repr(cpt.gwt_depth)],
            ["z", "qc", "fs"]]
    rows += [[repr(float(a)), repr(float(b)), repr(float(c))] for a, b, c in zip(cpt.z, cpt.qc, cpt.fs)]
    return _write_csv(rows)


def feature_table_csv(cpts, model_rasters, seed: int = DEMO_SEED):
    """Features: elevation-like, distance-to-river-like and water-table proxies."""
    rng = np.random.default_rng([seed, 2])
    rows = [["cpt_id", "lon", "lat", "elev", "dist_river", "gwt_proxy", "noise"]]
    for c in cpts:
        elev = 50 + 200 * (c.lat - 45.3) + rng.normal(0, 2)
        river = abs(c.lon + 122.65) * 111.195
        rows.append([c.cpt_id, repr(c.lon), repr(c.lat), f"{elev:.3f}", f"{river:.3f}",
                     f"{c.gwt_depth + rng.normal(0, 0.3):.3f}", f"{rng.normal():.3f}"])
    return _write_csv(rows)


def residual_sites_csv(model_rasters, seed: int = DEMO_SEED, n: int = N_RESIDUAL_SITES):
    """Residuals for the LPI amplitude raster at ``n`` sites."""
    rng = np.random.default_rng([seed, 3])
    grid = model_rasters[("LPI", "A")]
    spec = grid.spec
    rows = [["cpt_id", "lon", "lat", "target", "ml_prediction", "residual"]]
    for i in range(n):
        r, c = int(rng.integers(8, spec.n_rows - 8)), int(rng.integers(8, spec.n_cols - 8))
        lon, lat = spec.cell_center(r, c)
        pred = float(grid.values[r, c])
        target = round(max(0.0, pred + rng.normal(0, 3.0)), 4)
        rows.append([f"R{i:02d}", f"{lon:.5f}", f"{lat:.5f}", repr(target), repr(pred),
                     repr(round(target - pred, 4))])
    return _write_csv(rows)


def case_history_csv(seed: int = DEMO_SEED, spec: GridSpec = DEMO_SPEC):
    """24 located outcomes, positives clustered near the epicenter."""
    rng = np.random.default_rng([seed, 4])
    rows = [["site_id", "lon", "lat", "observed"]]
    w, s, e, n = spec.extent
    for i in range(N_POSITIVE):
        lon = EPICENTER[0] + rng.normal(0, 0.05)
        lat = EPICENTER[1] + rng.normal(0, 0.05)
        rows.append([f"S{i:02d}", f"{np.clip(lon, w + 0.01, e - 0.01):.5f}",
                     f"{np.clip(lat, s + 0.01, n - 0.01):.5f}", "1"])
    for i in range(N_NEGATIVE):
        rows.append([f"S{N_POSITIVE + i:02d}", f"{rng.uniform(w + 0.01, e - 0.01):.5f}",
                     f"{rng.uniform(s + 0.01, n - 0.01):.5f}", "0"])
    return _write_csv(rows)


def evaluation_rasters(seed: int = DEMO_SEED, spec: GridSpec = DEMO_SPEC):
    """A sharp candidate PGF map and a blurrier baseline."""
    lon, lat = spec.cell_centers()
    d = np.hypot((lon - EPICENTER[0]) * np.cos(np.radians(lat)), lat - EPICENTER[1]) * 111.195
    rng = np.random.default_rng([seed, 5])
    cand = np.clip(0.9 * np.exp(-d / 6.0) + rng.uniform(0, 0.05, spec.shape), 0, 1)
    base = np.clip(0.45 * np.exp(-d / 25.0) + 0.1, 0, 1)
    return (GeoGrid.from_array(spec, np.round(cand, 4)), GeoGrid.from_array(spec, np.round(base, 4)))


def density_raster(seed: int = DEMO_SEED, spec: GridSpec = DEMO_SPEC):
    """Population density (persons/km2) with an urban core."""
    rng = np.random.default_rng([seed, 6])
    lon, lat = spec.cell_centers()
    d = np.hypot(lon + 122.68, lat - 45.52) * 111.195
    dens = 4000 * np.exp(-d / 5.0) * rng.lognormal(0, 0.5, spec.shape)
    dens[45:, :5] = np.nan
    return GeoGrid.from_array(spec, np.round(dens, 2))


def assets_csv(seed: int = DEMO_SEED, spec: GridSpec = DEMO_SPEC):
    rng = np.random.default_rng([seed, 7])
    w, s, e, n = spec.extent
    rows = [["id", "lon", "lat", "category"]]
    for i in range(8):
        cat = "bridge" if i % 2 == 0 else "dam"
        rows.append([f"A{i:02d}", f"{rng.uniform(w, e):.5f}", f"{rng.uniform(s, n):.5f}", cat])
    # one asset off the grid
    rows.append(["A99", f"{e + 0.5:.5f}", f"{n + 0.5:.5f}", "dam"])
    return _write_csv(rows)


def network_geojson(spec: GridSpec = DEMO_SPEC):
    w, s, e, n = spec.extent
    feats = [
        {"type": "Feature", "properties": {"id": "I5", "category": "interstate"},
         "geometry": {"type": "LineString", "coordinates": [
             [round(w + 0.25, 4), round(s + 0.01, 4)], [round(w + 0.27, 4), round(s + 0.25, 4)],
             [round(w + 0.24, 4), round(n - 0.01, 4)]]}},
        {"type": "Feature", "properties": {"id": "US26", "category": "highway"},
         "geometry": {"type": "LineString", "coordinates": [
             [round(w + 0.01, 4), round(s + 0.22, 4)], [round(e - 0.01, 4), round(s + 0.3, 4)]]}},
        {"type": "Feature", "properties": {"id": "OR99", "category": "arterial"},
         "geometry": {"type": "LineString", "coordinates": [
             [round(w + 0.05, 4), round(n - 0.05, 4)], [round(w + 0.2, 4), round(n - 0.1, 4)],
             [round(w + 0.35, 4), round(n - 0.2, 4)], [round(w + 0.45, 4), round(s + 0.05, 4)]]}},
    ]
    return json.dumps({"type": "FeatureCollection", "features": feats}, indent=1) + "\n"


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def demo_files(seed: int = DEMO_SEED) -> dict:
    """Mapping of relative path to file text for the whole demo bundle."""
    files = {}
    rasters = demo_model_rasters(seed)
    raster_paths = {}
    for (t, p), g in rasters.items():
        rel = f"rasters/{RASTER_STEM[t]}_{p}.asc"
        files[rel] = write_esri_ascii(g)
        raster_paths.setdefault(t, {})[p] = rel
    files["mask.asc"] = write_esri_ascii(demo_mask())
    files["shakemap.xml"] = shakemap_xml("synthetic_m7p1", DEMO_MAGNITUDE, _attenuation,
                                         description="synthetic M7.1 crustal scenario")
    files["shakemap_zero.xml"] = shakemap_xml("synthetic_m7p1_zero", DEMO_MAGNITUDE,
                                              lambda lon, lat: 0.0,
                                              description="synthetic zero-motion scenario")
    files["residuals_lpi_A.csv"] = residual_sites_csv(rasters, seed)
    files["residuals_empty.csv"] = ""
    files["variogram_lpi_A.json"] = _dump({"family": "exponential", "c0": 0.9, "c1": 8.1, "a_km": 8.0})

    scenario = {
        "shakemap": "shakemap.xml",
        "rasters": raster_paths,
        "fragility": {
            "LPI": {"form": "lognormal", "theta": 5.0, "beta": 0.7},
            "LPI_ISH": {"form": "lognormal", "theta": 5.0, "beta": 0.7},
            "LSN": {"form": "lognormal", "theta": 15.0, "beta": 0.7},
        },
        "mask": "mask.asc",
        "residuals": {"LPI_A": {"sites": "residuals_lpi_A.csv", "variogram": "variogram_lpi_A.json"}},
        "output_dir": "out/scenarios",
    }
    files["scenario.json"] = _dump(scenario)
    zero = dict(scenario, shakemap="shakemap_zero.xml")
    zero.pop("residuals")
    files["scenario_zero.json"] = _dump(zero)

    cpts = demo_cpts(seed)
    for c in cpts[:N_DEMO_CPTS]:
        files[f"cpts/{c.cpt_id}.csv"] = cpt_csv(c)
    files["curves.json"] = _dump({"cpt_dir": "cpts", "output_dir": "out/curves"})
    files["features.csv"] = feature_table_csv(cpts, rasters, seed)
    files["train_curves.csv"] = curves_to_csv(build_all_curves(cpts))
    files["train.json"] = _dump({
        "features": "features.csv",
        "curves": "train_curves.csv",
        "param_grid": {"n_trees": [10, 25], "max_depth": [2, 6], "min_leaf_size": [2]},
        "k": 5,
        "seed": 7,
        "test_fraction": 0.1,
        "log_target_B": False,
        "output_dir": "out/models",
    })
    files["krige.json"] = _dump({
        "targets": {"LPI_A": {"raster": "rasters/lpi_A.asc", "residuals": "residuals_lpi_A.csv",
                              "variogram": "variogram_lpi_A.json"}},
        "floor": 0.0,
        "output_dir": "out/krige",
    })
    files["krige_empty.json"] = _dump({
        "targets": {"LPI_A": {"raster": "rasters/lpi_A.asc", "residuals": "residuals_empty.csv"}},
        "floor": 0.0,
        "output_dir": "out/krige_empty",
    })

    cand, base = evaluation_rasters(seed)
    files["eval/cases.csv"] = case_history_csv(seed)
    files["eval/pgf_candidate.asc"] = write_esri_ascii(cand)
    files["eval/pgf_baseline.asc"] = write_esri_ascii(base)
    files["evaluate.json"] = _dump({
        "case_histories": "eval/cases.csv",
        "baseline": {"name": "Baseline", "raster": "eval/pgf_baseline.asc"},
        "candidates": {"Ensemble": "eval/pgf_candidate.asc"},
        "n_draws": 10000,
        "level": 0.99,
        "seed": 11,
        "output_dir": "out/evaluate",
    })

    files["impact/density.asc"] = write_esri_ascii(density_raster(seed))
    files["impact/assets.csv"] = assets_csv(seed)
    files["impact/network.geojson"] = network_geojson()
    files["impact.json"] = _dump({
        "pgf": "eval/pgf_candidate.asc",
        "density": "impact/density.asc",
        "bin_edges": [0, 5, 50, 250, 1000, None],
        "thresholds": [0.25, 0.5],
        "assets": "impact/assets.csv",
        "network": "impact/network.geojson",
        "output_dir": "out/impact",
    })
    return files


def write_demo(out_dir, seed: int = DEMO_SEED) -> Path:
    out_dir = Path(out_dir)
    for rel, text in demo_files(seed).items():
        p = out_dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
    return out_dir


if __name__ == "__main__":  # pragma: no cover
    write_demo(sys.argv[1] if len(sys.argv) > 1 else demo_path())
