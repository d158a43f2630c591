"""Consequence summaries: point assets, road segments and population exposure."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .geo import KM_PER_DEGREE, haversine_km
from .raster import GeoGrid, require_same_spec, sample_points

DEFAULT_BIN_EDGES = (0.0, 5.0, 50.0, 250.0, 1000.0, math.inf)


# ---------------------------------------------------------------------------
# Point assets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AssetSample:
    id: str
    category: str
    lon: float
    lat: float
    pgf: float | None


def sample_assets(assets, pgf: GeoGrid):
    """Nearest-cell PGF at each asset.

    Returns ``(rows, n_missing)``; assets off the grid or on nodata have
    ``pgf=None``.
    """
    vals = sample_points(pgf, [a.lon for a in assets], [a.lat for a in assets]) if assets else []
    rows = [AssetSample(a.id, a.category, a.lon, a.lat, None if np.isnan(v) else float(v))
            for a, v in zip(assets, vals)]
    return rows, sum(r.pgf is None for r in rows)


def assets_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "category", "lon", "lat", "pgf"])
    for r in rows:
        w.writerow([r.id, r.category, repr(r.lon), repr(r.lat), "" if r.pgf is None else repr(r.pgf)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Population density bins
# ---------------------------------------------------------------------------

@dataclass
class BinSummary:
    lower: float
    upper: float
    count: int
    q1: float | None = None
    median: float | None = None
    q3: float | None = None
    iqr: float | None = None
    whisker_high: float | None = None

    @property
    def label(self):
        hi = "inf" if math.isinf(self.upper) else f"{self.upper:g}"
        return f"[{self.lower:g}, {hi})"

    @property
    def whisker_display(self):
        """Upper whisker clamped to the probability ceiling."""
        return None if self.whisker_high is None else min(self.whisker_high, 1.0)


def _check_edges(edges):
    e = [float(x) for x in edges]
    if len(e) < 2 or any(b <= a for a, b in zip(e, e[1:])):
        raise ValueError("bin edges must be strictly increasing with at least 2 entries")
    return e


def population_bins(pgf: GeoGrid, density: GeoGrid, bin_edges=DEFAULT_BIN_EDGES):
    """Quartile summaries of PGF per density bin ``[lo, hi)``.

    Only cells valid in both grids count. Quartiles use linear interpolation
    between order statistics. Empty bins carry ``count=0`` and no statistics.
    """
    require_same_spec([pgf, density])
    edges = _check_edges(bin_edges)
    p = pgf.masked()
    d = density.masked()
    ok = np.isfinite(p) & np.isfinite(d)
    p, d = p[ok], d[ok]
    out = []
    for lo, hi in zip(edges, edges[1:]):
        sel = p[(d >= lo) & (d < hi)]
        b = BinSummary(lo, hi, int(sel.size))
        if sel.size:
            q1, med, q3 = np.quantile(sel, [0.25, 0.5, 0.75], method="linear")
            b.q1, b.median, b.q3 = float(q1), float(med), float(q3)
            b.iqr = b.q3 - b.q1
            b.whisker_high = b.q3 + 1.5 * b.iqr
        out.append(b)
    return out


def bins_to_csv(bins) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin", "lower", "upper", "count", "q1", "median", "q3", "iqr",
                "whisker_high", "whisker_display"])
    for b in bins:
        stats = [b.q1, b.median, b.q3, b.iqr, b.whisker_high, b.whisker_display]
        w.writerow([b.label, repr(b.lower), "inf" if math.isinf(b.upper) else repr(b.upper), b.count]
                   + ["" if v is None else repr(v) for v in stats])
    return buf.getvalue()


def cell_area_km2(spec):
    """Per-row cell areas, ``(km_per_deg * cell)^2 * cos(center lat)``."""
    side = KM_PER_DEGREE * spec.cell_size_deg
    return side * side * np.cos(np.radians(spec.row_centers()))


def exposure_count(pgf: GeoGrid, density: GeoGrid, threshold: float) -> float:
    """Persons on cells with PGF strictly above ``threshold``."""
    spec = require_same_spec([pgf, density])
    p = pgf.masked()
    d = density.masked()
    area = np.broadcast_to(cell_area_km2(spec)[:, None], spec.shape)
    hit = np.isfinite(p) & np.isfinite(d) & (p > threshold)
    return float(np.sum(d[hit] * area[hit]))


# ---------------------------------------------------------------------------
# Road network
# ---------------------------------------------------------------------------

@dataclass
class SegmentExposure:
    id: str
    category: str
    length_km: float
    max_pgf: float | None
    mean_pgf: float | None
    exceeds: dict = field(default_factory=dict)
    n_samples: int = 0
    n_missing: int = 0


def _sample_polyline(vertices, step_deg):
    """Points along a polyline at vertices and every ``step_deg`` of planar arc."""
    lon, lat = [], []
    for (x0, y0), (x1, y1) in zip(vertices, vertices[1:]):
        seg = math.hypot(x1 - x0, y1 - y0)
        n = max(1, int(math.ceil(seg / step_deg - 1e-9)))
        t = np.arange(n) / n
        lon.extend(x0 + t * (x1 - x0))
        lat.extend(y0 + t * (y1 - y0))
    lon.append(vertices[-1][0])
    lat.append(vertices[-1][1])
    return np.array(lon), np.array(lat)


def segment_exposure(segment, pgf: GeoGrid, thresholds, step_deg=None) -> SegmentExposure:
    step = pgf.spec.cell_size_deg / 2 if step_deg is None else float(step_deg)
    if step <= 0:
        raise ValueError("sampling step must be > 0")
    lon, lat = _sample_polyline(segment.vertices, step)
    vals = sample_points(pgf, lon, lat)
    piece = haversine_km(lon[:-1], lat[:-1], lon[1:], lat[1:])
    length = float(np.sum(piece))
    ok = np.isfinite(vals)
    res = SegmentExposure(segment.id, segment.category, length, None, None,
                          {float(t): 0.0 for t in thresholds}, int(vals.size), int((~ok).sum()))
    if not ok.any():
        return res
    res.max_pgf = float(np.max(vals[ok]))
    # trapezoids over pieces with both ends valid; a lone valid sample stands alone
    both = ok[:-1] & ok[1:]
    if both.any():
        mids = 0.5 * (vals[:-1] + vals[1:])
        res.mean_pgf = float(np.sum(mids[both] * piece[both]) / np.sum(piece[both]))
        res.mean_pgf = min(max(res.mean_pgf, float(np.min(vals[ok]))), res.max_pgf)
    else:
        res.mean_pgf = float(np.mean(vals[ok]))
    for t in res.exceeds:
        # each piece is split evenly between its two end samples
        left = both & (vals[:-1] > t)
        right = both & (vals[1:] > t)
        res.exceeds[t] = float(0.5 * np.sum(piece[left]) + 0.5 * np.sum(piece[right]))
    return res


def network_exposure(segments, pgf: GeoGrid, thresholds=(0.5,), step_deg=None, n_jobs: int = 1):
    def one(seg):
        return segment_exposure(seg, pgf, thresholds, step_deg)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(one, segments))
    return [one(s) for s in segments]


def segments_to_csv(rows, thresholds) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "category", "length_km", "max_pgf", "mean_pgf", "n_samples", "n_missing"]
               + [f"exposed_km_{t:g}" for t in thresholds])
    for r in rows:
        w.writerow([r.id, r.category, repr(r.length_km),
                    "" if r.max_pgf is None else repr(r.max_pgf),
                    "" if r.mean_pgf is None else repr(r.mean_pgf),
                    r.n_samples, r.n_missing] + [repr(r.exceeds[float(t)]) for t in thresholds])
    return buf.getvalue()


def to_json(obj) -> str:
    """Compact JSON of impact records (dataclasses or lists of them)."""

    def conv(x):
        if isinstance(x, list):
            return [conv(v) for v in x]
        if hasattr(x, "__dataclass_fields__"):
            d = asdict(x)
            if isinstance(x, BinSummary):
                d["label"] = x.label
                d["whisker_display"] = x.whisker_display
                if math.isinf(d["upper"]):
                    d["upper"] = None
            if "exceeds" in d:
                d["exceeds"] = {f"{k:g}": v for k, v in d["exceeds"].items()}
            return d
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        return x

    return json.dumps(conv(obj), sort_keys=True, separators=(",", ":")) + "\n"
