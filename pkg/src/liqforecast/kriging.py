"""Regression-kriging update of surrogate predictions from CPT residuals.

Residuals (target minus ML prediction) are treated as a zero-mean field and
interpolated by simple kriging with an exponential covariance, so corrections
fade to zero away from the data and the map falls back to the ML surrogate.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from .errors import InputError, NumericalError
from .geo import chord_for_km, haversine_km, pairwise_km, unit_vectors
from .raster import GeoGrid

FALLBACK_MIN_SITES = 30
DEGENERATE_SILL = 1e-12
# Below this normalized variance reduction a cell keeps its ML value.
MIN_INFLUENCE = 1e-6


@dataclass(frozen=True)
class ResidualSite:
    lon: float
    lat: float
    residual: float
    site_id: str = ""


@dataclass(frozen=True)
class SemivariogramModel:
    """Exponential semivariogram ``c0 + c1 (1 - exp(-3 h / a))``, h and a in km."""

    c0: float
    c1: float
    a_km: float
    family: str = "exponential"
    method: str = "wls"
    degenerate: bool = False

    def __post_init__(self):
        if self.family != "exponential":
            raise ValueError(f"unsupported semivariogram family '{self.family}'")
        if self.c0 < 0 or self.c1 <= 0 or self.a_km <= 0:
            raise ValueError("semivariogram needs c0 >= 0, c1 > 0, a > 0")

    @property
    def sill(self):
        return self.c0 + self.c1

    def gamma(self, h):
        return self.c0 + self.c1 * -np.expm1(-3.0 * np.asarray(h, dtype=float) / self.a_km)

    def covariance(self, h):
        """Structured covariance ``c1 exp(-3 h / a)`` (nugget excluded)."""
        return self.c1 * np.exp(-3.0 * np.asarray(h, dtype=float) / self.a_km)

    def to_dict(self):
        return {"family": self.family, "c0": self.c0, "c1": self.c1, "a_km": self.a_km,
                "method": self.method, "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["c0"]), float(d["c1"]), float(d["a_km"]),
                   d.get("family", "exponential"), d.get("method", "file"),
                   bool(d.get("degenerate", False)))


def _site_arrays(sites):
    lon = np.array([s.lon for s in sites], dtype=float)
    lat = np.array([s.lat for s in sites], dtype=float)
    r = np.array([s.residual for s in sites], dtype=float)
    return lon, lat, r


def empirical_semivariogram(sites, n_bins: int = 30, max_lag_km: float | None = None):
    """Binned semivariance ``(1 / 2m) sum (r_i - r_j)^2``.

    Bins are uniform on ``[0, max_lag_km]``, by default half the largest
    pairwise distance (or the full distance if that would keep no pair).
    Returns ``(lag, gamma, count)`` rows for non-empty bins, where lag is the
    mean pair distance in the bin.
    """
    if len(sites) < 2:
        raise ValueError("need at least 2 sites for a semivariogram")
    lon, lat, r = _site_arrays(sites)
    d = pairwise_km(lon, lat)
    iu = np.triu_indices(len(r), k=1)
    h = d[iu]
    sq = (r[iu[0]] - r[iu[1]]) ** 2
    if h.max() <= 0:
        raise ValueError("all sites are coincident")
    if max_lag_km is None:
        max_lag_km = h.max() / 2.0
        if not np.any((h > 0) & (h <= max_lag_km)):
            max_lag_km = h.max()
    keep = h <= max_lag_km
    h, sq = h[keep], sq[keep]
    edges = np.linspace(0.0, max_lag_km, n_bins + 1)
    which = np.clip(np.searchsorted(edges, h, side="right") - 1, 0, n_bins - 1)
    out = []
    for b in range(n_bins):
        sel = which == b
        m = int(sel.sum())
        if m:
            out.append((float(h[sel].mean()), float(sq[sel].sum() / (2 * m)), m))
    return out


def _wsse(params, h, g, w):
    c0, c1, a = params
    model = c0 + c1 * -np.expm1(-3.0 * h / a)
    return float(np.sum(w * (g - model) ** 2))


def variogram_grid(h, g):
    """Coarse (c0, c1, a) candidates scaled to the empirical data."""
    top = max(float(np.max(g)), 1e-300)
    hmax = float(np.max(h))
    hmin = max(float(np.min(h)), hmax * 1e-3)
    c0s = top * np.linspace(0.0, 1.0, 11)
    c1s = top * np.linspace(0.05, 1.5, 30)
    As = np.geomspace(hmin / 2.0, 5.0 * hmax, 40)
    return c0s, c1s, As


def fit_exponential_model(empirical, sites=None) -> SemivariogramModel:
    """Weighted least-squares fit of the exponential semivariogram.

    Weights are pair counts. A coarse grid over (c0, c1, a) seeds a bounded
    local refinement, which is kept only if it does not raise the weighted
    SSE. With fewer than 30 ``sites`` the fit is replaced by a rule of thumb
    (10% nugget, 90% partial sill of the residual variance, range 10x the
    median nearest-neighbour spacing); zero residual variance gives a
    flagged, effectively null model.
    """
    if sites is not None:
        lon, lat, r = _site_arrays(sites)
        var = float(np.var(r)) if len(r) > 1 else 0.0
        if var == 0.0:
            a = _median_nn_km(lon, lat) * 10.0 if len(r) > 1 else 1.0
            return SemivariogramModel(0.0, DEGENERATE_SILL, max(a, 1e-6), method="degenerate",
                                      degenerate=True)
        if len(sites) < FALLBACK_MIN_SITES:
            a = 10.0 * _median_nn_km(lon, lat)
            return SemivariogramModel(0.1 * var, 0.9 * var, a, method="fallback")
    emp = [e for e in empirical if e[2] > 0]
    if len(emp) < 3:
        raise ValueError(f"need at least 3 non-empty lag bins, got {len(emp)}")
    h = np.array([e[0] for e in emp])
    g = np.array([e[1] for e in emp])
    w = np.array([e[2] for e in emp], dtype=float)
    if np.max(g) <= 0:
        return SemivariogramModel(0.0, DEGENERATE_SILL, float(np.max(h)), method="degenerate",
                                  degenerate=True)

    c0s, c1s, As = variogram_grid(h, g)
    basis = -np.expm1(-3.0 * h[None, :] / As[:, None])                    # (nA, n)
    model = c0s[:, None, None, None] + c1s[None, :, None, None] * basis[None, None, :, :]
    sse = np.einsum("n,ijkn->ijk", w, (g - model) ** 2)
    i, j, k = np.unravel_index(np.argmin(sse), sse.shape)
    start = np.array([c0s[i], c1s[j], As[k]])
    best_sse = float(sse[i, j, k])

    scale = np.array([np.max(g), np.max(g), np.max(h)])
    res = minimize(lambda p: _wsse(p * scale, h, g, w), start / scale, method="L-BFGS-B",
                   bounds=[(0.0, None), (1e-9, None), (1e-6, None)],
                   options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 500})
    cand = res.x * scale
    if np.all(np.isfinite(cand)) and _wsse(cand, h, g, w) <= best_sse:
        start = cand
    c0, c1, a = (float(v) for v in start)
    return SemivariogramModel(c0, c1, a, method="wls")


def _median_nn_km(lon, lat):
    d = pairwise_km(lon, lat)
    np.fill_diagonal(d, np.inf)
    nn = d.min(axis=1)
    nn = nn[np.isfinite(nn)]
    return float(np.median(nn)) if nn.size else 1.0


def merge_duplicate_sites(sites):
    """Average residuals of sites sharing identical coordinates."""
    groups = {}
    for s in sites:
        groups.setdefault((s.lon, s.lat), []).append(s)
    out = []
    for (lon, lat), grp in groups.items():
        if len(grp) == 1:
            out.append(grp[0])
        else:
            out.append(ResidualSite(lon, lat, float(np.mean([s.residual for s in grp])),
                                    "+".join(s.site_id for s in grp)))
    return out


class ResidualField:
    """Simple-kriging interpolator over a fixed set of residual sites."""

    def __init__(self, sites, model: SemivariogramModel, max_neighbors: int = 64,
                 max_radius_km: float | None = None):
        self.sites = merge_duplicate_sites(sites)
        self.model = model
        self.max_neighbors = int(max_neighbors)
        self.max_radius_km = 2.0 * model.a_km if max_radius_km is None else float(max_radius_km)
        self.lon, self.lat, self.r = _site_arrays(self.sites) if self.sites else (
            np.array([]), np.array([]), np.array([]))
        self._tree = cKDTree(unit_vectors(self.lon, self.lat)) if self.sites else None
        self._chord = chord_for_km(self.max_radius_km) * (1 + 1e-12)

    def neighbors(self, lon, lat):
        if self._tree is None:
            return np.array([], dtype=int)
        k = min(self.max_neighbors, len(self.sites))
        dist, idx = self._tree.query(unit_vectors([lon], [lat])[0], k=k,
                                     distance_upper_bound=self._chord)
        idx = np.atleast_1d(idx)
        dist = np.atleast_1d(dist)
        idx = idx[np.isfinite(dist)]
        if idx.size == 0:
            return idx
        h = haversine_km(lon, lat, self.lon[idx], self.lat[idx])
        return idx[np.atleast_1d(h) <= self.max_radius_km]

    def estimate(self, lon, lat):
        """(estimate, variance) at one point."""
        m = self.model
        idx = self.neighbors(lon, lat)
        if idx.size == 0:
            return 0.0, m.sill
        slon, slat = self.lon[idx], self.lat[idx]
        C = m.covariance(pairwise_km(slon, slat))
        C[np.diag_indices_from(C)] = m.c1 + m.c0
        c = np.atleast_1d(m.covariance(haversine_km(lon, lat, slon, slat)))
        try:
            w = np.linalg.solve(C, c)
        except np.linalg.LinAlgError:
            raise NumericalError("singular kriging system") from None
        if not np.all(np.isfinite(w)):
            raise NumericalError("non-finite kriging weights")
        est = float(w @ self.r[idx])
        var = float(np.clip(m.sill - w @ c, 0.0, m.sill))
        return est, var


def krige_at(lon, lat, sites, model: SemivariogramModel, max_neighbors: int = 64,
             max_radius_km: float | None = None):
    """Simple-kriging (estimate, variance) of the residual field at a point."""
    if not sites:
        raise ValueError("at least one residual site is required")
    return ResidualField(sites, model, max_neighbors, max_radius_km).estimate(lon, lat)


@dataclass
class KrigingUpdate:
    updated: GeoGrid
    influence: GeoGrid
    n_clamped: int
    n_updated: int


def apply_kriging_update(ml_grid: GeoGrid, sites, model: SemivariogramModel | None,
                         floor: float | None = 0.0, max_neighbors: int = 64,
                         max_radius_km: float | None = None) -> KrigingUpdate:
    """Add kriged residuals to an ML raster and report geotechnical influence.

    Influence is the normalized variance reduction ``1 - var / sill`` in
    [0, 1]. Updated values below ``floor`` are clamped to it and counted;
    nodata cells pass through.
    """
    spec = ml_grid.spec
    ml = ml_grid.masked()
    valid = np.isfinite(ml)
    influence = np.where(valid, 0.0, np.nan)
    if not sites or model is None:
        return KrigingUpdate(ml_grid, GeoGrid.from_array(spec, influence), 0, 0)
    field_ = ResidualField(sites, model, max_neighbors, max_radius_km)
    lon, lat = spec.cell_centers()
    out = ml.copy()
    n_clamped = n_updated = 0
    for r, c in zip(*np.nonzero(valid)):
        est, var = field_.estimate(lon[r, c], lat[r, c])
        infl = 1.0 - var / model.sill
        influence[r, c] = min(max(infl, 0.0), 1.0)
        if infl < MIN_INFLUENCE:
            continue
        v = ml[r, c] + est
        n_updated += 1
        if floor is not None and v < floor:
            v = floor
            n_clamped += 1
        out[r, c] = v
    return KrigingUpdate(GeoGrid.from_array(spec, out), GeoGrid.from_array(spec, influence),
                         n_clamped, n_updated)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

RESIDUAL_HEADER = ("cpt_id", "lon", "lat", "target", "ml_prediction", "residual")


def residuals_to_csv(rows) -> str:
    """Rows of (cpt_id, lon, lat, target, ml_prediction); residual is derived."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESIDUAL_HEADER)
    for cpt_id, lon, lat, target, pred in rows:
        w.writerow([cpt_id, repr(float(lon)), repr(float(lat)), repr(float(target)),
                    repr(float(pred)), repr(float(target) - float(pred))])
    return buf.getvalue()


def load_residual_sites(text: str, source=None):
    lines = [(i, l) for i, l in enumerate(text.splitlines(), start=1)
             if l.strip() and not l.lstrip().startswith("#")]
    if not lines:
        return []
    header = [h.strip().lower() for h in next(csv.reader([lines[0][1]]))]
    if tuple(header) != RESIDUAL_HEADER:
        raise InputError(f"residual CSV header must be {','.join(RESIDUAL_HEADER)}",
                         source=source, line=lines[0][0])
    out = []
    for lineno, line in lines[1:]:
        r = next(csv.reader([line]))
        if len(r) != 6:
            raise InputError("residual row needs 6 fields", source=source, line=lineno)
        try:
            lon, lat, res = float(r[1]), float(r[2]), float(r[5])
        except ValueError:
            raise InputError("non-numeric residual row", source=source, line=lineno) from None
        if not all(math.isfinite(v) for v in (lon, lat, res)):
            raise InputError("non-finite residual row", source=source, line=lineno)
        out.append(ResidualSite(lon, lat, res, r[0].strip()))
    return out


def load_residual_file(path):
    path = Path(path)
    return load_residual_sites(path.read_text(), source=str(path))


def load_variogram_file(path) -> SemivariogramModel:
    path = Path(path)
    try:
        return SemivariogramModel.from_dict(json.loads(path.read_text()))
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"bad variogram file: {exc}", source=str(path)) from None


def fit_variogram_for_sites(sites, n_bins: int = 30) -> SemivariogramModel:
    """Empirical semivariogram plus model fit, with the small-sample fallback."""
    if len(sites) >= FALLBACK_MIN_SITES:
        return fit_exponential_model(empirical_semivariogram(sites, n_bins), sites)
    return fit_exponential_model([], sites)
