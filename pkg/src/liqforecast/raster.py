"""Georeferenced single-band grids in geographic degrees.

Grids are stored north-to-south (row 0 is the northernmost row), matching the
data order of ESRI ASCII files. Missing cells carry the ``nodata`` sentinel;
internally, computations work on float arrays with NaN in place of nodata and
convert back through :meth:`GeoGrid.from_array`.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError

DEFAULT_NODATA = -9999.0

# Slack for points that sit on a hull edge up to floating-point noise.
_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Shape and georeference of a grid with square cells.

    ``origin_lon``/``origin_lat`` locate the lower-left corner of the
    lower-left cell; ``cell_size_deg`` is the edge length in degrees.
    """

    n_rows: int
    n_cols: int
    cell_size_deg: float
    origin_lon: float
    origin_lat: float
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        if int(self.n_rows) != self.n_rows or self.n_rows < 1:
            raise ValueError(f"n_rows must be a positive integer, got {self.n_rows}")
        if int(self.n_cols) != self.n_cols or self.n_cols < 1:
            raise ValueError(f"n_cols must be a positive integer, got {self.n_cols}")
        object.__setattr__(self, "n_rows", int(self.n_rows))
        object.__setattr__(self, "n_cols", int(self.n_cols))
        for name in ("cell_size_deg", "origin_lon", "origin_lat", "nodata"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.cell_size_deg <= 0:
            raise ValueError(f"cell_size_deg must be > 0, got {self.cell_size_deg}")
        if self.origin_lat < -90 or self.top > 90 + _EDGE_EPS:
            raise ValueError("grid extends beyond the poles")

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def right(self):
        return self.origin_lon + self.n_cols * self.cell_size_deg

    @property
    def top(self):
        return self.origin_lat + self.n_rows * self.cell_size_deg

    @property
    def extent(self):
        """(west, south, east, north) in degrees."""
        return (self.origin_lon, self.origin_lat, self.right, self.top)

    def col_centers(self):
        return self.origin_lon + (np.arange(self.n_cols) + 0.5) * self.cell_size_deg

    def row_centers(self):
        """Latitudes of row centers, north to south."""
        return self.origin_lat + (self.n_rows - np.arange(self.n_rows) - 0.5) * self.cell_size_deg

    def cell_centers(self):
        """Meshgrids (lon, lat) of every cell center, shape ``(n_rows, n_cols)``."""
        return np.meshgrid(self.col_centers(), self.row_centers())

    def cell_center(self, row, col):
        lon = self.origin_lon + (col + 0.5) * self.cell_size_deg
        lat = self.origin_lat + (self.n_rows - row - 0.5) * self.cell_size_deg
        return lon, lat

    def locate(self, lon, lat):
        """Row/col of the cell containing (lon, lat), or ``None`` if outside."""
        fx = (lon - self.origin_lon) / self.cell_size_deg
        fy = (self.top - lat) / self.cell_size_deg
        if not (math.isfinite(fx) and math.isfinite(fy)):
            return None
        if fx < -_EDGE_EPS or fy < -_EDGE_EPS:
            return None
        if fx > self.n_cols + _EDGE_EPS or fy > self.n_rows + _EDGE_EPS:
            return None
        col = min(max(int(math.floor(fx)), 0), self.n_cols - 1)
        row = min(max(int(math.floor(fy)), 0), self.n_rows - 1)
        return row, col

    def first_difference(self, other):
        """Name of the first field that differs from ``other``, else ``None``."""
        for f in dataclasses.fields(self):
            if getattr(self, f.name) != getattr(other, f.name):
                return f.name
        return None


class GeoGrid:
    """Immutable grid of scalar values tied to a :class:`GridSpec`."""

    __slots__ = ("spec", "values")

    def __init__(self, spec: GridSpec, values):
        arr = np.array(values, dtype=np.float64)
        if arr.size != spec.n_rows * spec.n_cols:
            raise ValueError(
                f"expected {spec.n_rows * spec.n_cols} values, got {arr.size}")
        arr = arr.reshape(spec.shape)
        bad = ~np.isfinite(arr)
        if bad.any():
            raise ValueError("grid values must be finite or the nodata sentinel")
        arr.setflags(write=False)
        object.__setattr__(self, "spec", spec)
        object.__setattr__(self, "values", arr)

    def __setattr__(self, name, value):
        raise AttributeError("GeoGrid is immutable")

    @classmethod
    def from_array(cls, spec: GridSpec, data) -> "GeoGrid":
        """Build a grid from float data where NaN/inf marks missing cells."""
        arr = np.array(data, dtype=np.float64).reshape(spec.shape)
        missing = ~np.isfinite(arr)
        if np.any(arr[~missing] == spec.nodata):
            raise ValueError(
                f"computed value collides with the nodata sentinel {spec.nodata}")
        arr[missing] = spec.nodata
        return cls(spec, arr)

    @classmethod
    def full(cls, spec: GridSpec, value: float) -> "GeoGrid":
        return cls.from_array(spec, np.full(spec.shape, float(value)))

    @property
    def valid(self):
        """Boolean array, True where the cell holds data."""
        return self.values != self.spec.nodata

    def masked(self):
        """Copy of the values as floats with NaN at nodata cells."""
        out = self.values.astype(np.float64, copy=True)
        out[~self.valid] = np.nan
        return out

    def valid_values(self):
        return self.values[self.valid]

    def __eq__(self, other):
        if not isinstance(other, GeoGrid):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.values, other.values)

    def __repr__(self):
        s = self.spec
        return (f"GeoGrid({s.n_rows}x{s.n_cols}, cell={s.cell_size_deg:g} deg, "
                f"origin=({s.origin_lon:g}, {s.origin_lat:g}), "
                f"valid={int(self.valid.sum())})")


def require_same_spec(grids: Sequence[GeoGrid]):
    """Raise if the grids do not share one spec; return that spec."""
    if not grids:
        raise ValueError("at least one grid is required")
    ref = grids[0].spec
    for i, g in enumerate(grids[1:], start=1):
        field = ref.first_difference(g.spec)
        if field is not None:
            raise ValueError(
                f"grid {i} spec differs from grid 0 in field '{field}': "
                f"{getattr(g.spec, field)!r} != {getattr(ref, field)!r}")
    return ref


def combine_grids(grids: Sequence[GeoGrid], op: str) -> GeoGrid:
    """Cellwise reduction over grids sharing a spec.

    ``op`` is one of ``mean``, ``difference`` (exactly two grids, first minus
    second), ``min`` or ``max``. A nodata cell in any input yields nodata.
    """
    spec = require_same_spec(grids)
    stack = np.stack([g.masked() for g in grids])
    if op == "mean":
        # clip guards the rounding of sum/k so identical inputs come back exactly
        out = np.clip(stack.sum(axis=0) / len(grids), stack.min(axis=0), stack.max(axis=0))
    elif op == "difference":
        if len(grids) != 2:
            raise ValueError(f"difference needs exactly 2 grids, got {len(grids)}")
        out = stack[0] - stack[1]
    elif op == "min":
        out = stack.min(axis=0)
    elif op == "max":
        out = stack.max(axis=0)
    else:
        raise ValueError(f"unknown reduction '{op}'")
    return GeoGrid.from_array(spec, out)


def map_valid(grid: GeoGrid, func) -> GeoGrid:
    """Apply a vectorized ``func`` to the valid cells of ``grid``."""
    arr = grid.masked()
    ok = np.isfinite(arr)
    out = np.full(arr.shape, np.nan)
    out[ok] = func(arr[ok])
    return GeoGrid.from_array(grid.spec, out)


def _bilinear(src: GeoGrid, lon, lat):
    """Bilinear interpolation at arrays of points; NaN where undefined."""
    spec = src.spec
    vals = src.masked()
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    # fractional index in cell-center coordinates
    fx = (lon - spec.origin_lon) / spec.cell_size_deg - 0.5
    fr = (spec.top - lat) / spec.cell_size_deg - 0.5
    inside = ((fx >= -_EDGE_EPS) & (fx <= spec.n_cols - 1 + _EDGE_EPS)
              & (fr >= -_EDGE_EPS) & (fr <= spec.n_rows - 1 + _EDGE_EPS))
    fx = np.clip(fx, 0.0, spec.n_cols - 1)
    fr = np.clip(fr, 0.0, spec.n_rows - 1)
    c0 = np.minimum(np.floor(fx).astype(int), spec.n_cols - 2)
    r0 = np.minimum(np.floor(fr).astype(int), spec.n_rows - 2)
    tx = fx - c0
    ty = fr - r0
    v00 = vals[r0, c0]
    v01 = vals[r0, c0 + 1]
    v10 = vals[r0 + 1, c0]
    v11 = vals[r0 + 1, c0 + 1]
    out = ((1 - ty) * ((1 - tx) * v00 + tx * v01)
           + ty * ((1 - tx) * v10 + tx * v11))
    return np.where(inside, out, np.nan)


def resample_bilinear(src: GeoGrid, target: GridSpec) -> GeoGrid:
    """Resample ``src`` onto ``target`` by bilinear interpolation.

    Target cells whose center lies outside the hull of source cell centers,
    or that touch a nodata source cell, are set to nodata.
    """
    s = src.spec
    if s.n_rows < 2 or s.n_cols < 2:
        raise ValueError(
            f"bilinear resampling needs at least 2x2 source cells, got {s.n_rows}x{s.n_cols}")
    w, so, e, n = s.extent
    tw, ts, te, tn = target.extent
    if tw >= e or te <= w or ts >= n or tn <= so:
        raise ValueError("target extent does not overlap the source grid")
    lon, lat = target.cell_centers()
    out = _bilinear(src, lon, lat)
    return GeoGrid.from_array(target, out)


def sample_points(grid: GeoGrid, lon, lat, method: str = "nearest"):
    """Sample the grid at arrays of points; NaN for missing or out-of-extent."""
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    if method == "bilinear":
        if grid.spec.n_rows < 2 or grid.spec.n_cols < 2:
            raise ValueError("bilinear sampling needs at least 2x2 cells")
        return _bilinear(grid, lon, lat)
    if method != "nearest":
        raise ValueError(f"unknown sampling method '{method}'")
    vals = grid.masked()
    out = np.full(lon.shape, np.nan)
    for i, (x, y) in enumerate(zip(lon, lat)):
        loc = grid.spec.locate(x, y)
        if loc is not None:
            out[i] = vals[loc]
    return out


def sample_at_point(grid: GeoGrid, lon: float, lat: float, method: str = "nearest"):
    """Value at one point, or ``None`` when outside the grid or on nodata."""
    v = sample_points(grid, [lon], [lat], method)[0]
    return None if np.isnan(v) else float(v)


# ---------------------------------------------------------------------------
# ESRI ASCII grid codec
# ---------------------------------------------------------------------------

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


def read_esri_ascii(text: str, source=None) -> GeoGrid:
    """Parse an ESRI ASCII grid.

    The six header keys must appear in the canonical order
    (ncols, nrows, xllcorner, yllcorner, cellsize, NODATA_value); key case is
    ignored.
    """
    lines = text.splitlines()
    header = {}
    for idx, key in enumerate(_HEADER_KEYS):
        if idx >= len(lines):
            raise InputError(f"missing header key '{key}'", source=source, line=idx + 1)
        parts = lines[idx].split()
        if len(parts) != 2 or parts[0].lower() != key:
            raise InputError(f"missing header key '{key}'", source=source, line=idx + 1)
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise InputError(f"non-numeric header value {parts[1]!r}",
                             source=source, line=idx + 1) from None
    ncols, nrows = header["ncols"], header["nrows"]
    if ncols != int(ncols) or nrows != int(nrows):
        raise InputError("ncols/nrows must be integers", source=source, line=1)
    try:
        spec = GridSpec(int(nrows), int(ncols), header["cellsize"],
                        header["xllcorner"], header["yllcorner"], header["nodata_value"])
    except ValueError as exc:
        raise InputError(str(exc), source=source, line=1) from None

    data_start = len(_HEADER_KEYS) + 1
    values = []
    for lineno, line in enumerate(lines[len(_HEADER_KEYS):], start=data_start):
        for tok in line.split():
            try:
                v = float(tok)
            except ValueError:
                raise InputError(f"non-numeric token {tok!r}",
                                 source=source, line=lineno) from None
            if not math.isfinite(v):
                raise InputError(f"non-finite token {tok!r}", source=source, line=lineno)
            values.append(v)
    expected = spec.n_rows * spec.n_cols
    if len(values) != expected:
        raise InputError(f"expected {expected} values, found {len(values)}",
                         source=source, line=data_start)
    return GeoGrid(spec, values)


def _fmt(v: float, digits: int = 6) -> str:
    s = f"{v:.{digits}g}"
    return "0" if s == "-0" else s


def write_esri_ascii(grid: GeoGrid, digits: int = 6) -> str:
    """Serialize a grid.

    Header georeference is written at full precision; data values use
    ``digits`` significant digits, so a read-back differs from the source by
    at most ``0.5 * 10**(1 - digits)`` relative.
    """
    s = grid.spec
    lines = [
        f"ncols {s.n_cols}",
        f"nrows {s.n_rows}",
        f"xllcorner {s.origin_lon!r}",
        f"yllcorner {s.origin_lat!r}",
        f"cellsize {s.cell_size_deg!r}",
        f"NODATA_value {_fmt(s.nodata)}",
    ]
    valid = grid.valid
    for r in range(s.n_rows):
        row = grid.values[r]
        lines.append(" ".join(_fmt(v, digits) if ok else _fmt(s.nodata)
                              for v, ok in zip(row, valid[r])))
    return "\n".join(lines) + "\n"


def load_grid(path) -> GeoGrid:
    path = Path(path)
    return read_esri_ascii(path.read_text(), source=str(path))


def save_grid(grid: GeoGrid, path, digits: int = 6):
    Path(path).write_text(write_esri_ascii(grid, digits))
