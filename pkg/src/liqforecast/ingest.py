"""Readers for ShakeMap grids, CPT soundings, case histories, point assets
and road networks.

Every loader validates the whole input before returning; a single bad row
aborts the load with an :class:`~liqforecast.errors.InputError` that names
the line.
"""

from __future__ import annotations

import csv
import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .geotech import CptProfile, msf
from .raster import GeoGrid, GridSpec

# Relative tolerance for node positions snapping onto the ShakeMap lattice.
_NODE_TOL = 1e-3


@dataclass(frozen=True)
class ScenarioEvent:
    event_id: str
    magnitude: float
    description: str
    msf: float
    pga: GeoGrid


@dataclass(frozen=True)
class CaseHistory:
    site_id: str
    lon: float
    lat: float
    observed: int


@dataclass(frozen=True)
class AssetPoint:
    id: str
    lon: float
    lat: float
    category: str


@dataclass(frozen=True)
class RoadSegment:
    id: str
    vertices: tuple
    category: str = ""


def _local(tag):
    return tag.rsplit("}", 1)[-1]


def _find(root, name):
    for el in root.iter():
        if _local(el.tag) == name:
            yield el


def parse_shakemap_grid(xml_text: str, source=None) -> ScenarioEvent:
    """Read a ShakeMap ``grid.xml`` into a PGA raster in g.

    Nodes are placed by their own LON/LAT columns, so row order in the file
    does not matter. PGA in ``%g`` (or ShakeMap 4's ``pctg``) is converted
    to g; the magnitude may sit on the root or on the ``event`` element.
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise InputError(f"malformed XML: {exc}", source=source) from None

    event_el = next(_find(root, "event"), None)
    attrs = dict(root.attrib)
    if event_el is not None:
        attrs.update(event_el.attrib)
    if "magnitude" not in attrs:
        raise InputError("event magnitude attribute missing", source=source)
    try:
        magnitude = float(attrs["magnitude"])
    except ValueError:
        raise InputError(f"non-numeric magnitude {attrs['magnitude']!r}", source=source) from None
    event_id = attrs.get("event_id", "scenario")
    description = attrs.get("event_description", attrs.get("description", ""))

    spec_el = next(_find(root, "grid_specification"), None)
    if spec_el is None:
        raise InputError("grid_specification element missing", source=source)
    try:
        lon_min = float(spec_el.attrib["lon_min"])
        lat_min = float(spec_el.attrib["lat_min"])
        lon_max = float(spec_el.attrib["lon_max"])
        lat_max = float(spec_el.attrib["lat_max"])
        nlon = int(spec_el.attrib["nlon"])
        nlat = int(spec_el.attrib["nlat"])
    except KeyError as exc:
        raise InputError(f"grid_specification lacks {exc.args[0]}", source=source) from None
    except ValueError as exc:
        raise InputError(f"bad grid_specification value: {exc}", source=source) from None
    if nlon < 2 or nlat < 2:
        raise InputError("ShakeMap grid needs at least 2 nodes per axis", source=source)

    fields = {}
    for f in _find(root, "grid_field"):
        try:
            fields[f.attrib["name"].upper()] = (int(f.attrib["index"]) - 1, f.attrib.get("units", ""))
        except (KeyError, ValueError):
            raise InputError("grid_field needs integer index and a name", source=source) from None
    if "PGA" not in fields:
        raise InputError("PGA field absent", source=source)
    for name in ("LON", "LAT"):
        if name not in fields:
            raise InputError(f"{name} field absent", source=source)
    pga_col, units = fields["PGA"]
    lon_col = fields["LON"][0]
    lat_col = fields["LAT"][0]
    scale = 0.01 if units.strip().lower() in ("%g", "pctg") else 1.0

    data_el = next(_find(root, "grid_data"), None)
    if data_el is None or data_el.text is None:
        raise InputError("grid_data block missing", source=source)
    try:
        data = np.array(data_el.text.split(), dtype=float)
    except ValueError:
        raise InputError("non-numeric token in grid_data", source=source) from None
    n_fields = max(idx for idx, _ in fields.values()) + 1
    if data.size % n_fields:
        raise InputError(f"grid_data token count {data.size} is not a multiple "
                         f"of the {n_fields} fields", source=source)
    table = data.reshape(-1, n_fields)
    if table.shape[0] != nlon * nlat:
        raise InputError(f"expected {nlon * nlat} grid nodes, found {table.shape[0]}",
                         source=source)

    dx = (lon_max - lon_min) / (nlon - 1)
    dy = (lat_max - lat_min) / (nlat - 1)
    if dx <= 0 or dy <= 0:
        raise InputError("grid_specification extent is empty", source=source)
    if abs(dx - dy) > _NODE_TOL * dx:
        raise InputError(f"non-square ShakeMap cells ({dx:g} x {dy:g} deg) are not supported",
                         source=source)
    fc = (table[:, lon_col] - lon_min) / dx
    fr = (lat_max - table[:, lat_col]) / dx
    cols = np.rint(fc).astype(int)
    rows = np.rint(fr).astype(int)
    if (np.any(np.abs(fc - cols) > 0.01) or np.any(np.abs(fr - rows) > 0.01)
            or cols.min() < 0 or cols.max() >= nlon or rows.min() < 0 or rows.max() >= nlat):
        raise InputError("grid node off the lattice of grid_specification", source=source)
    values = np.full((nlat, nlon), np.nan)
    values[rows, cols] = table[:, pga_col] * scale
    if np.isnan(values).any():
        raise InputError("duplicate grid nodes; some lattice positions left empty", source=source)
    if np.any(values < 0):
        raise InputError("negative PGA value", source=source)

    spec = GridSpec(nlat, nlon, dx, lon_min - dx / 2, lat_max - (nlat - 0.5) * dx)
    try:
        m_sf = msf(magnitude)
    except ValueError as exc:
        raise InputError(str(exc), source=source) from None
    return ScenarioEvent(event_id, magnitude, description, m_sf, GeoGrid.from_array(spec, values))


def load_shakemap(path) -> ScenarioEvent:
    path = Path(path)
    return parse_shakemap_grid(path.read_text(), source=str(path))


def _csv_rows(text):
    """(line number, fields) for non-blank, non-comment rows."""
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        yield lineno, next(csv.reader([line]))


def _number(tok, what, source, lineno):
    try:
        v = float(tok)
    except (TypeError, ValueError):
        raise InputError(f"{what}: non-numeric value {tok!r}", source=source, line=lineno) from None
    if not math.isfinite(v):
        raise InputError(f"{what}: non-finite value {tok!r}", source=source, line=lineno)
    return v


def _expect_header(row, expected, source, lineno):
    got = [c.strip().lower() for c in row]
    if got != list(expected):
        raise InputError(f"expected header {','.join(expected)}, got {','.join(row)}",
                         source=source, line=lineno)


def load_cpt_csv(text: str, source=None) -> CptProfile:
    """Parse a CPT file: metadata header and row, then ``z,qc,fs`` samples.

    Samples out of order are sorted by depth; duplicate depths are rejected.
    """
    rows = list(_csv_rows(text))
    if len(rows) < 3:
        raise InputError("CPT file needs a metadata block and a sample header", source=source)
    _expect_header(rows[0][1], ("cpt_id", "lon", "lat", "gwt_depth"), source, rows[0][0])
    lineno, meta = rows[1]
    if len(meta) != 4:
        raise InputError("metadata row needs 4 fields", source=source, line=lineno)
    cpt_id = meta[0].strip()
    lon = _number(meta[1], "lon", source, lineno)
    lat = _number(meta[2], "lat", source, lineno)
    gwt = _number(meta[3], "gwt_depth", source, lineno)
    if gwt < 0:
        raise InputError("gwt_depth must be >= 0", source=source, line=lineno)
    _expect_header(rows[2][1], ("z", "qc", "fs"), source, rows[2][0])

    samples = []
    for lineno, r in rows[3:]:
        if len(r) != 3:
            raise InputError("sample row needs 3 fields", source=source, line=lineno)
        z = _number(r[0], "z", source, lineno)
        qc = _number(r[1], "qc", source, lineno)
        fs = _number(r[2], "fs", source, lineno)
        if qc <= 0:
            raise InputError(f"qc must be > 0 (row z={z})", source=source, line=lineno)
        samples.append((z, qc, fs, lineno))
    if not samples:
        raise InputError("CPT file has no samples", source=source)
    samples.sort(key=lambda s: s[0])
    for a, b in zip(samples, samples[1:]):
        if a[0] == b[0]:
            raise InputError(f"duplicate depth {a[0]}", source=source, line=b[3])
    if samples[0][0] <= 0 or samples[-1][0] > 50.0:
        raise InputError("sample depths must lie in (0, 50] m", source=source)
    z, qc, fs, _ = zip(*samples)
    return CptProfile(cpt_id, lon, lat, gwt, np.array(z), np.array(qc), np.array(fs))


def load_cpt_file(path) -> CptProfile:
    path = Path(path)
    return load_cpt_csv(path.read_text(), source=str(path))


def load_cpt_dir(directory):
    """Every ``*.csv`` CPT in a directory, sorted by cpt_id."""
    cpts = [load_cpt_file(p) for p in sorted(Path(directory).glob("*.csv"))]
    ids = [c.cpt_id for c in cpts]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate cpt_id across files", source=str(directory))
    return sorted(cpts, key=lambda c: c.cpt_id)


def load_case_histories(text: str, source=None):
    rows = list(_csv_rows(text))
    if not rows:
        raise InputError("empty case-history file", source=source)
    _expect_header(rows[0][1], ("site_id", "lon", "lat", "observed"), source, rows[0][0])
    out = []
    for lineno, r in rows[1:]:
        if len(r) != 4:
            raise InputError("case-history row needs 4 fields", source=source, line=lineno)
        obs = r[3].strip()
        if obs not in ("0", "1"):
            raise InputError(f"observed must be 0 or 1, got {obs!r}", source=source, line=lineno)
        out.append(CaseHistory(r[0].strip(), _number(r[1], "lon", source, lineno),
                               _number(r[2], "lat", source, lineno), int(obs)))
    return out


def load_assets(text: str, source=None):
    rows = list(_csv_rows(text))
    if not rows:
        raise InputError("empty asset file", source=source)
    _expect_header(rows[0][1], ("id", "lon", "lat", "category"), source, rows[0][0])
    out = []
    for lineno, r in rows[1:]:
        if len(r) != 4:
            raise InputError("asset row needs 4 fields", source=source, line=lineno)
        out.append(AssetPoint(r[0].strip(), _number(r[1], "lon", source, lineno),
                              _number(r[2], "lat", source, lineno), r[3].strip()))
    return out


def load_network(geojson_text: str, source=None):
    """LineString features of a GeoJSON FeatureCollection as road segments."""
    try:
        doc = json.loads(geojson_text)
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed GeoJSON: {exc}", source=source) from None
    if doc.get("type") != "FeatureCollection":
        raise InputError("network must be a GeoJSON FeatureCollection", source=source)
    out = []
    for i, feat in enumerate(doc.get("features", [])):
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        where = f"feature {i}"
        if geom.get("type") != "LineString":
            raise InputError(f"{where}: geometry must be a LineString", source=source)
        seg_id = props.get("id", feat.get("id"))
        if seg_id is None:
            raise InputError(f"{where}: missing 'id' property", source=source)
        coords = geom.get("coordinates") or []
        if len(coords) < 2:
            raise InputError(f"{where}: LineString needs at least 2 coordinates", source=source)
        verts = []
        for c in coords:
            if len(c) < 2:
                raise InputError(f"{where}: coordinate needs lon and lat", source=source)
            verts.append((float(c[0]), float(c[1])))
        for a, b in zip(verts, verts[1:]):
            if a == b:
                raise InputError(f"{where}: consecutive duplicate vertex {a}", source=source)
        out.append(RoadSegment(str(seg_id), tuple(verts), str(props.get("category", ""))))
    return out


def _read(path):
    path = Path(path)
    return path.read_text(), str(path)


def load_case_history_file(path):
    return load_case_histories(*_read(path))


def load_asset_file(path):
    return load_assets(*_read(path))


def load_network_file(path):
    return load_network(*_read(path))
