"""Forward scenario pipeline: ShakeMap PGA to ensemble ground-failure maps."""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .geotech import MI_TYPES, FragilityCurve, default_fragility, eval_mi, fragility_pgf, scale_pga_m
from .ingest import ScenarioEvent
from .kriging import SemivariogramModel, apply_kriging_update
from .raster import GeoGrid, combine_grids, require_same_spec, resample_bilinear, write_esri_ascii

PRODUCT_NAMES = ("pga", "pga_m", "mi_lpi", "mi_lpiish", "mi_lsn",
                 "pgf_lpi", "pgf_lpiish", "pgf_lsn", "pgf_ensemble", "influence")
_SUFFIX = {"LPI": "lpi", "LPI_ISH": "lpiish", "LSN": "lsn"}


def compute_mi_raster(a_grid: GeoGrid, b_grid: GeoGrid, pga_m_grid: GeoGrid) -> GeoGrid:
    spec = require_same_spec([a_grid, b_grid, pga_m_grid])
    a, b, x = a_grid.masked(), b_grid.masked(), pga_m_grid.masked()
    ok = np.isfinite(a) & np.isfinite(b) & np.isfinite(x)
    if np.any(a[ok] < 0) or np.any(b[ok] < 0) or np.any(x[ok] < 0):
        raise ValueError("A, B and PGA_M must be non-negative on valid cells")
    out = np.full(spec.shape, np.nan)
    out[ok] = eval_mi(a[ok], b[ok], x[ok])
    return GeoGrid.from_array(spec, out)


def compute_pgf_raster(mi_grid: GeoGrid, curve: FragilityCurve) -> GeoGrid:
    mi = mi_grid.masked()
    ok = np.isfinite(mi)
    out = np.full(mi.shape, np.nan)
    out[ok] = fragility_pgf(mi[ok], curve)
    return GeoGrid.from_array(mi_grid.spec, out)


def diff_pgf(pgf_a: GeoGrid, pgf_b: GeoGrid) -> GeoGrid:
    """Cellwise ``pgf_a - pgf_b``."""
    return combine_grids([pgf_a, pgf_b], "difference")


def apply_mask(grid: GeoGrid, mask: GeoGrid | None) -> GeoGrid:
    """Null out cells where the exclusion mask equals 1."""
    if mask is None:
        return grid
    require_same_spec([grid, mask])
    vals = grid.masked()
    vals[mask.values == 1] = np.nan
    return GeoGrid.from_array(grid.spec, vals)


@dataclass
class ResidualInput:
    sites: list
    model: SemivariogramModel


@dataclass
class ScenarioProducts:
    grids: dict
    manifest: dict = field(default_factory=dict)
    kriging_summary: dict = field(default_factory=dict)

    def __getattr__(self, name):
        grids = self.__dict__.get("grids", {})
        if name in grids:
            return grids[name]
        raise AttributeError(name)

    @property
    def spec(self):
        return self.grids["pgf_ensemble"].spec


def run_scenario(event: ScenarioEvent, model_rasters: dict, fragility: dict | None = None,
                 mask: GeoGrid | None = None, residuals: dict | None = None) -> ScenarioProducts:
    """Evaluate every product for one scenario.

    ``model_rasters`` maps ``(mi_type, "A"|"B")`` to grids sharing a spec.
    ``residuals`` optionally maps the same keys to :class:`ResidualInput`
    for a kriging update of that parameter raster before evaluation.
    """
    fragility = default_fragility() if fragility is None else fragility
    keys = [(t, p) for t in MI_TYPES for p in ("A", "B")]
    missing = [k for k in keys if k not in model_rasters]
    if missing:
        raise ValueError(f"model rasters missing for {missing}")
    spec = require_same_spec([model_rasters[k] for k in keys])
    if mask is not None:
        require_same_spec([model_rasters[keys[0]], mask])

    pga = resample_bilinear(event.pga, spec)
    pga_m = scale_pga_m(pga, event.magnitude)

    params = dict(model_rasters)
    influences = []
    summary = {}
    for k, res in sorted((residuals or {}).items()):
        upd = apply_kriging_update(params[k], res.sites, res.model, floor=0.0)
        params[k] = upd.updated
        influences.append(upd.influence)
        summary[f"{k[0]}_{k[1]}"] = {"updated_cells": upd.n_updated,
                                     "clamped_cells": upd.n_clamped}

    grids = {"pga": pga, "pga_m": pga_m}
    pgfs = []
    for t in MI_TYPES:
        mi = compute_mi_raster(params[(t, "A")], params[(t, "B")], pga_m)
        pgf = compute_pgf_raster(mi, fragility[t])
        grids[f"mi_{_SUFFIX[t]}"] = mi
        grids[f"pgf_{_SUFFIX[t]}"] = pgf
        pgfs.append(pgf)
    grids["pgf_ensemble"] = combine_grids(pgfs, "mean")
    if influences:
        grids["influence"] = combine_grids(influences, "mean")
    else:
        grids["influence"] = GeoGrid.from_array(
            spec, np.where(grids["pgf_ensemble"].valid, 0.0, np.nan))
    grids = {name: apply_mask(grids[name], mask) for name in PRODUCT_NAMES}

    manifest = {
        "event_id": event.event_id,
        "magnitude": event.magnitude,
        "msf": event.msf,
        "description": event.description,
        "fragility": {t: fragility[t].to_dict() for t in MI_TYPES},
        "kriged_targets": sorted(summary),
    }
    return ScenarioProducts(grids, manifest, summary)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_atomic_dir(files: dict, out_dir) -> Path:
    """Write ``{name: text}`` into ``out_dir`` all-or-nothing.

    Files go to a sibling temporary directory which then replaces
    ``out_dir``; a failure leaves any earlier ``out_dir`` untouched.
    """
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        for name, text in files.items():
            (tmp / name).write_text(text)
        if out_dir.exists():
            old = out_dir.with_name(f".{out_dir.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(out_dir, old)
            os.replace(tmp, out_dir)
            shutil.rmtree(old)
        else:
            os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir


def build_manifest(base: dict, input_digests: dict, config: dict, product_texts: dict) -> dict:
    manifest = dict(base)
    manifest["inputs"] = dict(sorted(input_digests.items()))
    manifest["config_digest"] = sha256_text(canonical_json(config))
    manifest["products"] = {name: sha256_text(text) for name, text in sorted(product_texts.items())}
    manifest["digest"] = sha256_text(canonical_json(manifest))
    # excluded from the digest above
    manifest["created_utc"] = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return manifest


def write_products(products: ScenarioProducts, out_root, input_digests=None, config=None) -> Path:
    """Write ``<out_root>/<event_id>/`` with every product raster and a manifest."""
    texts = {f"{name}.asc": write_esri_ascii(products.grids[name]) for name in PRODUCT_NAMES}
    manifest = build_manifest(products.manifest, input_digests or {}, config or {}, texts)
    files = dict(texts)
    files["manifest.json"] = canonical_json(manifest)
    return write_atomic_dir(files, Path(out_root) / products.manifest["event_id"])
