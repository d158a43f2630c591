"""Command-line entry point: ``liqforecast <command> --config run.json``.

Relative paths in a config are resolved against the config file's
directory. Exit codes: 0 success, 2 input or validation error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InputError, NumericalError
from .geotech import MI_TYPES, FragilityCurve, build_all_curves, curves_from_csv, curves_to_csv, default_fragility
from .hazard import (build_manifest, canonical_json, diff_pgf, run_scenario, sha256_file,
                     write_atomic_dir, write_products, ResidualInput)
from .impact import (DEFAULT_BIN_EDGES, assets_to_csv, bins_to_csv, exposure_count,
                     network_exposure, population_bins, sample_assets, segments_to_csv, to_json)
from .ingest import (load_asset_file, load_case_history_file, load_cpt_dir, load_network_file,
                     load_shakemap)
from .kriging import (apply_kriging_update, fit_variogram_for_sites, load_residual_file,
                      load_variogram_file, residuals_to_csv)
from .raster import load_grid, write_esri_ascii
from .stats import DEFAULT_LEVEL, DEFAULT_N_DRAWS, MORAN_CUTOFF_KM, MORAN_STRATIFY_THRESHOLD, compare_models
from .surrogate import (cv_table_csv, grid_search_cv, load_feature_table,
                        out_of_fold_predictions, train_bagged_trees)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

CONFIG_KEYS = {
    "simulate": [
        ("shakemap", "ShakeMap grid.xml path"),
        ("rasters", "{MI type: {A: path, B: path}} for LPI, LPI_ISH and LSN"),
        ("fragility", "optional {MI type: {form, theta, beta} or {form: table, table}}"),
        ("mask", "optional 0/1 exclusion raster; 1 cells become nodata"),
        ("residuals", "optional {LPI_A|...: {sites: csv, variogram: json (optional)}}"),
        ("output_dir", "products go to <output_dir>/<event_id>/"),
    ],
    "curves": [
        ("cpt_dir", "directory of CPT csv files"),
        ("mi_types", "optional subset of LPI, LPI_ISH, LSN"),
        ("output_dir", "receives curves.csv and manifest.json"),
    ],
    "train": [
        ("features", "feature table csv (cpt_id,lon,lat,features...)"),
        ("curves", "curve csv with A and B per cpt_id and MI type"),
        ("param_grid", "optional {n_trees, max_depth, min_leaf_size, feature_subsample: [values]}"),
        ("k", "CV folds (default 10)"),
        ("seed", "integer master seed (required)"),
        ("test_fraction", "holdout fraction (default 0.1)"),
        ("log_target_B", "fit B in log space (default false)"),
        ("feature_rasters", "optional {feature name: raster path} to predict A/B rasters"),
        ("output_dir", "receives models, CV tables, residuals and manifest.json"),
    ],
    "krige": [
        ("targets", "{name: {raster, residuals, variogram (optional)}}"),
        ("floor", "lower clamp for updated values (default 0; null disables)"),
        ("max_neighbors", "kriging neighbours per cell (default 64)"),
        ("output_dir", "receives <name>_updated.asc, <name>_influence.asc and manifest.json"),
    ],
    "evaluate": [
        ("case_histories", "csv site_id,lon,lat,observed"),
        ("baseline", "{name, raster}"),
        ("candidates", "{model name: PGF raster path}"),
        ("n_draws", f"bootstrap draws (default {DEFAULT_N_DRAWS})"),
        ("level", f"CI level (default {DEFAULT_LEVEL})"),
        ("seed", "integer bootstrap seed (required)"),
        ("moran_cutoff_km", f"weight cutoff (default {MORAN_CUTOFF_KM:g})"),
        ("stratify_threshold", f"Moran's I that engages cluster bootstrap (default {MORAN_STRATIFY_THRESHOLD})"),
        ("n_clusters", "optional cluster count (default max(5, N//10))"),
        ("output_dir", "receives report.json, table.txt and manifest.json"),
    ],
    "impact": [
        ("pgf", "PGF raster"),
        ("density", "population density raster, persons/km2 (population)"),
        ("bin_edges", "density bin edges, null for +inf (population)"),
        ("thresholds", "PGF thresholds (population, network)"),
        ("assets", "asset csv id,lon,lat,category (assets)"),
        ("network", "GeoJSON LineString collection (network)"),
        ("step_deg", "network sampling step (default half a cell)"),
        ("output_dir", "results go to <output_dir>/<kind>/"),
    ],
    "diff": [
        ("a", "first PGF raster"),
        ("b", "second PGF raster; output is a - b"),
        ("output_dir", "receives diff.asc and manifest.json"),
    ],
}


class Config:
    """JSON run configuration with paths relative to its own directory."""

    def __init__(self, data: dict, base: Path, source: str):
        if not isinstance(data, dict):
            raise InputError("config must be a JSON object", source=source)
        self.data = data
        self.base = base
        self.source = source
        self.inputs = {}

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"malformed JSON: {exc}", source=str(path)) from None
        return cls(data, path.resolve().parent, str(path))

    def get(self, key, default=None):
        return self.data.get(key, default)

    def require(self, key):
        if key not in self.data:
            raise InputError(f"missing config key '{key}'", source=self.source)
        return self.data[key]

    def resolve(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base / p

    def input_path(self, rel, field: str) -> Path:
        """Resolve an input path, record its digest, and fail if it is absent."""
        if not isinstance(rel, str):
            raise InputError(f"config field '{field}' must be a path string", source=self.source)
        p = self.resolve(rel)
        if not p.exists():
            raise InputError(f"config field '{field}': input not found: {p}", source=self.source)
        if p.is_file():
            self.inputs[rel] = sha256_file(p)
        else:
            for f in sorted(p.rglob("*")):
                if f.is_file():
                    self.inputs[str(Path(rel) / f.relative_to(p))] = sha256_file(f)
        return p

    def output_dir(self, override=None) -> Path:
        if override:
            return Path(override)
        return self.resolve(self.require("output_dir"))

    def seed(self):
        s = self.require("seed")
        if not isinstance(s, int) or isinstance(s, bool):
            raise InputError("config field 'seed' must be an integer", source=self.source)
        return s


def _write_with_manifest(cfg: Config, files: dict, out_dir: Path, command: str, extra=None):
    base = {"command": command, "version": __version__}
    base.update(extra or {})
    manifest = build_manifest(base, cfg.inputs, cfg.data, files)
    all_files = dict(files)
    all_files["manifest.json"] = canonical_json(manifest)
    return write_atomic_dir(all_files, out_dir)


def _split_target(key, source):
    if "_" not in key:
        raise InputError(f"target key '{key}' must look like LPI_A", source=source)
    t, p = key.rsplit("_", 1)
    if t not in MI_TYPES or p not in ("A", "B"):
        raise InputError(f"target key '{key}' must be <MI type>_<A|B>", source=source)
    return t, p


def _fragility(cfg: Config):
    out = default_fragility()
    given = cfg.get("fragility") or {}
    for t, d in given.items():
        if t not in MI_TYPES:
            raise InputError(f"unknown MI type '{t}' in fragility", source=cfg.source)
        out[t] = FragilityCurve.from_dict(t, d)
    return out


def _variogram(cfg, spec_entry, sites, field):
    if spec_entry.get("variogram"):
        return load_variogram_file(cfg.input_path(spec_entry["variogram"], f"{field}.variogram"))
    if not sites:
        return None
    return fit_variogram_for_sites(sites)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: Config, args) -> int:
    event = load_shakemap(cfg.input_path(cfg.require("shakemap"), "shakemap"))
    rasters = cfg.require("rasters")
    model = {}
    for t in MI_TYPES:
        for p in ("A", "B"):
            try:
                rel = rasters[t][p]
            except (KeyError, TypeError):
                raise InputError(f"config field 'rasters.{t}.{p}' missing", source=cfg.source) from None
            model[(t, p)] = load_grid(cfg.input_path(rel, f"rasters.{t}.{p}"))
    mask = None
    if cfg.get("mask"):
        mask = load_grid(cfg.input_path(cfg.get("mask"), "mask"))
    residuals = {}
    for key, entry in (cfg.get("residuals") or {}).items():
        k = _split_target(key, cfg.source)
        sites = load_residual_file(cfg.input_path(entry["sites"], f"residuals.{key}.sites"))
        model_v = _variogram(cfg, entry, sites, f"residuals.{key}")
        if sites and model_v is not None:
            residuals[k] = ResidualInput(sites, model_v)
    products = run_scenario(event, model, _fragility(cfg), mask, residuals)
    products.manifest["command"] = "simulate"
    products.manifest["version"] = __version__
    out = write_products(products, cfg.output_dir(args.output_dir), cfg.inputs, cfg.data)
    ens = products.grids["pgf_ensemble"]
    n_valid = int(ens.valid.sum())
    mx = float(np.max(ens.valid_values())) if n_valid else float("nan")
    print(f"{event.event_id}: M{event.magnitude:g}, {n_valid} valid cells, "
          f"max ensemble PGF {mx:.4f} -> {out}")
    return EXIT_OK


def cmd_curves(cfg: Config, args) -> int:
    cpts = load_cpt_dir(cfg.input_path(cfg.require("cpt_dir"), "cpt_dir"))
    if not cpts:
        raise InputError("no CPT files found", source=cfg.source)
    types = tuple(cfg.get("mi_types") or MI_TYPES)
    for t in types:
        if t not in MI_TYPES:
            raise InputError(f"unknown MI type '{t}'", source=cfg.source)
    curves = build_all_curves(cpts, types)
    out = _write_with_manifest(cfg, {"curves.csv": curves_to_csv(curves)},
                               cfg.output_dir(args.output_dir), "curves")
    print(f"{len(curves)} curves from {len(cpts)} CPTs -> {out}")
    return EXIT_OK


def _param_grid(raw):
    if raw is None:
        return None
    grid = {}
    for k, vals in raw.items():
        if not isinstance(vals, list):
            vals = [vals]
        grid[k] = vals
    return grid


def cmd_train(cfg: Config, args) -> int:
    fpath = cfg.input_path(cfg.require("features"), "features")
    table = load_feature_table(fpath.read_text(), source=str(fpath))
    cpath = cfg.input_path(cfg.require("curves"), "curves")
    curves = curves_from_csv(cpath.read_text(), source=str(cpath))
    seed = cfg.seed()
    k = int(cfg.get("k", 10))
    test_fraction = float(cfg.get("test_fraction", 0.1))
    grid = _param_grid(cfg.get("param_grid"))
    log_b = bool(cfg.get("log_target_B", False))
    lookup = {(c.cpt_id, c.mi_type): c for c in curves}

    feature_grids = None
    if cfg.get("feature_rasters"):
        fr = cfg.get("feature_rasters")
        missing = [n for n in table.feature_names if n not in fr]
        if missing:
            raise InputError(f"feature_rasters lacks {missing}", source=cfg.source)
        feature_grids = [load_grid(cfg.input_path(fr[n], f"feature_rasters.{n}"))
                         for n in table.feature_names]

    files = {}
    summary = {}
    for t in MI_TYPES:
        rows = []
        for cid in table.row_ids:
            if (cid, t) not in lookup:
                raise InputError(f"no {t} curve for cpt_id '{cid}'", source=str(cpath))
            rows.append(lookup[(cid, t)])
        for p in ("A", "B"):
            y = np.array([getattr(c, p) for c in rows])
            log_t = log_b and p == "B"
            cv = grid_search_cv(table, y, grid, k=k, seed=seed, test_fraction=test_fraction,
                                n_jobs=args.threads, log_target=log_t)
            sub = table.subset(cv.train_idx)
            model = train_bagged_trees(sub, y[cv.train_idx], cv.best, seed=seed, n_jobs=args.threads,
                                       log_target=log_t, mi_type=t, target=p)
            test_mse = None
            if len(cv.test_idx):
                err = model.predict_batch(table.rows[cv.test_idx]) - y[cv.test_idx]
                test_mse = float(np.mean(err ** 2))
            oof = out_of_fold_predictions(table, y, cv.best, k=k, seed=seed,
                                          n_jobs=args.threads, log_target=log_t)
            name = f"{t}_{p}"
            files[f"model_{name}.json"] = model.to_json() + "\n"
            files[f"cv_{name}.csv"] = cv_table_csv(cv)
            files[f"residuals_{name}.csv"] = residuals_to_csv(
                zip(table.row_ids, table.lon, table.lat, y, oof))
            if feature_grids is not None:
                files[f"pred_{name}.asc"] = write_esri_ascii(model.predict_grid(feature_grids))
            summary[name] = {"best": {"n_trees": cv.best.n_trees, "max_depth": cv.best.max_depth,
                                      "min_leaf_size": cv.best.min_leaf_size,
                                      "feature_subsample": cv.best.feature_subsample},
                             "cv_mse": min(m for _, m, _ in cv.table),
                             "test_mse": test_mse, "n_train": int(len(cv.train_idx)),
                             "n_test": int(len(cv.test_idx))}
    files["summary.json"] = canonical_json(summary)
    out = _write_with_manifest(cfg, files, cfg.output_dir(args.output_dir), "train")
    print(f"trained {len(summary)} targets on {len(table)} rows -> {out}")
    return EXIT_OK


def cmd_krige(cfg: Config, args) -> int:
    targets = cfg.require("targets")
    floor = cfg.get("floor", 0.0)
    max_nb = int(cfg.get("max_neighbors", 64))
    files = {}
    summary = {}
    for name, entry in sorted(targets.items()):
        grid = load_grid(cfg.input_path(entry["raster"], f"targets.{name}.raster"))
        sites = load_residual_file(cfg.input_path(entry["residuals"], f"targets.{name}.residuals"))
        model = _variogram(cfg, entry, sites, f"targets.{name}")
        upd = apply_kriging_update(grid, sites, model, floor=floor, max_neighbors=max_nb)
        files[f"{name}_updated.asc"] = write_esri_ascii(upd.updated)
        files[f"{name}_influence.asc"] = write_esri_ascii(upd.influence)
        summary[name] = {"n_sites": len(sites), "updated_cells": upd.n_updated,
                         "clamped_cells": upd.n_clamped,
                         "variogram": None if model is None else model.to_dict()}
    files["summary.json"] = canonical_json(summary)
    out = _write_with_manifest(cfg, files, cfg.output_dir(args.output_dir), "krige")
    print(f"kriged {len(summary)} rasters -> {out}")
    return EXIT_OK


def cmd_evaluate(cfg: Config, args) -> int:
    cases = load_case_history_file(cfg.input_path(cfg.require("case_histories"), "case_histories"))
    base = cfg.require("baseline")
    try:
        base_name, base_path = base["name"], base["raster"]
    except (KeyError, TypeError):
        raise InputError("config field 'baseline' needs name and raster", source=cfg.source) from None
    baseline = load_grid(cfg.input_path(base_path, "baseline.raster"))
    cands_cfg = cfg.require("candidates")
    if not cands_cfg:
        raise InputError("config field 'candidates' is empty", source=cfg.source)
    cands = {n: load_grid(cfg.input_path(p, f"candidates.{n}")) for n, p in cands_cfg.items()}
    report = compare_models(
        cases, cands, base_name, baseline,
        n_draws=int(cfg.get("n_draws", DEFAULT_N_DRAWS)),
        level=float(cfg.get("level", DEFAULT_LEVEL)),
        seed=cfg.seed(),
        moran_cutoff_km=float(cfg.get("moran_cutoff_km", MORAN_CUTOFF_KM)),
        stratify_threshold=float(cfg.get("stratify_threshold", MORAN_STRATIFY_THRESHOLD)),
        n_clusters=cfg.get("n_clusters"),
        n_jobs=args.threads,
    )
    if report.dropped_sites:
        print(f"warning: {len(report.dropped_sites)} sites outside a raster were dropped",
              file=sys.stderr)
    table = report.to_table()
    out = _write_with_manifest(cfg, {"report.json": report.to_json(), "table.txt": table},
                               cfg.output_dir(args.output_dir), "evaluate")
    sys.stdout.write(table)
    print(f"N={report.n_samples}, stratified={report.stratified} -> {out}")
    return EXIT_OK


def _edges(raw):
    if raw is None:
        return DEFAULT_BIN_EDGES
    return tuple(math.inf if e is None else float(e) for e in raw)


def cmd_impact(cfg: Config, args) -> int:
    kind = args.kind
    pgf = load_grid(cfg.input_path(cfg.require("pgf"), "pgf"))
    thresholds = [float(t) for t in cfg.get("thresholds", [0.5])]
    files = {}
    if kind == "population":
        density = load_grid(cfg.input_path(cfg.require("density"), "density"))
        bins = population_bins(pgf, density, _edges(cfg.get("bin_edges")))
        exposure = [(t, exposure_count(pgf, density, t)) for t in thresholds]
        files["bins.csv"] = bins_to_csv(bins)
        files["exposure.csv"] = "threshold,persons\n" + "".join(f"{t!r},{p!r}\n" for t, p in exposure)
        files["population.json"] = to_json({"bins": bins,
                                            "exposure": [{"threshold": t, "persons": p} for t, p in exposure]})
        msg = f"{sum(b.count for b in bins)} cells in {len(bins)} bins"
    elif kind == "assets":
        assets = load_asset_file(cfg.input_path(cfg.require("assets"), "assets"))
        rows, missing = sample_assets(assets, pgf)
        files["assets.csv"] = assets_to_csv(rows)
        files["assets.json"] = to_json({"assets": rows, "missing": missing})
        msg = f"{len(rows)} assets, {missing} missing"
    else:
        segs = load_network_file(cfg.input_path(cfg.require("network"), "network"))
        step = cfg.get("step_deg")
        res = network_exposure(segs, pgf, thresholds, step, n_jobs=args.threads)
        files["segments.csv"] = segments_to_csv(res, thresholds)
        files["segments.json"] = to_json({"segments": res})
        msg = f"{len(res)} segments"
    out = _write_with_manifest(cfg, files, cfg.output_dir(args.output_dir) / kind, f"impact {kind}")
    print(f"{msg} -> {out}")
    return EXIT_OK


def cmd_diff(cfg: Config, args) -> int:
    a = load_grid(cfg.input_path(cfg.require("a"), "a"))
    b = load_grid(cfg.input_path(cfg.require("b"), "b"))
    d = diff_pgf(a, b)
    out = _write_with_manifest(cfg, {"diff.asc": write_esri_ascii(d)},
                               cfg.output_dir(args.output_dir), "diff")
    vals = d.valid_values()
    rng = f"[{vals.min():.4f}, {vals.max():.4f}]" if vals.size else "(no valid cells)"
    print(f"difference range {rng} -> {out}")
    return EXIT_OK


def cmd_info(path: Path) -> int:
    if not path.exists():
        raise InputError(f"not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".asc":
        g = load_grid(path)
        s = g.spec
        v = g.valid_values()
        print(f"{path}: {s.n_rows} x {s.n_cols} cells of {s.cell_size_deg:g} deg, "
              f"extent {tuple(round(x, 6) for x in s.extent)}, {v.size} valid"
              + (f", range [{v.min():g}, {v.max():g}]" if v.size else ""))
    elif suffix == ".xml":
        ev = load_shakemap(path)
        s = ev.pga.spec
        print(f"{path}: event {ev.event_id} M{ev.magnitude:g} (MSF {ev.msf:.4f}), "
              f"{s.n_rows} x {s.n_cols} PGA nodes, max PGA {ev.pga.valid_values().max():.4f} g")
    elif suffix == ".json":
        doc = json.loads(path.read_text())
        if isinstance(doc, dict) and "trees" in doc:
            print(f"{path}: tree ensemble {doc.get('mi_type')}_{doc.get('target')}, "
                  f"{len(doc['trees'])} trees, {len(doc['feature_names'])} features")
        elif isinstance(doc, dict) and "digest" in doc:
            print(f"{path}: manifest for '{doc.get('command', 'simulate')}', "
                  f"{len(doc.get('products', {}))} products, digest {doc['digest'][:12]}")
        else:
            keys = ", ".join(sorted(doc)) if isinstance(doc, dict) else type(doc).__name__
            print(f"{path}: JSON with keys {keys}")
    else:
        lines = [l for l in path.read_text().splitlines() if l.strip() and not l.startswith("#")]
        head = lines[0] if lines else ""
        print(f"{path}: {max(len(lines) - 1, 0)} data rows, header '{head}'")
    return EXIT_OK


COMMANDS = {
    "simulate": (cmd_simulate, "run a scenario and write every hazard product"),
    "curves": (cmd_curves, "build MI-PGA_M curves and A/B fits for a CPT directory"),
    "train": (cmd_train, "grid-search and fit the six A/B surrogate models"),
    "krige": (cmd_krige, "apply a residual kriging update to parameter rasters"),
    "evaluate": (cmd_evaluate, "score PGF rasters against case histories"),
    "impact": (cmd_impact, "population, asset or road-network summaries of a PGF raster"),
    "diff": (cmd_diff, "difference of two PGF rasters (a - b)"),
}


def _epilog(cmd):
    lines = ["config keys read:"]
    lines += [f"  {k:<20} {desc}" for k, desc in CONFIG_KEYS[cmd]]
    lines.append("relative paths resolve against the config file's directory")
    return "\n".join(lines)


def build_parser():
    parser = argparse.ArgumentParser(prog="liqforecast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_, epilog=_epilog(name),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if name == "impact":
            p.add_argument("kind", choices=("population", "assets", "network"))
        if name == "diff":
            p.add_argument("--config", help="JSON config with a, b and output_dir")
            p.add_argument("--a", help="first raster (overrides config)")
            p.add_argument("--b", help="second raster (overrides config)")
            p.add_argument("--out", dest="output_dir", help="output directory (overrides config)")
        else:
            p.add_argument("--config", required=True, help="JSON run configuration")
            p.add_argument("--output-dir", help="override the config's output_dir")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads; results do not depend on it")
    p = sub.add_parser("info", help="summarize a raster, ShakeMap, model or CSV file",
                       description="summarize a raster, ShakeMap, model or CSV file")
    p.add_argument("path")
    return parser


def _dispatch(args) -> int:
    if args.command == "info":
        return cmd_info(Path(args.path))
    if args.threads < 1:
        raise InputError("--threads must be >= 1")
    if args.command == "diff":
        if args.config:
            cfg = Config.load(args.config)
        else:
            cfg = Config({}, Path.cwd(), "<command line>")
        for key in ("a", "b"):
            if getattr(args, key):
                cfg.data[key] = str(Path(getattr(args, key)).resolve())
        if args.output_dir:
            cfg.data["output_dir"] = str(Path(args.output_dir).resolve())
        return cmd_diff(cfg, args)
    cfg = Config.load(args.config)
    return COMMANDS[args.command][0](cfg, args)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (NumericalError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, FileNotFoundError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
