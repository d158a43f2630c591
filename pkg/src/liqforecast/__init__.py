"""Scenario liquefaction ground-failure mapping from CPT-trained surrogates.

Subpackages follow the processing chain: :mod:`raster` and :mod:`ingest`
read inputs, :mod:`geotech` builds MI curves from CPTs, :mod:`surrogate` and
:mod:`kriging` map curve parameters to rasters, :mod:`hazard` runs scenarios,
and :mod:`stats` / :mod:`impact` evaluate and summarize the products.
"""

from .errors import InputError, NumericalError
from .geotech import MI_TYPES, FragilityCurve, eval_mi, fit_ab, msf, scale_pga_m
from .hazard import run_scenario, write_products
from .ingest import parse_shakemap_grid
from .raster import GeoGrid, GridSpec, read_esri_ascii, write_esri_ascii

__version__ = "0.1.0"

__all__ = [
    "InputError", "NumericalError", "MI_TYPES", "FragilityCurve", "eval_mi", "fit_ab",
    "msf", "scale_pga_m", "run_scenario", "write_products", "parse_shakemap_grid",
    "GeoGrid", "GridSpec", "read_esri_ascii", "write_esri_ascii",
]
