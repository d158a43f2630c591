"""CPT-based liquefaction response: magnitude scaling, factor-of-safety
profiles, manifestation indices and their PGA_M response curves.

Units throughout: depth in m, stress in kPa, acceleration in g.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import InputError

MI_TYPES = ("LPI", "LPI_ISH", "LSN")

MAGNITUDE_RANGE = (4.0, 9.5)
MSF_CAP = 1.8

# PGA/M box the response curves are built over, before magnitude scaling.
CURVE_PGA_RANGE = (0.05, 2.0)
CURVE_MAGNITUDE_RANGE = (4.5, 9.0)
CURVE_N_SAMPLES = 40

# Demo triggering constants.
GAMMA_ABOVE_GWT = 18.0   # kN/m3
GAMMA_BELOW_GWT = 19.0   # kN/m3
GAMMA_WATER = 9.81       # kN/m3
P_ATM = 101.3            # kPa
MIN_EFFECTIVE_STRESS = 1.0
QC1N_MAX = 254.0
FS_CAP = 4.0
EPS_V_MAX = 0.05


def msf(M: float) -> float:
    """Magnitude scaling factor, ``min(6.9 exp(-M/4) - 0.058, 1.8)``."""
    lo, hi = MAGNITUDE_RANGE
    if not (lo <= M <= hi):
        raise ValueError(f"magnitude {M} outside supported range [{lo}, {hi}]")
    return min(6.9 * math.exp(-M / 4.0) - 0.058, MSF_CAP)


def scale_pga_m(pga, M: float):
    """Magnitude-scaled PGA, ``PGA / msf(M)``.

    Accepts a scalar, an array or a :class:`~liqforecast.raster.GeoGrid`
    (nodata cells pass through).
    """
    factor = msf(M)
    from .raster import GeoGrid, map_valid

    if isinstance(pga, GeoGrid):
        if np.any(pga.valid_values() < 0):
            raise ValueError("PGA must be non-negative")
        return map_valid(pga, lambda v: v / factor)
    arr = np.asarray(pga, dtype=float)
    if np.any(arr < 0):
        raise ValueError("PGA must be non-negative")
    out = arr / factor
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------

@dataclass
class CptProfile:
    cpt_id: str
    lon: float
    lat: float
    gwt_depth: float
    z: np.ndarray
    qc: np.ndarray
    fs: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.qc = np.asarray(self.qc, dtype=float)
        self.fs = np.asarray(self.fs, dtype=float)
        if not (self.z.shape == self.qc.shape == self.fs.shape) or self.z.ndim != 1:
            raise ValueError("z, qc and fs must be 1-D arrays of equal length")
        if self.z.size == 0:
            raise ValueError(f"CPT {self.cpt_id}: no samples")
        if np.any(np.diff(self.z) <= 0):
            raise ValueError(f"CPT {self.cpt_id}: depths must be strictly increasing")
        if self.z[0] <= 0 or self.z[-1] > 50.0:
            raise ValueError(f"CPT {self.cpt_id}: depths must lie in (0, 50] m")
        if np.any(self.qc <= 0):
            raise ValueError(f"CPT {self.cpt_id}: qc must be positive")
        if self.gwt_depth < 0:
            raise ValueError(f"CPT {self.cpt_id}: gwt_depth must be >= 0")

    def layer_bounds(self):
        """Top and bottom of the layer each sample represents.

        Samples sit at layer midpoints; interior boundaries are halfway
        between neighbouring samples and the outer ones mirror them, clipped
        at the ground surface.
        """
        z = self.z
        if z.size == 1:
            return np.array([0.0]), np.array([2.0 * z[0]])
        mids = 0.5 * (z[1:] + z[:-1])
        top = np.concatenate([[max(0.0, z[0] - (mids[0] - z[0]))], mids])
        bot = np.concatenate([mids, [z[-1] + (z[-1] - mids[-1])]])
        return top, bot


@dataclass
class FsProfile:
    """Per-layer factor of safety and volumetric strain.

    ``z`` are layer midpoints, ``dz`` thicknesses; ``fs`` is ``inf`` for
    layers that cannot liquefy (above the water table or without demand).
    """

    cpt_id: str
    z: np.ndarray
    dz: np.ndarray
    fs: np.ndarray
    eps_v: np.ndarray
    crust_thickness: float

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.dz = np.asarray(self.dz, dtype=float)
        self.fs = np.asarray(self.fs, dtype=float)
        self.eps_v = np.asarray(self.eps_v, dtype=float)
        if not (self.z.shape == self.dz.shape == self.fs.shape == self.eps_v.shape):
            raise ValueError("layer arrays must share one length")
        if np.any(np.diff(self.z) <= 0):
            raise ValueError("layers must be ordered by depth")
        if np.any(self.fs < 0) or np.any(np.isnan(self.fs)):
            raise ValueError("FS must be >= 0")
        if np.any(self.eps_v < 0) or np.any(self.eps_v > 0.10):
            raise ValueError("eps_v must lie in [0, 0.10]")
        if self.crust_thickness < 0:
            raise ValueError("crust thickness must be >= 0")

    @classmethod
    def uniform(cls, top, bottom, dz, fs, eps_v=None, crust_thickness=None, cpt_id="synthetic"):
        """Evenly discretized profile over ``[top, bottom]``.

        ``fs`` and ``eps_v`` may be scalars or callables of depth. The strain
        defaults to :func:`strain_from_fs` and the crust to the top of the
        first layer with FS <= 1.
        """
        n = int(round((bottom - top) / dz))
        z = top + (np.arange(n) + 0.5) * dz
        fs_v = np.array([fs(v) for v in z]) if callable(fs) else np.full(n, float(fs))
        if eps_v is None:
            ev = strain_from_fs(fs_v)
        elif callable(eps_v):
            ev = np.array([eps_v(v) for v in z])
        else:
            ev = np.full(n, float(eps_v))
        if crust_thickness is None:
            crust_thickness = _crust(z - dz / 2, fs_v, bottom)
        return cls(cpt_id, z, np.full(n, float(dz)), fs_v, ev, crust_thickness)

    @property
    def tops(self):
        return self.z - self.dz / 2

    @property
    def bottoms(self):
        return self.z + self.dz / 2


def strain_from_fs(fs):
    """Volumetric strain stand-in, ``0.05 * clamp((2 - FS) / 1.5, 0, 1)``."""
    fs = np.asarray(fs, dtype=float)
    with np.errstate(invalid="ignore"):
        frac = np.clip((2.0 - fs) / 1.5, 0.0, 1.0)
    frac = np.where(np.isinf(fs), 0.0, frac)
    return EPS_V_MAX * frac


def _crust(tops, fs, profile_depth):
    hits = np.flatnonzero(np.isfinite(fs) & (fs <= 1.0))
    return float(tops[hits[0]]) if hits.size else float(profile_depth)


def _crr(qc1n):
    small = 0.833 * (qc1n / 1000.0) + 0.05
    # lower branch's limit at 50 floors the upper one so CRR stays monotone
    large = np.maximum(93.0 * (qc1n / 1000.0) ** 3 + 0.08, 0.833 * 0.05 + 0.05)
    return np.where(qc1n < 50.0, small, large)


def demo_triggering(cpt: CptProfile, pga_m: float) -> FsProfile:
    """Simplified stress-based triggering used to build demonstration curves.

    Evaluated at each sample depth: total stress from unit weights of 18 and
    19 kN/m3 above and below the water table, hydrostatic pore pressure,
    Liao-Whitman ``rd``, ``CSR = 0.65 pga_m (sv/sv') rd`` and a clean-sand
    CRR from the stress-normalized tip resistance. FS is capped at 4 and is
    infinite above the water table or when ``pga_m`` is zero.
    """
    if pga_m < 0:
        raise ValueError("pga_m must be >= 0")
    z = cpt.z
    gwt = cpt.gwt_depth
    sigma_v = GAMMA_ABOVE_GWT * np.minimum(z, gwt) + GAMMA_BELOW_GWT * np.maximum(z - gwt, 0.0)
    u = GAMMA_WATER * np.maximum(z - gwt, 0.0)
    sigma_eff = np.maximum(sigma_v - u, MIN_EFFECTIVE_STRESS)
    rd = np.where(z <= 9.15, 1.0 - 0.00765 * z, np.maximum(1.174 - 0.0267 * z, 0.5))
    csr = 0.65 * pga_m * (sigma_v / sigma_eff) * rd
    qc1n = np.clip((cpt.qc / P_ATM) * np.sqrt(P_ATM / sigma_eff), 0.0, QC1N_MAX)
    crr = _crr(qc1n)
    saturated = z > gwt
    fs = np.full(z.shape, np.inf)
    if pga_m > 0:
        fs[saturated] = np.minimum(crr[saturated] / csr[saturated], FS_CAP)
    top, bot = cpt.layer_bounds()
    return FsProfile(
        cpt_id=cpt.cpt_id,
        z=z.copy(),
        dz=bot - top,
        fs=fs,
        eps_v=strain_from_fs(fs),
        crust_thickness=_crust(top, fs, bot[-1]),
    )


# ---------------------------------------------------------------------------
# Manifestation indices
# ---------------------------------------------------------------------------

def _clipped(profile: FsProfile, lo, hi):
    """Midpoints and thicknesses of the layers clipped to ``[lo, hi]``."""
    top = np.clip(profile.tops, lo, hi)
    bot = np.clip(profile.bottoms, lo, hi)
    return 0.5 * (top + bot), bot - top


def _severity(fs):
    # F = 1 - FS for FS <= 1, else 0; inf (non-liquefiable) gives 0
    return np.where(fs <= 1.0, 1.0 - np.minimum(fs, 1.0), 0.0)


def lpi(profile: FsProfile) -> float:
    """Liquefaction potential index over the top 20 m, weight ``10 - 0.5 z``."""
    zm, dz = _clipped(profile, 0.0, 20.0)
    return float(np.sum(_severity(profile.fs) * (10.0 - 0.5 * zm) * dz))


LPI_ISH_WEIGHT = 25.56
LPI_ISH_MIN_DEPTH = 0.4
LPI_ISH_CRUST_GATE = 5.0


def lpi_ish_default(profile: FsProfile) -> float:
    """Crust-gated LPI variant with hyperbolic depth weighting ``25.56 / z``.

    Zero when the non-liquefiable crust is at least 5 m thick; otherwise
    layers between 0.4 m and 20 m contribute.
    """
    if profile.crust_thickness >= LPI_ISH_CRUST_GATE:
        return 0.0
    zm, dz = _clipped(profile, LPI_ISH_MIN_DEPTH, 20.0)
    w = np.divide(LPI_ISH_WEIGHT, zm, out=np.zeros_like(zm), where=dz > 0)
    return float(np.sum(_severity(profile.fs) * w * dz))


LSN_MIN_DEPTH = 0.4


def lsn(profile: FsProfile) -> float:
    """Liquefaction severity number, ``1000 * sum(eps_v / z * dz)``."""
    zm, dz = _clipped(profile, LSN_MIN_DEPTH, np.inf)
    ratio = np.divide(profile.eps_v, zm, out=np.zeros_like(zm), where=dz > 0)
    return float(1000.0 * np.sum(ratio * dz))


MI_FUNCTIONS = {"LPI": lpi, "LPI_ISH": lpi_ish_default, "LSN": lsn}


def manifestation_index(profile: FsProfile, mi_type: str) -> float:
    try:
        return MI_FUNCTIONS[mi_type](profile)
    except KeyError:
        raise ValueError(f"unknown MI type '{mi_type}'; expected one of {MI_TYPES}") from None


# ---------------------------------------------------------------------------
# Response curves
# ---------------------------------------------------------------------------

def curve_pga_m_grid(n: int = CURVE_N_SAMPLES):
    """Log-spaced PGA_M values spanning the scaled image of the PGA x M box."""
    lo = CURVE_PGA_RANGE[0] / msf(CURVE_MAGNITUDE_RANGE[0])
    hi = CURVE_PGA_RANGE[1] / msf(CURVE_MAGNITUDE_RANGE[1])
    return np.geomspace(lo, hi, n)


def eval_mi(A, B, pga_m):
    """Saturating response ``A * (1 - exp(-B * pga_m))``; broadcasts."""
    out = np.asarray(A, dtype=float) * -np.expm1(-np.asarray(B, dtype=float)
                                                 * np.asarray(pga_m, dtype=float))
    return float(out) if out.ndim == 0 else out


@dataclass
class MiCurve:
    cpt_id: str
    mi_type: str
    pga_m: np.ndarray
    mi: np.ndarray
    A: float = 0.0
    B: float = 1.0
    fit_sse: float = 0.0

    def __post_init__(self):
        self.pga_m = np.asarray(self.pga_m, dtype=float)
        self.mi = np.asarray(self.mi, dtype=float)

    def predict(self, pga_m):
        return eval_mi(self.A, self.B, pga_m)


@dataclass
class FitResult:
    A: float
    B: float
    sse: float
    grid_best_sse: float = field(default=0.0, repr=False)
    iterations: int = 0


def _sse(A, B, x, y):
    r = y - A * -np.expm1(-B * x)
    return float(r @ r)


FIT_A_GRID = 25
FIT_B_GRID = 60
FIT_B_RANGE = (0.01, 50.0)


def coarse_candidates(max_mi: float):
    """(A, B) candidates of the coarse log-grid search."""
    A = np.geomspace(max_mi, 3.0 * max_mi, FIT_A_GRID)
    B = np.geomspace(*FIT_B_RANGE, FIT_B_GRID)
    return A, B


def fit_ab(pga_m, mi, max_iter: int = 200, rtol: float = 1e-10) -> FitResult:
    """Least-squares fit of ``A * (1 - exp(-B x))`` to a response curve.

    A coarse log-grid search supplies the start for damped Gauss-Newton
    iterations, which only ever accept steps that lower the SSE. Curves whose
    peak is below 1e-6 return ``A=0, B=1``.
    """
    x = np.asarray(pga_m, dtype=float)
    y = np.asarray(mi, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pga_m and mi must be 1-D arrays of equal length")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("curve samples must be finite")
    if x.size < 5:
        raise ValueError(f"need at least 5 samples to fit, got {x.size}")
    if np.any(y < 0) or np.any(x < 0):
        raise ValueError("curve samples must be non-negative")
    max_mi = float(y.max())
    if max_mi < 1e-6:
        return FitResult(0.0, 1.0, 0.0)

    A_grid, B_grid = coarse_candidates(max_mi)
    basis = -np.expm1(-np.outer(B_grid, x))                      # (nB, n)
    resid = y[None, None, :] - A_grid[:, None, None] * basis[None, :, :]
    sse_grid = np.einsum("abn,abn->ab", resid, resid)
    ia, ib = np.unravel_index(np.argmin(sse_grid), sse_grid.shape)
    A, B = float(A_grid[ia]), float(B_grid[ib])
    sse = float(sse_grid[ia, ib])
    grid_best = sse

    it = 0
    for it in range(1, max_iter + 1):
        e = np.exp(-B * x)
        g = -np.expm1(-B * x)
        r = y - A * g
        J = np.column_stack([g, A * x * e])
        step, *_ = np.linalg.lstsq(J, r, rcond=None)
        accepted = False
        t = 1.0
        for _ in range(40):
            A_new, B_new = A + t * step[0], B + t * step[1]
            if A_new >= 0 and B_new > 0:
                sse_new = _sse(A_new, B_new, x, y)
                if sse_new <= sse:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            break
        change = (sse - sse_new) / sse if sse > 0 else 0.0
        A, B, sse = A_new, B_new, sse_new
        if sse == 0.0 or change < rtol:
            break
    return FitResult(A, B, sse, grid_best_sse=grid_best, iterations=it)


Triggering = Callable[[CptProfile, float], FsProfile]


def build_mi_curve(cpt: CptProfile, mi_type: str, triggering: Triggering = demo_triggering,
                   pga_m_values=None) -> MiCurve:
    """Sample one CPT's MI response over PGA_M and fit its A/B parameters."""
    if mi_type not in MI_FUNCTIONS:
        raise ValueError(f"unknown MI type '{mi_type}'")
    xs = curve_pga_m_grid() if pga_m_values is None else np.asarray(pga_m_values, dtype=float)
    mi = np.array([manifestation_index(triggering(cpt, float(x)), mi_type) for x in xs])
    fit = fit_ab(xs, mi)
    return MiCurve(cpt.cpt_id, mi_type, xs, mi, fit.A, fit.B, fit.sse)


def build_all_curves(cpts: Sequence[CptProfile], mi_types=MI_TYPES,
                     triggering: Triggering = demo_triggering):
    """Curves for every CPT and MI type, ordered by cpt_id then MI type."""
    out = []
    for cpt in sorted(cpts, key=lambda c: c.cpt_id):
        for t in mi_types:
            out.append(build_mi_curve(cpt, t, triggering))
    return out


def curves_to_csv(curves: Sequence[MiCurve]) -> str:
    """One row per curve: id, type, A, B, SSE, then the sample pairs."""
    if not curves:
        return "cpt_id,mi_type,A,B,fit_sse\n"
    n = len(curves[0].pga_m)
    header = ["cpt_id", "mi_type", "A", "B", "fit_sse"]
    for i in range(n):
        header += [f"pga_m_{i:02d}", f"mi_{i:02d}"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for c in curves:
        if len(c.pga_m) != n:
            raise ValueError("all curves in one export must share a sample count")
        row = [c.cpt_id, c.mi_type, repr(float(c.A)), repr(float(c.B)), repr(float(c.fit_sse))]
        for x, y in zip(c.pga_m, c.mi):
            row += [repr(float(x)), repr(float(y))]
        w.writerow(row)
    return buf.getvalue()


def curves_from_csv(text: str, source=None):
    rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith("#")]
    if not rows or rows[0][:5] != ["cpt_id", "mi_type", "A", "B", "fit_sse"]:
        raise InputError("curve CSV must start with cpt_id,mi_type,A,B,fit_sse", source=source, line=1)
    out = []
    for lineno, r in enumerate(rows[1:], start=2):
        try:
            nums = [float(v) for v in r[2:]]
        except ValueError:
            raise InputError("non-numeric curve value", source=source, line=lineno) from None
        A, B, sse = nums[:3]
        pairs = np.array(nums[3:]).reshape(-1, 2)
        out.append(MiCurve(r[0], r[1], pairs[:, 0], pairs[:, 1], A, B, sse))
    return out


# ---------------------------------------------------------------------------
# Fragility
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FragilityCurve:
    """Map from a manifestation index to a probability of ground failure.

    ``form="lognormal"`` uses median ``theta`` and dispersion ``beta``;
    ``form="table"`` interpolates linearly between ``(mi, pgf)`` breakpoints.
    """

    mi_type: str
    form: str = "lognormal"
    theta: float | None = None
    beta: float | None = None
    table: tuple = ()

    def __post_init__(self):
        if self.form == "lognormal":
            if self.theta is None or self.beta is None or not (self.theta > 0 and self.beta > 0):
                raise ValueError("lognormal fragility needs theta > 0 and beta > 0")
        elif self.form == "table":
            pts = tuple((float(a), float(b)) for a, b in self.table)
            if len(pts) < 2:
                raise ValueError("table fragility needs at least two breakpoints")
            mis = [p[0] for p in pts]
            pgfs = [p[1] for p in pts]
            if any(b <= a for a, b in zip(mis, mis[1:])):
                raise ValueError("table MI breakpoints must be strictly increasing")
            if any(p < 0 or p > 1 for p in pgfs) or any(b < a for a, b in zip(pgfs, pgfs[1:])):
                raise ValueError("table PGF values must be in [0, 1] and non-decreasing")
            object.__setattr__(self, "table", pts)
        else:
            raise ValueError(f"unknown fragility form '{self.form}'")

    def __call__(self, mi):
        return fragility_pgf(mi, self)

    def to_dict(self):
        if self.form == "lognormal":
            return {"form": "lognormal", "theta": self.theta, "beta": self.beta}
        return {"form": "table", "table": [list(p) for p in self.table]}

    @classmethod
    def from_dict(cls, mi_type, d):
        form = d.get("form", "lognormal")
        if form == "table":
            return cls(mi_type, "table", table=tuple(tuple(p) for p in d["table"]))
        return cls(mi_type, "lognormal", theta=float(d["theta"]), beta=float(d["beta"]))


def fragility_pgf(mi, curve: FragilityCurve):
    """Probability of ground failure for MI value(s); MI = 0 maps to 0."""
    m = np.asarray(mi, dtype=float)
    if np.any(m < 0):
        raise ValueError("MI must be >= 0")
    if curve.form == "lognormal":
        with np.errstate(divide="ignore"):
            z = (np.log(m) - math.log(curve.theta)) / curve.beta
        out = np.where(m > 0, ndtr(z), 0.0)
    else:
        xs, ps = zip(*curve.table)
        out = np.interp(m, xs, ps)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


# Placeholder fragility medians pending published parameters.
DEFAULT_FRAGILITY_THETA = {"LPI": 5.0, "LPI_ISH": 5.0, "LSN": 15.0}
DEFAULT_FRAGILITY_BETA = 0.7


def default_fragility():
    return {t: FragilityCurve(t, "lognormal", DEFAULT_FRAGILITY_THETA[t], DEFAULT_FRAGILITY_BETA)
            for t in MI_TYPES}
