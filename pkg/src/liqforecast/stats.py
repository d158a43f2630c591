"""Probabilistic-forecast evaluation: Brier scores, bootstrap intervals,
spatial autocorrelation screening and distribution comparisons."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .geo import pairwise_km
from .raster import GeoGrid, sample_points

DEFAULT_N_DRAWS = 10_000
DEFAULT_LEVEL = 0.99
MORAN_STRATIFY_THRESHOLD = 0.3
MORAN_CUTOFF_KM = 50.0
_BOOTSTRAP_BLOCK = 500


@dataclass(frozen=True)
class EvaluationSample:
    site_id: str
    lon: float
    lat: float
    predicted: float
    observed: int

    @property
    def squared_error(self):
        return (self.predicted - self.observed) ** 2


def brier_score(predicted, observed) -> float:
    """Mean squared difference between probabilities and 0/1 outcomes."""
    p = np.asarray(predicted, dtype=float)
    o = np.asarray(observed, dtype=float)
    if p.shape != o.shape:
        raise ValueError("predicted and observed must have the same length")
    if p.size == 0:
        raise ValueError("cannot score an empty sample")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("predicted probabilities must lie in [0, 1]")
    if np.any((o != 0) & (o != 1)):
        raise ValueError("observed outcomes must be 0 or 1")
    return float(np.mean((p - o) ** 2))


def brier(samples) -> float:
    return brier_score([s.predicted for s in samples], [s.observed for s in samples])


@dataclass
class BootstrapResult:
    lower: float
    upper: float
    draws: np.ndarray
    clustered: bool = False


def bootstrap_ci(values, n_draws: int = DEFAULT_N_DRAWS, level: float = DEFAULT_LEVEL,
                 seed: int = 0, cluster_labels=None, n_jobs: int = 1) -> BootstrapResult:
    """Percentile bootstrap interval for the mean of ``values``.

    Without labels, sites are resampled with replacement. With
    ``cluster_labels``, whole clusters are resampled and their members pooled.
    Draws come in fixed blocks seeded by ``SeedSequence([seed, block])``, so
    the result does not depend on ``n_jobs``.
    """
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise ValueError("bootstrap needs at least 2 values")
    if not (0 < level < 1):
        raise ValueError("level must lie in (0, 1)")
    if cluster_labels is not None:
        labels = np.asarray(cluster_labels)
        if labels.shape != x.shape:
            raise ValueError("one cluster label per value is required")
        uniq, inv = np.unique(labels, return_inverse=True)
        if uniq.size < 2:
            raise ValueError("cluster bootstrap needs at least 2 clusters")
        sums = np.bincount(inv, weights=x)
        counts = np.bincount(inv).astype(float)
        n_units = uniq.size
    else:
        n_units = x.size

    def block(b):
        lo = b * _BOOTSTRAP_BLOCK
        size = min(_BOOTSTRAP_BLOCK, n_draws - lo)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), b]))
        idx = rng.integers(0, n_units, size=(size, n_units))
        if cluster_labels is None:
            return x[idx].mean(axis=1)
        return sums[idx].sum(axis=1) / counts[idx].sum(axis=1)

    n_blocks = -(-n_draws // _BOOTSTRAP_BLOCK)
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(block, range(n_blocks)))
    else:
        parts = [block(b) for b in range(n_blocks)]
    draws = np.concatenate(parts)
    alpha = (1.0 - level) / 2.0
    lower, upper = np.percentile(draws, [100 * alpha, 100 * (1 - alpha)])
    return BootstrapResult(float(lower), float(upper), draws, cluster_labels is not None)


# ---------------------------------------------------------------------------
# Spatial autocorrelation
# ---------------------------------------------------------------------------

def inverse_distance_weights(lon, lat, cutoff_km: float = MORAN_CUTOFF_KM,
                             row_standardize: bool = True):
    """Inverse haversine distance weights, zero beyond ``cutoff_km``.

    Coincident sites get no mutual weight.
    """
    d = pairwise_km(lon, lat)
    with np.errstate(divide="ignore"):
        w = np.where((d > 0) & (d <= cutoff_km), 1.0 / d, 0.0)
    np.fill_diagonal(w, 0.0)
    if row_standardize:
        rs = w.sum(axis=1, keepdims=True)
        w = np.divide(w, rs, out=np.zeros_like(w), where=rs > 0)
    return w


def rook_weights(n_rows: int, n_cols: int):
    """Binary rook-contiguity weights for a row-major lattice."""
    n = n_rows * n_cols
    w = np.zeros((n, n))
    for r in range(n_rows):
        for c in range(n_cols):
            i = r * n_cols + c
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < n_rows and 0 <= cc < n_cols:
                    w[i, rr * n_cols + cc] = 1.0
    return w


def morans_i(values, weights) -> float | None:
    """Global Moran's I; ``None`` when the values have zero variance.

    ``weights`` is an N x N matrix (the diagonal is ignored).
    """
    x = np.asarray(values, dtype=float)
    w = np.array(weights, dtype=float)
    n = x.size
    if n < 3:
        raise ValueError("Moran's I needs at least 3 values")
    if w.shape != (n, n):
        raise ValueError("weights must be N x N")
    np.fill_diagonal(w, 0.0)
    dev = x - x.mean()
    denom = float(dev @ dev)
    if denom == 0.0 or np.all(x == x[0]):
        return None
    total = w.sum()
    if total == 0:
        return None
    return float(n / total * (dev @ w @ dev) / denom)


def samples_morans_i(samples, cutoff_km: float = MORAN_CUTOFF_KM):
    """Moran's I of squared errors under the default distance weights."""
    lon = [s.lon for s in samples]
    lat = [s.lat for s in samples]
    return morans_i([s.squared_error for s in samples], inverse_distance_weights(lon, lat, cutoff_km))


def default_cluster_count(n: int) -> int:
    return min(n, max(5, n // 10))


def cluster_stratify(lon, lat, n_clusters: int | None = None):
    """Complete-linkage agglomerative clustering on haversine distance.

    Each step merges the closest pair of clusters; ties go to the pair whose
    smallest member indices are lowest. Labels are numbered in order of each
    cluster's first member, so they are canonical for a given partition.
    """
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    n = lon.size
    if n_clusters is None:
        n_clusters = default_cluster_count(n)
    if not (2 <= n_clusters <= n):
        raise ValueError(f"need 2 <= n_clusters <= N (got {n_clusters}, N={n})")
    d = pairwise_km(lon, lat)
    # upper triangle holds inter-cluster distances keyed by smallest member
    cd = np.where(np.triu(np.ones((n, n), dtype=bool), k=1), d, np.inf)
    members = {i: [i] for i in range(n)}
    for _ in range(n - n_clusters):
        flat = int(np.argmin(cd))
        i, j = divmod(flat, n)
        # complete linkage: merged distance is the max of the two
        rows = np.maximum(np.minimum(cd[i, :], cd[:, i]), np.minimum(cd[j, :], cd[:, j]))
        members[i].extend(members.pop(j))
        cd[j, :] = np.inf
        cd[:, j] = np.inf
        alive = np.array(sorted(members))
        for k in alive:
            if k == i:
                continue
            if k < i:
                cd[k, i] = rows[k]
            else:
                cd[i, k] = rows[k]
    labels = np.empty(n, dtype=int)
    for lab, rep in enumerate(sorted(members)):
        labels[members[rep]] = lab
    return labels


# ---------------------------------------------------------------------------
# Distribution comparisons
# ---------------------------------------------------------------------------

def ks_two_sample(a, b) -> float:
    """Largest absolute gap between the two empirical CDFs."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / a.size
    fb = np.searchsorted(b, pts, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def cohens_d(a, b) -> float | None:
    """Standardized mean difference ``(mean(a) - mean(b)) / pooled SD``.

    Returns ``None`` when the pooled SD is zero.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 values")
    na, nb = a.size, b.size
    pooled = math.sqrt(((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2))
    if pooled == 0.0:
        return None
    return float((a.mean() - b.mean()) / pooled)


# ---------------------------------------------------------------------------
# Model comparison report
# ---------------------------------------------------------------------------

@dataclass
class ModelScore:
    name: str
    mean_bs: float
    ci_lower: float
    ci_upper: float
    n: int
    morans_i: float | None = None
    ks: float | None = None
    cohens_d: float | None = None
    is_baseline: bool = False


@dataclass
class EvaluationReport:
    rows: list
    baseline: str
    level: float = DEFAULT_LEVEL
    n_draws: int = DEFAULT_N_DRAWS
    stratified: bool = False
    n_clusters: int | None = None
    n_samples: int = 0
    dropped_sites: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["rows"] = [asdict(r) for r in self.rows]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self):
        return render_table(self.rows, self.level)


def _f(v, digits):
    if v is None:
        return "-"
    return f"{v + 0.0:.{digits}f}" if round(v, digits) != 0 else f"{0.0:.{digits}f}"


def render_table(rows, level: float = DEFAULT_LEVEL) -> str:
    """Aligned text table: Model | Mean BS | CI | KS | Cohen's d.

    ``level`` is noted in a trailing line.
    """
    header = ["Model", "Mean BS", "CI", "KS", "Cohen's d"]
    body = []
    for r in rows:
        body.append([
            r.name,
            _f(r.mean_bs, 3),
            f"{_f(r.ci_lower, 3)} - {_f(r.ci_upper, 3)}",
            "-" if r.is_baseline else _f(r.ks, 2),
            "-" if r.is_baseline else _f(r.cohens_d, 2),
        ])
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = [" | ".join(h.ljust(w) for h, w in zip(header, widths)),
             "-+-".join("-" * w for w in widths)]
    lines += [" | ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in body]
    lines.append(f"CI level: {level * 100:g}%")
    return "\n".join(lines) + "\n"


def build_samples(case_histories, grid: GeoGrid):
    """Nearest-cell samples; sites off the raster come back as ``None``."""
    lon = [c.lon for c in case_histories]
    lat = [c.lat for c in case_histories]
    vals = sample_points(grid, lon, lat, "nearest")
    return [None if np.isnan(v) else EvaluationSample(c.site_id, c.lon, c.lat, float(v), c.observed)
            for c, v in zip(case_histories, vals)]


def compare_models(case_histories, candidates: dict, baseline_name: str, baseline: GeoGrid,
                   n_draws: int = DEFAULT_N_DRAWS, level: float = DEFAULT_LEVEL, seed: int = 0,
                   moran_cutoff_km: float = MORAN_CUTOFF_KM,
                   stratify_threshold: float = MORAN_STRATIFY_THRESHOLD,
                   n_clusters: int | None = None, n_jobs: int = 1) -> EvaluationReport:
    """Score candidate PGF rasters against a baseline on case histories.

    Sites missing from any raster are dropped from every model. If Moran's I
    of any model's squared errors exceeds ``stratify_threshold``, all
    bootstraps resample agglomerative clusters instead of single sites. KS
    and Cohen's d compare each candidate's bootstrap draws with the
    baseline's; negative d means the candidate scores better.
    """
    models = {baseline_name: baseline, **candidates}
    if len(models) != len(candidates) + 1:
        raise ValueError("baseline name collides with a candidate")
    per_model = {name: build_samples(case_histories, g) for name, g in models.items()}
    keep = [i for i in range(len(case_histories))
            if all(per_model[m][i] is not None for m in models)]
    dropped = [case_histories[i].site_id for i in range(len(case_histories)) if i not in set(keep)]
    if not keep:
        raise ValueError("no case-history site falls on valid cells of every raster")
    samples = {m: [per_model[m][i] for i in keep] for m in models}
    n = len(keep)

    moran = {}
    for m, s in samples.items():
        moran[m] = samples_morans_i(s, moran_cutoff_km) if n >= 3 else None
    stratified = any(v is not None and v > stratify_threshold for v in moran.values())
    labels = None
    k = None
    if stratified:
        ref = samples[baseline_name]
        k = n_clusters or default_cluster_count(n)
        labels = cluster_stratify([s.lon for s in ref], [s.lat for s in ref], k)

    boots = {}
    rows = []
    for m, s in samples.items():
        se = np.array([x.squared_error for x in s])
        boot = bootstrap_ci(se, n_draws, level, seed, labels, n_jobs)
        boots[m] = boot
        mean = brier(s)
        if not (boot.lower <= mean + 1e-12 and mean <= boot.upper + 1e-12):
            raise ArithmeticError(f"{m}: mean BS {mean} outside its bootstrap interval")
        rows.append(ModelScore(m, mean, boot.lower, boot.upper, n, moran[m],
                               is_baseline=(m == baseline_name)))
    base_draws = boots[baseline_name].draws
    for r in rows:
        if not r.is_baseline:
            r.ks = ks_two_sample(boots[r.name].draws, base_draws)
            r.cohens_d = _d_or_zero(boots[r.name].draws, base_draws)
    return EvaluationReport(rows, baseline_name, level, n_draws, stratified, k, n, dropped)


def _d_or_zero(a, b):
    # identical constant draw sets have no spread but also no difference
    d = cohens_d(a, b)
    if d is None and np.array_equal(np.sort(a), np.sort(b)):
        return 0.0
    return d


def sample_negative_cells(grid: GeoGrid, positives, n: int, seed: int = 0):
    """Random valid cell centers whose cells hold no positive observation."""
    spec = grid.spec
    taken = set()
    for lon, lat in positives:
        loc = spec.locate(lon, lat)
        if loc is not None:
            taken.add(loc)
    rows, cols = np.nonzero(grid.valid)
    pool = [(r, c) for r, c in zip(rows.tolist(), cols.tolist()) if (r, c) not in taken]
    if n > len(pool):
        raise ValueError(f"only {len(pool)} eligible cells for {n} negatives")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(pool), size=n, replace=False)
    return [spec.cell_center(*pool[i]) for i in sorted(pick)]
