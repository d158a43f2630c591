"""Independent reference implementations used to freeze expected values.

These are deliberately naive (explicit loops, textbook formulas) and share
no code with the package.
"""

import math


def haversine_km(lon1, lat1, lon2, lat2, radius=6371.0):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * radius * math.asin(math.sqrt(a))


def brier(p, o):
    return sum((a - b) ** 2 for a, b in zip(p, o)) / len(p)


def morans_i(x, w):
    n = len(x)
    mean = sum(x) / n
    num = 0.0
    wsum = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            num += w[i][j] * (x[i] - mean) * (x[j] - mean)
            wsum += w[i][j]
    den = sum((v - mean) ** 2 for v in x)
    return n / wsum * num / den


def ks_sweep(a, b):
    """sup |F_a - F_b| by evaluating both ECDFs at every observed point."""
    best = 0.0
    for t in list(a) + list(b):
        fa = sum(1 for v in a if v <= t) / len(a)
        fb = sum(1 for v in b if v <= t) / len(b)
        best = max(best, abs(fa - fb))
    return best


def quantile_type7(values, q):
    s = sorted(values)
    h = (len(s) - 1) * q
    lo = math.floor(h)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (h - lo) * (s[hi] - s[lo])


def cohens_d(a, b):
    ma = sum(a) / len(a)
    mb = sum(b) / len(b)
    va = sum((v - ma) ** 2 for v in a) / (len(a) - 1)
    vb = sum((v - mb) ** 2 for v in b) / (len(b) - 1)
    sp = math.sqrt(((len(a) - 1) * va + (len(b) - 1) * vb) / (len(a) + len(b) - 2))
    return (ma - mb) / sp


def triggering_point(z, qc, gwt, pga_m):
    """Scalar walk through the demonstration triggering chain at one depth."""
    sv = 18.0 * min(z, gwt) + 19.0 * max(z - gwt, 0.0)
    u = 9.81 * max(z - gwt, 0.0)
    se = max(sv - u, 1.0)
    rd = 1 - 0.00765 * z if z <= 9.15 else max(1.174 - 0.0267 * z, 0.5)
    csr = 0.65 * pga_m * (sv / se) * rd
    q = min(max((qc / 101.3) * (101.3 / se) ** 0.5, 0.0), 254.0)
    crr = 0.833 * (q / 1000) + 0.05 if q < 50 else 93 * (q / 1000) ** 3 + 0.08
    fs = min(crr / csr, 4.0)
    return dict(sv=sv, u=u, se=se, rd=rd, csr=csr, qc1n=q, crr=crr, fs=fs)


def simple_krige(sites, query, c0, c1, a):
    """Dense simple kriging by Gaussian elimination on the full system."""
    n = len(sites)

    def cov(p, q):
        return c1 * math.exp(-3 * haversine_km(p[0], p[1], q[0], q[1]) / a)

    K = [[cov(sites[i][:2], sites[j][:2]) + (c0 if i == j else 0.0) for j in range(n)]
         for i in range(n)]
    k = [cov(s[:2], query) for s in sites]
    # augmented elimination
    M = [row[:] + [k[i]] for i, row in enumerate(K)]
    for c in range(n):
        piv = max(range(c, n), key=lambda r: abs(M[r][c]))
        M[c], M[piv] = M[piv], M[c]
        for r in range(n):
            if r != c:
                f = M[r][c] / M[c][c]
                M[r] = [x - f * y for x, y in zip(M[r], M[c])]
    w = [M[i][n] / M[i][i] for i in range(n)]
    est = sum(wi * s[2] for wi, s in zip(w, sites))
    var = c0 + c1 - sum(wi * ki for wi, ki in zip(w, k))
    return est, var
