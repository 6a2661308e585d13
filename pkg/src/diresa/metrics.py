"""Distance-ordering preservation KPIs between an original and a latent space.

For every anchor sample the Euclidean distances to all other samples are
compared in both spaces:

* ``Corr`` / ``LogCorr``: Pearson r of the raw distances and of
  ``log(d + log_offset)``.
* ``Can{l}``, ``Pear{l}``, ``Spear{l}``, ``Ken{l}``: restricted to the ``l``
  nearest neighbours in latent space. Spearman uses average ranks for ties,
  Kendall is tau-b, and the Canberra location indicator caps ranks at
  ``l + 1`` and is divided by ``l``.

Undefined values (zero variance, all-tied Kendall) are NaN and are counted,
not averaged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from .errors import DegenerateError, DimensionError

REFERENCE_RANDOM_CANBERRA = 1.42


def kpi_names(l: int) -> list:
    return ["Corr", "LogCorr", f"Can{l}", f"Pear{l}", f"Spear{l}", f"Ken{l}"]


@dataclass
class KpiConfig:
    location_param: int = 50
    sample_count: int | str = "all"
    rng_seed: int = 0
    log_offset: float = 1.0
    chunk: int = 256

    def validate(self, n_samples: int | None = None):
        if self.location_param < 2:
            raise ValueError("location_param must be >= 2")
        if self.sample_count != "all":
            if int(self.sample_count) < 1:
                raise ValueError("sample_count must be positive or 'all'")
            if n_samples is not None and int(self.sample_count) > n_samples:
                raise ValueError(f"sample_count {self.sample_count} exceeds dataset size {n_samples}")
        return self


# ----------------------------------------------------------------- scalar KPIs

def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"pearson: shapes {a.shape} and {b.shape} differ")
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return math.nan
    ac = a - a.mean()
    bc = b - b.mean()
    return float((ac @ bc) / np.sqrt((ac @ ac) * (bc @ bc)))


def average_ranks(a) -> np.ndarray:
    """1-based ranks, ties receive the mean of the ranks they span."""
    a = np.asarray(a)
    less = (a[None, :] < a[:, None]).sum(axis=1)
    equal = (a[None, :] == a[:, None]).sum(axis=1)
    return less + (equal + 1) / 2.0


def spearman(a, b) -> float:
    return pearson(average_ranks(a), average_ranks(b))


def _tau_b(n0, n1, n2, s):
    denom = (n0 - n1) * (n0 - n2)
    if denom <= 0:
        return math.nan
    return s / math.sqrt(denom)


def kendall_tau_b(a, b) -> float:
    """Tau-b by direct O(n^2) pair enumeration."""
    a = np.asarray(a)
    b = np.asarray(b)
    n = a.size
    da = np.sign(a[:, None] - a[None, :])
    db = np.sign(b[:, None] - b[None, :])
    iu = np.triu_indices(n, 1)
    s = int((da * db)[iu].sum())
    n1 = int((da[iu] == 0).sum())
    n2 = int((db[iu] == 0).sum())
    return _tau_b(n * (n - 1) // 2, n1, n2, s)


def _tied_pairs(sorted_vals) -> int:
    _, counts = np.unique(sorted_vals, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def _merge_count(x: list):
    """Merge sort returning ``(sorted_list, strict_inversions)``."""
    if len(x) < 2:
        return x, 0
    mid = len(x) // 2
    left, sl = _merge_count(x[:mid])
    right, sr = _merge_count(x[mid:])
    out = []
    swaps = sl + sr
    i = j = 0
    while i < len(left) and j < len(right):
        if right[j] < left[i]:
            out.append(right[j])
            swaps += len(left) - i
            j += 1
        else:
            out.append(left[i])
            i += 1
    out.extend(left[i:])
    out.extend(right[j:])
    return out, swaps


def kendall_tau_b_fast(a, b) -> float:
    """Tau-b in O(n log n) (Knight's merge-sort algorithm)."""
    a = np.asarray(a)
    b = np.asarray(b)
    n = a.size
    order = np.lexsort((b, a))
    a_s = a[order]
    b_s = b[order]
    n0 = n * (n - 1) // 2
    n1 = _tied_pairs(a_s)
    # pairs tied in both a and b
    n3 = 0
    start = 0
    for i in range(1, n + 1):
        if i == n or a_s[i] != a_s[start]:
            n3 += _tied_pairs(b_s[start:i])
            start = i
    _, swaps = _merge_count(b_s.tolist())
    n2 = _tied_pairs(np.sort(b))
    s = n0 - n1 - n2 + n3 - 2 * swaps
    return _tau_b(n0, n1, n2, s)


def canberra_location(latent_ranks, orig_ranks, l: int) -> float:
    """Capped Canberra indicator over the given items, divided by ``l``."""
    a = np.minimum(np.asarray(latent_ranks, dtype=np.float64), l + 1)
    b = np.minimum(np.asarray(orig_ranks, dtype=np.float64), l + 1)
    return float(np.sum(np.abs(a - b) / (a + b)) / l)


# ------------------------------------------------------------- per-anchor API

def anchor_distances(data, latent, anchors):
    """Distances from each anchor to every other row, in both spaces.

    Returns ``(d_orig, d_lat)`` of shape (len(anchors), n - 1); the anchor
    itself is dropped and the remaining rows keep their order.
    """
    data = np.asarray(data, dtype=np.float64)
    latent = np.asarray(latent, dtype=np.float64)
    if data.shape[0] != latent.shape[0]:
        raise DimensionError(f"data has {data.shape[0]} rows, latent {latent.shape[0]}")
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1)
    n = data.shape[0]
    if anchors.size and (anchors.min() < 0 or anchors.max() >= n):
        raise IndexError(f"anchor index out of range [0, {n})")
    return _distances_without_self(data, anchors), _distances_without_self(latent, anchors)


def _distances_without_self(x, anchors):
    diff = x[anchors][:, None, :] - x[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    keep = np.ones(d.shape, dtype=bool)
    keep[np.arange(anchors.size), anchors] = False
    return d[keep].reshape(anchors.size, x.shape[0] - 1)


def kpi_global(d_orig, d_lat, log_offset: float = 1.0):
    return (pearson(d_orig, d_lat),
            pearson(np.log(np.asarray(d_orig) + log_offset), np.log(np.asarray(d_lat) + log_offset)))


def _stable_rank_order(d):
    return np.lexsort((np.arange(d.size), d))


def kpi_location(d_orig, d_lat, l: int):
    """``(can_l, pear_l, spear_l, ken_l)`` over the ``l`` nearest latent neighbours."""
    d_orig = np.asarray(d_orig, dtype=np.float64)
    d_lat = np.asarray(d_lat, dtype=np.float64)
    if d_orig.size < l:
        raise ValueError(f"location parameter {l} exceeds the {d_orig.size} available neighbours")
    sel = _stable_rank_order(d_lat)[:l]
    orig_rank = np.empty(d_orig.size, dtype=np.int64)
    orig_rank[_stable_rank_order(d_orig)] = np.arange(1, d_orig.size + 1)
    can = canberra_location(np.arange(1, l + 1), orig_rank[sel], l)
    a, b = d_lat[sel], d_orig[sel]
    return can, pearson(a, b), spearman(a, b), kendall_tau_b(a, b)


# ----------------------------------------------------------- vectorized batch

def _rowwise_pearson(a, b):
    ac = a - a.mean(axis=1, keepdims=True)
    bc = b - b.mean(axis=1, keepdims=True)
    num = np.einsum("ij,ij->i", ac, bc)
    den = np.sqrt(np.einsum("ij,ij->i", ac, ac) * np.einsum("ij,ij->i", bc, bc))
    flat = (np.ptp(a, axis=1) == 0) | (np.ptp(b, axis=1) == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = num / den
    r[flat] = np.nan
    return r


def _rowwise_avg_ranks(v):
    less = (v[:, None, :] < v[:, :, None]).sum(axis=2)
    equal = (v[:, None, :] == v[:, :, None]).sum(axis=2)
    return less + (equal + 1) / 2.0


def _rowwise_tau_b(a, b):
    l = a.shape[1]
    da = np.sign(a[:, :, None] - a[:, None, :])
    db = np.sign(b[:, :, None] - b[:, None, :])
    # each unordered pair appears twice in the full matrices
    s = (da * db).sum(axis=(1, 2)) // 2
    n1 = ((da == 0).sum(axis=(1, 2)) - l) // 2
    n2 = ((db == 0).sum(axis=(1, 2)) - l) // 2
    n0 = l * (l - 1) // 2
    out = np.full(a.shape[0], np.nan)
    for i in range(a.shape[0]):
        out[i] = _tau_b(n0, int(n1[i]), int(n2[i]), int(s[i]))
    return out


def _top_l(d, l):
    """Per row: indices of the ``l`` smallest entries in stable (value, index) order."""
    rows = np.arange(d.shape[0])[:, None]
    part = np.argpartition(d, l - 1, axis=1)[:, :l]
    kth = d[rows, part].max(axis=1)
    ambiguous = (d <= kth[:, None]).sum(axis=1) > l
    vals = d[rows, part]
    order = np.lexsort((part, vals), axis=-1)
    top = part[rows, order]
    for i in np.flatnonzero(ambiguous):
        top[i] = _stable_rank_order(d[i])[:l]
    return top


def location_kpis_batch(d_orig, d_lat, l: int):
    """Vectorized :func:`kpi_location` over rows; returns four arrays."""
    rows = np.arange(d_orig.shape[0])[:, None]
    sel = _top_l(d_lat, l)
    otop = _top_l(d_orig, l)
    match = sel[:, :, None] == otop[:, None, :]
    orig_rank = np.where(match.any(axis=2), match.argmax(axis=2) + 1, l + 1)
    lat_rank = np.arange(1, l + 1)[None, :]
    can = np.sum(np.abs(lat_rank - orig_rank) / (lat_rank + orig_rank), axis=1) / l
    a = d_lat[rows, sel]
    b = d_orig[rows, sel]
    pear = _rowwise_pearson(a, b)
    spear = _rowwise_pearson(_rowwise_avg_ranks(a), _rowwise_avg_ranks(b))
    ken = _rowwise_tau_b(a, b)
    return can, pear, spear, ken


@dataclass
class SampleKpis:
    """Per-anchor KPI values; ``values[name]`` is an array over anchors."""

    location_param: int
    anchors: np.ndarray
    values: dict = field(default_factory=dict)

    @property
    def names(self):
        return kpi_names(self.location_param)


def select_anchors(n: int, config: KpiConfig) -> np.ndarray:
    if config.sample_count == "all":
        return np.arange(n)
    rng = np.random.default_rng(config.rng_seed)
    return np.sort(rng.choice(n, size=int(config.sample_count), replace=False))


def sample_kpis(data, latent, config: KpiConfig | None = None, anchors=None) -> SampleKpis:
    """All six KPIs for every anchor, processed in chunks of ``config.chunk`` anchors."""
    config = (config or KpiConfig()).validate(np.asarray(data).shape[0])
    n = np.asarray(data).shape[0]
    l = config.location_param
    if n - 1 < l:
        raise ValueError(f"location parameter {l} needs at least {l + 1} samples, got {n}")
    anchors = select_anchors(n, config) if anchors is None else np.asarray(anchors)
    names = kpi_names(l)
    cols = {k: np.empty(anchors.size) for k in names}
    for start in range(0, anchors.size, config.chunk):
        chunk = anchors[start:start + config.chunk]
        dx, dz = anchor_distances(data, latent, chunk)
        sl = slice(start, start + chunk.size)
        cols["Corr"][sl] = _rowwise_pearson(dx, dz)
        off = config.log_offset
        cols["LogCorr"][sl] = _rowwise_pearson(np.log(dx + off), np.log(dz + off))
        can, pear, spear, ken = location_kpis_batch(dx, dz, l)
        cols[names[2]][sl] = can
        cols[names[3]][sl] = pear
        cols[names[4]][sl] = spear
        cols[names[5]][sl] = ken
    return SampleKpis(l, anchors, cols)


# ---------------------------------------------------------------- aggregation

@dataclass
class KpiReport:
    names: list
    mean: dict
    median: dict
    stderr: dict
    n_valid: dict
    n_undefined: dict
    pvalues: dict = field(default_factory=dict)


def aggregate(per_sample) -> KpiReport:
    """Mean, median and standard error (sample std / sqrt(n)) of each KPI.

    Accepts a :class:`SampleKpis` or a plain ``{name: values}`` mapping.
    NaN entries are excluded and counted in ``n_undefined``.
    """
    values = per_sample.values if isinstance(per_sample, SampleKpis) else per_sample
    names = list(values)
    rep = KpiReport(names, {}, {}, {}, {}, {})
    for k in names:
        v = np.asarray(values[k], dtype=np.float64)
        ok = v[np.isfinite(v)]
        rep.n_undefined[k] = int(v.size - ok.size)
        rep.n_valid[k] = int(ok.size)
        if ok.size == 0:
            raise DegenerateError(f"KPI {k} is undefined for every sample")
        ok = np.sort(ok)  # order-independent summation
        rep.mean[k] = float(ok.mean())
        rep.median[k] = float(np.median(ok))
        rep.stderr[k] = float(ok.std(ddof=1) / np.sqrt(ok.size)) if ok.size > 1 else math.nan
    return rep


def welch_ttest(a, b):
    """Two-sided Welch t-test; returns ``(t, df, p)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a[np.isfinite(a)]
    b = b[np.isfinite(b)]
    if a.size < 2 or b.size < 2:
        raise DegenerateError("Welch t-test needs at least 2 values per sample")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    if va == 0 and vb == 0:
        raise DegenerateError("Welch t-test undefined: both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    p = float(betainc(0.5 * df, 0.5, df / (df + t * t)))
    return float(t), float(df), min(p, 1.0)


def welch_pvalue(a, b) -> float:
    return welch_ttest(a, b)[2]


def canberra_random_baseline(l: int = 50, universe: int = 10_000, trials: int = 10_000,
                             seed: int = 0):
    """Monte Carlo mean (and standard error) of ``Can{l}`` for unrelated rankings.

    The latent top-``l`` items take ranks 1..l; their original-space ranks are
    a uniformly random draw without replacement from ``1..universe``.
    """
    rng = np.random.default_rng(seed)
    lat = np.arange(1, l + 1, dtype=np.float64)
    vals = np.empty(trials)
    for t in range(trials):
        orig = np.minimum(rng.choice(universe, size=l, replace=False) + 1, l + 1)
        vals[t] = np.sum(np.abs(lat - orig) / (lat + orig)) / l
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(trials))
