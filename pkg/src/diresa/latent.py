"""Post-hoc analysis of a trained latent space.

Every function takes plain ``encode(x) -> z`` / ``decode(z) -> x`` callables,
so autoencoders, PCA and hand-written test maps are treated alike
(see :func:`diresa.checkpoint.codec`).
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np

from .data import atomic_write_bytes
from .errors import DegenerateError, DimensionError


@dataclass
class ComponentOrdering:
    permutation: np.ndarray  # latent indices, largest decoded variance first
    decoded_variance: np.ndarray  # per latent index, in original order
    explained_variance_fraction: np.ndarray  # per latent index, in original order
    unexplained_variance_fraction: float

    def ordered(self):
        """Rows ``(rank, latent_index, decoded_variance, explained_fraction)``."""
        return [(r, int(j), float(self.decoded_variance[j]), float(self.explained_variance_fraction[j]))
                for r, j in enumerate(self.permutation)]


class DegenerateComponentWarning(UserWarning):
    pass


def _encode_checked(encode, data):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise DimensionError(f"need a non-empty 2-d split, got shape {data.shape}")
    z = np.asarray(encode(data), dtype=np.float64)
    if not np.isfinite(z).all():
        raise DegenerateError("encoder produced non-finite values (untrained or broken parameters?)")
    return data, z


def total_variance(x) -> float:
    return float(np.sum(np.var(x, axis=0)))


def decoded_variances(encode, decode, data) -> np.ndarray:
    """Decoded total variance per latent index, others pinned at their split mean."""
    _, z = _encode_checked(encode, data)
    mu = z.mean(axis=0)
    out = np.empty(z.shape[1])
    for j in range(z.shape[1]):
        zj = np.tile(mu, (z.shape[0], 1))
        zj[:, j] = z[:, j]
        dec = np.asarray(decode(zj), dtype=np.float64)
        if not np.isfinite(dec).all():
            raise DegenerateError("decoder produced non-finite values")
        out[j] = total_variance(dec)
    return out


def explained_variance(encode, decode, data):
    """``(per-component fractions, unexplained fraction)`` of the split's total variance.

    The unexplained part is the summed squared residual over the summed
    feature variance, i.e. reconstruction MSE over mean feature variance.
    """
    data, z = _encode_checked(encode, data)
    tv = total_variance(data)
    if tv <= 0.0:
        raise DegenerateError("data split has zero variance")
    resid = np.asarray(decode(z), dtype=np.float64) - data
    unexplained = float(np.sum(resid * resid) / data.shape[0] / tv)
    return decoded_variances(encode, decode, data) / tv, unexplained


def order_components(encode, decode, data) -> ComponentOrdering:
    dv = decoded_variances(encode, decode, data)
    # stable sort on the negated values keeps index order among ties
    perm = np.argsort(-dv, kind="stable")
    frac, unexplained = explained_variance(encode, decode, data)
    return ComponentOrdering(perm, dv, frac, unexplained)


def decoded_component_delta(encode, decode, data, j: int, sign: int = 1) -> np.ndarray:
    """decode(mean latent, component j at mu+sigma) - decode(..., at mu-sigma).

    ``sign=-1`` swaps the two substitutions. A component with zero spread
    on the split gives a warning and a zero vector.
    """
    data, z = _encode_checked(encode, data)
    if not 0 <= j < z.shape[1]:
        raise IndexError(f"latent index {j} out of range for {z.shape[1]} components")
    mu = z.mean(axis=0)
    sigma = z[:, j].std()
    if sigma == 0.0:
        warnings.warn(f"latent component {j} is constant on this split", DegenerateComponentWarning)
        return np.zeros(data.shape[1])
    hi = mu.copy()
    lo = mu.copy()
    hi[j] += sigma
    lo[j] -= sigma
    a, b = (hi, lo) if sign >= 0 else (lo, hi)
    out = np.asarray(decode(np.vstack([a, b])), dtype=np.float64)
    return out[0] - out[1]


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue().encode()


def export_scatter(d_orig, d_lat, path):
    d_orig = np.asarray(d_orig, dtype=np.float64).ravel()
    d_lat = np.asarray(d_lat, dtype=np.float64).ravel()
    if d_orig.shape != d_lat.shape:
        raise DimensionError(f"distance vectors differ in length: {d_orig.size} vs {d_lat.size}")
    atomic_write_bytes(path, _csv_bytes(["d_original", "d_latent"], zip(d_orig, d_lat)))


def read_scatter(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    raw = np.array([[float(a), float(b)] for a, b in rows], dtype=np.float64).reshape(-1, 2)
    return raw[:, 0], raw[:, 1]


def export_component_report(ordering: ComponentOrdering, path):
    rows = list(ordering.ordered())
    rows.append(("unexplained", "", "", ordering.unexplained_variance_fraction))
    atomic_write_bytes(path, _csv_bytes(
        ["rank", "latent_index", "decoded_variance", "explained_fraction"], rows))
