"""Loss terms and their gradients.

Each ``loss_*`` returns the scalar; the matching ``*_grad`` returns
``(value, gradient)`` with respect to the model-produced argument.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, DimensionError

DISTANCE_KINDS = ("mse", "msle", "corr", "logcorr")


@dataclass(frozen=True)
class LossWeights:
    w_recon: float = 1.0
    w_cov: float = 0.0
    w_dist: float = 1.0
    w_kl: float = 0.0

    def __post_init__(self):
        if self.w_recon != 1.0:
            raise ValueError("reconstruction weight is fixed to 1")
        if self.w_cov < 0 or self.w_kl < 0:
            raise ValueError("loss weights must be non-negative")


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def recon_grad(x, x_hat):
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    _same_shape(x, x_hat, "reconstruction loss")
    diff = x_hat - x
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def loss_recon(x, x_hat) -> float:
    return recon_grad(x, x_hat)[0]


def cov_grad(z):
    """Mean squared off-diagonal entry of the population covariance of ``z``."""
    z = np.asarray(z, dtype=np.float64)
    n, L = z.shape
    if L < 2:
        raise DegenerateError("covariance loss needs at least 2 latent dimensions")
    if n < 2:
        raise DegenerateError("covariance loss needs at least 2 rows")
    zc = z - z.mean(axis=0)
    cov = zc.T @ zc / n
    np.fill_diagonal(cov, 0.0)
    norm = L * (L - 1)
    value = float(np.sum(cov * cov) / norm)
    # centring is a projection and zc already has zero column sums
    grad = zc @ cov * (4.0 / (n * norm))
    return value, grad


def loss_cov(z) -> float:
    return cov_grad(z)[0]


def _pearson_grad(a, b):
    """Pearson r of (a, b) and dr/db."""
    if a.size < 2:
        raise DegenerateError("correlation needs at least 2 values")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise DegenerateError("correlation undefined for a constant distance vector")
    ac = a - a.mean()
    bc = b - b.mean()
    saa = ac @ ac
    sbb = bc @ bc
    denom = np.sqrt(saa * sbb)
    r = (ac @ bc) / denom
    return float(r), ac / denom - r * bc / sbb


def dist_grad(d_x, d_z, kind: str):
    """Distance loss and its gradient w.r.t. the latent distances ``d_z``."""
    d_x = np.asarray(d_x, dtype=np.float64)
    d_z = np.asarray(d_z, dtype=np.float64)
    _same_shape(d_x, d_z, "distance loss")
    n = d_x.size
    if kind == "mse":
        diff = d_z - d_x
        return float(np.mean(diff * diff)), (2.0 / n) * diff
    if kind == "msle":
        lz = np.log1p(d_z)
        diff = lz - np.log1p(d_x)
        return float(np.mean(diff * diff)), (2.0 / n) * diff / (1.0 + d_z)
    if kind == "corr":
        r, dr = _pearson_grad(d_x, d_z)
        return 1.0 - r, -dr
    if kind == "logcorr":
        r, dr = _pearson_grad(np.log1p(d_x), np.log1p(d_z))
        return 1.0 - r, -dr / (1.0 + d_z)
    raise ValueError(f"unknown distance loss {kind!r}; expected one of {DISTANCE_KINDS}")


def loss_dist(d_x, d_z, kind: str) -> float:
    return dist_grad(d_x, d_z, kind)[0]


def kl_grad(mean, logvar):
    mean = np.asarray(mean, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    _same_shape(mean, logvar, "KL loss")
    if not (np.isfinite(mean).all() and np.isfinite(logvar).all()):
        raise FloatingPointError("KL loss received non-finite inputs")
    n = mean.shape[0]
    ev = np.exp(logvar)
    value = float(-0.5 * np.sum(1.0 + logvar - mean * mean - ev) / n)
    return value, (mean / n, 0.5 * (ev - 1.0) / n)


def loss_kl(mean, logvar) -> float:
    return kl_grad(mean, logvar)[0]


def latent_distance_grad(z, z_twin, d_z, g_dz):
    """Chain dL/d(d_z) through d_z = ||z - z_twin|| (zero where d_z == 0)."""
    safe = np.where(d_z > 0, d_z, 1.0)
    coef = np.where(d_z > 0, g_dz / safe, 0.0)[:, None]
    g = coef * (z - z_twin)
    return g, -g


def total_loss_and_grads(bundle, batch, weights: LossWeights, spec, need_grads: bool = True):
    """Weighted total loss for ``spec.variant``.

    Returns ``(total, components, output_grads)``. Components absent for
    the variant are ``None``; a corr-type distance term on a degenerate
    batch is skipped and flagged with ``components["dist_skipped"]``.
    """
    variant = spec.variant
    comps = {"recon": None, "cov": None, "dist": None, "kl": None, "dist_skipped": False}
    grads = {}
    rec, g_rec = recon_grad(batch, bundle.reconstruction)
    comps["recon"] = rec
    total = weights.w_recon * rec
    grads["reconstruction"] = weights.w_recon * g_rec

    if variant in ("CRAE", "DIRESA"):
        cov, g_cov = cov_grad(bundle.latent)
        comps["cov"] = cov
        total += weights.w_cov * cov
        if weights.w_cov:
            grads["latent"] = weights.w_cov * g_cov

    if variant == "DIRESA":
        try:
            dist, g_dz = dist_grad(bundle.d_x, bundle.d_z, spec.distance_loss)
        except DegenerateError:
            comps["dist_skipped"] = True
        else:
            comps["dist"] = dist
            total += weights.w_dist * dist
            if need_grads:
                gz, gz_twin = latent_distance_grad(bundle.latent, bundle.twin_latent, bundle.d_z,
                                                   weights.w_dist * g_dz)
                grads["latent"] = grads["latent"] + gz if "latent" in grads else gz
                grads["twin_latent"] = gz_twin

    if variant == "VAE":
        kl, (g_m, g_v) = kl_grad(bundle.vae_mean, bundle.vae_logvar)
        comps["kl"] = kl
        total += weights.w_kl * kl
        if weights.w_kl:
            grads["vae_mean"] = weights.w_kl * g_m
            grads["vae_logvar"] = weights.w_kl * g_v
    return float(total), comps, grads


def total_loss(bundle, batch, weights: LossWeights, spec):
    total, comps, _ = total_loss_and_grads(bundle, batch, weights, spec, need_grads=False)
    return total, comps
