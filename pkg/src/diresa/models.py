"""Autoencoder variants built from :mod:`diresa.nn` layers.

All trainable parameters of a model live in one flat float64 vector
(``ModelParams.theta``); layer weights are reshaped views into it. The
optimizer updates ``theta`` in place, and the DIRESA twin encoder is the
very same layer list applied a second time, so weight sharing cannot drift.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .errors import ConfigError, DimensionError, StructureError

VARIANTS = ("AE", "BNAE", "CRAE", "VAE", "DIRESA")
DISTANCE_LOSSES = ("mse", "msle", "corr", "logcorr")
ANNEALED = ("CRAE", "VAE", "DIRESA")


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    input_dim: int = 3
    hidden_widths: tuple = (40, 20)
    latent_dim: int = 2
    distance_loss: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}",
                              "model.variant")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ConfigError("hidden_widths must be a non-empty list of positive widths",
                              "model.hidden_widths")
        if not 1 <= self.latent_dim < self.input_dim:
            raise ConfigError(f"latent_dim must be in [1, input_dim), got {self.latent_dim}",
                              "model.latent_dim")
        if (self.variant == "DIRESA") != (self.distance_loss is not None):
            raise ConfigError("distance_loss is required for DIRESA and only for DIRESA",
                              "model.distance_loss")
        if self.distance_loss is not None and self.distance_loss not in DISTANCE_LOSSES:
            raise ConfigError(f"unknown distance loss {self.distance_loss!r}",
                              "model.distance_loss")

    @property
    def annealed(self) -> bool:
        return self.variant in ANNEALED

    @property
    def name(self) -> str:
        if self.variant == "DIRESA":
            return "DIRESA_" + {"mse": "MSE", "msle": "MSLE", "corr": "Corr",
                                "logcorr": "LogCorr"}[self.distance_loss]
        return self.variant

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def lorenz_spec(variant: str, distance_loss: str | None = None) -> ModelSpec:
    """Lorenz benchmark topology: 3 -> 40 -> 20 -> 2 and mirrored decoder."""
    return ModelSpec(variant, 3, (40, 20), 2, distance_loss)


def spec_from_method(method: str, input_dim=3, hidden_widths=(40, 20), latent_dim=2) -> ModelSpec:
    """``"DIRESA_MSE"`` -> DIRESA with mse distance loss; plain names pass through."""
    if method.upper().startswith("DIRESA"):
        _, _, kind = method.partition("_")
        return ModelSpec("DIRESA", input_dim, hidden_widths, latent_dim, (kind or "mse").lower())
    return ModelSpec(method.upper(), input_dim, hidden_widths, latent_dim)


@dataclass(eq=False)
class ModelParams:
    spec: ModelSpec
    theta: np.ndarray
    buffers: np.ndarray
    encoder: list
    decoder: list
    mean_head: Optional[nn.DenseLayer] = None
    logvar_head: Optional[nn.DenseLayer] = None
    seed: Optional[int] = None
    _offsets: dict = field(default_factory=dict, repr=False)

    @property
    def twin_encoder(self) -> list:
        return self.encoder

    def trainable_layers(self) -> list:
        heads = [h for h in (self.mean_head, self.logvar_head) if h is not None]
        return list(self.encoder) + heads + list(self.decoder)

    @property
    def n_params(self) -> int:
        return self.theta.size

    def grad_views(self, buf: np.ndarray, layer) -> tuple:
        return tuple(buf[o:o + int(np.prod(s))].reshape(s) for o, s in self._offsets[id(layer)])

    def copy(self) -> "ModelParams":
        clone = build_model(self.spec, seed=self.seed or 0)
        clone.theta[...] = self.theta
        clone.buffers[...] = self.buffers
        clone.seed = self.seed
        return clone


class _Allocator:
    def __init__(self, n_params, n_buffers):
        self.theta = np.zeros(n_params)
        self.buffers = np.zeros(n_buffers)
        self.p = 0
        self.q = 0
        self.offsets = {}

    def take(self, shape):
        n = int(np.prod(shape))
        view = self.theta[self.p:self.p + n].reshape(shape)
        entry = (self.p, shape)
        self.p += n
        return view, entry

    def take_buffer(self, n):
        view = self.buffers[self.q:self.q + n]
        self.q += n
        return view

    def dense(self, rng, n_in, n_out, activation, name):
        w, ew = self.take((n_out, n_in))
        b, eb = self.take((n_out,))
        w[...] = nn.glorot_uniform(rng, n_out, n_in)
        layer = nn.DenseLayer(w, b, activation, name)
        self.offsets[id(layer)] = (ew, eb)
        return layer

    def batchnorm(self, width, name):
        g, eg = self.take((width,))
        be, eb = self.take((width,))
        g[...] = 1.0
        rm = self.take_buffer(width)
        rv = self.take_buffer(width)
        rv[...] = 1.0
        layer = nn.BatchNormLayer(g, be, rm, rv, name=name)
        self.offsets[id(layer)] = (eg, eb)
        return layer


def _layer_plan(spec: ModelSpec):
    """(kind, n_in, n_out, activation, name) in declared parameter order."""
    widths = (spec.input_dim,) + spec.hidden_widths
    plan = []
    for i in range(len(spec.hidden_widths)):
        plan.append(("dense", widths[i], widths[i + 1], "relu", f"enc{i}"))
    if spec.variant == "VAE":
        plan.append(("dense", widths[-1], spec.latent_dim, "linear", "mean"))
        plan.append(("dense", widths[-1], spec.latent_dim, "linear", "logvar"))
    else:
        plan.append(("dense", widths[-1], spec.latent_dim, "linear", "latent"))
        if spec.variant == "BNAE":
            plan.append(("bn", spec.latent_dim, spec.latent_dim, None, "latent_bn"))
    dec = (spec.latent_dim,) + spec.hidden_widths[::-1] + (spec.input_dim,)
    for i in range(len(dec) - 1):
        act = "linear" if i == len(dec) - 2 else "relu"
        plan.append(("dense", dec[i], dec[i + 1], act, f"dec{i}"))
    return plan


def count_params(spec: ModelSpec) -> int:
    return sum(n_out * n_in + n_out if k == "dense" else 2 * n_out
               for k, n_in, n_out, _, _ in _layer_plan(spec))


def build_model(spec: ModelSpec, seed: int = 0) -> ModelParams:
    spec.validate()
    plan = _layer_plan(spec)
    n_buf = sum(2 * p[2] for p in plan if p[0] == "bn")
    alloc = _Allocator(count_params(spec), n_buf)
    rng = np.random.default_rng(seed)
    layers = {}
    order = []
    for kind, n_in, n_out, act, name in plan:
        if kind == "dense":
            layer = alloc.dense(rng, n_in, n_out, act, name)
        else:
            layer = alloc.batchnorm(n_out, name)
        layers[name] = layer
        order.append(name)
    enc = [layers[n] for n in order if n.startswith("enc") or n in ("latent", "latent_bn")]
    dec = [layers[n] for n in order if n.startswith("dec")]
    return ModelParams(
        spec, alloc.theta, alloc.buffers, enc, dec,
        mean_head=layers.get("mean"), logvar_head=layers.get("logvar"),
        seed=seed, _offsets=alloc.offsets,
    )


def distance_layer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean distance."""
    if a.shape != b.shape:
        raise DimensionError(f"distance_layer shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


@dataclass
class ForwardBundle:
    reconstruction: np.ndarray
    latent: np.ndarray
    twin_latent: Optional[np.ndarray] = None
    d_x: Optional[np.ndarray] = None
    d_z: Optional[np.ndarray] = None
    vae_mean: Optional[np.ndarray] = None
    vae_logvar: Optional[np.ndarray] = None
    vae_sample: Optional[np.ndarray] = None
    mode: str = "train"
    tapes: dict = field(default_factory=dict, repr=False)
    noise: Optional[np.ndarray] = field(default=None, repr=False)


def _check_input(params: ModelParams, batch):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.spec.input_dim:
        raise DimensionError(
            f"{params.spec.name}: expected input of width {params.spec.input_dim}, got shape {batch.shape}"
        )
    return batch


def forward(params: ModelParams, batch, twin_batch=None, rng: np.random.Generator | None = None,
            mode: str = "train") -> ForwardBundle:
    spec = params.spec
    batch = _check_input(params, batch)
    if (spec.variant == "DIRESA") != (twin_batch is not None):
        raise ValueError("twin_batch must be given for DIRESA and only for DIRESA")
    tapes = {}
    if spec.variant == "VAE":
        h, tapes["encoder"] = nn.forward_stack(params.encoder, batch, mode)
        mean, tapes["mean"] = nn.forward_stack([params.mean_head], h, mode)
        logvar, tapes["logvar"] = nn.forward_stack([params.logvar_head], h, mode)
        noise = None
        if mode == "train":
            if rng is None:
                raise ValueError("VAE training forward needs an rng for sampling")
            noise = rng.standard_normal(mean.shape)
            sample = mean + np.exp(0.5 * logvar) * noise
        else:
            sample = mean
        recon, tapes["decoder"] = nn.forward_stack(params.decoder, sample, mode)
        return ForwardBundle(recon, mean, vae_mean=mean, vae_logvar=logvar, vae_sample=sample,
                             mode=mode, tapes=tapes, noise=noise)

    z, tapes["encoder"] = nn.forward_stack(params.encoder, batch, mode)
    recon, tapes["decoder"] = nn.forward_stack(params.decoder, z, mode)
    bundle = ForwardBundle(recon, z, mode=mode, tapes=tapes)
    if spec.variant == "DIRESA":
        twin = _check_input(params, twin_batch)
        if twin.shape != batch.shape:
            raise DimensionError(f"twin batch shape {twin.shape} differs from {batch.shape}")
        bundle.twin_latent, tapes["twin"] = nn.forward_stack(params.twin_encoder, twin, mode)
        bundle.d_x = distance_layer(batch, twin)
        bundle.d_z = distance_layer(z, bundle.twin_latent)
    return bundle


def _accumulate(params, layers, layer_grads, buf):
    for layer, grads in zip(layers, layer_grads):
        for view, g in zip(params.grad_views(buf, layer), grads):
            view += g


def model_backward(params: ModelParams, bundle: ForwardBundle, output_grads: dict) -> np.ndarray:
    """Flat gradient w.r.t. ``theta`` given loss gradients on bundle outputs.

    ``output_grads`` may hold ``reconstruction``, ``latent``, ``twin_latent``,
    ``vae_mean`` and ``vae_logvar`` arrays; missing keys count as zero.
    """
    if not bundle.tapes:
        raise StructureError("bundle carries no tapes; was it produced by forward()?")
    spec = params.spec
    grad = np.zeros_like(params.theta)
    d_rec = output_grads.get("reconstruction")
    if d_rec is None:
        d_rec = np.zeros_like(bundle.reconstruction)
    lg, d_code = nn.backward(params.decoder, bundle.tapes["decoder"], d_rec)
    _accumulate(params, params.decoder, lg, grad)

    if spec.variant == "VAE":
        d_mean = d_code.copy()
        d_logvar = np.zeros_like(d_code)
        if bundle.mode == "train":
            d_logvar += d_code * 0.5 * np.exp(0.5 * bundle.vae_logvar) * bundle.noise
        if output_grads.get("vae_mean") is not None:
            d_mean += output_grads["vae_mean"]
        if output_grads.get("vae_logvar") is not None:
            d_logvar += output_grads["vae_logvar"]
        lg, dh_m = nn.backward([params.mean_head], bundle.tapes["mean"], d_mean)
        _accumulate(params, [params.mean_head], lg, grad)
        lg, dh_v = nn.backward([params.logvar_head], bundle.tapes["logvar"], d_logvar)
        _accumulate(params, [params.logvar_head], lg, grad)
        lg, _ = nn.backward(params.encoder, bundle.tapes["encoder"], dh_m + dh_v)
        _accumulate(params, params.encoder, lg, grad)
        return grad

    if output_grads.get("latent") is not None:
        d_code = d_code + output_grads["latent"]
    lg, _ = nn.backward(params.encoder, bundle.tapes["encoder"], d_code)
    _accumulate(params, params.encoder, lg, grad)
    if spec.variant == "DIRESA" and output_grads.get("twin_latent") is not None:
        lg, _ = nn.backward(params.twin_encoder, bundle.tapes["twin"], output_grads["twin_latent"])
        _accumulate(params, params.twin_encoder, lg, grad)
    return grad


def encode(params: ModelParams, batch) -> np.ndarray:
    """Deterministic latent code (inference mode; VAE returns its mean head)."""
    batch = _check_input(params, batch)
    h, _ = nn.forward_stack(params.encoder, batch, "infer")
    if params.spec.variant == "VAE":
        h, _ = nn.forward_stack([params.mean_head], h, "infer")
    return h


def decode(params: ModelParams, latent) -> np.ndarray:
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 2 or latent.shape[1] != params.spec.latent_dim:
        raise DimensionError(
            f"{params.spec.name}: expected latent width {params.spec.latent_dim}, got shape {latent.shape}"
        )
    out, _ = nn.forward_stack(params.decoder, latent, "infer")
    return out
