"""Checkpoint container shared by trained networks and PCA.

Layout: u64 little-endian header length, UTF-8 JSON header, then a raw
little-endian float64 blob. For networks the blob is ``theta`` (parameters
in declared layer order) followed by the batch-norm buffers; for PCA it is
mean, components (row-major), kept eigenvalues, all eigenvalues.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import atomic_write_bytes
from .errors import FormatError
from .models import ModelParams, ModelSpec, build_model, decode, encode
from .pca import PcaModel, pca_inverse, pca_transform
from .training import AnnealState, Checkpoint, TrainHistory
from .losses import LossWeights

FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


@dataclass
class LoadedCheckpoint:
    kind: str  # "network" or "pca"
    model: object  # ModelParams or PcaModel
    header: dict = field(default_factory=dict)

    @property
    def method(self) -> str:
        return self.header.get("method", "PCA" if self.kind == "pca" else self.model.spec.name)

    @property
    def latent_dim(self) -> int:
        return self.model.latent_dim if self.kind == "pca" else self.model.spec.latent_dim

    def history(self) -> TrainHistory:
        return TrainHistory.from_dict(self.header.get("history", {}))


def _pack(header: dict, blob: np.ndarray) -> bytes:
    head = json.dumps(header, sort_keys=True, default=float).encode()
    return _LEN.pack(len(head)) + head + np.ascontiguousarray(blob, dtype="<f8").tobytes()


def network_bytes(ckpt: Checkpoint, extra: dict | None = None) -> bytes:
    p = ckpt.params
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "network",
        "method": p.spec.name,
        "spec": p.spec.to_dict(),
        "history": ckpt.history.to_dict(),
        "seeds": {"selected": ckpt.seed, "init": p.seed, "restarts": ckpt.restarts},
        "selection_loss": ckpt.selection_loss,
        "final_weights": asdict(ckpt.final_weights),
        "anneal": asdict(ckpt.anneal) if ckpt.anneal is not None else None,
        "n_params": int(p.theta.size),
        "n_buffers": int(p.buffers.size),
    }
    header.update(extra or {})
    return _pack(header, np.concatenate([p.theta, p.buffers]))


def pca_bytes(model: PcaModel, extra: dict | None = None) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "pca",
        "method": "PCA",
        "spec": {"variant": "PCA", "input_dim": model.input_dim, "latent_dim": model.latent_dim},
        "seeds": {},
    }
    header.update(extra or {})
    blob = np.concatenate([model.mean, model.components.ravel(), model.eigenvalues,
                           model.all_eigenvalues])
    return _pack(header, blob)


def save_checkpoint(obj, path, extra: dict | None = None) -> str:
    """Write a Checkpoint or PcaModel atomically; returns the sha256 of the file."""
    payload = pca_bytes(obj, extra) if isinstance(obj, PcaModel) else network_bytes(obj, extra)
    atomic_write_bytes(path, payload)
    return hashlib.sha256(payload).hexdigest()


def parse_checkpoint(buf: bytes) -> LoadedCheckpoint:
    if len(buf) < _LEN.size:
        raise FormatError("file too short for a checkpoint header length", 0)
    (n,) = _LEN.unpack_from(buf, 0)
    if _LEN.size + n > len(buf):
        raise FormatError(f"header length {n} runs past end of file", 0)
    try:
        header = json.loads(buf[_LEN.size:_LEN.size + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}", _LEN.size) from None
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('format_version')!r}", _LEN.size)
    off = _LEN.size + n
    if (len(buf) - off) % 8:
        raise FormatError("parameter blob is not a whole number of float64 values", off)
    blob = np.frombuffer(buf, dtype="<f8", offset=off).astype(np.float64)
    if header.get("kind") == "pca":
        d = header["spec"]["input_dim"]
        k = header["spec"]["latent_dim"]
        if blob.size != d + k * d + k + d:
            raise FormatError(f"PCA blob holds {blob.size} values, expected {d + k * d + k + d}", off)
        model = PcaModel(blob[:d].copy(), blob[d:d + k * d].reshape(k, d).copy(),
                         blob[d + k * d:d + k * d + k].copy(), blob[d + k * d + k:].copy())
        return LoadedCheckpoint("pca", model, header)
    if header.get("kind") != "network":
        raise FormatError(f"unknown checkpoint kind {header.get('kind')!r}", _LEN.size)
    spec = ModelSpec.from_dict(header["spec"])
    params = build_model(spec, header["seeds"].get("init") or 0)
    want = params.theta.size + params.buffers.size
    if blob.size != want or header.get("n_params") != params.theta.size:
        raise FormatError(f"parameter blob holds {blob.size} values, {spec.name} needs {want}", off)
    params.theta[...] = blob[:params.theta.size]
    params.buffers[...] = blob[params.theta.size:]
    return LoadedCheckpoint("network", params, header)


def load_checkpoint(path) -> LoadedCheckpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def restore_training_checkpoint(loaded: LoadedCheckpoint) -> Checkpoint:
    """Rebuild the in-memory training Checkpoint from a loaded network file."""
    h = loaded.header
    anneal = AnnealState(**h["anneal"]) if h.get("anneal") else None
    return Checkpoint(loaded.model, loaded.history(), h["seeds"].get("selected"),
                      h.get("selection_loss"), LossWeights(**h["final_weights"]), anneal,
                      h["seeds"].get("restarts", []))


def codec(model):
    """``(encode, decode)`` callables for a ModelParams, PcaModel or LoadedCheckpoint."""
    if isinstance(model, LoadedCheckpoint):
        model = model.model
    if isinstance(model, PcaModel):
        return (lambda x: pca_transform(model, x)), (lambda z: pca_inverse(model, z))
    if isinstance(model, ModelParams):
        return (lambda x: encode(model, x)), (lambda z: decode(model, z))
    raise TypeError(f"no codec for {type(model).__name__}")
