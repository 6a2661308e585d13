"""Declarative run configuration (TOML) with strict key checking."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .lorenz import LorenzParams
from .metrics import KpiConfig
from .models import spec_from_method
from .training import TrainConfig

DATASET_KEYS = {"generator", "path", "sigma", "r", "b", "dt", "initial", "transient_steps",
                "total_steps", "fractions"}
MODEL_KEYS = {"methods", "hidden_widths", "latent_dim"}
EVALUATION_KEYS = {"location_param", "sample_count", "log_offset", "chunk", "split",
                   "analysis_split", "scatter_anchors"}
OUTPUT_KEYS = {"dir"}
TRAINING_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
SECTIONS = {"dataset": DATASET_KEYS, "model": MODEL_KEYS, "training": TRAINING_KEYS,
            "evaluation": EVALUATION_KEYS, "output": OUTPUT_KEYS}
METHOD_NAMES = ("PCA", "AE", "BNAE", "CRAE", "VAE", "DIRESA_MSE", "DIRESA_MSLE", "DIRESA_CORR",
                "DIRESA_LOGCORR", "DEBUG")

DEFAULTS = {
    "seed": 0,
    "dataset": {"generator": "lorenz", "fractions": [0.8, 0.1, 0.1]},
    "model": {"methods": ["PCA", "AE", "VAE", "DIRESA_MSE"], "hidden_widths": [40, 20],
              "latent_dim": 2},
    "training": {},
    "evaluation": {"location_param": 50, "sample_count": "all", "log_offset": 1.0, "chunk": 256,
                   "split": "test", "analysis_split": "test", "scatter_anchors": 200},
    "output": {"dir": "run"},
}


@dataclass
class RunConfig:
    raw: dict
    seed: int
    lorenz: LorenzParams | None
    dataset_path: str | None
    fractions: tuple
    methods: list
    hidden_widths: tuple
    latent_dim: int
    training: TrainConfig
    kpi: KpiConfig
    evaluation: dict
    output_dir: str
    source: str | None = None

    def hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True).encode()).hexdigest()


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(raw: dict):
    for k, v in raw.items():
        if k == "seed":
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError("seed must be a non-negative integer", "seed")
            continue
        if k not in SECTIONS:
            raise ConfigError(f"unknown key {k!r}", k)
        if not isinstance(v, dict):
            raise ConfigError("expected a table", k)
        for kk in v:
            if kk not in SECTIONS[k]:
                raise ConfigError(f"unknown key {kk!r}", f"{k}.{kk}")


def _typed(section: dict, key: str, kind, path: str):
    v = section[key]
    ok = isinstance(v, kind) and not (isinstance(v, bool) and kind in (int, float, (int, float)))
    if not ok:
        raise ConfigError(f"expected {getattr(kind, '__name__', kind)}, got {type(v).__name__}", path)
    return v


def _lorenz_from(ds: dict) -> LorenzParams:
    kw = {}
    for k in ("sigma", "r", "b", "dt"):
        if k in ds:
            kw[k] = float(_typed(ds, k, (int, float), f"dataset.{k}"))
    for k in ("transient_steps", "total_steps"):
        if k in ds:
            kw[k] = _typed(ds, k, int, f"dataset.{k}")
    if "initial" in ds:
        init = ds["initial"]
        if not isinstance(init, list) or len(init) != 3:
            raise ConfigError("initial must be a list of 3 numbers", "dataset.initial")
        kw["initial"] = tuple(float(x) for x in init)
    params = LorenzParams(**kw)
    params.validate()
    return params


def build_config(raw: dict, base_dir: str | Path = ".", source: str | None = None) -> RunConfig:
    _check_keys(raw)
    raw = _merge(DEFAULTS, raw)
    ds, md, tr, ev = raw["dataset"], raw["model"], raw["training"], raw["evaluation"]

    lorenz = path = None
    if "path" in ds:
        if ds.get("generator", "lorenz") != "lorenz" or any(
                k in ds for k in ("sigma", "r", "b", "dt", "initial", "transient_steps", "total_steps")):
            raise ConfigError("give either generator parameters or a path, not both", "dataset.path")
        p = Path(ds["path"])
        p = p if p.is_absolute() else Path(base_dir) / p
        if not p.exists():
            raise ConfigError(f"file not found: {p}", "dataset.path")
        path = str(p)
    else:
        if ds["generator"] != "lorenz":
            raise ConfigError(f"unknown generator {ds['generator']!r}", "dataset.generator")
        lorenz = _lorenz_from(ds)
    fr = ds["fractions"]
    if not isinstance(fr, list) or len(fr) != 3 or any(not isinstance(x, (int, float)) or x < 0 for x in fr) \
            or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError("fractions must be 3 non-negative numbers summing to 1", "dataset.fractions")

    methods = md["methods"]
    if not isinstance(methods, list) or not methods:
        raise ConfigError("methods must be a non-empty list", "model.methods")
    for i, m in enumerate(methods):
        if not isinstance(m, str) or m.upper() not in METHOD_NAMES:
            raise ConfigError(f"unknown method {m!r}; expected one of {METHOD_NAMES}", f"model.methods[{i}]")
    if len({m.upper() for m in methods}) != len(methods):
        raise ConfigError("methods must not repeat", "model.methods")
    widths = md["hidden_widths"]
    if not isinstance(widths, list) or not widths or any(not isinstance(w, int) or w < 1 for w in widths):
        raise ConfigError("hidden_widths must be a list of positive integers", "model.hidden_widths")
    latent_dim = _typed(md, "latent_dim", int, "model.latent_dim")
    for i, m in enumerate(methods):
        if m.upper() not in ("PCA", "DEBUG"):
            try:
                spec_from_method(m, latent_dim + 1, tuple(widths), latent_dim)
            except ConfigError as exc:
                raise ConfigError(str(exc).split(": ", 1)[-1], f"model.methods[{i}]") from None

    try:
        training = TrainConfig(seed=raw["seed"], **tr)
    except TypeError as exc:
        raise ConfigError(str(exc), "training") from None
    training.validate()

    sc = ev["sample_count"]
    if not (sc == "all" or (isinstance(sc, int) and not isinstance(sc, bool) and sc > 0)):
        raise ConfigError("sample_count must be a positive integer or \"all\"", "evaluation.sample_count")
    for k in ("split", "analysis_split"):
        if ev[k] not in ("train", "validation", "test"):
            raise ConfigError("split must be train, validation or test", f"evaluation.{k}")
    lp = _typed(ev, "location_param", int, "evaluation.location_param")
    if lp < 2:
        raise ConfigError("location_param must be >= 2", "evaluation.location_param")
    kpi = KpiConfig(location_param=lp, sample_count=sc, log_offset=float(ev["log_offset"]),
                    chunk=_typed(ev, "chunk", int, "evaluation.chunk"))
    out = raw["output"]["dir"]
    if not isinstance(out, str) or not out:
        raise ConfigError("dir must be a non-empty string", "output.dir")
    return RunConfig(raw, raw["seed"], lorenz, path, tuple(float(x) for x in fr), [m.upper() for m in methods],
                     tuple(widths), latent_dim, training, kpi, ev, out, source)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}", str(path)) from None
    raw = _merge(raw, overrides or {})
    return build_config(raw, path.parent, str(path))
