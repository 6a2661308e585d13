"""Command-line pipeline: generate, train, evaluate, analyze, bench.

Every command reads one TOML config; flags only override it. Outputs go to
the run directory together with a ``manifest_<command>.json`` listing the
config hash, library versions, sha256 of inputs and outputs, derived seeds
and timings.

Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 I/O or
format error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import LoadedCheckpoint, codec, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import Dataset, atomic_write_bytes, load_csv, load_dataset, save_dataset, scale_01, split_sizes
from .errors import ConfigError, DegenerateError, DivergenceError, FormatError
from .latent import export_component_report, export_scatter, order_components
from .lorenz import generate_dataset
from .metrics import (REFERENCE_RANDOM_CANBERRA, aggregate, anchor_distances,
                      canberra_random_baseline, kpi_names, sample_kpis, welch_ttest)
from .models import spec_from_method
from .pca import fit_pca
from .seeding import derive_seed
from .training import evaluate_losses, train_restarts

log = logging.getLogger("diresa")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "DIRESA_THREADS"


# ------------------------------------------------------------------ plumbing

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else v
                    for v in row])
    return buf.getvalue().encode()


def write_csv(path, header, rows):
    atomic_write_bytes(path, _csv_bytes(header, rows))


class Stage:
    """Collects inputs, outputs, seeds and timings for one command's manifest."""

    def __init__(self, command: str, cfg: RunConfig, out: Path):
        self.command, self.cfg, self.out = command, cfg, out
        self.inputs, self.outputs, self.seeds, self.timings = {}, {}, {}, {}
        self.extra = {}
        self._t0 = time.perf_counter()

    def _key(self, path):
        p = Path(path)
        try:
            return str(p.resolve().relative_to(self.out.resolve()))
        except ValueError:
            return str(p)

    def input(self, path):
        self.inputs[self._key(path)] = sha256_file(path)

    def output(self, path):
        self.outputs[self._key(path)] = sha256_file(path)

    def seed(self, stage: str, value: int | None = None) -> int:
        v = derive_seed(self.cfg.seed, stage) if value is None else int(value)
        self.seeds[stage] = v
        return v

    def timed(self, name, t0):
        self.timings[name] = round(time.perf_counter() - t0, 3)

    def write(self):
        self.timings["total"] = round(time.perf_counter() - self._t0, 3)
        import scipy
        manifest = {
            "command": self.command,
            "config_hash": self.cfg.hash(),
            "config": self.cfg.raw,
            "global_seed": self.cfg.seed,
            "derived_seeds": self.seeds,
            "versions": {"diresa": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timings_s": self.timings,
        }
        manifest.update(self.extra)
        path = self.out / f"manifest_{self.command}.json"
        atomic_write_bytes(path, json.dumps(manifest, indent=2, sort_keys=True, default=str).encode())
        return path


def dataset_path(out: Path) -> Path:
    return out / "dataset.drsa"


def checkpoint_path(out: Path, method: str) -> Path:
    return out / "checkpoints" / f"{method}.ckpt"


def prepare_external(ds: Dataset, fractions) -> Dataset:
    """Scale an unscaled dataset to [0, 1] and add time-ordered splits if absent."""
    if not ds.scaled:
        scaled, fmin, fmax = scale_01(ds.data)
        ds = Dataset(scaled, fmin, fmax, ds.splits, ds.provenance)
    if not ds.splits:
        ds = Dataset(ds.data, ds.feature_min, ds.feature_max, split_sizes(ds.n_samples, fractions),
                     ds.provenance)
    return ds


def _load_run_dataset(cfg: RunConfig, out: Path, stage: Stage, path=None) -> Dataset:
    path = Path(path) if path else dataset_path(out)
    if not path.exists():
        raise FileNotFoundError(f"dataset file {path} not found (run 'generate' first)")
    stage.input(path)
    return load_dataset(path)


# ------------------------------------------------------------------ commands

def cmd_generate(cfg: RunConfig, out: Path) -> Path:
    stage = Stage("generate", cfg, out)
    t0 = time.perf_counter()
    if cfg.dataset_path:
        stage.input(cfg.dataset_path)
        src = cfg.dataset_path
        ds = load_dataset(src) if src.endswith(".drsa") else load_csv(src)
        ds = prepare_external(ds, cfg.fractions)
    else:
        ds = generate_dataset(cfg.lorenz, cfg.fractions)
    path = dataset_path(out)
    save_dataset(ds, path)
    stage.timed("generate", t0)
    stage.output(path)
    stage.extra["dataset"] = {"rows": ds.n_samples, "cols": ds.n_features, "splits": ds.splits,
                              "data_sha256": ds.checksum()}
    stage.write()
    return path


def _train_one(cfg: RunConfig, ds: Dataset, method: str, out: Path, stage: Stage) -> Path:
    path = checkpoint_path(out, method)
    t0 = time.perf_counter()
    if method == "PCA":
        model = fit_pca(ds.split("train"), cfg.latent_dim)
        save_checkpoint(model, path, {"config_hash": cfg.hash()})
    else:
        spec = spec_from_method(method, ds.n_features, cfg.hidden_widths, cfg.latent_dim)
        seeds = [cfg.seed + i for i in range(cfg.training.restarts)]
        for s in seeds:
            for name in ("init", "shuffle", "noise", "pairs:train", "pairs:validation", "val_order"):
                stage.seed(f"{method}:{s}:{name}", derive_seed(s, name))
        ckpt = train_restarts(spec, ds, cfg.training, seeds)
        save_checkpoint(ckpt, path, {"config_hash": cfg.hash()})
        hist = out / "history" / f"{method}.csv"
        hist.parent.mkdir(parents=True, exist_ok=True)
        ckpt.history.to_csv(hist)
        stage.output(hist)
    stage.timed(f"train:{method}", t0)
    stage.output(path)
    return path


def cmd_train(cfg: RunConfig, out: Path, methods=None, dataset=None) -> dict:
    stage = Stage("train", cfg, out)
    ds = _load_run_dataset(cfg, out, stage, dataset)
    paths = {}
    for m in methods or cfg.methods:
        if m == "DEBUG":
            continue
        paths[m] = _train_one(cfg, ds, m, out, stage)
    stage.write()
    return paths


def _identity_codec():
    return (lambda x: np.array(x, dtype=np.float64)), (lambda z: np.array(z, dtype=np.float64))


def _codecs(cfg: RunConfig, out: Path, methods, stage: Stage, checkpoints=None):
    """``{method: (encode, decode, loaded or None)}``; DEBUG is the identity map."""
    found = {}
    if checkpoints:
        for p in checkpoints:
            stage.input(p)
            lc = load_checkpoint(p)
            found[lc.method.upper()] = (*codec(lc), lc)
    else:
        for m in methods:
            if m == "DEBUG":
                found[m] = (*_identity_codec(), None)
                continue
            p = checkpoint_path(out, m)
            stage.input(p)
            lc = load_checkpoint(p)
            found[m] = (*codec(lc), lc)
    dims = {m: v[2].latent_dim for m, v in found.items() if v[2] is not None}
    if len(set(dims.values())) > 1:
        raise ConfigError(f"latent dimensions differ across methods: {dims}", "model.latent_dim")
    return found


def reconstruction_row(method, loaded: LoadedCheckpoint | None, enc, dec, x, seed):
    """Test MSE, covariance loss (batches of 512 in a fixed shuffled order), KL and latent covariance."""
    z = enc(x)
    rec = dec(z)
    mse = float(np.mean((rec - x) ** 2))
    cov = kl = None
    if loaded is not None and loaded.kind == "network":
        params = loaded.model
        order = np.random.default_rng(seed).permutation(x.shape[0])
        twin = None
        if params.spec.variant == "DIRESA":
            twin = x[order][np.random.default_rng(seed + 1).permutation(x.shape[0])]
        ev = evaluate_losses(params, x[order], twin, None, 512)
        cov, kl = ev["cov"], ev["kl"]
    if z.shape[1] > 1:
        c = np.cov(z.T, bias=True)
        max_cov = float(np.max(np.abs(c[~np.eye(c.shape[0], dtype=bool)])))
    else:
        max_cov = 0.0
    return {"method": method, "mse": mse, "cov_loss": cov, "kl_loss": kl, "max_abs_latent_cov": max_cov}


def cmd_evaluate(cfg: RunConfig, out: Path, checkpoints=None, dataset=None):
    stage = Stage("evaluate", cfg, out)
    ds = _load_run_dataset(cfg, out, stage, dataset)
    split = cfg.evaluation["split"]
    x = ds.split(split)
    found = _codecs(cfg, out, cfg.methods, stage, checkpoints)
    kpi_cfg = replace(cfg.kpi, rng_seed=stage.seed("kpi_anchors"))
    eval_seed = stage.seed("eval_order")
    names = kpi_names(cfg.kpi.location_param)
    reports, samples, recon = {}, {}, []
    for m, (enc, dec, lc) in found.items():
        t0 = time.perf_counter()
        z = enc(x)
        sk = sample_kpis(x, z, kpi_cfg)
        samples[m] = sk
        reports[m] = aggregate(sk)
        recon.append(reconstruction_row(m, lc, enc, dec, x, eval_seed))
        stage.timed(f"evaluate:{m}", t0)
    rows = []
    for m, rep in reports.items():
        row = [m]
        for block in ("mean", "median", "stderr"):
            row += [getattr(rep, block)[k] for k in names]
        row += [rep.n_valid[names[0]], sum(rep.n_undefined.values())]
        rows.append(row)
    header = ["method"] + [f"{b}_{k}" for b in ("mean", "median", "stderr") for k in names] \
        + ["n_anchors", "n_undefined"]
    paths = {"kpi": out / "kpi_report.csv", "pvalues": out / "pvalues.csv",
             "reconstruction": out / "reconstruction.csv"}
    write_csv(paths["kpi"], header, rows)
    prow = []
    methods = list(reports)
    for i, a in enumerate(methods):
        for b in methods[i + 1:]:
            cells = []
            for k in names:
                try:
                    cells.append(welch_ttest(samples[a].values[k], samples[b].values[k])[2])
                except DegenerateError:  # e.g. two identity rows with constant KPIs
                    cells.append(None)
            prow.append([a, b] + cells)
    write_csv(paths["pvalues"], ["method_a", "method_b"] + names, prow)
    rkeys = ["method", "mse", "cov_loss", "kl_loss", "max_abs_latent_cov"]
    write_csv(paths["reconstruction"], rkeys, [[r[k] for k in rkeys] for r in recon])
    for p in paths.values():
        stage.output(p)
    np.savez(out / "kpi_samples.npz", **{f"{m}__{k}": s.values[k] for m, s in samples.items()
                                         for k in names}, anchors=next(iter(samples.values())).anchors)
    stage.output(out / "kpi_samples.npz")
    stage.write()
    return reports, samples, recon


def cmd_analyze(cfg: RunConfig, out: Path, checkpoint=None, dataset=None) -> dict:
    stage = Stage("analyze", cfg, out)
    ds = _load_run_dataset(cfg, out, stage, dataset)
    x = ds.split(cfg.evaluation["analysis_split"])
    if checkpoint:
        found = _codecs(cfg, out, None, stage, [checkpoint])
    else:
        found = _codecs(cfg, out, cfg.methods, stage)
    rng = np.random.default_rng(stage.seed("scatter_anchors"))
    n_anchor = min(int(cfg.evaluation["scatter_anchors"]), x.shape[0])
    anchors = np.sort(rng.choice(x.shape[0], size=n_anchor, replace=False))
    l = min(cfg.kpi.location_param, x.shape[0] - 1)
    results = {}
    adir = out / "analysis"
    for m, (enc, dec, _) in found.items():
        ordering = order_components(enc, dec, x)
        cpath = adir / f"{m}_components.csv"
        export_component_report(ordering, cpath)
        z = enc(x)
        dx, dz = anchor_distances(x, z, anchors)
        idx = np.argsort(dz, axis=1, kind="stable")[:, :l]
        spath = adir / f"{m}_scatter.csv"
        export_scatter(np.take_along_axis(dx, idx, 1), np.take_along_axis(dz, idx, 1), spath)
        stage.output(cpath)
        stage.output(spath)
        results[m] = ordering
    stage.write()
    return results


def canberra_report(cfg: RunConfig, out: Path, universe: int | None = None, trials: int = 10_000):
    l = cfg.kpi.location_param
    universe = universe or 10_000
    rows = []
    for i in range(2):
        seed = derive_seed(cfg.seed, f"canberra_baseline:{i}")
        mean, se = canberra_random_baseline(l, universe, trials, seed)
        rows.append([i, seed, l, universe, trials, mean, se])
    path = out / "canberra_baseline.csv"
    write_csv(path, ["replicate", "seed", "location_param", "universe", "trials", "mean", "stderr"], rows)
    mean = rows[0][5]
    note = (f"Monte Carlo random baseline for Can{l} with the implemented normalization "
            f"(sum over the latent top-{l} of |r1-r2|/(r1+r2), ranks capped at {l + 1}, divided by {l}) "
            f"is {mean:.4f}; the published reference figure is about {REFERENCE_RANDOM_CANBERRA}. "
            f"Ratio {REFERENCE_RANDOM_CANBERRA / mean:.3f}. Absolute Can values are therefore not comparable "
            f"with the published scale; only method orderings are.")
    return path, rows, note


SUMMARY_METRICS = ("mse", "cov_loss", "kl_loss", "max_abs_latent_cov")


def cmd_bench(cfg: RunConfig, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    stage = Stage("bench", cfg, out)
    cmd_generate(cfg, out)
    stage.timed("generate", t0)
    ds = load_dataset(dataset_path(out))
    status, ckpt_hash = {}, {}
    for m in cfg.methods:
        if m == "DEBUG":
            status[m] = "ok"
            continue
        t1 = time.perf_counter()
        try:
            p = _train_one(cfg, ds, m, out, stage)
            ckpt_hash[m] = sha256_file(p)
            status[m] = "ok"
        except (DivergenceError, FloatingPointError, ValueError) as exc:
            log.error("method %s failed: %s", m, exc)
            status[m] = f"failed: {exc}"
        stage.timed(f"train:{m}", t1)
    ok = [m for m in cfg.methods if status[m] == "ok"]
    cfg_ok = replace(cfg, methods=ok)
    reports, _, recon = cmd_evaluate(cfg_ok, out) if ok else ({}, {}, [])
    cmd_analyze(cfg_ok, out) if ok else None
    names = kpi_names(cfg.kpi.location_param)
    recon = {r["method"]: r for r in recon}
    header = ["method", "status", *SUMMARY_METRICS] + [f"{b}_{k}" for b in ("mean", "median", "stderr")
                                                       for k in names] + ["checkpoint_sha256"]
    rows = []
    for m in cfg.methods:
        if m not in reports:
            rows.append([m, status[m]] + [None] * (len(header) - 3) + [ckpt_hash.get(m)])
            continue
        rep = reports[m]
        rows.append([m, status[m]] + [recon[m][k] for k in SUMMARY_METRICS]
                    + [getattr(rep, b)[k] for b in ("mean", "median", "stderr") for k in names]
                    + [ckpt_hash.get(m)])
    spath = out / "summary.csv"
    write_csv(spath, header, rows)
    cpath, _, note = canberra_report(cfg, out)
    rpath = out / "run_report.md"
    lines = ["# Benchmark run report", "", f"config hash: {cfg.hash()}", f"global seed: {cfg.seed}", "",
             "## Methods", ""] + [f"- {m}: {status[m]}" + (f" (checkpoint sha256 {ckpt_hash[m][:16]})"
                                                            if m in ckpt_hash else "") for m in cfg.methods]
    lines += ["", "## Canberra scale", "", note, ""]
    atomic_write_bytes(rpath, "\n".join(lines).encode())
    for p in (spath, cpath, rpath):
        stage.output(p)
    stage.extra["summary_sha256"] = sha256_file(spath)
    stage.extra["status"] = status
    stage.write()
    return spath


# ----------------------------------------------------------------------- main

def _overrides(args) -> dict:
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    threads = args.threads
    if threads is None and os.environ.get(THREADS_ENV):
        try:
            threads = int(os.environ[THREADS_ENV])
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer", THREADS_ENV) from None
    if threads is not None:
        if threads < 1:
            raise ConfigError("threads must be >= 1", "--threads")
        over.setdefault("training", {})["workers"] = threads
    return over


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diresa", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML run configuration")
    common.add_argument("--out", help="run directory (overrides output.dir)")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--threads", type=int,
                        help=f"worker processes for restarts (default ${THREADS_ENV} or 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the dataset file")
    t = sub.add_parser("train", parents=[common], help="train the configured methods")
    t.add_argument("--method", action="append", help="restrict to this method (repeatable)")
    t.add_argument("--dataset", help="dataset file (default: <out>/dataset.drsa)")
    e = sub.add_parser("evaluate", parents=[common], help="distance KPIs and p-values")
    e.add_argument("--checkpoint", action="append", help="checkpoint file (repeatable)")
    e.add_argument("--dataset")
    a = sub.add_parser("analyze", parents=[common], help="latent ordering and scatter export")
    a.add_argument("--checkpoint")
    a.add_argument("--dataset")
    sub.add_parser("bench", parents=[common], help="generate, train, evaluate and analyze")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        out = Path(args.out or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "generate":
            cmd_generate(cfg, out)
        elif args.command == "train":
            methods = [m.upper() for m in args.method] if args.method else None
            cmd_train(cfg, out, methods, args.dataset)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, out, args.checkpoint, args.dataset)
        elif args.command == "analyze":
            cmd_analyze(cfg, out, args.checkpoint, args.dataset)
        elif args.command == "bench":
            cmd_bench(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
