"""Training loop, loss-weight annealing, learning-rate schedule and restarts."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import Dataset, make_shuffled_pairs
from .errors import ConfigError, TrainingDivergence
from .losses import LossWeights, total_loss_and_grads
from .models import ModelParams, ModelSpec, build_model, forward, model_backward
from .seeding import derive_seed

log = logging.getLogger(__name__)

COMPONENTS = ("recon", "cov", "dist", "kl")


@dataclass(frozen=True)
class AnnealState:
    """Loss-weight annealing controller.

    The weight is kept as an integer count of steps so that the trace is an
    exact multiple of ``step``.
    """

    step: float = 0.2
    target: float = 2e-5
    n_steps: int = 0
    stopped: bool = False
    stopped_epoch: int | None = None

    @property
    def weight(self) -> float:
        return self.n_steps * self.step


def anneal_update(state: AnnealState, observed: float, epoch: int) -> AnnealState:
    if state.stopped:
        return state
    if observed <= state.target:
        return replace(state, stopped=True, stopped_epoch=int(epoch))
    return replace(state, n_steps=state.n_steps + 1)


def default_batch_size(variant: str) -> int:
    return 512 if variant in ("DIRESA", "CRAE") else 128


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int | None = None
    base_lr: float = 1e-3
    restarts: int = 10
    seed: int = 0
    lr_halving_period: int = 10
    fallback_lr_start_epoch: int = 50
    anneal_step: float = 0.2
    anneal_target: float = 2e-5
    # epoch-mean training loss; the validation split of a trajectory starts
    # nearly decorrelated at init and would freeze the weight at 0
    anneal_observe: str = "train"
    # "shuffled": validation batches drawn in one fixed random order, so
    # per-batch statistics of a temporal split are not dominated by a short
    # stretch of trajectory; "sequential": stored order
    val_order: str = "shuffled"
    drop_last: bool | None = None
    workers: int = 1

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", "training.epochs")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "training.batch_size")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be > 0", "training.base_lr")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1", "training.restarts")
        if self.anneal_observe not in ("validation", "train"):
            raise ConfigError("anneal_observe must be 'validation' or 'train'",
                              "training.anneal_observe")
        if self.val_order not in ("shuffled", "sequential"):
            raise ConfigError("val_order must be 'shuffled' or 'sequential'", "training.val_order")
        return self

    def batch_for(self, variant: str) -> int:
        return self.batch_size or default_batch_size(variant)

    def drop_last_for(self, variant: str) -> bool:
        if self.drop_last is not None:
            return self.drop_last
        return variant in ("DIRESA", "CRAE")


def lr_for_epoch(config: TrainConfig, epoch: int, anneal: AnnealState | None) -> float:
    """Base rate until the trigger epoch, then halved every ``lr_halving_period`` epochs.

    The trigger is the epoch annealing stopped, or ``fallback_lr_start_epoch``
    when ``anneal`` is None (variant without annealing).
    """
    if anneal is None:
        trigger = config.fallback_lr_start_epoch
    elif anneal.stopped:
        trigger = anneal.stopped_epoch
    else:
        return config.base_lr
    if epoch < trigger:
        return config.base_lr
    return config.base_lr * 0.5 ** ((epoch - trigger) // config.lr_halving_period)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, key):
        return [r.get(key) for r in self.records]

    def fieldnames(self):
        keys = ["epoch", "lr", "anneal_weight"]
        for split in ("train", "val"):
            for c in COMPONENTS + ("total",):
                k = f"{split}_{c}"
                if any(r.get(k) is not None for r in self.records):
                    keys.append(k)
        keys.append("skipped_batches")
        return keys

    def to_csv(self, path):
        keys = self.fieldnames()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
            w.writeheader()
            for r in self.records:
                w.writerow({k: ("" if r.get(k) is None else repr(r[k]) if isinstance(r[k], float)
                                else r[k]) for k in keys})

    def to_dict(self):
        return {"records": self.records}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d.get("records", [])))


@dataclass
class Checkpoint:
    params: ModelParams
    history: TrainHistory
    seed: int
    selection_loss: float
    final_weights: LossWeights
    anneal: AnnealState | None = None
    restarts: list = field(default_factory=list)

    @property
    def spec(self) -> ModelSpec:
        return self.params.spec


def weights_for(spec: ModelSpec, anneal: AnnealState | None) -> LossWeights:
    w = anneal.weight if anneal is not None else 0.0
    return LossWeights(
        w_cov=w if spec.variant in ("CRAE", "DIRESA") else 0.0,
        w_kl=w if spec.variant == "VAE" else 0.0,
    )


def combine(components: dict, weights: LossWeights) -> float:
    total = weights.w_recon * components["recon"]
    for key, w in (("cov", weights.w_cov), ("dist", weights.w_dist), ("kl", weights.w_kl)):
        if components.get(key) is not None:
            total += w * components[key]
    return float(total)


def _batches(n, batch_size, drop_last):
    stop = (n // batch_size) * batch_size if drop_last else n
    return [(i, min(i + batch_size, n)) for i in range(0, stop, batch_size)]


def evaluate_losses(params: ModelParams, x, x_twin=None, weights: LossWeights | None = None,
                    batch_size: int = 512) -> dict:
    """Batch-size weighted mean of per-batch loss components in inference mode."""
    spec = params.spec
    weights = weights or LossWeights()
    sums = dict.fromkeys(COMPONENTS, 0.0)
    counts = dict.fromkeys(COMPONENTS, 0)
    for a, b in _batches(x.shape[0], batch_size, drop_last=False):
        if spec.variant in ("CRAE", "DIRESA") and b - a < 2:
            continue
        xb = x[a:b]
        tb = x_twin[a:b] if x_twin is not None else None
        bundle = forward(params, xb, tb, None, "infer")
        _, comps, _ = total_loss_and_grads(bundle, xb, weights, spec, need_grads=False)
        for k in COMPONENTS:
            if comps[k] is not None:
                sums[k] += comps[k] * (b - a)
                counts[k] += b - a
    out = {k: (sums[k] / counts[k] if counts[k] else None) for k in COMPONENTS}
    out["total"] = combine(out, weights) if out["recon"] is not None else None
    return out


def _pairs(dataset: Dataset, spec: ModelSpec, split: str, seed: int):
    if spec.variant != "DIRESA":
        return dataset.split(split), None
    p = make_shuffled_pairs(dataset, split, derive_seed(seed, f"pairs:{split}"))
    return p.primary, p.shuffled


def train(spec: ModelSpec, dataset: Dataset, config: TrainConfig, seed: int | None = None):
    """Train one model; returns ``(Checkpoint, TrainHistory)``.

    Raises :class:`TrainingDivergence` (carrying the partial history) when a
    loss or gradient becomes non-finite.
    """
    config.validate()
    seed = config.seed if seed is None else int(seed)
    for name in ("train", "validation"):
        if name not in dataset.splits or dataset.split(name).shape[0] == 0:
            raise ConfigError(f"dataset needs a non-empty {name!r} split", "dataset.splits")
    params = build_model(spec, derive_seed(seed, "init"))
    x, x_twin = _pairs(dataset, spec, "train", seed)
    xv, xv_twin = _pairs(dataset, spec, "validation", seed)
    if config.val_order == "shuffled":
        vperm = np.random.default_rng(derive_seed(seed, "val_order")).permutation(xv.shape[0])
        xv = xv[vperm]
        xv_twin = xv_twin[vperm] if xv_twin is not None else None
    shuffle_rng = np.random.default_rng(derive_seed(seed, "shuffle"))
    noise_rng = np.random.default_rng(derive_seed(seed, "noise"))
    bs = config.batch_for(spec.variant)
    drop_last = config.drop_last_for(spec.variant)
    if drop_last and x.shape[0] < bs:
        bs = x.shape[0]
    adam = nn.AdamState.zeros(params.n_params, lr=config.base_lr)
    anneal = AnnealState(config.anneal_step, config.anneal_target) if spec.annealed else None
    history = TrainHistory()
    n = x.shape[0]

    for epoch in range(config.epochs):
        adam.lr = lr_for_epoch(config, epoch, anneal)
        weights = weights_for(spec, anneal)
        order = shuffle_rng.permutation(n)
        sums = dict.fromkeys(COMPONENTS, 0.0)
        counts = dict.fromkeys(COMPONENTS, 0)
        skipped = 0
        for a, b in _batches(n, bs, drop_last):
            idx = order[a:b]
            xb = x[idx]
            tb = x_twin[idx] if x_twin is not None else None
            if spec.variant in ("CRAE", "DIRESA", "BNAE") and b - a < 2:
                continue
            bundle = forward(params, xb, tb, noise_rng, "train")
            total, comps, grads = total_loss_and_grads(bundle, xb, weights, spec)
            if not math.isfinite(total):
                history.records.append({"epoch": epoch, "lr": adam.lr,
                                        "anneal_weight": anneal.weight if anneal else None})
                raise TrainingDivergence(f"non-finite loss in epoch {epoch}", index=epoch,
                                         history=history)
            if comps["dist_skipped"]:
                skipped += 1
                log.info("epoch %d: degenerate batch, distance term skipped", epoch)
            g = model_backward(params, bundle, grads)
            try:
                nn.adam_step(adam, params.theta, g)
            except TrainingDivergence as exc:
                exc.history = history
                raise
            for k in COMPONENTS:
                if comps[k] is not None:
                    sums[k] += comps[k] * (b - a)
                    counts[k] += b - a
        tr = {k: (sums[k] / counts[k] if counts[k] else None) for k in COMPONENTS}
        tr["total"] = combine(tr, weights)
        val = evaluate_losses(params, xv, xv_twin, weights, bs)
        if val["total"] is None or not math.isfinite(val["total"]):
            raise TrainingDivergence(f"non-finite validation loss in epoch {epoch}", index=epoch,
                                     history=history)
        rec = {"epoch": epoch, "lr": adam.lr,
               "anneal_weight": anneal.weight if anneal else None,
               "skipped_batches": skipped}
        rec.update({f"train_{k}": v for k, v in tr.items()})
        rec.update({f"val_{k}": v for k, v in val.items()})
        history.records.append(rec)
        if anneal is not None:
            key = "cov" if spec.variant in ("CRAE", "DIRESA") else "kl"
            observed = val[key] if config.anneal_observe == "validation" else tr[key]
            anneal = anneal_update(anneal, observed, epoch)

    final_weights = weights_for(spec, anneal)
    last = history.records[-1]
    selection = combine({k: last[f"val_{k}"] for k in COMPONENTS}, final_weights)
    ckpt = Checkpoint(params, history, seed, selection, final_weights, anneal)
    return ckpt, history


def _restart_worker(args):
    spec, dataset, config, seed = args
    try:
        ckpt, _ = train(spec, dataset, config, seed)
    except TrainingDivergence as exc:
        return seed, None, str(exc)
    return seed, (ckpt.params.theta, ckpt.params.buffers, ckpt.history, ckpt.selection_loss,
                  ckpt.final_weights, ckpt.anneal, ckpt.params.seed), None


def train_restarts(spec: ModelSpec, dataset: Dataset, config: TrainConfig, seeds=None) -> Checkpoint:
    """Train ``config.restarts`` models and keep the lowest total validation loss.

    Seeds default to ``config.seed + i``; a diverged restart is logged and
    skipped.
    """
    config.validate()
    seeds = list(seeds) if seeds is not None else [config.seed + i for i in range(config.restarts)]
    jobs = [(spec, dataset, config, s) for s in seeds]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_restart_worker, jobs))
    else:
        results = [_restart_worker(j) for j in jobs]
    summary = []
    best = None
    for seed, res, err in results:
        if res is None:
            log.warning("restart seed=%s diverged: %s", seed, err)
            summary.append({"seed": seed, "selection_loss": None, "error": err})
            continue
        summary.append({"seed": seed, "selection_loss": res[3]})
        if best is None or res[3] < best[1][3]:
            best = (seed, res)
    if best is None:
        raise TrainingDivergence(f"all {len(seeds)} restarts diverged")
    seed, (theta, buffers, history, loss, weights, anneal, init_seed) = best
    params = build_model(spec, init_seed)
    params.theta[...] = theta
    params.buffers[...] = buffers
    return Checkpoint(params, history, seed, loss, weights, anneal, summary)
