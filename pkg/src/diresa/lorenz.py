"""Lorenz '63 trajectories integrated with classical RK4."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset, scale_01, split_sizes
from .errors import ConfigError, IntegrationDivergence

BLOWUP = 1e6


@dataclass(frozen=True)
class LorenzParams:
    sigma: float = 10.0
    r: float = 28.0
    b: float = 8.0 / 3.0
    dt: float = 0.0025
    initial: tuple = (1.0, 0.0, 1.0)
    transient_steps: int = 1000
    total_steps: int = 100_000

    def validate(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive", "dataset.dt")
        if self.transient_steps < 0:
            raise ConfigError("transient_steps must be >= 0", "dataset.transient_steps")
        if self.total_steps <= 0:
            raise ConfigError("total_steps must be > 0", "dataset.total_steps")
        if len(self.initial) != 3:
            raise ConfigError("initial state needs 3 coordinates", "dataset.initial")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["initial"] = list(self.initial)
        return d


BENCHMARK = LorenzParams()


def _rhs(x, y, z, s, r, b):
    return s * (y - x), x * (r - z) - y, x * y - b * z


def lorenz_rhs(state, params: LorenzParams = BENCHMARK) -> np.ndarray:
    x, y, z = (float(v) for v in state)
    return np.array(_rhs(x, y, z, params.sigma, params.r, params.b))


def _rk4(x, y, z, h, s, r, b):
    a1, b1, c1 = _rhs(x, y, z, s, r, b)
    hh = 0.5 * h
    a2, b2, c2 = _rhs(x + hh * a1, y + hh * b1, z + hh * c1, s, r, b)
    a3, b3, c3 = _rhs(x + hh * a2, y + hh * b2, z + hh * c2, s, r, b)
    a4, b4, c4 = _rhs(x + h * a3, y + h * b3, z + h * c3, s, r, b)
    w = h / 6.0
    return (
        x + w * (a1 + 2.0 * a2 + 2.0 * a3 + a4),
        y + w * (b1 + 2.0 * b2 + 2.0 * b3 + b4),
        z + w * (c1 + 2.0 * c2 + 2.0 * c3 + c4),
    )


def rk4_step(state, dt: float, params: LorenzParams = BENCHMARK) -> np.ndarray:
    if dt < 0:
        raise ValueError("dt must be non-negative")
    x, y, z = (float(v) for v in state)
    out = _rk4(x, y, z, dt, params.sigma, params.r, params.b)
    if not all(math.isfinite(v) for v in out):
        raise IntegrationDivergence(f"non-finite state after RK4 step from {tuple(state)}")
    return np.array(out)


def integrate(params: LorenzParams = BENCHMARK, n_steps: int | None = None) -> np.ndarray:
    """States after steps 1..n (initial point excluded), shape (n, 3).

    Defaults to ``transient_steps + total_steps`` steps.
    """
    params.validate()
    n = params.transient_steps + params.total_steps if n_steps is None else int(n_steps)
    s, r, b, h = params.sigma, params.r, params.b, params.dt
    x, y, z = (float(v) for v in params.initial)
    out = np.empty((n, 3))
    for i in range(n):
        x, y, z = _rk4(x, y, z, h, s, r, b)
        if not (abs(x) < BLOWUP and abs(y) < BLOWUP and abs(z) < BLOWUP):
            raise IntegrationDivergence(
                f"trajectory left |coord| < {BLOWUP:g} at step {i + 1}: ({x}, {y}, {z})", index=i + 1
            )
        out[i] = (x, y, z)
    return out


def generate_dataset(params: LorenzParams = BENCHMARK, fractions=(0.8, 0.1, 0.1)) -> Dataset:
    """Integrate, drop the transient, scale all retained rows to [0, 1] and split in time order."""
    traj = integrate(params)[params.transient_steps:]
    if traj.shape[0] > 1:
        scaled, fmin, fmax = scale_01(traj)
    else:
        # a single row cannot define a range; map it to the origin of the unit cube
        fmin, fmax = traj[0].copy(), traj[0] + 1.0
        scaled = np.zeros_like(traj)
    return Dataset(
        scaled,
        feature_min=fmin,
        feature_max=fmax,
        splits=split_sizes(traj.shape[0], fractions),
        provenance={"generator": "lorenz63-rk4", "params": params.to_dict()},
    )
