"""Straight conditional probability paths and a fixed-step ODE sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class FlowPathConfig:
    sigma_path: float = 1e-4

    def __post_init__(self):
        if not self.sigma_path >= 0:
            raise ValueError("sigma_path must be non-negative")


@dataclass(frozen=True)
class OdeSamplerConfig:
    method: str = "euler"
    n_steps: int = 16

    def __post_init__(self):
        if self.method not in ("euler", "midpoint"):
            raise ValueError(f"unknown ODE method {self.method!r}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")


def _check_s(s):
    s_arr = np.asarray(s, dtype=np.float64)
    if np.any(s_arr < 0) or np.any(s_arr > 1):
        raise ValueError("flow step s must lie in [0, 1]")
    return s_arr


def interpolant_sample(y0, y1, s, cfg: FlowPathConfig, rng: np.random.Generator | None = None):
    """Draw from N((1-s) y0 + s y1, sigma_path^2 I).

    ``s`` may be a scalar or hold one value per row of ``y0``.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    y1 = np.asarray(y1, dtype=np.float64)
    s_arr = _check_s(s)
    if s_arr.ndim == 1 and y0.ndim == 2:
        s_arr = s_arr[:, None]
    mean = (1.0 - s_arr) * y0 + s_arr * y1
    if cfg.sigma_path == 0.0:
        return mean
    if rng is None:
        raise ValueError("a random generator is required when sigma_path > 0")
    return mean + cfg.sigma_path * rng.standard_normal(mean.shape)


def velocity_target(y0, y1):
    y0 = np.asarray(y0, dtype=np.float64)
    y1 = np.asarray(y1, dtype=np.float64)
    if y0.shape != y1.shape:
        raise ValueError(f"shapes {y0.shape} and {y1.shape} differ")
    return y1 - y0


class OdeIntegrationError(FloatingPointError):
    pass


def ode_sample(vfield: Callable, y0, cfg: OdeSamplerConfig = OdeSamplerConfig(),
               strict: bool = True):
    """Integrate dy/ds = vfield(y, s) from s=0 to s=1 with fixed steps.

    With ``strict=False`` non-finite rows are left in the result for the
    caller to flag instead of raising.
    """
    y = np.array(y0, dtype=np.float64, copy=True)
    ds = 1.0 / cfg.n_steps
    for k in range(cfg.n_steps):
        s = k * ds
        v = vfield(y, s)
        if cfg.method == "midpoint":
            v = vfield(y + 0.5 * ds * v, s + 0.5 * ds)
        y = y + ds * v
        if strict and not np.all(np.isfinite(y)):
            raise OdeIntegrationError(f"non-finite state after ODE step {k + 1} of {cfg.n_steps}")
    return y
