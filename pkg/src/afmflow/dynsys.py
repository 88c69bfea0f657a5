"""Stochastic benchmark systems, Euler-Heun integration and dataset I/O.

Every system has additive constant diffusion,
``dx = f(x) dt + sigma dW``, so Ito and Stratonovich readings coincide and
the Heun predictor/corrector is unambiguous.  ``dW`` over an internal step
of length ``dt`` is drawn as ``N(0, dt I)``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1e6
MAX_REJECT_FRACTION = 0.01
LV_FLOOR = 1e-9


class SimulationDiverged(FloatingPointError):
    pass


# ----------------------------------------------------------------------------
# drifts; x has shape (..., n)
# ----------------------------------------------------------------------------


def _lorenz(x, p):
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([p["sigma"] * (x2 - x1),
                     x1 * (p["rho"] - x3) - x2,
                     x1 * x2 - p["beta"] * x3], axis=-1)


def _fitzhugh_nagumo(x, p):
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x1 - x1 ** 3 / 3.0 - x2 + p["I"],
                     (x1 + p["a"] - p["b"] * x2) / p["tau"]], axis=-1)


def _lotka_volterra(x, p):
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([p["alpha"] * x1 - p["beta"] * x1 * x2,
                     -p["delta"] * x2 + p["gamma"] * x1 * x2], axis=-1)


def _brusselator(x, p):
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([p["A"] + x1 * x1 * x2 - (p["B"] + 1.0) * x1,
                     p["B"] * x1 - x1 * x1 * x2], axis=-1)


def _van_der_pol(x, p):
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x2, p["mu"] * (1.0 - x1 * x1) * x2 - x1], axis=-1)


@dataclass(frozen=True)
class SdeSystem:
    name: str
    dim: int
    params: dict
    sigma: tuple
    init_low: tuple
    init_high: tuple
    t0: float
    t1: float
    steps: int = 200
    drift_fn: Callable = field(default=None, repr=False, compare=False)
    floor: float | None = None  # lower clamp on states after each step

    def __post_init__(self):
        if self.t1 <= self.t0:
            raise ValueError("t1 must exceed t0")
        if any(s < 0 for s in self.sigma):
            raise ValueError("diffusion entries must be non-negative")
        if not (len(self.sigma) == len(self.init_low) == len(self.init_high) == self.dim):
            raise ValueError("per-dimension fields disagree with dim")

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t0, self.t1, self.steps)

    def with_sigma(self, sigma) -> "SdeSystem":
        sigma = tuple(float(s) for s in np.broadcast_to(sigma, (self.dim,)))
        return SdeSystem(self.name, self.dim, dict(self.params), sigma, self.init_low,
                         self.init_high, self.t0, self.t1, self.steps, self.drift_fn, self.floor)

    def meta(self) -> dict:
        return {"name": self.name, "dim": self.dim, "params": self.params,
                "sigma": list(self.sigma), "init_low": list(self.init_low),
                "init_high": list(self.init_high), "t0": self.t0, "t1": self.t1,
                "steps": self.steps}


SYSTEMS: dict[str, SdeSystem] = {
    "lorenz": SdeSystem("Lorenz", 3, {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0},
                        (1.5, 1.5, 1.5), (0.0,) * 3, (10.0,) * 3, 0.0, 2.0,
                        drift_fn=_lorenz),
    "fitzhugh_nagumo": SdeSystem("FitzHughNagumo", 2,
                                 {"a": 0.7, "b": 0.8, "tau": 12.5, "I": 0.5},
                                 (1.5, 1.5), (-2.0, -2.0), (2.0, 2.0), 0.0, 10.0,
                                 drift_fn=_fitzhugh_nagumo),
    "lotka_volterra": SdeSystem("LotkaVolterra", 2,
                                {"alpha": 1.3, "beta": 0.9, "gamma": 0.8, "delta": 1.8},
                                (1.5, 1.5), (0.0, 0.0), (5.0, 5.0), 0.0, 20.0,
                                drift_fn=_lotka_volterra, floor=LV_FLOOR),
    "brusselator": SdeSystem("Brusselator", 2, {"A": 1.0, "B": 3.0},
                             (1.5, 1.5), (0.0, 0.0), (2.0, 2.0), 0.0, 20.0,
                             drift_fn=_brusselator),
    "van_der_pol": SdeSystem("VanDerPol", 2, {"mu": 0.1},
                             (1.5, 1.5), (-2.0, -2.0), (2.0, 2.0), 0.0, 20.0,
                             drift_fn=_van_der_pol),
}

_ALIASES = {"fhn": "fitzhugh_nagumo", "fitzhughnagumo": "fitzhugh_nagumo",
            "lotkavolterra": "lotka_volterra", "lv": "lotka_volterra",
            "vanderpol": "van_der_pol", "vdp": "van_der_pol"}


def get_system(name: str) -> SdeSystem:
    key = name.lower().replace("-", "_")
    key = _ALIASES.get(key.replace("_", ""), key)
    if key not in SYSTEMS:
        raise KeyError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}")
    return SYSTEMS[key]


def drift(system: SdeSystem, x) -> np.ndarray:
    return system.drift_fn(np.asarray(x, dtype=np.float64), system.params)


def euler_heun_step(system: SdeSystem, x, dt: float, dW) -> np.ndarray:
    """One predictor-corrector step; ``dW`` is the unscaled N(0, dt) increment."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=np.float64)
    noise = np.asarray(system.sigma) * dW
    fx = drift(system, x)
    x_pred = x + fx * dt + noise
    return x + 0.5 * (fx + drift(system, x_pred)) * dt + noise


# ----------------------------------------------------------------------------
# simulation
# ----------------------------------------------------------------------------


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray


def trajectory_rng(master_seed: int, index: int, attempt: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(index, attempt)))


def integrate(system: SdeSystem, x0: np.ndarray, noise: np.ndarray, substeps: int = 4) -> np.ndarray:
    """Integrate a batch of trajectories with given standard-normal noise.

    x0: (B, n); noise: (B, (steps-1)*substeps, n).  Returns (B, steps, n);
    rows that diverged are filled with NaN from the divergence point on.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    B, n = x.shape
    n_int = (system.steps - 1) * substeps
    if noise.shape != (B, n_int, n):
        raise ValueError(f"noise must have shape {(B, n_int, n)}, got {noise.shape}")
    dt = (system.t1 - system.t0) / n_int
    sdt = np.sqrt(dt)
    out = np.empty((B, system.steps, n))
    out[:, 0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_int):
            x = euler_heun_step(system, x, dt, noise[:, k] * sdt)
            if system.floor is not None:
                np.maximum(x, system.floor, out=x)
            if (k + 1) % substeps == 0:
                out[:, (k + 1) // substeps] = x
    bad = ~np.all(np.isfinite(out) & (np.abs(out) <= DIVERGENCE_THRESHOLD), axis=(1, 2))
    out[bad] = np.nan
    return out


def simulate(system: SdeSystem, x0, seed: int, substeps: int = 4) -> Trajectory:
    x0 = np.asarray(x0, dtype=np.float64).reshape(1, system.dim)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((1, (system.steps - 1) * substeps, system.dim))
    states = integrate(system, x0, noise, substeps)[0]
    if np.isnan(states).any():
        raise SimulationDiverged(f"{system.name} trajectory from {x0[0].tolist()} diverged")
    return Trajectory(system.times, states)


def simulate_many(system: SdeSystem, count: int, seed: int, substeps: int = 4,
                  max_reject_fraction: float = MAX_REJECT_FRACTION) -> tuple[np.ndarray, int]:
    """Simulate ``count`` trajectories from random initial conditions.

    Trajectory ``i`` draws its initial condition and noise from its own
    stream keyed by ``(seed, i, attempt)``; divergent ones are redrawn with a
    fresh initial condition.  Returns ``(states, n_rejected)``.
    """
    n_int = (system.steps - 1) * substeps
    lo, hi = np.asarray(system.init_low), np.asarray(system.init_high)
    out = np.empty((count, system.steps, system.dim))
    pending = np.arange(count)
    attempt = 0
    rejected = 0
    while pending.size:
        x0 = np.empty((pending.size, system.dim))
        noise = np.empty((pending.size, n_int, system.dim))
        for j, i in enumerate(pending):
            rng = trajectory_rng(seed, int(i), attempt)
            x0[j] = rng.uniform(lo, hi)
            noise[j] = rng.standard_normal((n_int, system.dim))
        states = integrate(system, x0, noise, substeps)
        bad = np.isnan(states).any(axis=(1, 2))
        out[pending[~bad]] = states[~bad]
        if bad.any():
            rejected += int(bad.sum())
            log.info("%s: %d trajectories diverged on attempt %d; resampling",
                     system.name, int(bad.sum()), attempt)
            if rejected > max_reject_fraction * count:
                raise SimulationDiverged(
                    f"{system.name}: {rejected} of {count} trajectories diverged "
                    f"(limit {max_reject_fraction:.0%}); first bad index {int(pending[bad][0])}")
        pending = pending[bad]
        attempt += 1
    return out, rejected


# ----------------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------------


@dataclass
class ForecastDataset:
    """Fixed-length trajectories split into observe / predict / extrapolate."""

    name: str
    times: np.ndarray
    train: np.ndarray  # (N_train, T, n)
    test: np.ndarray  # (N_test, T, n)
    split: tuple = (75, 75, 50)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    train_cov: np.ndarray | None = None  # (N_train, T, c)
    test_cov: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T = self.times.shape[0]
        if sum(self.split) != T:
            raise ValueError(f"split {self.split} does not sum to trajectory length {T}")
        if self.train.ndim != 3 or self.test.ndim != 3 or self.train.shape[1:] != self.test.shape[1:]:
            raise ValueError("train/test arrays must be (N, T, n) with matching T, n")
        if self.train.shape[1] != T:
            raise ValueError("trajectory length disagrees with time grid")
        if self.train_cov is None:
            self.train_cov = np.zeros(self.train.shape[:2] + (0,))
        if self.test_cov is None:
            self.test_cov = np.zeros(self.test.shape[:2] + (0,))
        if self.mean is None or self.std is None:
            self.mean, self.std = normalization_stats(self.train, self.split)

    @property
    def n(self) -> int:
        return self.train.shape[2]

    @property
    def c_dim(self) -> int:
        return self.train_cov.shape[2]

    @property
    def observe(self) -> int:
        return self.split[0]

    @property
    def predict(self) -> int:
        return self.split[1]

    @property
    def extrapolate(self) -> int:
        return self.split[2]

    def normalize(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z) * self.std + self.mean

    def norm_id(self) -> str:
        """Short fingerprint of the normalization statistics."""
        import hashlib
        blob = np.concatenate([self.mean, self.std]).astype("<f8").tobytes()
        return hashlib.sha256(blob).hexdigest()[:16]


def normalization_stats(train: np.ndarray, split) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean/std over the observe+predict part of training trajectories."""
    seen = train[:, :split[0] + split[1]].reshape(-1, train.shape[2])
    mean = seen.mean(axis=0)
    std = seen.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def generate_dataset(system: SdeSystem | str, n_train: int = 2000, n_test: int = 400,
                     seed: int = 0, split=(75, 75, 50), substeps: int = 4) -> ForecastDataset:
    if isinstance(system, str):
        system = get_system(system)
    if n_train <= 0 or n_test <= 0:
        raise ValueError("trajectory counts must be positive")
    states, rejected = simulate_many(system, n_train + n_test, seed, substeps)
    meta = {"system": system.meta(), "seed": seed, "n_train": n_train, "n_test": n_test,
            "rejected": rejected, "substeps": substeps}
    return ForecastDataset(system.name, system.times, states[:n_train], states[n_train:],
                           tuple(split), meta=meta)


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_split(path: Path, data: np.ndarray, cov: np.ndarray, times: np.ndarray, id0: int):
    n, c = data.shape[2], cov.shape[2]
    header = ["trajectory_id", "step_index", "t"] + [f"x_{k + 1}" for k in range(n)] \
        + [f"c_{k + 1}" for k in range(c)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.shape[0]):
            for j in range(data.shape[1]):
                w.writerow([id0 + i, j, _fmt(times[j])] + [_fmt(v) for v in data[i, j]]
                           + [_fmt(v) for v in cov[i, j]])


def save_dataset(ds: ForecastDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = dict(ds.meta)
    meta.update({"name": ds.name, "dim": ds.n, "covariate_dim": ds.c_dim,
                 "split": {"observe": ds.split[0], "predict": ds.split[1],
                           "extrapolate": ds.split[2]},
                 "normalization": {"mean": ds.mean.tolist(), "std": ds.std.tolist()},
                 "counts": {"train": int(ds.train.shape[0]), "test": int(ds.test.shape[0])}})
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_split(out / "train.csv", ds.train, ds.train_cov, ds.times, 0)
    _write_split(out / "test.csv", ds.test, ds.test_cov, ds.times, ds.train.shape[0])
    return out


def _read_split(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    header = rows[0]
    if header[:3] != ["trajectory_id", "step_index", "t"]:
        raise ValueError(f"{path}: header must start with trajectory_id,step_index,t")
    xcols = [i for i, h in enumerate(header) if h.startswith("x_")]
    ccols = [i for i, h in enumerate(header) if h.startswith("c_")]
    body = np.array(rows[1:], dtype=np.float64)
    ids = body[:, 0].astype(np.int64)
    steps = body[:, 1].astype(np.int64)
    uniq = np.unique(ids)
    T = int(steps.max()) + 1
    pos = np.searchsorted(uniq, ids)
    data = np.full((uniq.size, T, len(xcols)), np.nan)
    cov = np.full((uniq.size, T, len(ccols)), np.nan)
    data[pos, steps] = body[:, xcols]
    cov[pos, steps] = body[:, ccols]
    times = np.full(T, np.nan)
    times[steps] = body[:, 2]
    if np.isnan(data).any() or np.isnan(cov).any():
        raise ValueError(f"{path}: trajectories have missing steps")
    return data, cov, times


def load_dataset(path) -> ForecastDataset:
    """Read a dataset directory (meta.json + train.csv + test.csv).

    Any data laid out this way can be used, simulated or not; when
    meta.json carries no normalization it is computed from the training split.
    """
    path = Path(path)
    if not (path / "meta.json").is_file():
        raise FileNotFoundError(f"{path} has no meta.json")
    meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    train, train_cov, times = _read_split(path / "train.csv")
    test, test_cov, _ = _read_split(path / "test.csv")
    sp = meta.get("split")
    if sp is None:
        raise ValueError("meta.json must define split.observe/predict/extrapolate")
    split = (int(sp["observe"]), int(sp["predict"]), int(sp["extrapolate"]))
    norm = meta.get("normalization")
    mean = std = None
    if norm:
        mean, std = np.asarray(norm["mean"], float), np.asarray(norm["std"], float)
    return ForecastDataset(meta.get("name", path.name), times, train, test, split, mean, std,
                           train_cov, test_cov, meta)
