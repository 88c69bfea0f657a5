"""Autoregressive flow matching: teacher-forced training and rolling sampling.

Each future step is modelled by a conditional flow from N(0, I) to
p(y_t | y_{t-w:t-1}, c_{t-w:t}).  The context encoder and the velocity
network are trained jointly on straight-path regression targets.  Models
work in per-dimension standardized units; forecasts are returned in data
units.
"""

from __future__ import annotations

import csv
import logging
import time
import warnings
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import nets
from .bundle import ModelBundle
from .dynsys import ForecastDataset
from .flowpath import FlowPathConfig, OdeSamplerConfig, interpolant_sample, ode_sample, velocity_target
from .numcore import AdamState, GradTape, Params, adam_step, backward

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class AfmConfig:
    window: int = 75
    batch_size: int = 128
    lr: float = 0.003
    max_steps: int = 20000
    seed: int = 0
    sigma_path: float = 1e-4
    ode_method: str = "euler"
    ode_steps: int = 16
    n_samples: int = 100
    enc_hidden: int = 64
    enc_layers: int = 2
    h_dim: int = 64
    mlp_hidden: int = 64
    mlp_depth: int = 3
    emb_dim: int = 16
    lr_schedule: str = "cosine"
    lr_final_frac: float = 0.02
    smooth_window: int = 100
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.emb_dim % 2:
            raise ValueError("emb_dim must be even")
        # validates ranges
        self.flow
        self.sampler

    @property
    def flow(self) -> FlowPathConfig:
        return FlowPathConfig(self.sigma_path)

    @property
    def sampler(self) -> OdeSamplerConfig:
        return OdeSamplerConfig(self.ode_method, self.ode_steps)

    @classmethod
    def from_dict(cls, d: dict) -> "AfmConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainRecord:
    step: int
    loss: float
    wall_time: float


# ----------------------------------------------------------------------------
# model construction
# ----------------------------------------------------------------------------


def _specs(arch: dict) -> tuple[nets.EncoderSpec, nets.VelocitySpec]:
    return nets.EncoderSpec(**arch["encoder"]), nets.VelocitySpec(**arch["velocity"])


def init_model(n: int, c_dim: int, cfg: AfmConfig, rng) -> tuple[Params, dict]:
    enc = nets.EncoderSpec(n + c_dim, cfg.enc_hidden, cfg.enc_layers, cfg.h_dim)
    vel = nets.VelocitySpec(n, cfg.h_dim, c_dim, cfg.emb_dim, cfg.mlp_hidden, cfg.mlp_depth)
    params = Params()
    nets.add_encoder_params(params, rng, enc)
    nets.add_velocity_params(params, rng, vel)
    return params, {"encoder": asdict(enc), "velocity": asdict(vel)}


# ----------------------------------------------------------------------------
# batches
# ----------------------------------------------------------------------------


@dataclass
class Batch:
    windows: np.ndarray  # (B, w, n), true past values
    cov_windows: np.ndarray  # (B, w, c)
    cov_now: np.ndarray  # (B, c)
    y1: np.ndarray  # (B, n)
    y0: np.ndarray
    s: np.ndarray  # (B,)
    ys: np.ndarray
    target: np.ndarray
    traj: np.ndarray  # trajectory and time indices the batch came from
    t: np.ndarray
    from_data: np.ndarray = field(default=None)  # provenance flag per window entry


def target_times(split, window: int) -> np.ndarray:
    """Admissible target indices: the prediction window, minus steps with too little history."""
    lo, hi = split[0], split[0] + split[1]
    ts = np.arange(max(lo, window), hi)
    if ts.size == 0:
        raise ValueError(f"window {window} leaves no target inside the prediction window {lo}..{hi - 1}")
    return ts


def sample_batch(data: np.ndarray, cov: np.ndarray, split, cfg: AfmConfig,
                 rng: np.random.Generator) -> Batch:
    """Teacher-forced batch: trajectories uniform, target time uniform over the prediction window."""
    N, T, n = data.shape
    w, B = cfg.window, cfg.batch_size
    ts = target_times(split, w)
    idx = rng.integers(0, N, size=B)
    t = ts[rng.integers(0, ts.size, size=B)]
    lags = t[:, None] - w + np.arange(w)
    windows = data[idx[:, None], lags]
    cov_w = cov[idx[:, None], lags]
    y1 = data[idx, t]
    y0 = rng.standard_normal((B, n))
    s = rng.uniform(0.0, 1.0, size=B)
    ys = interpolant_sample(y0, y1, s, cfg.flow, rng)
    return Batch(windows, cov_w, cov[idx, t], y1, y0, s, ys, velocity_target(y0, y1), idx, t,
                 np.ones(windows.shape[:2], dtype=bool))


def batch_loss(tape: GradTape, arch: dict, batch: Batch):
    """Mean over the batch of ||target - velocity||^2."""
    enc, vel = _specs(arch)
    h = nets.encode_context(tape, enc, batch.windows, batch.cov_windows)
    c_now = batch.cov_now if vel.c_dim else None
    v = nets.velocity(tape, vel, batch.ys, h, c_now, batch.s)
    resid = v - tape.const(batch.target)
    return tape.mean_square(resid) * float(vel.n)


def batch_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, step)))


# ----------------------------------------------------------------------------
# optimisation loop shared with the trajectory-level baseline
# ----------------------------------------------------------------------------


def learning_rate(cfg, step: int) -> float:
    if cfg.lr_schedule == "constant" or cfg.max_steps <= 1:
        return cfg.lr
    frac = (step - 1) / (cfg.max_steps - 1)
    lo = cfg.lr * cfg.lr_final_frac
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + np.cos(np.pi * frac))


def optimize(params: Params, loss_fn: Callable[[GradTape, int], object], cfg,
             progress: Callable[[TrainRecord], None] | None = None) -> list[TrainRecord]:
    """Adam on ``loss_fn(tape, step)``; keeps the parameters with best smoothed loss."""
    state = AdamState(lr=cfg.lr)
    records: list[TrainRecord] = []
    recent: deque = deque(maxlen=cfg.smooth_window)
    best = np.inf
    best_flat = None
    t_start = time.perf_counter()
    for step in range(1, cfg.max_steps + 1):
        tape = GradTape(params)
        loss = loss_fn(tape, step)
        value = float(loss.value[0, 0])
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {step} "
                                   f"(batch seed {cfg.seed}/{step})")
        grads = backward(tape, loss)
        tape.release()
        state.lr = learning_rate(cfg, step)
        adam_step(state, params, grads)
        rec = TrainRecord(step, value, time.perf_counter() - t_start)
        records.append(rec)
        recent.append(value)
        if progress is not None:
            progress(rec)
        if len(recent) == recent.maxlen and step % cfg.checkpoint_every == 0:
            smoothed = float(np.mean(recent))
            if smoothed < best:
                best = smoothed
                best_flat = params.flat()
    if best_flat is not None and len(recent) == recent.maxlen and float(np.mean(recent)) > best:
        params.load_flat(best_flat)
    return records


def train(dataset: ForecastDataset, cfg: AfmConfig,
          progress: Callable[[TrainRecord], None] | None = None) -> tuple[ModelBundle, list[TrainRecord]]:
    if cfg.window > dataset.observe + dataset.predict - 1:
        raise ValueError(f"window {cfg.window} exceeds the available history")
    data = dataset.normalize(dataset.train)
    cov = dataset.train_cov
    target_times(dataset.split, cfg.window)
    params, arch = init_model(dataset.n, dataset.c_dim, cfg, np.random.default_rng(cfg.seed))

    def loss_fn(tape, step):
        return batch_loss(tape, arch, sample_batch(data, cov, dataset.split, cfg, batch_rng(cfg.seed, step)))

    records = optimize(params, loss_fn, cfg, progress)
    bundle = ModelBundle("afm", params, arch, asdict(cfg),
                         {"mean": dataset.mean.tolist(), "std": dataset.std.tolist(),
                          "id": dataset.norm_id()},
                         {"name": dataset.name, "n": dataset.n, "c_dim": dataset.c_dim,
                          "split": list(dataset.split)})
    return bundle, records


# ----------------------------------------------------------------------------
# inference
# ----------------------------------------------------------------------------


@dataclass
class ForecastEnsemble:
    samples: np.ndarray  # (I, S, f, n) in data units; NaN rows for excluded paths
    valid: np.ndarray  # (I, S)
    start: int  # trajectory step index of the first forecast step
    instance_ids: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.samples.shape[2]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


def _as_batch(history, covariates, n, c_dim, horizon):
    hist = np.asarray(history, dtype=np.float64)
    if hist.ndim == 2:
        hist = hist[None]
    if hist.ndim != 3 or hist.shape[2] != n:
        raise ValueError(f"history must be (l, {n}) or (I, l, {n}), got {np.shape(history)}")
    I, l, _ = hist.shape
    if covariates is None:
        if c_dim:
            raise ValueError("model expects covariates")
        cov = np.zeros((I, l + horizon, 0))
    else:
        cov = np.asarray(covariates, dtype=np.float64)
        if cov.ndim == 2:
            cov = cov[None]
        if cov.shape != (I, l + horizon, c_dim):
            raise ValueError(f"covariates must have shape {(I, l + horizon, c_dim)}, got {cov.shape}")
    return hist, cov


def forecast(model: ModelBundle, history, covariates=None, horizon: int = 1,
             n_samples: int = 100, seed: int = 0, start: int | None = None,
             instance_ids=None, chunk: int = 4096, sampler: OdeSamplerConfig | None = None
             ) -> ForecastEnsemble:
    """Sample ``n_samples`` future paths per instance by rolling the learned conditional.

    ``history`` is (l, n) or (I, l, n) in data units.  Covariates, if the
    model uses them, cover history and horizon: (I, l + horizon, c).
    """
    if model.kind != "afm":
        raise ValueError(f"expected an afm model, got {model.kind!r}")
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    cfg = AfmConfig.from_dict(model.config)
    sampler = sampler or cfg.sampler
    enc, vel = _specs(model.arch)
    n, w = model.n, cfg.window
    hist, cov = _as_batch(history, covariates, n, model.c_dim, horizon)
    I, l, _ = hist.shape
    if l < w:
        raise ValueError(f"history length {l} is shorter than the model window {w}")
    z = (hist[:, l - w:] - model.mean) / model.std
    R = I * n_samples
    buf = np.empty((R, w + horizon, n))
    buf[:, :w] = np.repeat(z, n_samples, axis=0)
    cov_r = np.repeat(cov, n_samples, axis=0)
    alive = np.ones(R, dtype=bool)
    rng = np.random.default_rng(seed)

    for k in range(horizon):
        win = buf[:, k:k + w]
        cw = cov_r[:, l - w + k:l + k]
        cn = cov_r[:, l + k] if model.c_dim else None
        y0 = rng.standard_normal((R, n))
        y1 = np.empty_like(y0)
        for a in range(0, R, chunk):
            b = min(R, a + chunk)
            tape = GradTape(model.params, record=False)
            h = nets.encode_context(tape, enc, win[a:b], cw[a:b])
            c_chunk = cn[a:b] if cn is not None else None

            def vfield(y, s, tape=tape, h=h, c_chunk=c_chunk):
                return nets.velocity(tape, vel, y, h, c_chunk, s).value

            with np.errstate(over="ignore", invalid="ignore"):
                y1[a:b] = ode_sample(vfield, y0[a:b], sampler, strict=False)
            tape.release()
        bad = ~np.all(np.isfinite(y1), axis=1) & alive
        if bad.any():
            alive &= ~bad
            warnings.warn(f"{int(bad.sum())} sample paths became non-finite at horizon step "
                          f"{k + 1} and are excluded", RuntimeWarning, stacklevel=2)
        y1[~alive] = 0.0  # keeps dead rows finite for the encoder; masked below
        buf[:, w + k] = y1

    samples = buf[:, w:] * model.std + model.mean
    samples = samples.reshape(I, n_samples, horizon, n)
    valid = alive.reshape(I, n_samples)
    samples[~valid] = np.nan
    ids = np.arange(I) if instance_ids is None else np.asarray(instance_ids)
    return ForecastEnsemble(samples, valid, l if start is None else start, ids,
                            {"model_kind": "afm", "model_id": model.model_id(),
                             "dataset": model.data.get("name"), "seed": seed,
                             "excluded": int((~valid).sum())})


def quantiles(ensemble, levels=(0.05, 0.25, 0.5, 0.75, 0.95)) -> np.ndarray:
    """Empirical quantiles (linear interpolation of order statistics).

    Accepts a :class:`ForecastEnsemble` (result (I, L, f, n)) or a bare
    sample array whose first axis indexes samples (result (L, ...)).
    Excluded (NaN) samples are ignored.
    """
    levels = np.asarray(levels, dtype=np.float64)
    if np.any(levels <= 0) or np.any(levels >= 1) or np.any(np.diff(levels) < 0):
        raise ValueError("levels must be sorted and lie in (0, 1)")
    if isinstance(ensemble, ForecastEnsemble):
        if ensemble.valid.sum(axis=1).min() < 2:
            raise ValueError("need at least 2 valid samples per instance for quantiles")
        q = np.nanquantile(ensemble.samples, levels, axis=1)  # (L, I, f, n)
        return np.moveaxis(q, 0, 1)
    arr = np.asarray(ensemble, dtype=np.float64)
    if arr.shape[0] < 2:
        raise ValueError("need at least 2 samples for quantiles")
    return np.nanquantile(arr, levels, axis=0)


# ----------------------------------------------------------------------------
# CSV output
# ----------------------------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x))


def write_forecast_csv(path, ensembles: list[ForecastEnsemble], append: bool = False) -> None:
    """Rows (instance_id, sample_id, t, dim); t is the trajectory step index, dim is 1-based."""
    path = Path(path)
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        if not append:
            wr.writerow(["instance_id", "sample_id", "t", "dim", "value"])
        for ens in ensembles:
            I, S, f, n = ens.samples.shape
            for i in range(I):
                iid = int(ens.instance_ids[i])
                for s in range(S):
                    if not ens.valid[i, s]:
                        continue
                    block = ens.samples[i, s]
                    for k in range(f):
                        t = ens.start + k
                        for d in range(n):
                            wr.writerow([iid, s, t, d + 1, _fmt(block[k, d])])


def write_quantiles_csv(path, ensembles: list[ForecastEnsemble],
                        levels=(0.05, 0.25, 0.5, 0.75, 0.95)) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["instance_id", "t", "dim", "level", "value"])
        for ens in ensembles:
            q = quantiles(ens, levels)  # (I, L, f, n)
            I, L, f, n = q.shape
            for i in range(I):
                iid = int(ens.instance_ids[i])
                for k in range(f):
                    for d in range(n):
                        for j in range(L):
                            wr.writerow([iid, ens.start + k, d + 1, _fmt(levels[j]),
                                         _fmt(q[i, j, k, d])])


def read_forecast_csv(path) -> dict:
    """Return {instance_id: (t_values, samples (S, len(t), n))}."""
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    out = {}
    if raw.size == 0:
        return out
    inst = raw[:, 0].astype(np.int64)
    for iid in np.unique(inst):
        rows = raw[inst == iid]
        sids = np.unique(rows[:, 1].astype(np.int64))
        ts = np.unique(rows[:, 2].astype(np.int64))
        dims = np.unique(rows[:, 3].astype(np.int64))
        arr = np.full((sids.size, ts.size, dims.size), np.nan)
        arr[np.searchsorted(sids, rows[:, 1].astype(np.int64)),
            np.searchsorted(ts, rows[:, 2].astype(np.int64)),
            np.searchsorted(dims, rows[:, 3].astype(np.int64))] = rows[:, 4]
        out[int(iid)] = (ts, arr)
    return out


def write_train_log(path, records: list[TrainRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["step", "loss", "wall_time"])
        for r in records:
            wr.writerow([r.step, _fmt(r.loss), f"{r.wall_time:.3f}"])
