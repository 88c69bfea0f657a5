"""Non-autoregressive baseline: one flow over the whole future window.

The future window Y (f x n) is a single flow state.  The base distribution
is N(0, Sigma) with Sigma block-diagonal: one Brownian-motion covariance
block ``delta * min(i, j)`` (i, j = 1..f) per observed dimension.  The
conditional path is a Brownian bridge between the endpoints,
N((1-s) Y0 + s Y1, sigma^2 s (1-s) Sigma).
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import nets
from .afm import AfmConfig, ForecastEnsemble, _as_batch, batch_rng, optimize, TrainRecord
from .bundle import ModelBundle
from .dynsys import ForecastDataset
from .flowpath import OdeSamplerConfig, ode_sample
from .numcore import GradTape, Params, Var, init_weight


class BrownianCovariance:
    """Covariance ``delta * min(i, j)`` over f steps, shared by every dimension.

    With ``delta=None`` the scale is chosen so the diagonal averages 1.
    """

    def __init__(self, f: int, delta: float | None = None):
        if f < 1:
            raise ValueError("horizon must be at least 1")
        self.f = f
        self.delta = 2.0 / (f + 1) if delta is None else float(delta)
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        k = np.arange(1, f + 1)
        self.K = self.delta * np.minimum.outer(k, k).astype(np.float64)
        try:
            self.L = np.linalg.cholesky(self.K)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"Brownian covariance is not positive definite: {exc}") from None

    # all methods act along axis -2 of arrays shaped (..., f, n)
    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim < 2 or x.shape[-2] != self.f:
            raise ValueError(f"expected (..., {self.f}, n), got {x.shape}")
        return x

    def apply(self, x):
        return np.einsum("ij,...jn->...in", self.K, self._check(x))

    def color(self, xi):
        """L xi: turns white noise into a draw from N(0, Sigma)."""
        return np.einsum("ij,...jn->...in", self.L, self._check(xi))

    def solve(self, x):
        x = self._check(x)
        flat = np.moveaxis(x, -2, 0).reshape(self.f, -1)
        out = cho_solve((self.L, True), flat)
        return np.moveaxis(out.reshape((self.f,) + x.shape[:-2] + x.shape[-1:]), 0, -2)

    def whiten(self, x):
        """L^{-1} x, so that ||L^{-1} x||^2 = x^T Sigma^{-1} x per dimension."""
        x = self._check(x)
        flat = np.moveaxis(x, -2, 0).reshape(self.f, -1)
        out = solve_triangular(self.L, flat, lower=True)
        return np.moveaxis(out.reshape((self.f,) + x.shape[:-2] + x.shape[-1:]), 0, -2)

    def sample(self, rng, shape_prefix, n):
        return self.color(rng.standard_normal(tuple(shape_prefix) + (self.f, n)))


@dataclass(frozen=True)
class BaselinePathConfig:
    sigma_bridge: float = 0.1
    weighted_loss: bool = True  # Sigma^{-1}-weighted regression norm

    def __post_init__(self):
        if not self.sigma_bridge >= 0:
            raise ValueError("sigma_bridge must be non-negative")


def _s_col(s, ndim):
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < 0) or np.any(s > 1):
        raise ValueError("flow step s must lie in [0, 1]")
    return s.reshape(s.shape + (1,) * (ndim - s.ndim)) if s.ndim else s


def bridge_sample(Y0, Y1, s, cfg: BaselinePathConfig, cov: BrownianCovariance, rng=None):
    """Draw Y^s ~ N((1-s) Y0 + s Y1, sigma^2 s (1-s) Sigma).  Y0, Y1: (..., f, n)."""
    Y0 = np.asarray(Y0, dtype=np.float64)
    Y1 = np.asarray(Y1, dtype=np.float64)
    s_ = _s_col(s, Y0.ndim)
    mean = (1.0 - s_) * Y0 + s_ * Y1
    scale = cfg.sigma_bridge * np.sqrt(s_ * (1.0 - s_))
    if cfg.sigma_bridge == 0.0:
        return mean
    if rng is None:
        raise ValueError("a random generator is required when sigma_bridge > 0")
    return mean + scale * cov.color(rng.standard_normal(mean.shape))


def fm_velocity_target(Y, Y0, Y1, s, cfg: BaselinePathConfig, cov: BrownianCovariance):
    """Conditional bridge velocity; the correction vanishes for sigma=0, s=1/2 or Y on the mean."""
    Y = np.asarray(Y, dtype=np.float64)
    Y0 = np.asarray(Y0, dtype=np.float64)
    Y1 = np.asarray(Y1, dtype=np.float64)
    s_ = _s_col(s, Y0.ndim)
    straight = Y1 - Y0
    if cfg.sigma_bridge == 0.0:
        return straight
    m_s = (1.0 - s_) * Y0 + s_ * Y1
    coef = cfg.sigma_bridge ** 2 * (1.0 - 2.0 * s_) / 2.0
    return straight + coef * cov.solve(Y - m_s)


# ----------------------------------------------------------------------------
# model
# ----------------------------------------------------------------------------


@dataclass
class FmConfig(AfmConfig):
    """Baseline settings; ``window`` is the length of history fed to the encoder."""

    vel_hidden: int = 128
    vel_layers: int = 4
    sigma_bridge: float = 0.1
    weighted_loss: bool = True
    brownian_delta: float | None = None  # None: diag(Sigma) averages 1

    def __post_init__(self):
        super().__post_init__()
        self.path

    @property
    def path(self) -> BaselinePathConfig:
        return BaselinePathConfig(self.sigma_bridge, self.weighted_loss)

    @classmethod
    def from_dict(cls, d: dict) -> "FmConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def init_model(n: int, c_dim: int, cfg: FmConfig, rng) -> tuple[Params, dict]:
    enc = nets.EncoderSpec(n + c_dim, cfg.enc_hidden, cfg.enc_layers, cfg.h_dim)
    params = Params()
    nets.add_encoder_params(params, rng, enc)
    d_in = n + cfg.h_dim + c_dim + cfg.emb_dim
    nets.add_bilstm_params(params, rng, "vel", d_in, cfg.vel_hidden, cfg.vel_layers)
    params.add("vel.out.W", np.zeros((2 * cfg.vel_hidden, n)))
    params.add("vel.out.b", np.zeros((1, n)))
    arch = {"encoder": asdict(enc),
            "velocity": {"n": n, "h_dim": cfg.h_dim, "c_dim": c_dim, "emb_dim": cfg.emb_dim,
                         "hidden": cfg.vel_hidden, "layers": cfg.vel_layers}}
    return params, arch


def trajectory_velocity(tape: GradTape, arch: dict, Ys: np.ndarray, h: Var,
                        cov_future: np.ndarray | None, s) -> Var:
    """Velocity over whole windows.  Ys: (B, f, n).  Returns (f*B, n) stacked step-major."""
    va = arch["velocity"]
    B, f, n = Ys.shape
    s = np.broadcast_to(np.asarray(s, dtype=np.float64).reshape(-1), (B,))
    emb = nets.fourier_embed(s, va["emb_dim"])
    blocks = []
    for k in range(f):
        parts = [tape.const(Ys[:, k]), h]
        if va["c_dim"]:
            parts.append(tape.const(cov_future[:, k]))
        parts.append(tape.const(emb))
        blocks.append(tape.concat(parts, axis=1))
    stacked = tape.concat(blocks, axis=0)
    fw, bw = nets.bilstm(tape, "vel", stacked, f, B, va["hidden"], va["layers"])
    top = tape.concat([tape.concat([a, b], axis=1) for a, b in zip(fw, bw)], axis=0)
    return top @ tape.param("vel.out.W") + tape.param("vel.out.b")


def _whiten_stacked(tape: GradTape, r: Var, f: int, B: int, delta: float) -> Var:
    # Brownian Cholesky factor is sqrt(delta) * lower-triangular ones, so its
    # inverse takes successive differences along the step axis
    if f == 1:
        return r * (1.0 / np.sqrt(delta))
    first = tape.slice(r, 0, B, axis=0)
    diffs = tape.slice(r, B, f * B, axis=0) - tape.slice(r, 0, (f - 1) * B, axis=0)
    return tape.concat([first, diffs], axis=0) * (1.0 / np.sqrt(delta))


def fm_batch(data, cov, split, cfg: FmConfig, bcov: BrownianCovariance, rng):
    N, T, n = data.shape
    obs, f, w, B = split[0], bcov.f, cfg.window, cfg.batch_size
    idx = rng.integers(0, N, size=B)
    hist = data[idx, obs - w:obs]
    cov_hist = cov[idx, obs - w:obs]
    cov_future = cov[idx, obs:obs + f]
    Y1 = data[idx, obs:obs + f]
    Y0 = bcov.sample(rng, (B,), n)
    s = rng.uniform(0.0, 1.0, size=B)
    Ys = bridge_sample(Y0, Y1, s, cfg.path, bcov, rng)
    target = fm_velocity_target(Ys, Y0, Y1, s, cfg.path, bcov)
    return hist, cov_hist, cov_future, Ys, s, target


def fm_loss(tape: GradTape, arch: dict, cfg: FmConfig, bcov: BrownianCovariance, batch):
    hist, cov_hist, cov_future, Ys, s, target = batch
    enc = nets.EncoderSpec(**arch["encoder"])
    B, f, n = Ys.shape
    h = nets.encode_context(tape, enc, hist, cov_hist)
    v = trajectory_velocity(tape, arch, Ys, h, cov_future, s)
    r = v - tape.const(nets.stack_steps(target))
    if cfg.weighted_loss:
        r = _whiten_stacked(tape, r, f, B, bcov.delta)
    return tape.mean_square(r) * float(f * n)


def fm_train(dataset: ForecastDataset, cfg: FmConfig,
             progress=None) -> tuple[ModelBundle, list[TrainRecord]]:
    obs, f = dataset.observe, dataset.predict
    if cfg.window > obs:
        raise ValueError(f"window {cfg.window} exceeds the observation length {obs}")
    data = dataset.normalize(dataset.train)
    cov = dataset.train_cov
    bcov = BrownianCovariance(f, cfg.brownian_delta)
    params, arch = init_model(dataset.n, dataset.c_dim, cfg, np.random.default_rng(cfg.seed))
    arch["horizon"] = f
    arch["brownian_delta"] = bcov.delta

    def loss_fn(tape, step):
        batch = fm_batch(data, cov, dataset.split, cfg, bcov, batch_rng(cfg.seed, step))
        return fm_loss(tape, arch, cfg, bcov, batch)

    records = optimize(params, loss_fn, cfg, progress)
    bundle = ModelBundle("fm", params, arch, asdict(cfg),
                         {"mean": dataset.mean.tolist(), "std": dataset.std.tolist(),
                          "id": dataset.norm_id()},
                         {"name": dataset.name, "n": dataset.n, "c_dim": dataset.c_dim,
                          "split": list(dataset.split)})
    return bundle, records


def fm_forecast(model: ModelBundle, history, covariates=None, horizon: int | None = None,
                n_samples: int = 100, seed: int = 0, start: int | None = None,
                instance_ids=None, chunk: int = 512,
                sampler: OdeSamplerConfig | None = None) -> ForecastEnsemble:
    """Jointly sample whole future windows; one ODE solve in f*n dimensions per path.

    The output length is always the trained horizon; ``horizon`` may only
    restate it.
    """
    if model.kind != "fm":
        raise ValueError(f"expected an fm model, got {model.kind!r}")
    f = int(model.arch["horizon"])
    if horizon is not None and horizon != f:
        raise ValueError(f"the baseline produces exactly its trained horizon ({f}), not {horizon}")
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    cfg = FmConfig.from_dict(model.config)
    sampler = sampler or cfg.sampler
    enc = nets.EncoderSpec(**model.arch["encoder"])
    bcov = BrownianCovariance(f, model.arch["brownian_delta"])
    n, w = model.n, cfg.window
    hist, cov = _as_batch(history, covariates, n, model.c_dim, f)
    I, l, _ = hist.shape
    if l < w:
        raise ValueError(f"history length {l} is shorter than the model window {w}")
    z = np.repeat((hist[:, l - w:] - model.mean) / model.std, n_samples, axis=0)
    cov_r = np.repeat(cov, n_samples, axis=0)
    R = I * n_samples
    rng = np.random.default_rng(seed)
    Y0 = bcov.sample(rng, (R,), n)
    out = np.empty_like(Y0)
    for a in range(0, R, chunk):
        b = min(R, a + chunk)
        tape = GradTape(model.params, record=False)
        h = nets.encode_context(tape, enc, z[a:b], cov_r[a:b, l - w:l])
        cf = cov_r[a:b, l:l + f]
        B = b - a

        def vfield(Yflat, s, tape=tape, h=h, cf=cf, B=B):
            Y = Yflat.reshape(B, f, n)
            v = trajectory_velocity(tape, model.arch, Y, h, cf, s).value
            return nets.unstack_steps(v, B).reshape(B, f * n)

        with np.errstate(over="ignore", invalid="ignore"):
            res = ode_sample(vfield, Y0[a:b].reshape(B, f * n), sampler, strict=False)
        tape.release()
        out[a:b] = res.reshape(B, f, n)
    valid = np.all(np.isfinite(out), axis=(1, 2))
    if not valid.all():
        warnings.warn(f"{int((~valid).sum())} sample paths are non-finite and excluded",
                      RuntimeWarning, stacklevel=2)
    samples = (out * model.std + model.mean).reshape(I, n_samples, f, n)
    valid = valid.reshape(I, n_samples)
    samples[~valid] = np.nan
    ids = np.arange(I) if instance_ids is None else np.asarray(instance_ids)
    return ForecastEnsemble(samples, valid, l if start is None else start, ids,
                            {"model_kind": "fm", "model_id": model.model_id(),
                             "dataset": model.data.get("name"), "seed": seed,
                             "excluded": int((~valid).sum())})
