"""Context encoder, velocity network and flow-step embedding.

Networks are plain parameter sets plus functions that build their forward
pass on a :class:`~afmflow.numcore.GradTape`.  Batched inputs are 2-D:
one row per example.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .numcore import GradTape, Params, ShapeError, Var, init_weight


def fourier_frequencies(out_dim: int) -> np.ndarray:
    if out_dim <= 0 or out_dim % 2:
        raise ValueError(f"out_dim must be a positive even number, got {out_dim}")
    return 2.0 * np.pi * 2.0 ** np.arange(out_dim // 2)


def fourier_embed(s, out_dim: int = 16) -> np.ndarray:
    """Embed flow steps ``s`` in [0, 1] as interleaved (sin, cos) pairs.

    A scalar gives a vector of length ``out_dim``; an array of shape (B,) or
    (B, 1) gives a (B, out_dim) matrix.
    """
    arr = np.asarray(s, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("flow step s must lie in [0, 1]")
    freqs = fourier_frequencies(out_dim)
    ang = arr.reshape(-1, 1) * freqs
    out = np.empty((ang.shape[0], out_dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out[0] if arr.ndim == 0 else out


# ----------------------------------------------------------------------------
# LSTM
# ----------------------------------------------------------------------------


def add_lstm_params(params: Params, rng, prefix: str, n_in: int, hidden: int) -> None:
    # gate order in the packed matrices: input, forget, output, cell
    params.add(f"{prefix}.Wx", init_weight(rng, n_in, 4 * hidden))
    params.add(f"{prefix}.Wh", init_weight(rng, hidden, 4 * hidden))
    params.add(f"{prefix}.b", np.zeros((1, 4 * hidden)))


def lstm_pass(tape: GradTape, prefix: str, stacked: Var, steps: int, batch: int,
              hidden: int, reverse: bool = False) -> list[Var]:
    """Run one LSTM direction over ``steps`` time steps.

    ``stacked`` holds the inputs of all steps stacked row-wise, step-major:
    rows ``[t*batch, (t+1)*batch)`` belong to step ``t``.  Returns hidden
    states indexed by time step (not by processing order).
    """
    Wx, Wh, b = tape.param(f"{prefix}.Wx"), tape.param(f"{prefix}.Wh"), tape.param(f"{prefix}.b")
    proj = stacked @ Wx + b
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    out: list[Var | None] = [None] * steps
    h = c = None
    for t in order:
        gates = proj if steps == 1 else tape.slice(proj, t * batch, (t + 1) * batch, axis=0)
        if h is None:
            c = tape.const(np.zeros((batch, hidden)))
        else:
            gates = gates + h @ Wh
        hc = tape.lstm_cell(gates, c)
        h = tape.slice(hc, 0, hidden)
        c = tape.slice(hc, hidden, 2 * hidden)
        out[t] = h
    return out


def add_bilstm_params(params: Params, rng, prefix: str, n_in: int, hidden: int, layers: int):
    for layer in range(layers):
        d_in = n_in if layer == 0 else 2 * hidden
        add_lstm_params(params, rng, f"{prefix}.l{layer}.fw", d_in, hidden)
        add_lstm_params(params, rng, f"{prefix}.l{layer}.bw", d_in, hidden)


def bilstm(tape: GradTape, prefix: str, x: np.ndarray | Var, steps: int, batch: int,
           hidden: int, layers: int) -> tuple[list[Var], list[Var]]:
    """Stacked bidirectional LSTM.  Returns last-layer (forward, backward) states."""
    stacked = x if isinstance(x, Var) else tape.const(x)
    fw = bw = None
    for layer in range(layers):
        if layer > 0:
            stacked = tape.concat([tape.concat([f, b_], axis=1) for f, b_ in zip(fw, bw)], axis=0)
        fw = lstm_pass(tape, f"{prefix}.l{layer}.fw", stacked, steps, batch, hidden)
        bw = lstm_pass(tape, f"{prefix}.l{layer}.bw", stacked, steps, batch, hidden, reverse=True)
    return fw, bw


def stack_steps(x: np.ndarray) -> np.ndarray:
    """(B, T, d) -> (T*B, d), step-major."""
    B, T, d = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(T * B, d)


def unstack_steps(x: np.ndarray, batch: int) -> np.ndarray:
    """(T*B, d) -> (B, T, d)."""
    TB, d = x.shape
    return x.reshape(TB // batch, batch, d).transpose(1, 0, 2)


# ----------------------------------------------------------------------------
# context encoder
# ----------------------------------------------------------------------------


@dataclass
class EncoderSpec:
    n_in: int
    hidden: int = 64
    layers: int = 2
    h_dim: int = 64


def add_encoder_params(params: Params, rng, spec: EncoderSpec, prefix: str = "enc") -> None:
    add_bilstm_params(params, rng, prefix, spec.n_in, spec.hidden, spec.layers)
    params.add(f"{prefix}.proj.W", init_weight(rng, 2 * spec.hidden, spec.h_dim))
    params.add(f"{prefix}.proj.b", np.zeros((1, spec.h_dim)))


def encode_context(tape: GradTape, spec: EncoderSpec, window: np.ndarray,
                   cov: np.ndarray | None = None, prefix: str = "enc") -> Var:
    """Encode a batch of windows (B, w, n) [+ covariates (B, w, c)] to (B, h_dim).

    The final forward state and the final backward state (the one that has
    read the window back to its first step) of the last layer are
    concatenated and projected linearly.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 2:
        window = window[None]
    if cov is not None and np.size(cov):
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 2:
            cov = cov[None]
        if cov.shape[:2] != window.shape[:2]:
            raise ShapeError(f"covariates {cov.shape} do not align with window {window.shape}")
        window = np.concatenate([window, cov], axis=2)
    B, w, d = window.shape
    if w == 0:
        raise ValueError("context window must contain at least one step")
    if d != spec.n_in:
        raise ShapeError(f"encoder expects {spec.n_in} input features, got {d}")
    if not np.all(np.isfinite(window)):
        raise ValueError("context window contains non-finite values")
    fw, bw = bilstm(tape, prefix, stack_steps(window), w, B, spec.hidden, spec.layers)
    last = tape.concat([fw[-1], bw[0]], axis=1)
    return last @ tape.param(f"{prefix}.proj.W") + tape.param(f"{prefix}.proj.b")


# ----------------------------------------------------------------------------
# velocity MLP
# ----------------------------------------------------------------------------


@dataclass
class VelocitySpec:
    n: int
    h_dim: int = 64
    c_dim: int = 0
    emb_dim: int = 16
    hidden: int = 64
    depth: int = 3

    @property
    def n_in(self) -> int:
        return self.n + self.h_dim + self.c_dim + self.emb_dim


def add_velocity_params(params: Params, rng, spec: VelocitySpec, prefix: str = "vel",
                        zero_last: bool = True) -> None:
    d = spec.n_in
    for k in range(spec.depth):
        params.add(f"{prefix}.W{k}", init_weight(rng, d, spec.hidden))
        params.add(f"{prefix}.b{k}", np.zeros((1, spec.hidden)))
        d = spec.hidden
    last = np.zeros((d, spec.n)) if zero_last else init_weight(rng, d, spec.n)
    params.add(f"{prefix}.Wout", last)
    params.add(f"{prefix}.bout", np.zeros((1, spec.n)))


def velocity(tape: GradTape, spec: VelocitySpec, y_s, h: Var, c, s,
             prefix: str = "vel") -> Var:
    """Velocity for a batch: y_s (B, n), h (B, h_dim), c (B, c_dim) or None, s (B,)."""
    y = y_s if isinstance(y_s, Var) else tape.const(y_s)
    if y.shape[1] != spec.n:
        raise ShapeError(f"velocity net expects state dimension {spec.n}, got {y.shape[1]}")
    if h.shape != (y.shape[0], spec.h_dim):
        raise ShapeError(f"context has shape {h.shape}, expected {(y.shape[0], spec.h_dim)}")
    parts = [y, h]
    if spec.c_dim:
        if c is None or np.shape(c) != (y.shape[0], spec.c_dim):
            raise ShapeError(f"covariates must have shape {(y.shape[0], spec.c_dim)}")
        parts.append(tape.const(c))
    s = np.broadcast_to(np.asarray(s, dtype=np.float64).reshape(-1), (y.shape[0],))
    parts.append(tape.const(fourier_embed(s, spec.emb_dim)))
    z = tape.concat(parts, axis=1)
    for k in range(spec.depth):
        z = tape.tanh(z @ tape.param(f"{prefix}.W{k}") + tape.param(f"{prefix}.b{k}"))
    return z @ tape.param(f"{prefix}.Wout") + tape.param(f"{prefix}.bout")


def spec_dict(spec) -> dict:
    return asdict(spec)
