"""Small reverse-mode gradient engine over 2-D float64 matrices, plus Adam.

The engine is define-by-run: every primitive applied to a :class:`Var`
appends a node to its :class:`GradTape`.  A recorded tape can also be
replayed on fresh input values with :func:`forward`, and :func:`backward`
returns the gradient of a scalar output with respect to each parameter.

Only the primitives the forecasting networks need are implemented; there is
no general broadcasting.  The single exception is ``add`` / ``sub`` where the
right operand may be a ``(1, k)`` row that is added to every row of the left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shapes."""


class TapeError(RuntimeError):
    pass


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected a matrix, got array of shape {a.shape}")
    return a


# ----------------------------------------------------------------------------
# primitive table: name -> (forward(values, attrs), backward(g, values, out, attrs))
# ----------------------------------------------------------------------------


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _f_add(vals, attrs):
    a, b = vals
    if a.shape != b.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible")
    return a + b


def _reduce_like(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


def _b_add(g, vals, out, attrs):
    return g, _reduce_like(g, vals[1].shape)


def _f_sub(vals, attrs):
    a, b = vals
    if a.shape != b.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} are incompatible")
    return a - b


def _b_sub(g, vals, out, attrs):
    return g, -_reduce_like(g, vals[1].shape)


def _f_mul(vals, attrs):
    a, b = vals
    _check_same("mul", a, b)
    return a * b


def _b_mul(g, vals, out, attrs):
    a, b = vals
    return g * b, g * a


def _f_scale(vals, attrs):
    return vals[0] * attrs["c"]


def _b_scale(g, vals, out, attrs):
    return (g * attrs["c"],)


def _f_matmul(vals, attrs):
    a, b = vals
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} @ {b.shape} do not agree")
    return a @ b


def _b_matmul(g, vals, out, attrs):
    a, b = vals
    return g @ b.T, a.T @ g


def _f_tanh(vals, attrs):
    return np.tanh(vals[0])


def _b_tanh(g, vals, out, attrs):
    return (g * (1.0 - out * out),)


def _sigmoid(x):
    # split form avoids overflow in exp for large |x|
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _f_sigmoid(vals, attrs):
    return _sigmoid(vals[0])


def _b_sigmoid(g, vals, out, attrs):
    return (g * out * (1.0 - out),)


def _f_silu(vals, attrs):
    x = vals[0]
    return x * _sigmoid(x)


def _b_silu(g, vals, out, attrs):
    x = vals[0]
    sg = _sigmoid(x)
    return (g * (sg + x * sg * (1.0 - sg)),)


def _f_concat(vals, attrs):
    axis = attrs["axis"]
    other = 1 - axis
    sizes = {v.shape[other] for v in vals}
    if len(sizes) != 1:
        raise ShapeError(f"concat(axis={axis}): operands disagree on axis {other}: "
                         f"{[v.shape for v in vals]}")
    return np.concatenate(vals, axis=axis)


def _b_concat(g, vals, out, attrs):
    axis = attrs["axis"]
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _f_slice(vals, attrs):
    a = vals[0]
    axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    return a[start:stop] if axis == 0 else a[:, start:stop]


def _b_slice(g, vals, out, attrs):
    full = np.zeros_like(vals[0])
    if attrs["axis"] == 0:
        full[attrs["start"]:attrs["stop"]] = g
    else:
        full[:, attrs["start"]:attrs["stop"]] = g
    return (full,)


def _f_mean_square(vals, attrs):
    a = vals[0]
    return np.array([[np.mean(a * a)]], dtype=DTYPE)


def _b_mean_square(g, vals, out, attrs):
    a = vals[0]
    return (g[0, 0] * 2.0 * a / a.size,)


def _f_lstm_cell(vals, attrs):
    # gates packed as [input, forget, output | cell]; output is [h | c]
    gates, c_prev = vals
    H = c_prev.shape[1]
    if gates.shape != (c_prev.shape[0], 4 * H):
        raise ShapeError(f"lstm_cell: gates {gates.shape} do not match state {c_prev.shape}")
    ifo = _sigmoid(gates[:, :3 * H])
    g = np.tanh(gates[:, 3 * H:])
    c = ifo[:, H:2 * H] * c_prev + ifo[:, :H] * g
    tc = np.tanh(c)
    out = np.empty((c.shape[0], 2 * H))
    out[:, :H] = ifo[:, 2 * H:] * tc
    out[:, H:] = c
    return out, (ifo, g, tc)


def _b_lstm_cell(g_out, vals, out, attrs, saved):
    gates, c_prev = vals
    ifo, g, tc = saved
    H = c_prev.shape[1]
    i, f, o = ifo[:, :H], ifo[:, H:2 * H], ifo[:, 2 * H:]
    gh, gc = g_out[:, :H], g_out[:, H:]
    dc = gc + gh * o * (1.0 - tc * tc)
    d = np.empty_like(gates)
    d[:, :H] = dc * g
    d[:, H:2 * H] = dc * c_prev
    d[:, 2 * H:3 * H] = gh * tc
    d[:, :3 * H] *= ifo * (1.0 - ifo)
    d[:, 3 * H:] = dc * i * (1.0 - g * g)
    return d, dc * f


PRIMITIVES = {
    "add": (_f_add, _b_add),
    "sub": (_f_sub, _b_sub),
    "mul": (_f_mul, _b_mul),
    "scale": (_f_scale, _b_scale),
    "matmul": (_f_matmul, _b_matmul),
    "tanh": (_f_tanh, _b_tanh),
    "sigmoid": (_f_sigmoid, _b_sigmoid),
    "silu": (_f_silu, _b_silu),
    "concat": (_f_concat, _b_concat),
    "slice": (_f_slice, _b_slice),
    "mean_square": (_f_mean_square, _b_mean_square),
    "lstm_cell": (_f_lstm_cell, _b_lstm_cell),
}

# primitives whose forward returns (value, saved) and whose backward takes saved
_SAVES = {"lstm_cell"}


# ----------------------------------------------------------------------------
# parameters, variables, tape
# ----------------------------------------------------------------------------


class Params:
    """Ordered, named collection of parameter matrices.

    Order is insertion order and is the order used for persistence.
    """

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._arrays:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(_as_matrix(value), dtype=DTYPE, copy=True)
        self._arrays[name] = arr
        return arr

    def __getitem__(self, name):
        return self._arrays[name]

    def __contains__(self, name):
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def names(self) -> list[str]:
        return list(self._arrays)

    def size(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0, dtype=DTYPE)
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def load_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=DTYPE)
        if flat.size != self.size():
            raise ShapeError(f"expected {self.size()} parameter values, got {flat.size}")
        pos = 0
        for a in self._arrays.values():
            a[...] = flat[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    def shapes(self) -> dict[str, list[int]]:
        return {k: list(v.shape) for k, v in self._arrays.items()}

    def copy(self) -> "Params":
        out = Params()
        for k, v in self._arrays.items():
            out.add(k, v)
        return out


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Var:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "GradTape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.tape.apply("add", self, other)

    def __sub__(self, other):
        return self.tape.apply("sub", self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.apply("scale", self, c=float(other))
        return self.tape.apply("mul", self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, other)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"


@dataclass
class _Node:
    op: str  # "input", "param", "const" or a primitive name
    parents: tuple[int, ...]
    attrs: dict
    name: str | None = None


class GradTape:
    """Ordered record of primitive applications.

    With ``record=False`` nothing is kept for the backward pass; values are
    still computed, which is what sampling code wants.
    """

    def __init__(self, params: Params | None = None, record: bool = True):
        self.params = params
        self.record = record
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray] = []
        self.saved: dict[int, tuple] = {}
        self._param_vars: dict[str, Var] = {}
        self.inputs: list[int] = []
        self.output: int | None = None
        self.adjoints: list[np.ndarray | None] | None = None

    def _push(self, node: _Node, value: np.ndarray) -> Var:
        if not self.record:
            return Var(self, -1, value)
        self.nodes.append(node)
        self.values.append(value)
        return Var(self, len(self.nodes) - 1, value)

    def input(self, value, name: str | None = None) -> Var:
        v = self._push(_Node("input", (), {}, name), _as_matrix(value))
        if self.record:
            self.inputs.append(v.index)
        return v

    def const(self, value) -> Var:
        return self._push(_Node("const", (), {}), _as_matrix(value))

    def param(self, name: str) -> Var:
        if self.params is None:
            raise TapeError("tape has no parameter set")
        v = self._param_vars.get(name)
        if v is None:
            v = self._push(_Node("param", (), {}, name), self.params[name])
            self._param_vars[name] = v
        return v

    def apply(self, op: str, *args, **attrs) -> Var:
        fwd, _ = PRIMITIVES[op]
        vals = []
        parents = []
        for a in args:
            if not isinstance(a, Var):
                a = self.const(a)
            elif a.tape is not self:
                raise TapeError("operands belong to different tapes")
            vals.append(a.value)
            parents.append(a.index)
        out = fwd(vals, attrs)
        if op in _SAVES:
            out, saved = out
            v = self._push(_Node(op, tuple(parents), attrs), out)
            if self.record:
                self.saved[v.index] = saved
            return v
        return self._push(_Node(op, tuple(parents), attrs), out)

    # convenience wrappers -------------------------------------------------
    def tanh(self, x):
        return self.apply("tanh", x)

    def sigmoid(self, x):
        return self.apply("sigmoid", x)

    def silu(self, x):
        return self.apply("silu", x)

    def concat(self, xs, axis: int = 1):
        xs = list(xs)
        if len(xs) == 1:
            return xs[0]
        return self.apply("concat", *xs, axis=axis)

    def slice(self, x, start: int, stop: int, axis: int = 1):
        return self.apply("slice", x, axis=axis, start=start, stop=stop)

    def mean_square(self, x):
        return self.apply("mean_square", x)

    def lstm_cell(self, gates, c_prev):
        return self.apply("lstm_cell", gates, c_prev)

    def __len__(self):
        return len(self.nodes)

    def release(self) -> None:
        """Drop recorded values; Vars point back at their tape, so this frees memory promptly."""
        self.nodes.clear()
        self.values.clear()
        self.saved.clear()
        self._param_vars.clear()
        self.inputs.clear()
        self.adjoints = None
        self.output = None


def forward(tape: GradTape, inputs) -> np.ndarray:
    """Replay a recorded tape on new input values.

    ``inputs`` are matched positionally to the tape's ``input`` leaves.
    Parameters are re-read from the tape's parameter set.  The new values
    replace the recorded ones so that :func:`backward` sees them.
    """
    if not tape.record or not tape.nodes:
        raise TapeError("nothing recorded on this tape")
    inputs = [_as_matrix(x) for x in inputs]
    if len(inputs) != len(tape.inputs):
        raise ShapeError(f"tape takes {len(tape.inputs)} inputs, got {len(inputs)}")
    feed = dict(zip(tape.inputs, inputs))
    values = tape.values
    for i, node in enumerate(tape.nodes):
        if node.op == "input":
            values[i] = feed[i]
        elif node.op == "param":
            values[i] = tape.params[node.name]
        elif node.op == "const":
            continue
        else:
            fwd, _ = PRIMITIVES[node.op]
            try:
                out = fwd([values[p] for p in node.parents], node.attrs)
                if node.op in _SAVES:
                    out, tape.saved[i] = out
                values[i] = out
            except ShapeError as exc:
                raise ShapeError(f"node {i} ({node.op}): {exc}") from None
    tape.adjoints = None
    out = tape.output if tape.output is not None else len(tape.nodes) - 1
    return values[out]


def backward(tape: GradTape, output: Var | None = None) -> dict[str, np.ndarray]:
    """Gradients of the scalar ``output`` with respect to every parameter.

    Parameters that were never touched get a zero gradient; nodes off the
    path to the output keep a zero adjoint.
    """
    if not tape.record or not tape.nodes:
        raise TapeError("backward called before any forward computation")
    out_idx = output.index if output is not None else (
        tape.output if tape.output is not None else len(tape.nodes) - 1)
    tape.output = out_idx
    if tape.values[out_idx].shape != (1, 1):
        raise TapeError(f"backward needs a scalar output, got shape {tape.values[out_idx].shape}")
    adj: list[np.ndarray | None] = [None] * len(tape.nodes)
    adj[out_idx] = np.ones((1, 1), dtype=DTYPE)
    owned = set()  # adjoints we allocated ourselves and may update in place
    values = tape.values
    for i in range(out_idx, -1, -1):
        g = adj[i]
        if g is None:
            continue
        node = tape.nodes[i]
        if not node.parents:
            continue
        if node.op == "slice":
            # scatter into the parent's adjoint; a dense zero-padded gradient
            # per slice would cost O(steps^2) for sliced recurrent inputs
            p = node.parents[0]
            if p not in owned:
                base = adj[p]
                adj[p] = np.zeros_like(values[p]) if base is None else base.copy()
                owned.add(p)
            a = node.attrs
            if a["axis"] == 0:
                adj[p][a["start"]:a["stop"]] += g
            else:
                adj[p][:, a["start"]:a["stop"]] += g
            continue
        _, bwd = PRIMITIVES[node.op]
        pv = [values[p] for p in node.parents]
        if node.op in _SAVES:
            grads = bwd(g, pv, values[i], node.attrs, tape.saved[i])
        else:
            grads = bwd(g, pv, values[i], node.attrs)
        for p, gp in zip(node.parents, grads):
            if adj[p] is None:
                adj[p] = gp
            elif p in owned:
                adj[p] += gp
            else:
                adj[p] = adj[p] + gp
                owned.add(p)
    tape.adjoints = adj
    result = {}
    if tape.params is not None:
        for name, arr in tape.params.items():
            v = tape._param_vars.get(name)
            g = adj[v.index] if v is not None else None
            result[name] = np.zeros_like(arr) if g is None else g
    return result


def adjoint(tape: GradTape, v: Var) -> np.ndarray:
    """Adjoint of an arbitrary node after :func:`backward` (zeros if off-path)."""
    if tape.adjoints is None:
        raise TapeError("run backward first")
    g = tape.adjoints[v.index]
    return np.zeros_like(tape.values[v.index]) if g is None else g


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: Params, grads: dict[str, np.ndarray]) -> Params:
    """Bias-corrected Adam update applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter block {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, "
                             f"parameter has {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
