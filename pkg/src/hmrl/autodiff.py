"""Minimal reverse-mode autodiff on float64 numpy arrays.

The engine is tape-based and define-by-run: every forward pass records its
operations on a fresh ``Graph``, and one ``Graph.backward`` sweep accumulates
exact gradients into the participating ``Tensor`` leaves.  Values are either
scalars ``()``, vectors ``(n,)`` or row-batched matrices ``(B, n)``; all ops
broadcast over the leading batch axis where that makes sense.

Alongside the primitives there are the composite building blocks the rest of
the library needs (GRU cell, bounded-std Gaussian head, tanh squashing), the
Adam optimizer over a ``ParameterSet``, and a central finite-difference
checker used as the independent gradient oracle in tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, DomainError, NumericError, UsageError

LOG_2PI = math.log(2.0 * math.pi)
TANH_EPS = 1e-6  # keeps the squash log-density finite at saturation


def _prod(shape: Sequence[int]) -> int:
    out = 1
    for d in shape:
        out *= int(d)
    return out


class Tensor:
    """Flat float64 storage with a shape and an optional gradient buffer."""

    __slots__ = ("shape", "data", "grad")

    def __init__(self, data, shape=None):
        arr = np.asarray(data, dtype=np.float64)
        if shape is None:
            shape = arr.shape
        self.shape = tuple(int(d) for d in shape)
        if arr.size != _prod(self.shape):
            raise DimensionError(f"data of size {arr.size} does not fill shape {self.shape}")
        self.data = np.ascontiguousarray(arr).reshape(-1)
        self.grad = None

    @classmethod
    def zeros(cls, *shape: int) -> "Tensor":
        return cls(np.zeros(_prod(shape)), shape)

    @property
    def view(self) -> np.ndarray:
        """Shaped view of the flat data (writes through)."""
        return self.data.reshape(self.shape)

    @property
    def grad_view(self) -> np.ndarray | None:
        return None if self.grad is None else self.grad.reshape(self.shape)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.reshape(-1)

    def clear_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), self.shape)
        if self.grad is not None:
            t.grad = self.grad.copy()
        return t

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class _Node:
    __slots__ = ("op", "inputs", "value", "vjp", "tensor", "needs_grad")

    def __init__(self, op, inputs, value, vjp, tensor, needs_grad):
        self.op = op
        self.inputs = inputs        # ids of earlier nodes
        self.value = value          # shaped ndarray
        self.vjp = vjp              # vjp(grad_out, needs) -> per-input grads
        self.tensor = tensor        # backing Tensor for leaves
        self.needs_grad = needs_grad


class Var:
    """Handle to one node of a Graph."""

    __slots__ = ("graph", "nid")

    def __init__(self, graph: "Graph", nid: int):
        self.graph = graph
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.nid].value

    @property
    def shape(self) -> tuple:
        return np.shape(self.graph.nodes[self.nid].value)

    def item(self) -> float:
        return float(self.value)

    # arithmetic sugar; floats go through scalar ops, Vars must match shapes
    def __add__(self, other):
        if isinstance(other, Var):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Var):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)


class Graph:
    """Append-only operation tape; node inputs always point at earlier nodes."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_ids: dict[int, int] = {}

    def _push(self, op, inputs, value, vjp, tensor=None, needs_grad=None) -> Var:
        if needs_grad is None:
            needs_grad = any(self.nodes[i].needs_grad for i in inputs)
        self.nodes.append(_Node(op, inputs, value, vjp, tensor, needs_grad))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, t: Tensor) -> Var:
        """Wrap a parameter; repeated wraps of one Tensor share a node."""
        nid = self._leaf_ids.get(id(t))
        if nid is None:
            v = self._push("leaf", (), t.view, None, tensor=t, needs_grad=True)
            self._leaf_ids[id(t)] = v.nid
            return v
        return Var(self, nid)

    def const(self, value) -> Var:
        return self._push("const", (), np.asarray(value, dtype=np.float64), None, needs_grad=False)

    def backward(self, loss: Var) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf Tensor's grad."""
        if loss.graph is not self:
            raise UsageError("loss does not belong to this graph")
        if np.shape(self.nodes[loss.nid].value) != ():
            raise UsageError(f"backward needs a scalar loss, got shape {np.shape(self.nodes[loss.nid].value)}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.nid] = np.asarray(1.0)
        for nid in range(loss.nid, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.op == "leaf":
                node.tensor.accumulate_grad(g)
                continue
            if node.vjp is None:
                continue
            needs = tuple(self.nodes[i].needs_grad for i in node.inputs)
            for i, gi in zip(node.inputs, node.vjp(g, needs)):
                if gi is None:
                    continue
                if grads[i] is None:
                    grads[i] = np.zeros_like(self.nodes[i].value)
                grads[i] += gi


def _graph_of(*vars_: Var) -> Graph:
    g = vars_[0].graph
    for v in vars_[1:]:
        if v.graph is not g:
            raise UsageError("operands live on different graphs")
    return g


def _same_shape(a: Var, b: Var, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- primitives

def add(a: Var, b: Var) -> Var:
    g = _graph_of(a, b)
    _same_shape(a, b, "add")
    return g._push("add", (a.nid, b.nid), a.value + b.value,
                   lambda go, needs: (go if needs[0] else None, go if needs[1] else None))


def sub(a: Var, b: Var) -> Var:
    g = _graph_of(a, b)
    _same_shape(a, b, "sub")
    return g._push("sub", (a.nid, b.nid), a.value - b.value,
                   lambda go, needs: (go if needs[0] else None, -go if needs[1] else None))


def mul(a: Var, b: Var) -> Var:
    g = _graph_of(a, b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return g._push("mul", (a.nid, b.nid), av * bv,
                   lambda go, needs: (go * bv if needs[0] else None, go * av if needs[1] else None))


def div(a: Var, b: Var) -> Var:
    g = _graph_of(a, b)
    _same_shape(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return g._push("div", (a.nid, b.nid), out,
                   lambda go, needs: (go / bv if needs[0] else None,
                                      -go * out / bv if needs[1] else None))


def neg(a: Var) -> Var:
    return a.graph._push("neg", (a.nid,), -a.value, lambda go, needs: (-go,))


def scale(a: Var, c: float) -> Var:
    return a.graph._push("scale", (a.nid,), a.value * c, lambda go, needs: (go * c,))


def shift(a: Var, c: float) -> Var:
    return a.graph._push("shift", (a.nid,), a.value + c, lambda go, needs: (go,))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.graph._push("tanh", (a.nid,), out, lambda go, needs: (go * (1.0 - out * out),))


def sigmoid(a: Var) -> Var:
    out = 1.0 / (1.0 + np.exp(-a.value))
    return a.graph._push("sigmoid", (a.nid,), out, lambda go, needs: (go * out * (1.0 - out),))


def relu(a: Var) -> Var:
    av = a.value
    mask = av > 0.0
    return a.graph._push("relu", (a.nid,), np.where(mask, av, 0.0),
                         lambda go, needs: (go * mask,))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.graph._push("exp", (a.nid,), out, lambda go, needs: (go * out,))


def log(a: Var) -> Var:
    av = a.value
    return a.graph._push("log", (a.nid,), np.log(av), lambda go, needs: (go / av,))


def square(a: Var) -> Var:
    av = a.value
    return a.graph._push("square", (a.nid,), av * av, lambda go, needs: (2.0 * go * av,))


def xlogy(a: Var, b: Var) -> Var:
    """a*log(b) with the 0*log(0) = 0 convention (used by entropy terms)."""
    g = _graph_of(a, b)
    _same_shape(a, b, "xlogy")
    av, bv = a.value, b.value
    zero = av == 0.0
    safe_b = np.where(bv <= 0.0, 1.0, bv)
    out = np.where(zero, 0.0, av * np.log(safe_b))

    def vjp(go, needs):
        ga = go * np.where(zero & (bv <= 0.0), 0.0, np.log(safe_b)) if needs[0] else None
        gb = go * np.where(zero, 0.0, av / safe_b) if needs[1] else None
        return ga, gb

    return g._push("xlogy", (a.nid, b.nid), out, vjp)


def minimum(a: Var, b: Var) -> Var:
    g = _graph_of(a, b)
    _same_shape(a, b, "minimum")
    take_a = a.value <= b.value
    return g._push("minimum", (a.nid, b.nid), np.where(take_a, a.value, b.value),
                   lambda go, needs: (go * take_a if needs[0] else None,
                                      go * ~take_a if needs[1] else None))


def clip(a: Var, lo: float, hi: float) -> Var:
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return a.graph._push("clip", (a.nid,), np.clip(av, lo, hi),
                         lambda go, needs: (go * inside,))


def vsum(a: Var) -> Var:
    shp = a.shape
    return a.graph._push("sum", (a.nid,), np.asarray(a.value.sum()),
                         lambda go, needs: (np.broadcast_to(go, shp).copy(),))


def mean(a: Var) -> Var:
    shp = a.shape
    n = _prod(shp) if shp else 1
    return a.graph._push("mean", (a.nid,), np.asarray(a.value.mean()),
                         lambda go, needs: (np.broadcast_to(go / n, shp).copy(),))


def sum_last(a: Var) -> Var:
    """Reduce the last axis: (..., n) -> (...)."""
    av = a.value
    n = av.shape[-1]
    return a.graph._push("sum_last", (a.nid,), av.sum(axis=-1),
                         lambda go, needs: (np.repeat(np.expand_dims(go, -1), n, axis=-1),))


def dot(a: Var, b: Var) -> Var:
    g = _graph_of(a, b)
    if a.shape != b.shape or len(a.shape) != 1:
        raise DimensionError(f"dot needs two equal-length vectors, got {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return g._push("dot", (a.nid, b.nid), np.asarray(av @ bv),
                   lambda go, needs: (go * bv if needs[0] else None, go * av if needs[1] else None))


def concat(parts: Sequence[Var]) -> Var:
    """Concatenate along the last axis; batch dims must agree."""
    g = _graph_of(*parts)
    vals = [p.value for p in parts]
    widths = [v.shape[-1] for v in vals]
    out = np.concatenate(vals, axis=-1)
    offsets = np.cumsum([0] + widths)

    def vjp(go, needs):
        return tuple(go[..., offsets[i]:offsets[i + 1]] if needs[i] else None
                     for i in range(len(vals)))

    return g._push("concat", tuple(p.nid for p in parts), out, vjp)


def concat_rows(parts: Sequence[Var]) -> Var:
    """Stack row batches along axis 0: k parts of (B_i, n) -> (sum B_i, n)."""
    g = _graph_of(*parts)
    vals = [p.value for p in parts]
    heights = [v.shape[0] for v in vals]
    offsets = np.cumsum([0] + heights)

    def vjp(go, needs):
        return tuple(go[offsets[i]:offsets[i + 1]] if needs[i] else None
                     for i in range(len(vals)))

    return g._push("concat_rows", tuple(p.nid for p in parts),
                   np.concatenate(vals, axis=0), vjp)


def rows(a: Var, start: int, stop: int) -> Var:
    """Contiguous row slice a[start:stop] of a (B, n) value."""
    av = a.value
    n = av.shape[0]

    def vjp(go, needs):
        full = np.zeros_like(av)
        full[start:stop] = go
        return (full,)

    if not 0 <= start <= stop <= n:
        raise DimensionError(f"row slice [{start}:{stop}] outside batch of {n}")
    return a.graph._push("rows", (a.nid,), av[start:stop], vjp)


def reshape(a: Var, shape: tuple) -> Var:
    old = a.shape
    return a.graph._push("reshape", (a.nid,), a.value.reshape(shape),
                         lambda go, needs: (go.reshape(old),))


def detach(a: Var) -> Var:
    """Block gradient flow; the value passes through as a constant."""
    return a.graph._push("detach", (a.nid,), a.value, None, needs_grad=False)


def affine(x: Var, W: Var, b: Var) -> Var:
    """W @ x + b for a vector x, or x @ W.T + b row-wise for a batch."""
    g = _graph_of(x, W, b)
    xv, Wv, bv = x.value, W.value, b.value
    if Wv.ndim != 2 or bv.ndim != 1 or Wv.shape[0] != bv.shape[0] or xv.shape[-1] != Wv.shape[1]:
        raise DimensionError(
            f"affine: x {xv.shape} incompatible with W {Wv.shape}, b {bv.shape}")
    out = xv @ Wv.T + bv

    def vjp(go, needs):
        gx = go @ Wv if needs[0] else None
        if needs[1]:
            gW = go.T @ xv if go.ndim == 2 else np.outer(go, xv)
        else:
            gW = None
        gb = (go.sum(axis=0) if go.ndim == 2 else go) if needs[2] else None
        return gx, gW, gb

    return g._push("affine", (x.nid, W.nid, b.nid), out, vjp)


def softmax(a: Var) -> Var:
    """Probability vector over the last axis (strictly positive, sums to 1)."""
    av = a.value
    if av.ndim == 0 or av.shape[-1] == 0:
        raise DomainError(f"softmax needs a non-empty vector, got shape {av.shape}")
    zmax = av.max(axis=-1, keepdims=True)
    e = np.exp(av - zmax)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(go, needs):
        inner = (go * out).sum(axis=-1, keepdims=True)
        return (out * (go - inner),)

    return a.graph._push("softmax", (a.nid,), out, vjp)


def activate(x: Var, kind: str) -> Var:
    """Named activations; softmax is restricted to rank-1 inputs."""
    if kind == "tanh":
        return tanh(x)
    if kind == "relu":
        return relu(x)
    if kind == "softmax":
        if len(x.shape) != 1:
            raise DimensionError(f"softmax activation needs a rank-1 input, got shape {x.shape}")
        return softmax(x)
    raise ConfigurationError(f"unknown activation kind {kind!r}")


def dropout(a: Var, p: float, rng: np.random.Generator, training: bool) -> Var:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {p}")
    mask = (rng.random(np.shape(a.value)) >= p) / (1.0 - p)
    return a.graph._push("dropout", (a.nid,), a.value * mask,
                         lambda go, needs: (go * mask,))


# ------------------------------------------------------------- compositions

@dataclass
class GRUCellParams:
    """Weights for one GRU cell (input x of width e, hidden h of width d)."""
    W_ir: Tensor; W_iz: Tensor; W_in: Tensor   # (d, e)
    W_hr: Tensor; W_hz: Tensor; W_hn: Tensor   # (d, d)
    b_ir: Tensor; b_iz: Tensor; b_in: Tensor   # (d,)
    b_hr: Tensor; b_hz: Tensor; b_hn: Tensor   # (d,)

    @classmethod
    def create(cls, in_dim: int, hidden: int, init: Callable[[tuple], np.ndarray]) -> "GRUCellParams":
        mk = lambda *s: Tensor(init(s), s)
        return cls(
            W_ir=mk(hidden, in_dim), W_iz=mk(hidden, in_dim), W_in=mk(hidden, in_dim),
            W_hr=mk(hidden, hidden), W_hz=mk(hidden, hidden), W_hn=mk(hidden, hidden),
            b_ir=mk(hidden), b_iz=mk(hidden), b_in=mk(hidden),
            b_hr=mk(hidden), b_hz=mk(hidden), b_hn=mk(hidden),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in (
            "W_ir", "W_iz", "W_in", "W_hr", "W_hz", "W_hn",
            "b_ir", "b_iz", "b_in", "b_hr", "b_hz", "b_hn")}


def gru_cell_from_inputs(g: Graph, x_r: Var, x_z: Var, x_n: Var, h_prev: Var,
                         params: GRUCellParams) -> Var:
    """GRU update given precomputed input-side affine outputs.

    The x-side projections do not depend on the recurrent state, so callers
    stepping a whole sequence can compute them for every step in one batched
    affine and feed per-step slices here.
    """
    L = g.leaf
    r = sigmoid(add(x_r, affine(h_prev, L(params.W_hr), L(params.b_hr))))
    u = sigmoid(add(x_z, affine(h_prev, L(params.W_hz), L(params.b_hz))))
    n = tanh(add(x_n, mul(r, affine(h_prev, L(params.W_hn), L(params.b_hn)))))
    # h' = (1 - u) * n + u * h_prev
    return add(n, mul(u, sub(h_prev, n)))


def gru_input_projections(g: Graph, x: Var, params: GRUCellParams) -> tuple[Var, Var, Var]:
    L = g.leaf
    return (affine(x, L(params.W_ir), L(params.b_ir)),
            affine(x, L(params.W_iz), L(params.b_iz)),
            affine(x, L(params.W_in), L(params.b_in)))


def gru_cell(g: Graph, x: Var, h_prev: Var, params: GRUCellParams) -> Var:
    """Standard GRU update: reset/update gates plus a tanh candidate."""
    if not (np.isfinite(x.value).all() and np.isfinite(h_prev.value).all()):
        raise NumericError("gru_cell received non-finite inputs")
    x_r, x_z, x_n = gru_input_projections(g, x, params)
    return gru_cell_from_inputs(g, x_r, x_z, x_n, h_prev, params)


def gaussian_log_prob(x: Var, mean_v: Var, std: Var) -> Var:
    """Diagonal-Gaussian log-density of x, summed over the last axis."""
    z = div(sub(x, mean_v), std)
    dim = x.shape[-1] if len(x.shape) else 1
    per = sub(scale(square(z), -0.5), log(std))
    return shift(sum_last(per), -0.5 * LOG_2PI * dim)


def bounded_std(std_raw: Var, std_range: tuple[float, float]) -> Var:
    """std = lo + sigmoid(raw) * (hi - lo): inside [lo, hi] by construction."""
    lo, hi = std_range
    if lo >= hi:
        raise ConfigurationError(f"std range needs lo < hi, got ({lo}, {hi})")
    return shift(scale(sigmoid(std_raw), hi - lo), lo)


def gaussian_head(mean_raw: Var, std_raw: Var, std_range: tuple[float, float],
                  noise: np.ndarray) -> tuple[Var, Var, Var]:
    """Reparameterized diagonal Gaussian with a sigmoid-bounded std.

    Returns (sample, log_prob, std); the sample is differentiable through
    both heads, the std always lies inside [lo, hi].
    """
    g = _graph_of(mean_raw, std_raw)
    std = bounded_std(std_raw, std_range)
    sample = add(mean_raw, mul(std, g.const(np.asarray(noise, dtype=np.float64))))
    log_prob = gaussian_log_prob(sample, mean_raw, std)
    return sample, log_prob, std


_ONE_INSIDE = float(np.nextafter(1.0, 0.0))  # float64 tanh saturates to 1.0 near |x|=19


def squash_correction(squashed: Var) -> Var:
    """Sum of log(1 - z^2 + eps) terms a tanh squash subtracts from a log-density."""
    return sum_last(log(shift(neg(square(squashed)), 1.0 + TANH_EPS)))


def tanh_squash(sample: Var, log_prob: Var) -> tuple[Var, Var]:
    """Squash into the open interval (-1, 1) and correct the log-density."""
    squashed = clip(tanh(sample), -_ONE_INSIDE, _ONE_INSIDE)
    return squashed, sub(log_prob, squash_correction(squashed))


# ----------------------------------------------------------------- training

class ParameterSet:
    """Ordered path -> Tensor map carrying per-parameter Adam moments."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, path: str, t: Tensor) -> Tensor:
        if path in self._params:
            raise UsageError(f"parameter path {path!r} already registered")
        self._params[path] = t
        self._m[path] = np.zeros_like(t.data)
        self._v[path] = np.zeros_like(t.data)
        return t

    def add_all(self, prefix: str, tensors: dict[str, Tensor]) -> None:
        for name, t in tensors.items():
            self.add(f"{prefix}/{name}", t)

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def clear_grads(self) -> None:
        for t in self._params.values():
            t.clear_grad()

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def moments(self, path: str) -> tuple[np.ndarray, np.ndarray]:
        return self._m[path], self._v[path]


def adam_step(params: ParameterSet, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam update over every parameter with a populated grad.

    Gradients are cleared afterwards; parameters whose grad is absent keep
    both their value and their moments untouched.
    """
    if lr <= 0.0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    params.step_count += 1
    t = params.step_count
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for path, p in params.items():
        if p.grad is None:
            continue
        m, v = params._m[path], params._v[path]
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad * p.grad
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.clear_grad()


def finite_diff_check(loss_fn: Callable[[], Var], params: ParameterSet | Iterable[Tensor],
                      delta: float = 1e-5) -> float:
    """Max relative error between backward() and central finite differences.

    ``loss_fn`` must rebuild its graph on every call and be deterministic
    given the current parameter values.
    """
    tensors = params.tensors() if isinstance(params, ParameterSet) else list(params)
    for t in tensors:
        t.clear_grad()
    loss = loss_fn()
    loss.graph.backward(loss)
    ad = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    for t in tensors:
        t.clear_grad()

    worst = 0.0
    for t, g_ad in zip(tensors, ad):
        for i in range(t.data.size):
            orig = t.data[i]
            t.data[i] = orig + delta
            f_plus = loss_fn().item()
            t.data[i] = orig - delta
            f_minus = loss_fn().item()
            t.data[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * delta)
            rel = abs(g_ad[i] - g_fd) / max(1e-8, abs(g_fd))
            worst = max(worst, rel)
    return worst
