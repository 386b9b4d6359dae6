"""Reverse-mode automatic differentiation over dense float64 arrays.

Expressions are built as immutable DAGs of `Node` objects; values are plain
numpy arrays supplied through named leaves at evaluation time.  Gradients are
constructed symbolically: `grad` walks the graph in reverse topological order
and emits the backward pass as new graph nodes, so gradients of gradients
(needed by the R1 penalty) come for free as long as every op reached has a
gradient rule.  Ops without a rule fail loudly when differentiated.

Guarantees:
  - evaluate is pure: identical bindings produce bit-identical outputs;
  - graphs are immutable after construction and safe to share across calls;
  - accumulation order inside a gradient pass is fixed, so repeated runs of
    the same graph are deterministic down to the last bit.

`CompiledGraph` is the throughput path used by the training loop: it fixes a
topological order once and evaluates into persistent per-node buffers, which
removes per-step allocation entirely.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels

Tensor = np.ndarray  # all values are dense float64 (int64 for index leaves)

_ids = itertools.count()


class Node:
    """One operation record in an expression graph."""

    __slots__ = ("op", "inputs", "attrs", "shape", "dtype", "id")

    __array_ufunc__ = None  # keep numpy from hijacking ndarray (op) Node

    def __init__(self, op: str, inputs: tuple["Node", ...], attrs: dict, shape: tuple[int, ...], dtype=np.float64):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.shape = shape
        self.dtype = dtype
        self.id = next(_ids)

    def __repr__(self) -> str:
        if self.op == "leaf":
            return f"Node(leaf '{self.attrs['name']}' {self.shape})"
        return f"Node({self.op} {self.shape})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        other = _wrap(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_wrap(other), power(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axes=None, keepdims: bool = False) -> "Node":
        return reduce_sum(self, axes, keepdims)

    def reshape(self, shape) -> "Node":
        return reshape(self, shape)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else const(x)


# ---------------------------------------------------------------------------
# registries

_EVAL: dict[str, Callable] = {}        # op -> fn(node, *inputs) -> ndarray
_EVAL_OUT: dict[str, Callable] = {}    # op -> fn(node, out, scratch, *inputs)
_SCRATCH: dict[str, Callable] = {}     # op -> fn(node) -> scratch object
_VJP: dict[str, Callable] = {}         # op -> fn(node, cotangent) -> per-input Node|None
_VIEW = frozenset({"reshape", "permute", "broadcast_to", "slice_axis", "stop_gradient"})


def _op(name: str, eval_fn: Callable, vjp_fn: Callable | None = None,
        eval_out: Callable | None = None, scratch: Callable | None = None) -> None:
    _EVAL[name] = eval_fn
    if vjp_fn is not None:
        _VJP[name] = vjp_fn
    if eval_out is not None:
        _EVAL_OUT[name] = eval_out
    if scratch is not None:
        _SCRATCH[name] = scratch


def _shape_err(op: str, detail: str) -> ValueError:
    return ValueError(f"{op}: {detail}")


# ---------------------------------------------------------------------------
# leaves and constants


def leaf(name: str, shape: Sequence[int], dtype=np.float64) -> Node:
    """Named placeholder bound at evaluation time."""
    return Node("leaf", (), {"name": name}, tuple(int(s) for s in shape), dtype)


def const(value) -> Node:
    arr = np.asarray(value, dtype=np.float64)
    return Node("const", (), {"value": arr}, arr.shape)


def const_int(value) -> Node:
    arr = np.asarray(value, dtype=np.int64)
    return Node("const", (), {"value": arr}, arr.shape, np.int64)


def stop_gradient(x: Node) -> Node:
    return Node("stop_gradient", (x,), {}, x.shape, x.dtype)


_op("stop_gradient", lambda n, x: x, lambda n, g: (None,))


# ---------------------------------------------------------------------------
# broadcasting elementwise arithmetic


def _broadcast_shape(op: str, a: Node, b: Node) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise _shape_err(op, f"cannot broadcast {a.shape} with {b.shape}")


def _unbroadcast(g: Node, shape: tuple[int, ...]) -> Node:
    """Sum a cotangent back down to the shape of a broadcast input."""
    if g.shape == shape:
        return g
    extra = len(g.shape) - len(shape)
    if extra:
        g = reduce_sum(g, tuple(range(extra)))
    axes = tuple(i for i, (got, want) in enumerate(zip(g.shape, shape)) if want == 1 and got != 1)
    if axes:
        g = reduce_sum(g, axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


def add(a: Node, b: Node) -> Node:
    return Node("add", (a, b), {}, _broadcast_shape("add", a, b))


def sub(a: Node, b: Node) -> Node:
    return Node("sub", (a, b), {}, _broadcast_shape("sub", a, b))


def mul(a: Node, b: Node) -> Node:
    return Node("mul", (a, b), {}, _broadcast_shape("mul", a, b))


def neg(a: Node) -> Node:
    return Node("neg", (a,), {}, a.shape)


_op("add", lambda n, a, b: a + b,
    lambda n, g: (_unbroadcast(g, n.inputs[0].shape), _unbroadcast(g, n.inputs[1].shape)),
    lambda n, out, s, a, b: np.add(a, b, out=out))
_op("sub", lambda n, a, b: a - b,
    lambda n, g: (_unbroadcast(g, n.inputs[0].shape), _unbroadcast(neg(g), n.inputs[1].shape)),
    lambda n, out, s, a, b: np.subtract(a, b, out=out))
_op("mul", lambda n, a, b: a * b,
    lambda n, g: (_unbroadcast(mul(g, n.inputs[1]), n.inputs[0].shape),
                  _unbroadcast(mul(g, n.inputs[0]), n.inputs[1].shape)),
    lambda n, out, s, a, b: np.multiply(a, b, out=out))
_op("neg", lambda n, a: -a, lambda n, g: (neg(g),),
    lambda n, out, s, a: np.negative(a, out=out))


def power(x: Node, p) -> Node:
    """Elementwise x**p for a constant real exponent."""
    return Node("power", (x,), {"p": float(p)}, x.shape)


def _power_vjp(n: Node, g: Node):
    p = n.attrs["p"]
    return (mul(g, mul(const(p), power(n.inputs[0], p - 1.0))),)


_op("power", lambda n, x: np.power(x, n.attrs["p"]), _power_vjp,
    lambda n, out, s, x: np.power(x, n.attrs["p"], out=out))


# ---------------------------------------------------------------------------
# transcendental elementwise ops


def exp(x: Node) -> Node:
    return Node("exp", (x,), {}, x.shape)


def log(x: Node) -> Node:
    return Node("log", (x,), {}, x.shape)


def tanh(x: Node) -> Node:
    return Node("tanh", (x,), {}, x.shape)


def sigmoid(x: Node) -> Node:
    return Node("sigmoid", (x,), {}, x.shape)


def softplus(x: Node) -> Node:
    """ln(1 + exp(x)) via the overflow-safe max(x,0) + log1p(exp(-|x|)) form."""
    return Node("softplus", (x,), {}, x.shape)


def silu(x: Node) -> Node:
    """x * sigmoid(x); the smooth activation used throughout the networks.

    Fused forward with a fused derivative node (`dsilu`), because this
    activation sits on the largest arrays in the point decoder: one kernel
    pass each way instead of a chain of elementwise ops.
    """
    return Node("silu", (x,), {}, x.shape)


def dsilu(x: Node, g: Node) -> Node:
    """g times the derivative of x*sigmoid(x), as one fused kernel."""
    if x.shape != g.shape:
        raise _shape_err("dsilu", f"shape mismatch {x.shape} vs {g.shape}")
    return Node("dsilu", (x, g), {}, x.shape)


def d2silu(x: Node) -> Node:
    """Second derivative of x*sigmoid(x), as one fused kernel."""
    return Node("d2silu", (x,), {}, x.shape)


def arccos(x: Node) -> Node:
    return Node("arccos", (x,), {}, x.shape)


def _sigmoid_np(x):
    # 0.5*(tanh(x/2)+1): same function, one transcendental, stable both tails
    return 0.5 * np.tanh(0.5 * np.asarray(x)) + 0.5


def _sigmoid_out(x, out):
    np.multiply(x, 0.5, out=out)
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


def _softplus_np(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


_op("exp", lambda n, x: np.exp(x),
    lambda n, g: (mul(g, n),),
    lambda n, out, s, x: np.exp(x, out=out))
_op("log", lambda n, x: np.log(x),
    lambda n, g: (mul(g, power(n.inputs[0], -1.0)),),
    lambda n, out, s, x: np.log(x, out=out))
_op("tanh", lambda n, x: np.tanh(x),
    lambda n, g: (mul(g, sub(const(1.0), mul(n, n))),),
    lambda n, out, s, x: np.tanh(x, out=out))
_op("sigmoid", lambda n, x: _sigmoid_np(x),
    lambda n, g: (mul(g, mul(n, sub(const(1.0), n))),),
    lambda n, out, s, x: _sigmoid_out(x, out))
_op("softplus", lambda n, x: _softplus_np(x),
    lambda n, g: (mul(g, sigmoid(n.inputs[0])),),
    lambda n, out, s, x: np.copyto(out, _softplus_np(x)))


def _silu_out(n, out, s, x):
    return kernels.silu_forward(x, out)


def _dsilu_np(x, g):
    s = _sigmoid_np(x)
    return g * (s * (1.0 + x * (1.0 - s)))


def _dsilu_out(n, out, s, x, g):
    return kernels.silu_backward(x, g, out)


def _d2silu_np(x):
    s = _sigmoid_np(x)
    return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))


def _d2silu_out(n, out, s, x):
    _sigmoid_out(x, s)
    np.multiply(s, -2.0, out=out)
    out += 1.0
    out *= x
    out += 2.0
    out *= s
    np.subtract(1.0, s, out=s)
    out *= s
    return out


def _d2silu_vjp(n: Node, h: Node):
    # third derivative of x*sigmoid(x), composed from primitives (cold path)
    x = n.inputs[0]
    s = sigmoid(x)
    u = mul(s, sub(const(1.0), s))
    t = sub(const(1.0), mul(const(2.0), s))
    inner = sub(mul(t, add(const(3.0), mul(x, t))), mul(const(2.0), mul(x, u)))
    return (mul(h, mul(u, inner)),)


_op("silu", lambda n, x: x * _sigmoid_np(x),
    lambda n, g: (dsilu(n.inputs[0], g),),
    _silu_out)
_op("dsilu", lambda n, x, g: _dsilu_np(x, g),
    lambda n, h: (mul(mul(h, n.inputs[1]), d2silu(n.inputs[0])),
                  dsilu(n.inputs[0], h)),
    _dsilu_out)
_op("d2silu", lambda n, x: _d2silu_np(x), _d2silu_vjp,
    _d2silu_out, lambda node: np.empty(node.shape))
_op("arccos", lambda n, x: np.arccos(x),
    lambda n, g: (neg(mul(g, power(sub(const(1.0), mul(n.inputs[0], n.inputs[0])), -0.5))),))


def clip(x: Node, lo: float, hi: float) -> Node:
    """Clamp to [lo, hi]; gradient is passed only strictly inside the range."""
    return Node("clip", (x,), {"lo": float(lo), "hi": float(hi)}, x.shape)


def in_range_mask(x: Node, lo: float, hi: float) -> Node:
    """1.0 where lo < x < hi else 0.0; not differentiable (zero a.e.)."""
    return Node("in_range_mask", (x,), {"lo": float(lo), "hi": float(hi)}, x.shape)


_op("clip", lambda n, x: np.clip(x, n.attrs["lo"], n.attrs["hi"]),
    lambda n, g: (mul(g, in_range_mask(n.inputs[0], n.attrs["lo"], n.attrs["hi"])),),
    lambda n, out, s, x: np.clip(x, n.attrs["lo"], n.attrs["hi"], out=out))
_op("in_range_mask",
    lambda n, x: ((x > n.attrs["lo"]) & (x < n.attrs["hi"])).astype(np.float64),
    lambda n, g: (None,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Node, b: Node) -> Node:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise _shape_err("matmul", f"incompatible shapes {a.shape} @ {b.shape}")
    return Node("matmul", (a, b), {}, (a.shape[0], b.shape[1]))


_op("matmul", lambda n, a, b: a @ b,
    lambda n, g: (matmul(g, permute(n.inputs[1], (1, 0))), matmul(permute(n.inputs[0], (1, 0)), g)),
    lambda n, out, s, a, b: np.matmul(a, b, out=out))


def linear(x: Node, w: Node, b: Node) -> Node:
    """x @ w + b with b broadcast over rows; fused to one buffer write."""
    if len(x.shape) != 2 or len(w.shape) != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise _shape_err("linear", f"incompatible shapes {x.shape} @ {w.shape} + {b.shape}")
    return Node("linear", (x, w, b), {}, (x.shape[0], w.shape[1]))


def _linear_eval_out(n, out, s, x, w, b):
    np.matmul(x, w, out=out)
    out += b


_op("linear", lambda n, x, w, b: x @ w + b,
    lambda n, g: (matmul(g, permute(n.inputs[1], (1, 0))),
                  matmul(permute(n.inputs[0], (1, 0)), g),
                  reduce_sum(g, (0,))),
    _linear_eval_out)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != int(np.prod(x.shape, dtype=np.int64)):
        raise _shape_err("reshape", f"cannot reshape {x.shape} to {shape}")
    return Node("reshape", (x,), {"shape": shape}, shape, x.dtype)


def permute(x: Node, perm: tuple[int, ...]) -> Node:
    if sorted(perm) != list(range(len(x.shape))):
        raise _shape_err("permute", f"bad permutation {perm} for shape {x.shape}")
    return Node("permute", (x,), {"perm": tuple(perm)}, tuple(x.shape[i] for i in perm), x.dtype)


def broadcast_to(x: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    try:
        np.broadcast_shapes(x.shape, shape)
    except ValueError:
        raise _shape_err("broadcast_to", f"cannot broadcast {x.shape} to {shape}")
    return Node("broadcast_to", (x,), {"shape": shape}, shape, x.dtype)


def flip(x: Node, axes: tuple[int, ...]) -> Node:
    return Node("flip", (x,), {"axes": tuple(axes)}, x.shape, x.dtype)


_op("reshape", lambda n, x: x.reshape(n.attrs["shape"]),
    lambda n, g: (reshape(g, n.inputs[0].shape),))
_op("permute", lambda n, x: x.transpose(n.attrs["perm"]),
    lambda n, g: (permute(g, tuple(int(i) for i in np.argsort(n.attrs["perm"]))),))
_op("broadcast_to", lambda n, x: np.broadcast_to(x, n.attrs["shape"]),
    lambda n, g: (_unbroadcast(g, n.inputs[0].shape),))
_op("flip", lambda n, x: np.flip(x, n.attrs["axes"]),
    lambda n, g: (flip(g, n.attrs["axes"]),),
    lambda n, out, s, x: np.copyto(out, np.flip(x, n.attrs["axes"])))


def concat(xs: Sequence[Node], axis: int) -> Node:
    xs = tuple(xs)
    base = list(xs[0].shape)
    total = 0
    for x in xs:
        s = list(x.shape)
        if len(s) != len(base) or s[:axis] + s[axis + 1:] != base[:axis] + base[axis + 1:]:
            raise _shape_err("concat", f"mismatched shapes {[x.shape for x in xs]} on axis {axis}")
        total += s[axis]
    base[axis] = total
    return Node("concat", xs, {"axis": axis}, tuple(base))


def _concat_vjp(n: Node, g: Node):
    axis = n.attrs["axis"]
    outs, start = [], 0
    for x in n.inputs:
        outs.append(slice_axis(g, axis, start, start + x.shape[axis]))
        start += x.shape[axis]
    return tuple(outs)


_op("concat", lambda n, *xs: np.concatenate(xs, axis=n.attrs["axis"]), _concat_vjp,
    lambda n, out, s, *xs: np.concatenate(xs, axis=n.attrs["axis"], out=out))


def slice_axis(x: Node, axis: int, start: int, stop: int) -> Node:
    if not (0 <= start <= stop <= x.shape[axis]):
        raise _shape_err("slice_axis", f"bad range [{start}:{stop}] on axis {axis} of {x.shape}")
    shape = list(x.shape)
    shape[axis] = stop - start
    return Node("slice_axis", (x,), {"axis": axis, "start": start, "stop": stop}, tuple(shape), x.dtype)


def _slice_eval(n: Node, x):
    idx = [slice(None)] * len(x.shape)
    idx[n.attrs["axis"]] = slice(n.attrs["start"], n.attrs["stop"])
    return x[tuple(idx)]


def _slice_vjp(n: Node, g: Node):
    x = n.inputs[0]
    axis, start, stop = n.attrs["axis"], n.attrs["start"], n.attrs["stop"]
    parts = []
    if start > 0:
        shape = list(x.shape)
        shape[axis] = start
        parts.append(const(np.zeros(shape)))
    parts.append(g)
    if stop < x.shape[axis]:
        shape = list(x.shape)
        shape[axis] = x.shape[axis] - stop
        parts.append(const(np.zeros(shape)))
    return (concat(parts, axis) if len(parts) > 1 else g,)


_op("slice_axis", _slice_eval, _slice_vjp)


# ---------------------------------------------------------------------------
# reductions and scans


def reduce_sum(x: Node, axes=None, keepdims: bool = False) -> Node:
    nd = len(x.shape)
    if axes is None:
        norm_axes = tuple(range(nd))
    elif isinstance(axes, int):
        norm_axes = (axes % nd,)
    else:
        norm_axes = tuple(int(a) % nd for a in axes)
    shape = []
    for i, s in enumerate(x.shape):
        if i in norm_axes:
            if keepdims:
                shape.append(1)
        else:
            shape.append(s)
    return Node("sum", (x,), {"axes": norm_axes, "keepdims": keepdims}, tuple(shape))


def _sum_vjp(n: Node, g: Node):
    x = n.inputs[0]
    if not n.attrs["keepdims"]:
        kept = [1 if i in n.attrs["axes"] else s for i, s in enumerate(x.shape)]
        g = reshape(g, kept)
    return (broadcast_to(g, x.shape),)


_op("sum", lambda n, x: np.sum(x, axis=n.attrs["axes"], keepdims=n.attrs["keepdims"]), _sum_vjp,
    lambda n, out, s, x: np.sum(x, axis=n.attrs["axes"], keepdims=n.attrs["keepdims"], out=out))


def mean(x: Node, axes=None, keepdims: bool = False) -> Node:
    node = reduce_sum(x, axes, keepdims)
    count = int(np.prod(x.shape, dtype=np.int64)) // max(int(np.prod(node.shape, dtype=np.int64)), 1)
    return mul(node, const(1.0 / count))


def cumsum(x: Node, axis: int, exclusive: bool = False) -> Node:
    """Running sum along an axis; exclusive shifts by one (first slot zero)."""
    return Node("cumsum", (x,), {"axis": axis, "exclusive": exclusive}, x.shape)


def _cumsum_eval(n: Node, x):
    axis, exclusive = n.attrs["axis"], n.attrs["exclusive"]
    out = np.cumsum(x, axis=axis)
    if exclusive:
        out = np.roll(out, 1, axis=axis)
        idx = [slice(None)] * x.ndim
        idx[axis] = 0
        out[tuple(idx)] = 0.0
    return out


def _cumsum_vjp(n: Node, g: Node):
    axis, exclusive = n.attrs["axis"], n.attrs["exclusive"]
    return (flip(cumsum(flip(g, (axis,)), axis, exclusive), (axis,)),)


_op("cumsum", _cumsum_eval, _cumsum_vjp)


# ---------------------------------------------------------------------------
# tri-plane gather / scatter (linear adjoint pair, fused kernels)


def triplane_gather(table: Node, idx: Node, w: Node) -> Node:
    """Bilinear gather: out[p, bC+c] = sum_k w[b,k,p] * table[idx[b,k,p], bC+c].

    table is a [rows, 3C] texel matrix whose channel thirds belong to the
    three planes; idx/w are [3, 4, N] corner indices and weights.  Gradients
    flow to the table only; the sampling geometry is data.
    """
    if len(table.shape) != 2 or table.shape[1] % 3 != 0:
        raise _shape_err("triplane_gather", f"table must be [rows, 3C], got {table.shape}")
    if idx.shape != w.shape or len(idx.shape) != 3 or idx.shape[:2] != (3, 4):
        raise _shape_err("triplane_gather", f"idx/w must be [3,4,N], got {idx.shape} and {w.shape}")
    if idx.dtype != np.int64:
        raise _shape_err("triplane_gather", "idx must be an int64 leaf or constant")
    return Node("triplane_gather", (table, idx, w), {}, (idx.shape[2], table.shape[1]))


def triplane_scatter(g: Node, idx: Node, w: Node, rows: int) -> Node:
    """Adjoint of triplane_gather back onto a [rows, 3C] texel matrix."""
    return Node("triplane_scatter", (g, idx, w), {"rows": int(rows)}, (int(rows), g.shape[1]))


_op("triplane_gather", lambda n, t, i, w: kernels.triplane_gather(t, i, w),
    lambda n, g: (triplane_scatter(g, n.inputs[1], n.inputs[2], n.inputs[0].shape[0]), None, None),
    lambda n, out, s, t, i, w: kernels.triplane_gather(t, i, w, out=out))
_op("triplane_scatter", lambda n, g, i, w: kernels.triplane_scatter(g, i, w, n.attrs["rows"]),
    lambda n, c: (triplane_gather(c, n.inputs[1], n.inputs[2]), None, None),
    lambda n, out, s, g, i, w: kernels.triplane_scatter(g, i, w, n.attrs["rows"], out=out))


# ---------------------------------------------------------------------------
# 2-D convolution (stride 1, same padding, odd square kernels)


def conv2d(x: Node, k: Node) -> Node:
    """NHWC convolution with [kh, kw, c_in, c_out] kernels, stride 1, same pad."""
    if len(x.shape) != 4 or len(k.shape) != 4:
        raise _shape_err("conv2d", f"need NHWC input and khkw-ci-co kernel, got {x.shape}, {k.shape}")
    if x.shape[3] != k.shape[2]:
        raise _shape_err("conv2d", f"channel mismatch: input {x.shape} vs kernel {k.shape}")
    if k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise _shape_err("conv2d", f"kernel must be odd and square, got {k.shape}")
    return Node("conv2d", (x, k), {}, (x.shape[0], x.shape[1], x.shape[2], k.shape[3]))


def conv2d_wgrad(x: Node, g: Node, kh: int, kw: int) -> Node:
    """Kernel gradient of conv2d: correlate input windows with the cotangent."""
    return Node("conv2d_wgrad", (x, g), {"kh": int(kh), "kw": int(kw)},
                (int(kh), int(kw), x.shape[3], g.shape[3]))


def _conv_cols(x: np.ndarray, kh: int, scratch=None) -> np.ndarray:
    """im2col for stride-1 same-pad convolution; returns [B*H*W, kh*kh*C]."""
    b, h, w, c = x.shape
    p = kh // 2
    if scratch is None:
        xp = np.zeros((b, h + 2 * p, w + 2 * p, c))
        cols = np.empty((b * h * w, kh * kh * c))
    else:
        xp, cols = scratch["xp"], scratch["cols"]
    xp[:, p:p + h, p:p + w, :] = x
    win = sliding_window_view(xp, (kh, kh), axis=(1, 2))   # [B,H,W,C,kh,kh]
    np.copyto(cols.reshape(b, h, w, kh, kh, c), win.transpose(0, 1, 2, 4, 5, 3))
    return cols


def _conv2d_eval(n: Node, x, k):
    kh = k.shape[0]
    b, h, w, ci = x.shape
    co = k.shape[3]
    if kh == 1:
        y = x.reshape(-1, ci) @ k.reshape(ci, co)
    else:
        y = _conv_cols(x, kh) @ k.reshape(kh * kh * ci, co)
    return y.reshape(b, h, w, co)


def _conv2d_eval_out(n: Node, out, scratch, x, k):
    kh = k.shape[0]
    b, h, w, ci = x.shape
    co = k.shape[3]
    flat = out.reshape(b * h * w, co)
    if kh == 1:
        np.matmul(x.reshape(-1, ci), k.reshape(ci, co), out=flat)
    else:
        np.matmul(_conv_cols(x, kh, scratch), k.reshape(kh * kh * ci, co), out=flat)


def _conv2d_scratch(n: Node):
    x, k = n.inputs
    kh = k.shape[0]
    if kh == 1:
        return None
    b, h, w, c = x.shape
    p = kh // 2
    return {"xp": np.zeros((b, h + 2 * p, w + 2 * p, c)),
            "cols": np.empty((b * h * w, kh * kh * c))}


def _kernel_transpose(k: Node) -> Node:
    return permute(flip(k, (0, 1)), (0, 1, 3, 2))


def _conv2d_vjp(n: Node, g: Node):
    x, k = n.inputs
    return (conv2d(g, _kernel_transpose(k)), conv2d_wgrad(x, g, k.shape[0], k.shape[1]))


_op("conv2d", _conv2d_eval, _conv2d_vjp, _conv2d_eval_out, _conv2d_scratch)


def _wgrad_eval(n: Node, x, g):
    kh = n.attrs["kh"]
    b, h, w, ci = x.shape
    co = g.shape[3]
    gf = g.reshape(b * h * w, co)
    if kh == 1:
        dk = x.reshape(-1, ci).T @ gf
    else:
        dk = _conv_cols(x, kh).T @ gf
    return dk.reshape(kh, kh, ci, co)


def _wgrad_eval_out(n: Node, out, scratch, x, g):
    kh = n.attrs["kh"]
    b, h, w, ci = x.shape
    co = g.shape[3]
    gf = g.reshape(b * h * w, co)
    flat = out.reshape(kh * kh * ci, co)
    if kh == 1:
        np.matmul(x.reshape(-1, ci).T, gf, out=flat)
    else:
        cols = _conv_cols(x, kh, scratch)
        np.matmul(cols.T, gf, out=flat)


def _wgrad_scratch(n: Node):
    x = n.inputs[0]
    kh = n.attrs["kh"]
    if kh == 1:
        return None
    b, h, w, c = x.shape
    p = kh // 2
    return {"xp": np.zeros((b, h + 2 * p, w + 2 * p, c)),
            "cols": np.empty((b * h * w, kh * kh * c))}


def _wgrad_vjp(n: Node, c: Node):
    x, g = n.inputs
    return (conv2d(g, _kernel_transpose(c)), conv2d(x, c))


_op("conv2d_wgrad", _wgrad_eval, _wgrad_vjp, _wgrad_eval_out, _wgrad_scratch)


# ---------------------------------------------------------------------------
# evaluation


def _topo(outputs: Iterable[Node]) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(o, False) for o in outputs]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for inp in node.inputs:
            if inp.id not in seen:
                stack.append((inp, False))
    return order


def _bind(node: Node, bindings: dict[str, np.ndarray]) -> np.ndarray:
    name = node.attrs["name"]
    if bindings is None or name not in bindings:
        raise ValueError(f"unbound leaf '{name}'")
    arr = np.asarray(bindings[name], dtype=node.dtype)
    if arr.shape != node.shape:
        raise ValueError(f"leaf '{name}': expected shape {node.shape}, got {arr.shape}")
    return arr


def evaluate(outputs, bindings: dict[str, np.ndarray] | None = None):
    """Evaluate one node or a sequence of nodes under the given leaf bindings.

    Pure and deterministic; intermediate values are freed as soon as their
    last consumer has run.
    """
    single = isinstance(outputs, Node)
    outs = [outputs] if single else list(outputs)
    order = _topo(outs)
    remaining: dict[int, int] = {}
    for node in order:
        for inp in node.inputs:
            remaining[inp.id] = remaining.get(inp.id, 0) + 1
    pinned = {o.id for o in outs}
    vals: dict[int, np.ndarray] = {}
    for node in order:
        if node.op == "leaf":
            vals[node.id] = _bind(node, bindings)
        elif node.op == "const":
            vals[node.id] = node.attrs["value"]
        else:
            args = [vals[i.id] for i in node.inputs]
            vals[node.id] = np.asarray(_EVAL[node.op](node, *args))
            for inp in node.inputs:
                remaining[inp.id] -= 1
                if remaining[inp.id] == 0 and inp.id not in pinned and inp.op not in ("leaf", "const"):
                    del vals[inp.id]
    result = [vals[o.id] for o in outs]
    return result[0] if single else result


# ---------------------------------------------------------------------------
# differentiation


def grad(output: Node, wrt: Sequence[Node]) -> list[Node]:
    """Build gradient nodes of a scalar output w.r.t. the given nodes.

    The backward pass is emitted as ordinary graph nodes, so the results can
    be differentiated again (the R1 penalty path).  Nodes the output does not
    depend on get zero constants of matching shape.
    """
    if output.shape != ():
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    order = _topo([output])
    adjoint: dict[int, Node] = {output.id: const(1.0)}
    for node in reversed(order):
        g = adjoint.get(node.id)
        if g is None or node.op in ("leaf", "const"):
            continue
        if node.op not in _VJP:
            raise NotImplementedError(f"op '{node.op}' has no gradient rule")
        cots = _VJP[node.op](node, g)
        for inp, cot in zip(node.inputs, cots):
            if cot is None or inp.dtype != np.float64:
                continue
            prev = adjoint.get(inp.id)
            adjoint[inp.id] = cot if prev is None else add(prev, cot)
    return [adjoint.get(w.id, const(np.zeros(w.shape))) for w in wrt]


def float_leaves(output: Node) -> list[Node]:
    """All float64 leaves reachable from a node, in topological order."""
    return [n for n in _topo([output]) if n.op == "leaf" and n.dtype == np.float64]


def gradient(output: Node, bindings: dict[str, np.ndarray], wrt: Sequence[Node] | None = None) -> dict[str, np.ndarray]:
    """Evaluate d(output)/d(leaf) for every float leaf (or a chosen subset)."""
    leaves = list(wrt) if wrt is not None else float_leaves(output)
    nodes = grad(output, leaves)
    vals = evaluate(nodes, bindings)
    return {leaf.attrs["name"]: val for leaf, val in zip(leaves, vals)}


def grad_penalty(output: Node, wrt: Sequence[Node]) -> Node:
    """Squared Euclidean norm of the gradient of a scalar output.

    This is the inner quantity of the R1 regularizer; differentiating the
    returned node again gives second-order gradients.
    """
    total: Node | None = None
    for g in grad(output, wrt):
        term = reduce_sum(mul(g, g))
        total = term if total is None else add(total, term)
    assert total is not None
    return total


def second_order_gradient(output: Node, inner: Sequence[Node], outer: Sequence[Node],
                          bindings: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Value of ||d(output)/d(inner)||^2 and its gradients w.r.t. outer leaves."""
    penalty = grad_penalty(output, inner)
    nodes = grad(penalty, list(outer))
    vals = evaluate([penalty] + nodes, bindings)
    grads = {leaf.attrs["name"]: val for leaf, val in zip(outer, vals[1:])}
    return float(vals[0]), grads


# ---------------------------------------------------------------------------
# compiled graphs (persistent buffers; the training fast path)


class CompiledGraph:
    """Fixed evaluation plan with persistent per-node output buffers.

    Repeated `run` calls allocate nothing beyond what individual kernels
    allocate internally.  Returned arrays are the internal buffers: read or
    copy them before the next `run`.
    """

    def __init__(self, outputs: Sequence[Node]):
        self.outputs = list(outputs)
        self.order = _topo(self.outputs)
        self.leaves = [n for n in self.order if n.op == "leaf"]
        self._buffers: dict[int, np.ndarray] = {}
        self._scratch: dict[int, object] = {}
        for node in self.order:
            if node.op in ("leaf", "const") or node.op in _VIEW:
                continue
            self._buffers[node.id] = np.empty(node.shape)
            fn = _SCRATCH.get(node.op)
            if fn is not None:
                self._scratch[node.id] = fn(node)

    def run(self, bindings: dict[str, np.ndarray]) -> list[np.ndarray]:
        vals: dict[int, np.ndarray] = {}
        for node in self.order:
            if node.op == "leaf":
                vals[node.id] = _bind(node, bindings)
            elif node.op == "const":
                vals[node.id] = node.attrs["value"]
            elif node.op in _VIEW:
                args = [vals[i.id] for i in node.inputs]
                vals[node.id] = _EVAL[node.op](node, *args)
            else:
                args = [vals[i.id] for i in node.inputs]
                buf = self._buffers[node.id]
                fn = _EVAL_OUT.get(node.op)
                if fn is not None:
                    fn(node, buf, self._scratch.get(node.id), *args)
                else:
                    buf[...] = _EVAL[node.op](node, *args)
                vals[node.id] = buf
        return [vals[o.id] for o in self.outputs]
