"""Tape-based reverse-mode autodiff over dense float64 arrays.

Values are plain numpy arrays; differentiable computations run through
:class:`Var` handles recorded on a :class:`Tape` (a Wengert list).  Every
op checks its output for NaN/Inf and raises :class:`NonFiniteError`, so a
diverging optimization surfaces immediately instead of poisoning later
iterations.

Conventions the rest of the package (and the test suite) relies on:

* everything is float64, row-major; images are laid out [B, H, W, C]
* ReLU and leaky-ReLU take sub-gradient 0 at exactly 0
* clip passes gradient only strictly inside the interval (0 at the edges)
* gradients accumulate additively at fan-out, in tape order, so repeated
  runs on identical inputs are bit-identical
* a Tape supports exactly one backward pass
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for tape and op failures."""


class ShapeError(AutodiffError):
    """Operands do not compose."""


class NonFiniteError(AutodiffError):
    """An op produced NaN or Inf."""


def _finite(name: str, data: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{name} produced non-finite values")
    return data


def _quiet(fn, *args):
    """Evaluate suppressing numpy warnings; _finite turns bad values into errors."""
    with np.errstate(all="ignore"):
        return fn(*args)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tape:
    """Append-only op record; inputs of a node always precede it."""

    def __init__(self) -> None:
        # node = (parent indices, backward closure); closure is None for leaves
        self._nodes: list[tuple[tuple[int, ...], Callable | None]] = []
        self._spent = False
        self._inputs: list[Var] = []
        self._outputs: list[Var] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, data) -> "Var":
        """New differentiable leaf holding `data`."""
        data = np.asarray(data, dtype=np.float64)
        _finite("leaf", data)
        self._nodes.append(((), None))
        return Var(self, len(self._nodes) - 1, data)

    def const(self, data) -> "Var":
        """Constant value: participates in ops but receives no gradient."""
        return Var(self, -1, np.asarray(data, dtype=np.float64))

    def _record(self, parents: Sequence["Var"], backward: Callable, data: np.ndarray) -> "Var":
        idxs = tuple(p.idx for p in parents)
        if all(i < 0 for i in idxs):
            return Var(self, -1, data)  # purely constant subgraph
        self._nodes.append((idxs, backward))
        return Var(self, len(self._nodes) - 1, data)


class Var:
    """Handle to a value recorded on a tape; idx < 0 marks a constant."""

    __slots__ = ("tape", "idx", "data")

    def __init__(self, tape: Tape, idx: int, data: np.ndarray):
        self.tape = tape
        self.idx = idx
        self.data = data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.data.shape}, const={self.idx < 0})"

    # operator sugar; non-Var operands become constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self.tape.const(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(self.tape.const(other), self)

    def __neg__(self):
        return neg(self)

    def __abs__(self):
        return absolute(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def clip(self, lo, hi):
        return clip(self, lo, hi)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _pair(a, b) -> tuple[Var, Var, Tape]:
    if isinstance(a, Var):
        tape = a.tape
        b = b if isinstance(b, Var) else tape.const(b)
    else:
        tape = b.tape
        a = tape.const(a)
    if a.tape is not b.tape:
        raise AutodiffError("operands recorded on different tapes")
    return a, b, tape


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Var:
    a, b, tape = _pair(a, b)
    out = _finite("add", a.data + b.data)
    sa, sb = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return tape._record((a, b), backward, out)


def sub(a, b) -> Var:
    a, b, tape = _pair(a, b)
    out = _finite("sub", a.data - b.data)
    sa, sb = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return tape._record((a, b), backward, out)


def mul(a, b) -> Var:
    a, b, tape = _pair(a, b)
    out = _finite("mul", a.data * b.data)
    da, db = a.data, b.data

    def backward(g):
        return _unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)

    return tape._record((a, b), backward, out)


def div(a, b) -> Var:
    a, b, tape = _pair(a, b)
    out = _finite("div", _quiet(np.divide, a.data, b.data))
    da, db = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g / db, da.shape),
            _unbroadcast(-g * da / (db * db), db.shape),
        )

    return tape._record((a, b), backward, out)


def neg(a: Var) -> Var:
    def backward(g):
        return (-g,)

    return a.tape._record((a,), backward, -a.data)


def absolute(a: Var) -> Var:
    out = np.abs(a.data)
    s = np.sign(a.data)  # sign(0) = 0, consistent with the ReLU convention

    def backward(g):
        return (g * s,)

    return a.tape._record((a,), backward, out)


def exp(a: Var) -> Var:
    out = _finite("exp", _quiet(np.exp, a.data))

    def backward(g):
        return (g * out,)

    return a.tape._record((a,), backward, out)


def log(a: Var) -> Var:
    out = _finite("log", _quiet(np.log, a.data))
    da = a.data

    def backward(g):
        return (g / da,)

    return a.tape._record((a,), backward, out)


def sqrt(a: Var) -> Var:
    out = _finite("sqrt", _quiet(np.sqrt, a.data))

    def backward(g):
        return (g / (2.0 * out),)

    return a.tape._record((a,), backward, out)


def sin(a: Var) -> Var:
    out = np.sin(a.data)
    da = a.data

    def backward(g):
        return (g * np.cos(da),)

    return a.tape._record((a,), backward, out)


def cos(a: Var) -> Var:
    out = np.cos(a.data)
    da = a.data

    def backward(g):
        return (-g * np.sin(da),)

    return a.tape._record((a,), backward, out)


def tanh(a: Var) -> Var:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return a.tape._record((a,), backward, out)


def sigmoid(a: Var) -> Var:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return a.tape._record((a,), backward, out)


def relu(a: Var) -> Var:
    mask = (a.data > 0).astype(np.float64)

    def backward(g):
        return (g * mask,)

    return a.tape._record((a,), backward, a.data * mask)


def leaky_relu(a: Var, alpha: float = 0.2) -> Var:
    slope = np.where(a.data > 0, 1.0, np.where(a.data < 0, alpha, 0.0))

    def backward(g):
        return (g * slope,)

    return a.tape._record((a,), backward, np.where(a.data > 0, a.data, alpha * a.data))


def clip(a: Var, lo: float, hi: float) -> Var:
    out = np.clip(a.data, lo, hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(np.float64)

    def backward(g):
        return (g * inside,)

    return a.tape._record((a,), backward, out)


# ---------------------------------------------------------------------------
# shape and reduction ops


def reshape(a: Var, shape) -> Var:
    shape = tuple(int(n) for n in shape)
    old = a.data.shape
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"cannot reshape {old} to {shape}")
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return a.tape._record((a,), backward, out)


def sum_(a: Var, axis=None, keepdims: bool = False) -> Var:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    s = a.data.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, s).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, s).copy(),)

    return a.tape._record((a,), backward, out)


def mean_(a: Var, axis=None, keepdims: bool = False) -> Var:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[i] for i in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b) -> Var:
    a, b, tape = _pair(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape} do not compose")
    out = _finite("matmul", a.data @ b.data)
    da, db = a.data, b.data
    need_a, need_b = a.idx >= 0, b.idx >= 0

    def backward(g):
        return (
            g @ db.T if need_a else None,
            da.T @ g if need_b else None,
        )

    return tape._record((a, b), backward, out)


# ---------------------------------------------------------------------------
# 2-D convolution: im2col + matmul, with the exact adjoint as transpose


def _conv_geom(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if padding == "same":
        ho, wo = -(-h // stride), -(-w // stride)
        ph = max((ho - 1) * stride + kh - h, 0)
        pw = max((wo - 1) * stride + kw - w, 0)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ShapeError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        ph = pw = 0
    else:
        raise ShapeError(f"unknown padding {padding!r}")
    return ho, wo, (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)


def _patch_index(ho: int, wo: int, kh: int, kw: int, stride: int):
    ri = (np.arange(ho) * stride)[:, None] + np.arange(kh)[None, :]  # [ho, kh]
    ci = (np.arange(wo) * stride)[:, None] + np.arange(kw)[None, :]  # [wo, kw]
    return ri[:, :, None, None], ci[None, None, :, :]


def _im2col(xp: np.ndarray, ho: int, wo: int, kh: int, kw: int, stride: int) -> np.ndarray:
    """Gather patches of padded input into [B*ho*wo, kh*kw*c]."""
    ri, ci = _patch_index(ho, wo, kh, kw, stride)
    g = xp[:, ri, ci, :]  # [B, ho, kh, wo, kw, c]
    b, c = xp.shape[0], xp.shape[3]
    return g.transpose(0, 1, 3, 2, 4, 5).reshape(b * ho * wo, kh * kw * c)


def _col2im(dcols: np.ndarray, b: int, hp: int, wp: int, c: int,
            ho: int, wo: int, kh: int, kw: int, stride: int) -> np.ndarray:
    """Scatter-add [B*ho*wo, kh*kw*c] columns back onto the padded grid."""
    ri, ci = _patch_index(ho, wo, kh, kw, stride)
    d = dcols.reshape(b, ho, wo, kh, kw, c).transpose(0, 1, 3, 2, 4, 5)
    out = np.zeros((b, hp, wp, c), dtype=np.float64)
    np.add.at(out, (slice(None), ri, ci), d)
    return out


def _pad_input(x: np.ndarray, pads) -> np.ndarray:
    pt, pb, pl, pr = pads
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def conv2d(x, kernel, stride: int = 1, padding: str = "same") -> Var:
    """Batched cross-correlation of x [B,H,W,Cin] with kernel [kh,kw,Cin,Cout]."""
    x, kernel, tape = _pair(x, kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects x [B,H,W,Cin] and kernel [kh,kw,Cin,Cout]")
    b, h, w, cin = x.data.shape
    kh, kw, kcin, cout = kernel.data.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, got {cin}")
    ho, wo, pads = _conv_geom(h, w, kh, kw, stride, padding)
    xp = _pad_input(x.data, pads)
    cols = _im2col(xp, ho, wo, kh, kw, stride)
    kflat = kernel.data.reshape(kh * kw * cin, cout)
    out = _finite("conv2d", (cols @ kflat).reshape(b, ho, wo, cout))
    hp, wp = xp.shape[1], xp.shape[2]
    need_x, need_k = x.idx >= 0, kernel.idx >= 0

    def backward(g):
        gflat = g.reshape(b * ho * wo, cout)
        gx = gk = None
        if need_k:
            gk = (cols.T @ gflat).reshape(kh, kw, cin, cout)
        if need_x:
            gxp = _col2im(gflat @ kflat.T, b, hp, wp, cin, ho, wo, kh, kw, stride)
            pt, _, pl, _ = pads
            gx = gxp[:, pt:pt + h, pl:pl + w, :]
        return gx, gk

    return tape._record((x, kernel), backward, out)


def conv_transpose2d(x, kernel, stride: int = 1, output_shape=None) -> Var:
    """Adjoint of same-padded conv2d: <conv2d(v, k), x> == <v, conv_transpose2d(x, k)>.

    x is [B,h,w,Cin]; kernel is [kh,kw,Cout,Cin]; the result is
    [B,H,W,Cout] with (H, W) = output_shape or (h*stride, w*stride).
    """
    x, kernel, tape = _pair(x, kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv_transpose2d expects x [B,h,w,Cin] and kernel [kh,kw,Cout,Cin]")
    b, h, w, cin = x.data.shape
    kh, kw, cout, kcin = kernel.data.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, got {cin}")
    hh, ww = output_shape if output_shape is not None else (h * stride, w * stride)
    ho, wo, pads = _conv_geom(hh, ww, kh, kw, stride, "same")
    if (ho, wo) != (h, w):
        raise ShapeError(f"output_shape {(hh, ww)} is not reachable from input {(h, w)} at stride {stride}")
    hp = hh + pads[0] + pads[1]
    wp = ww + pads[2] + pads[3]
    kflat = kernel.data.reshape(kh * kw * cout, cin)
    xflat = x.data.reshape(b * h * w, cin)
    full = _col2im(xflat @ kflat.T, b, hp, wp, cout, ho, wo, kh, kw, stride)
    pt, _, pl, _ = pads
    out = _finite("conv_transpose2d", full[:, pt:pt + hh, pl:pl + ww, :])
    need_x, need_k = x.idx >= 0, kernel.idx >= 0

    def backward(g):
        gp = _pad_input(g, pads)
        cols = _im2col(gp, ho, wo, kh, kw, stride)
        gx = gk = None
        if need_x:
            gx = (cols @ kflat).reshape(b, h, w, cin)
        if need_k:
            gk = (cols.T @ xflat).reshape(kh, kw, cout, cin)
        return gx, gk

    return tape._record((x, kernel), backward, out)


# ---------------------------------------------------------------------------
# running a graph and pulling gradients back


class Grads:
    """Result of one backward pass; unreached leaves read as zero."""

    def __init__(self, tape: Tape, table: dict[int, np.ndarray]):
        self._tape = tape
        self._table = table

    def wrt(self, var: Var) -> np.ndarray:
        if var.tape is not self._tape:
            raise AutodiffError("var belongs to a different tape")
        if var.idx < 0:
            raise AutodiffError("constants carry no gradient")
        g = self._table.get(var.idx)
        return np.zeros_like(var.data) if g is None else g


def backward(out: Var, seed=None) -> Grads:
    """Reverse sweep from `out`; one pass per tape, fan-out sums in tape order."""
    tape = out.tape
    if tape._spent:
        raise AutodiffError("backward already ran on this tape")
    if out.idx < 0:
        raise AutodiffError("output is constant; nothing to differentiate")
    tape._spent = True
    seed = np.ones_like(out.data) if seed is None else np.asarray(seed, dtype=np.float64)
    if seed.shape != out.data.shape:
        raise ShapeError(f"seed shape {seed.shape} != output shape {out.data.shape}")
    table: dict[int, np.ndarray] = {out.idx: seed}
    nodes = tape._nodes
    for idx in range(out.idx, -1, -1):
        g = table.get(idx)
        if g is None:
            continue
        parents, bw = nodes[idx]
        if bw is None:
            continue  # leaf: keep its gradient
        del table[idx]
        for pidx, pg in zip(parents, bw(g)):
            if pidx < 0 or pg is None:
                continue
            acc = table.get(pidx)
            table[pidx] = pg if acc is None else acc + pg
    return Grads(tape, table)


def tape_forward(graph: Callable, inputs: Sequence) -> tuple[list[np.ndarray], Tape]:
    """Run `graph(*leaves)` on a fresh tape; returns output arrays and the tape."""
    tape = Tape()
    leaves = [tape.leaf(x) for x in inputs]
    out = graph(*leaves)
    outs = list(out) if isinstance(out, (tuple, list)) else [out]
    tape._inputs = leaves
    tape._outputs = outs
    return [o.data for o in outs], tape


def tape_backward(tape: Tape, seed) -> Grads:
    """Backward through a tape produced by tape_forward (single output)."""
    if len(tape._outputs) != 1:
        raise AutodiffError("tape_backward expects exactly one recorded output")
    return backward(tape._outputs[0], seed)


def grad_check(graph: Callable, inputs: Sequence, h: float = 1e-5) -> float:
    """Max relative error of tape gradients vs central differences.

    `graph` must be scalar-valued; error per coordinate is
    |analytic - numeric| / max(1, |analytic|).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    vals, tape = tape_forward(graph, inputs)
    if len(vals) != 1 or vals[0].shape != ():
        raise ShapeError("grad_check needs a scalar-valued graph")
    grads = tape_backward(tape, np.asarray(1.0))

    def value_at(pos: int, flat_i: int, delta: float) -> float:
        probe = [x.copy() for x in inputs]
        probe[pos].flat[flat_i] += delta
        v, _ = tape_forward(graph, probe)
        return float(v[0])

    worst = 0.0
    for pos, x in enumerate(inputs):
        analytic = grads.wrt(tape._inputs[pos])
        for i in range(x.size):
            numeric = (value_at(pos, i, h) - value_at(pos, i, -h)) / (2.0 * h)
            a = float(analytic.flat[i])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
