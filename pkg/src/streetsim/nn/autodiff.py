"""Reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray and, while grad recording is enabled, remembers the
operation that produced it. `backward()` on a scalar walks the recorded tape
in reverse topological order. Layers that dominate the step budget (linear,
conv2d, lstm_step, the losses) are single fused tape nodes with hand-derived
backward passes; everything else composes from primitives.

Dtype follows the input arrays: float32 for training, float64 for gradient
verification. Grad recording is a per-thread switch; a module-level switch makes every op
assert finiteness of its result.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np


class ShapeMismatch(Exception):
    pass


class NumericalError(Exception):
    """An op produced NaN or Inf while finite checking was on."""


# recording state is per-thread: actor threads run eval forwards under
# no_grad while the learner thread records its tape
_tls = threading.local()
_check_finite = True


@contextmanager
def no_grad():
    """Disable tape recording in the calling thread (actor forwards, evaluation)."""
    prev = getattr(_tls, "grad_enabled", True)
    _tls.grad_enabled = False
    try:
        yield
    finally:
        _tls.grad_enabled = prev


def grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


def set_check_finite(on: bool) -> bool:
    global _check_finite
    prev = _check_finite
    _check_finite = on
    return prev


def _checked(data: np.ndarray, op: str) -> np.ndarray:
    if _check_finite and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values out of op {op!r}")
    return data


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = "leaf"):
        if isinstance(data, Tensor):
            raise TypeError("Tensor of Tensor; pass the array")
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = _parents
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, grad={self.requires_grad})"

    def _accum(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, op="detach")

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeMismatch("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, children_done = stack.pop()
            if children_done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def _make(data, parents, op, backward):
    """Wrap an op result; records the tape node only when needed."""
    req = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(_checked(data, op), requires_grad=req, _parents=parents if req else (), op=op)
    if req:
        out._backward = backward(out)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(out):
        def bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad, b.shape))

        return bw

    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(out):
        def bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accum(-_unbroadcast(out.grad, b.shape))

        return bw

    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(out):
        def bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad * a.data, b.shape))

        return bw

    return _make(a.data * b.data, (a, b), "mul", backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(out):
        def bw():
            if a.requires_grad:
                a._accum(-out.grad)

        return bw

    return _make(-a.data, (a,), "neg", backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def backward(out):
        def bw():
            if a.requires_grad:
                a._accum(out.grad * s)

        return bw

    return _make(a.data * s, (a,), "scale", backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")

    def backward(out):
        def bw():
            if a.requires_grad:
                a._accum(out.grad @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ out.grad)

        return bw

    return _make(a.data @ b.data, (a, b), "matmul", backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def backward(out):
        def bw():
            if a.requires_grad:
                a._accum(out.grad * (1.0 - out.data * out.data))

        return bw

    return _make(y, (a,), "tanh", backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid_np(a.data)

    def backward(out):
        def bw():
            if a.requires_grad:
                a._accum(out.grad * out.data * (1.0 - out.data))

        return bw

    return _make(y, (a,), "sigmoid", backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid exp overflow at float32
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)

    def backward(out):
        def bw():
            if a.requires_grad:
                a._accum(out.grad * (a.data > 0))

        return bw

    return _make(np.maximum(a.data, 0.0), (a,), "relu", backward)


def tsum(a) -> Tensor:
    """Full reduction to a scalar."""
    a = as_tensor(a)

    def backward(out):
        def bw():
            if a.requires_grad:
                a._accum(np.full_like(a.data, float(out.grad)))

        return bw

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), "sum", backward)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(out):
        def bw():
            pieces = np.split(out.grad, splits, axis=axis)
            for t, g in zip(tensors, pieces):
                if t.requires_grad:
                    t._accum(g)

        return bw

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", backward)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch("slice_cols needs a 2-d tensor")

    def backward(out):
        def bw():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                g[:, start:stop] = out.grad
                a._accum(g)

        return bw

    return _make(a.data[:, start:stop].copy(), (a,), "slice_cols", backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward(out):
        def bw():
            if a.requires_grad:
                a._accum(out.grad.reshape(a.shape))

        return bw

    return _make(a.data.reshape(shape), (a,), "reshape", backward)


def dropout(a, p: float, train_mode: bool, rng) -> Tensor:
    """Inverted dropout: train zeroes with probability p and rescales, eval is identity."""
    a = as_tensor(a)
    if not (0.0 <= p < 1.0):
        raise ShapeMismatch(f"dropout probability {p} outside [0, 1)")
    if not train_mode or p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)

    def backward(out):
        def bw():
            if a.requires_grad:
                a._accum(out.grad * mask)

        return bw

    return _make(a.data * mask, (a,), "dropout", backward)


def linear(x, w, b) -> Tensor:
    """Affine map x @ w + b as one tape node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"linear {x.shape} @ {w.shape} + {b.shape}")

    def backward(out):
        def bw():
            if x.requires_grad:
                x._accum(out.grad @ w.data.T)
            if w.requires_grad:
                w._accum(x.data.T @ out.grad)
            if b.requires_grad:
                b._accum(out.grad.sum(axis=0))

        return bw

    return _make(x.data @ w.data + b.data, (x, w, b), "linear", backward)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    b, h, w, c = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = np.empty((b, oh, ow, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = x[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
    return cols.reshape(b * oh * ow, kh * kw * c)


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int) -> np.ndarray:
    b, h, w, c = x_shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    d6 = dcols.reshape(b, oh, ow, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += d6[:, :, :, i, j, :]
    return dx


def conv2d(x, w, b, stride: int) -> Tensor:
    """VALID cross-correlation; x [B,H,W,C], w [KH,KW,C,F], b [F] -> [B,OH,OW,F]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d needs 4-d input and kernel, got {x.shape}, {w.shape}")
    bsz, h, width, c = x.shape
    kh, kw, kc, f = w.shape
    if kc != c:
        raise ShapeMismatch(f"conv2d channels: input {c}, kernel {kc}")
    if b.shape != (f,):
        raise ShapeMismatch(f"conv2d bias {b.shape} for {f} maps")
    if stride < 1 or h < kh or width < kw:
        raise ShapeMismatch(f"conv2d kernel {kh}x{kw} stride {stride} on {h}x{width}")
    oh = (h - kh) // stride + 1
    ow = (width - kw) // stride + 1
    cols = _im2col(x.data, kh, kw, stride)
    w_mat = w.data.reshape(kh * kw * c, f)
    out_data = (cols @ w_mat + b.data).reshape(bsz, oh, ow, f)

    def backward(out):
        def bw():
            dout = out.grad.reshape(bsz * oh * ow, f)
            if w.requires_grad:
                w._accum((cols.T @ dout).reshape(w.shape))
            if b.requires_grad:
                b._accum(dout.sum(axis=0))
            if x.requires_grad:
                x._accum(_col2im(dout @ w_mat.T, x.shape, kh, kw, stride))

        return bw

    return _make(out_data, (x, w, b), "conv2d", backward)


def lstm_step(x, h, c, wx, wh, b):
    """One LSTM step as a fused tape node.

    Gate layout along the last axis of wx/wh/b: input, forget, candidate,
    output. Returns (new_h, new_c).
    """
    x, h, c, wx, wh, b = (as_tensor(t) for t in (x, h, c, wx, wh, b))
    bsz, _ = x.shape
    units = h.shape[1]
    if wx.shape != (x.shape[1], 4 * units) or wh.shape != (units, 4 * units) or b.shape != (4 * units,):
        raise ShapeMismatch(
            f"lstm_step shapes: x {x.shape}, h {h.shape}, wx {wx.shape}, wh {wh.shape}, b {b.shape}"
        )
    if c.shape != h.shape:
        raise ShapeMismatch(f"lstm_step state: h {h.shape} vs c {c.shape}")

    gates = x.data @ wx.data + h.data @ wh.data + b.data
    i = _sigmoid_np(gates[:, :units])
    f = _sigmoid_np(gates[:, units : 2 * units])
    g = np.tanh(gates[:, 2 * units : 3 * units])
    o = _sigmoid_np(gates[:, 3 * units :])
    c_new = f * c.data + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c

    parents = (x, h, c, wx, wh, b)
    req = grad_enabled() and any(p.requires_grad for p in parents)
    out_h = Tensor(_checked(h_new, "lstm_step"), requires_grad=req, _parents=parents if req else (), op="lstm_step.h")
    out_c = Tensor(_checked(c_new, "lstm_step"), requires_grad=req, _parents=(out_h,) if req else (), op="lstm_step.c")

    if req:
        # out_c depends on out_h only to order the tape: its backward stashes
        # the incoming cell gradient, then the single fused backward on out_h
        # (topologically earlier, so processed later) consumes both.
        _dc_holder = [None]

        def bw_h():
            dh = out_h.grad
            dc_direct = _dc_holder[0]
            do = dh * tanh_c
            dc_total = dh * o * (1.0 - tanh_c * tanh_c)
            if dc_direct is not None:
                dc_total = dc_total + dc_direct
            di = dc_total * g
            df = dc_total * c.data
            dg = dc_total * i
            dc_prev = dc_total * f
            dgates = np.concatenate(
                [
                    di * i * (1.0 - i),
                    df * f * (1.0 - f),
                    dg * (1.0 - g * g),
                    do * o * (1.0 - o),
                ],
                axis=1,
            )
            if x.requires_grad:
                x._accum(dgates @ wx.data.T)
            if h.requires_grad:
                h._accum(dgates @ wh.data.T)
            if c.requires_grad:
                c._accum(dc_prev)
            if wx.requires_grad:
                wx._accum(x.data.T @ dgates)
            if wh.requires_grad:
                wh._accum(h.data.T @ dgates)
            if b.requires_grad:
                b._accum(dgates.sum(axis=0))

        def bw_c():
            _dc_holder[0] = out_c.grad
            if out_h.grad is None:
                # cell used downstream but hidden not: still fire the fused node
                out_h.grad = np.zeros_like(h_new)

        out_h._backward = bw_h
        out_c._backward = bw_c
    return out_h, out_c


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, target_index) -> Tensor:
    """Per-row cross-entropy -log p[target]; returns a [B] tensor.

    Stabilized log-sum-exp; gradient is softmax(logits) minus the one-hot
    target.
    """
    logits = as_tensor(logits)
    targets = np.asarray(target_index, dtype=np.int64).reshape(-1)
    bsz = logits.shape[0]
    if targets.shape[0] != bsz:
        raise ShapeMismatch(f"softmax_xent: {bsz} rows, {targets.shape[0]} targets")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = lse - z[np.arange(bsz), targets]

    def backward(out):
        def bw():
            if logits.requires_grad:
                p = softmax_np(logits.data)
                p[np.arange(bsz), targets] -= 1.0
                logits._accum(p * out.grad[:, None])

        return bw

    return _make(loss, (logits,), "softmax_xent", backward)


def softmax_entropy(logits) -> Tensor:
    """Per-row entropy of softmax(logits); returns a [B] tensor."""
    logits = as_tensor(logits)
    p = softmax_np(logits.data)
    logp = np.log(np.maximum(p, 1e-30))
    ent = -(p * logp).sum(axis=1)

    def backward(out):
        def bw():
            if logits.requires_grad:
                # dH/dz_j = -p_j (log p_j + H)
                grad = -p * (logp + ent[:, None])
                logits._accum(grad * out.grad[:, None])

        return bw

    return _make(ent, (logits,), "softmax_entropy", backward)
