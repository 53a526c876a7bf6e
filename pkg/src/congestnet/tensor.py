"""A small deterministic reverse-mode autodiff engine on numpy arrays.

Tensors are dense, channel-last (H, W, C) for rasters, and default to
float32.  Every op builds its backward closure eagerly, so a forward pass
leaves behind a DAG that :meth:`Tensor.backward` walks in exact reverse
topological order.  Reductions (loss, pooling, bias sums) accumulate in
float64 and cast back.

Only the handful of primitives the congestion network needs are provided:
conv2d, linear, relu, sigmoid, channel concat/slice, global average pool,
mse and a few scalar helpers.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, NumericError

_default_dtype = np.float32
_grad_enabled = True
_relu_trace: list | None = None


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with.

    Gradient checks run under ``precision(np.float64)`` so central
    differences measure truncation error rather than float32 rounding.
    """
    global _default_dtype
    prev, _default_dtype = _default_dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad():
    """Forward-only mode: ops compute identical values but record nothing."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def trace_relu():
    """Collect the sign pattern of every relu input evaluated inside the block."""
    global _relu_trace
    prev, _relu_trace = _relu_trace, []
    try:
        yield _relu_trace
    finally:
        _relu_trace = prev


def default_dtype():
    return _default_dtype


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, value, requires_grad: bool = False, dtype=None):
        arr = np.asarray(value)
        want = dtype or (arr.dtype.type if arr.dtype in (np.float32, np.float64) else _default_dtype)
        self.value = np.ascontiguousarray(arr, dtype=want)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.value) if self.requires_grad else None
        self.parents: tuple = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.value

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0)

    def detach(self, requires_grad=False):
        """Fresh leaf sharing no graph history (the value is copied)."""
        return Tensor(self.value.copy(), requires_grad=requires_grad)

    def backward(self, grad=None):
        """Backpropagate from this tensor into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.value.size != 1:
                raise ConfigError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.value)
        else:
            grad = np.asarray(grad, dtype=self.value.dtype)
            if grad.shape != self.shape:
                raise ConfigError(f"seed gradient shape {grad.shape} does not match tensor shape {self.shape}")
        order = _topo_order(self)
        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                if node.requires_grad:
                    node.grad += g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


def _result(value, op, parents: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(value, op)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.parents = ()
        out.backward_fn = None
    return out


# ---------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, k: int, stride: int):
    hp, wp, c = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    s0, s1, s2 = xp.strides
    view = as_strided(xp, (ho, wo, k, k, c), (s0 * stride, s1 * stride, s0, s1, s2), writeable=False)
    return view.reshape(ho * wo, k * k * c), ho, wo


def _conv_input_grad(g: np.ndarray, kv: np.ndarray, in_shape, pad: int, stride: int) -> np.ndarray:
    """Gradient w.r.t. the conv input as a stride-1 correlation of the
    stride-dilated, padded output gradient with the flipped kernel."""
    k, cin, cout = kv.shape[0], kv.shape[2], kv.shape[3]
    h, w = in_shape[0], in_shape[1]
    ho, wo = g.shape[0], g.shape[1]
    if stride > 1:
        gd = np.zeros(((ho - 1) * stride + 1, (wo - 1) * stride + 1, cout), dtype=g.dtype)
        gd[::stride, ::stride] = g
    else:
        gd = g
    top = k - 1 - pad
    gp = np.pad(gd, ((top, h + pad - gd.shape[0]), (top, w + pad - gd.shape[1]), (0, 0)))
    cols, _, _ = _im2col(gp, k, 1)
    kf = kv[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
    return (cols @ kf).reshape(h, w, cin)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same", stride: int = 1) -> Tensor:
    """Cross-correlate an (H, W, Cin) raster with a (k, k, Cin, Cout) kernel.

    ``same`` pads k//2 zeros on each side (odd k only) so stride 1 keeps
    H x W; ``valid`` pads nothing.  Stride s gives ceil-style halving under
    ``same`` padding.
    """
    xv, kv, bv = x.value, kernel.value, bias.value
    if xv.ndim != 3 or kv.ndim != 4 or kv.shape[0] != kv.shape[1]:
        raise ConfigError(f"conv2d expects input (H,W,Cin) and kernel (k,k,Cin,Cout); got {xv.shape} and {kv.shape}")
    k, cin, cout = kv.shape[0], kv.shape[2], kv.shape[3]
    if xv.shape[2] != cin:
        raise ConfigError(f"conv2d channel mismatch: input {xv.shape} vs kernel {kv.shape}")
    if bv.shape != (cout,):
        raise ConfigError(f"conv2d bias shape {bv.shape} does not match kernel {kv.shape}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        if k % 2 == 0:
            raise ConfigError(f"'same' padding needs an odd kernel, got {k}")
        pad = k // 2
    elif padding == "valid":
        pad = 0
        if xv.shape[0] < k or xv.shape[1] < k:
            raise ConfigError(f"'valid' conv kernel {kv.shape} larger than input {xv.shape}")
    else:
        raise ConfigError(f"unknown padding {padding!r}")

    xp = np.pad(xv, ((pad, pad), (pad, pad), (0, 0))) if pad else xv
    cols, ho, wo = _im2col(xp, k, stride)
    k2 = kv.reshape(k * k * cin, cout)
    out = (cols @ k2 + bv).reshape(ho, wo, cout)

    def backward(g):
        g2 = g.reshape(ho * wo, cout)
        dx = dk = db = None
        if kernel.requires_grad:
            dk = (cols.T @ g2).reshape(kv.shape)
        if bias.requires_grad:
            db = g2.sum(axis=0, dtype=np.float64).astype(g.dtype)
        if x.requires_grad:
            dx = _conv_input_grad(g, kv, xv.shape, pad, stride)
        return dx, dk, db

    return _result(out, "conv2d", (x, kernel, bias), backward)


# ---------------------------------------------------------------- elementwise

def relu(x: Tensor) -> Tensor:
    xv = x.value
    pos = xv > 0
    if _relu_trace is not None:
        _relu_trace.append(pos.copy())
    out = np.where(pos, xv, xv.dtype.type(0))

    def backward(g):
        return (np.where(pos, g, g.dtype.type(0)),)

    return _result(out, "relu", (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    xv = x.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xv))
    out = np.where(xv >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xv.dtype)
    # derivative from the input, not from the rounded output: out * (1 - out)
    # is exactly zero in float32 once |x| > 17, which freezes saturated errors
    deriv = (e / ((1.0 + e) * (1.0 + e))).astype(xv.dtype)

    def backward(g):
        return (g * deriv,)

    return _result(out, "sigmoid", (x,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return g * bv, g * av

    return _result(av * bv, "mul", (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return _result(a.value + b.value, "add", (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.value.dtype.type(c)

    def backward(g):
        return (g * c,)

    return _result(x.value * c, "scale", (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.value.sum(dtype=np.float64), dtype=x.value.dtype)

    def backward(g):
        return (np.full(x.shape, g, dtype=x.value.dtype),)

    return _result(out, "sum", (x,), backward)


def mean_of(terms: Sequence[Tensor]) -> Tensor:
    """Average of equally shaped tensors, summed in list order."""
    if not terms:
        raise ConfigError("mean_of needs at least one term")
    n = len(terms)
    acc = np.zeros(terms[0].shape, dtype=np.float64)
    for t in terms:
        if t.shape != terms[0].shape:
            raise ConfigError(f"mean_of shape mismatch: {t.shape} vs {terms[0].shape}")
        acc += t.value
    out = (acc / n).astype(terms[0].value.dtype)

    def backward(g):
        share = g / g.dtype.type(n)
        return tuple(share for _ in terms)

    return _result(out, "mean_of", tuple(terms), backward)


# ---------------------------------------------------------------- structure

def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Stack rasters along the channel axis, preserving list order."""
    if not inputs:
        raise ConfigError("concat_channels needs at least one input")
    spatial = inputs[0].shape[:-1]
    for t in inputs:
        if t.value.ndim != 3 or t.shape[:-1] != spatial:
            raise ConfigError(f"concat_channels spatial mismatch: {t.shape} vs {inputs[0].shape}")
    widths = [t.shape[-1] for t in inputs]
    bounds = np.cumsum([0] + widths)
    out = np.concatenate([t.value for t in inputs], axis=-1)

    def backward(g):
        return tuple(g[:, :, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return _result(out, "concat", tuple(inputs), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.value[:, :, start:stop].copy()

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, start:stop] = g
        return (full,)

    return _result(out, "slice", (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(H, W, C) -> (C,) mean over the spatial grid."""
    if x.value.ndim != 3:
        raise ConfigError(f"global_avg_pool expects (H,W,C), got {x.shape}")
    h, w, _ = x.shape
    n = h * w
    out = (x.value.sum(axis=(0, 1), dtype=np.float64) / n).astype(x.value.dtype)

    def backward(g):
        return (np.broadcast_to(g / g.dtype.type(n), x.shape).copy(),)

    return _result(out, "gap", (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """out = x @ weight + bias for a vector x of length N and weight (N, M)."""
    xv, wv, bv = x.value, weight.value, bias.value
    if xv.ndim != 1 or wv.ndim != 2 or xv.shape[0] != wv.shape[0]:
        raise ConfigError(f"linear shape mismatch: input {xv.shape} vs weight {wv.shape}")
    if bv.shape != (wv.shape[1],):
        raise ConfigError(f"linear bias shape {bv.shape} does not match weight {wv.shape}")
    out = xv @ wv + bv

    def backward(g):
        return wv @ g, np.outer(xv, g), g

    return _result(out, "linear", (x, weight, bias), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over T of the squared error; target is treated as a constant."""
    tv = target.value if isinstance(target, Tensor) else np.asarray(target)
    pv = pred.value
    if pv.ndim != 1 or tv.shape != pv.shape or pv.shape[0] < 1:
        raise ConfigError(f"mse_loss length mismatch: pred {pv.shape} vs target {tv.shape}")
    diff = pv.astype(np.float64) - tv.astype(np.float64)
    t = pv.shape[0]
    out = np.asarray((diff * diff).sum() / t, dtype=pv.dtype)

    def backward(g):
        return ((2.0 * diff / t * g).astype(pv.dtype),)

    return _result(out, "mse", (pred,), backward)

