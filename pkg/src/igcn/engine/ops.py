"""Differentiable operations used by the image-to-graph network.

Images and feature maps are (H, W, C) arrays; per-vertex data is (n, F).
Every op keeps the dtype of its inputs.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .. import camera as _camera
from .tensor import Tensor, as_tensor

# Names of ops whose backward pass is deliberately corrupted (gradient-checker
# self-test only).
FAULTS: set[str] = set()


class ShapeError(ValueError):
    pass


def _fault(name, *grads):
    if name in FAULTS:
        return tuple(None if g is None else -g for g in grads)
    return grads


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise / algebra
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value + b.value
    return Tensor(out, (a, b), lambda g: _fault("add", _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value - b.value
    return Tensor(out, (a, b), lambda g: _fault("sub", _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value * b.value
    return Tensor(out, (a, b), lambda g: _fault("mul", _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}")
    return Tensor(a.value @ b.value, (a, b), lambda g: _fault("matmul", g @ b.value.T, a.value.T @ g))


def spmm(matrix, x) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    x = as_tensor(x)
    m = sp.csr_matrix(matrix, dtype=x.dtype)
    if m.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse {m.shape} @ {x.shape}")
    mt = m.T.tocsr()
    return Tensor(np.asarray(m @ x.value), (x,), lambda g: _fault("spmm", np.asarray(mt @ g)))


def total(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.value.sum(), (a,), lambda g: _fault("total", np.broadcast_to(g, a.shape).copy()))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.value.reshape(shape), (a,), lambda g: _fault("reshape", g.reshape(a.shape)))


def mean_sq_rows(a) -> Tensor:
    """``(1/n) * sum_i ||a_i||^2`` for an (n, d) tensor."""
    a = as_tensor(a)
    n = a.shape[0]
    if n == 0:
        raise ShapeError("mean over zero rows")
    val = (a.value ** 2).sum() / n
    return Tensor(np.asarray(val, dtype=a.dtype), (a,), lambda g: _fault("mean_sq_rows", g * (2.0 / n) * a.value))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return Tensor(a.value * mask, (a,), lambda g: _fault("relu", g * mask))


def dense(x, w, b=None) -> Tensor:
    """``x @ w + b`` for a vector or an (n, F) batch of rows."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense input {x.shape} vs weights {w.shape}")
    parents = (x, w) if b is None else (x, w, as_tensor(b))
    out = x.value @ w.value
    if b is not None:
        if parents[2].shape != (w.shape[1],):
            raise ShapeError(f"dense bias {parents[2].shape}, expected {(w.shape[1],)}")
        out = out + parents[2].value
    xv = x.value

    def backward(g):
        gx = g @ w.value.T
        gw = np.outer(xv, g) if xv.ndim == 1 else xv.T @ g
        grads = (gx, gw) if b is None else (gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0))
        return _fault("dense", *grads)

    return Tensor(out, parents, backward)


def concat(tensors, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].value.ndim
    for t in ts[1:]:
        if t.value.ndim != ts[0].value.ndim or any(
                t.shape[d] != ts[0].shape[d] for d in range(t.value.ndim) if d != ax):
            raise ShapeError(f"cannot concatenate {[t.shape for t in ts]} along axis {axis}")
    out = np.concatenate([t.value for t in ts], axis=ax)
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return Tensor(out, ts, lambda g: _fault("concat", *np.split(g, cuts, axis=ax)))


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return Tensor(x.value * keep, (x,), lambda g: _fault("dropout", g * keep))


# ----------------------------------------------------------------------------
# convolutional
# ----------------------------------------------------------------------------

def _im2col(xp, k, stride, out_h, out_w):
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride][:out_h, :out_w]
    return win.transpose(0, 1, 3, 4, 2).reshape(out_h * out_w, -1)


def conv2d(x, kernels, bias=None, stride: int = 1) -> Tensor:
    """Zero-padded ("same") cross-correlation; kernels are (k, k, Cin, Cout)."""
    x, w = as_tensor(x), as_tensor(kernels)
    if x.value.ndim != 3 or w.value.ndim != 4:
        raise ShapeError(f"conv2d expects (H, W, C) input and (k, k, Cin, Cout) kernels, got {x.shape}, {w.shape}")
    k, k2, cin, cout = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    if x.shape[2] != cin:
        raise ShapeError(f"conv2d input has {x.shape[2]} channels, kernels expect {cin}")
    if stride not in (1, 2):
        raise ShapeError("conv2d stride must be 1 or 2")
    h, wd, _ = x.shape
    pad = k // 2
    out_h, out_w = -(-h // stride), -(-wd // stride)
    xp = np.pad(x.value, ((pad, pad), (pad, pad), (0, 0)))
    cols = _im2col(xp, k, stride, out_h, out_w)
    wmat = w.value.reshape(-1, cout)
    out = (cols @ wmat).reshape(out_h, out_w, cout)
    parents = (x, w)
    if bias is not None:
        bt = as_tensor(bias)
        if bt.shape != (cout,):
            raise ShapeError(f"conv2d bias {bt.shape}, expected {(cout,)}")
        out = out + bt.value
        parents = (x, w, bt)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ wmat.T).reshape(out_h, out_w, k, k, cin)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[i:i + stride * out_h:stride, j:j + stride * out_w:stride] += gcols[:, :, i, j]
        gx = gxp[pad:pad + h, pad:pad + wd]
        grads = (gx, gw) if bias is None else (gx, gw, g2.sum(axis=0))
        return _fault("conv2d", *grads)

    return Tensor(out, parents, backward)


def max_pool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; ties route gradient to the first element."""
    x = as_tensor(x)
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d needs even spatial dims, got {h}x{w}")
    blocks = x.value.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 4, 1, 3).reshape(h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(h // 2, w // 2, c, 2, 2).transpose(0, 3, 1, 4, 2).reshape(h, w, c)
        return _fault("max_pool2d", gx)

    return Tensor(out, (x,), backward)


# ----------------------------------------------------------------------------
# graph and sampling
# ----------------------------------------------------------------------------

def graph_convolution(x, operator, w, bias=None, activation="relu") -> Tensor:
    """``act(M @ X @ W + b)`` with ``M`` the normalized graph operator."""
    x, w = as_tensor(x), as_tensor(w)
    m = getattr(operator, "matrix", operator)
    if m.shape[0] != x.shape[0]:
        raise ShapeError(f"operator is {m.shape[0]}x{m.shape[1]} but X has {x.shape[0]} rows")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"X has {x.shape[1]} features, W expects {w.shape[0]}")
    out = spmm(m, matmul(x, w))
    if bias is not None:
        out = add(out, bias)
    if activation == "relu":
        out = relu(out)
    elif activation not in (None, "linear", "identity"):
        raise ValueError(f"unknown activation {activation!r}")
    if "graph_convolution" in FAULTS:
        return Tensor(out.value, (out,), lambda g: _fault("graph_convolution", g))
    return out


def bilinear_sample(fmap, points) -> Tensor:
    """Sample an (H, W, C) map at (n, 2) map-space ``(u, v)`` points; differentiable in both."""
    fmap, points = as_tensor(fmap), as_tensor(points)
    f = fmap.value
    h, w = f.shape[:2]
    st = _camera.bilinear_stencil(points.value, h, w)
    out = _camera.bilinear_sample(f, None, st).astype(f.dtype)

    def backward(g):
        gm, gp = _camera.bilinear_sample_backward(f, None, g, st)
        return _fault("bilinear_sample", gm, gp.astype(points.dtype))

    return Tensor(out, (fmap, points), backward)
