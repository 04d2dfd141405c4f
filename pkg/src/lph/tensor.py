"""Minimal reverse-mode autodiff on numpy arrays.

Everything downstream (autoencoders, denoisers, the adapter) runs on this
layer.  Design constraints:

* float32 by default, float64 available for gradient checking,
* no silent broadcasting between mismatched shapes,
* every forward result is checked for NaN/Inf (hard error),
* serial, fixed-order reductions so repeated runs are bit-identical.

The tape is rebuilt for every forward pass; ``backward`` walks it once in
reverse topological order.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NumericsError(RuntimeError):
    """Non-finite value or invalid numeric configuration."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


def _check_finite(arr, ctx):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by {ctx}")


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode grads."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        _check_finite(arr, "tensor construction")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate gradients of self w.r.t. all reachable parents."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"gradient shape {grad.shape} != output shape {self.data.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None or node._backward is None:
                if g is not None and node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in node._backward(g):
                if parent is None or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _needs(*tensors):
    return any(t.requires_grad for t in tensors)


def _result(data, parents, backward, ctx):
    _check_finite(data, ctx)
    if _needs(*[p for p in parents if isinstance(p, Tensor)]):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data, requires_grad=False)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def add(a, b):
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: [(a, g), (b, g)], "add")


def sub(a, b):
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: [(a, g), (b, -g)], "sub")


def mul(a, b):
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: [(a, g * b.data), (b, g * a.data)], "mul")


def scale(a, s):
    s = float(s)
    return _result(a.data * s, (a,), lambda g: [(a, g * s)], "scale")


def relu(a):
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0), (a,),
                   lambda g: [(a, g * mask)], "relu")


def sigmoid(a):
    x = a.data
    # split by sign so neither branch exponentiates a large positive value
    pos = x >= 0
    e = np.exp(np.where(pos, -x, x))
    out = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (a,), lambda g: [(a, g * out * (1 - out))], "sigmoid")


def reshape(a, shape):
    shape = tuple(shape)
    old = a.data.shape
    return _result(a.data.reshape(shape), (a,),
                   lambda g: [(a, g.reshape(old))], "reshape")


def permute(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: [(a, np.ascontiguousarray(g.transpose(inverse)))],
                   "permute")


def depth_to_space(a, block):
    """(N, C*block^2, H, W) -> (N, C, H*block, W*block); channel index is
    c * block^2 + dy * block + dx."""
    n, cb, h, w = a.data.shape
    if cb % (block * block) != 0:
        raise ShapeError(f"depth_to_space: {cb} channels not divisible by {block}^2")
    c = cb // (block * block)
    x = reshape(a, (n, c, block, block, h, w))
    x = permute(x, (0, 1, 4, 2, 5, 3))
    return reshape(x, (n, c, h * block, w * block))


def concat(tensors, axis):
    sizes = [t.data.shape[axis] for t in tensors]
    ref = list(tensors[0].data.shape)
    for t in tensors[1:]:
        s = list(t.data.shape)
        s[axis] = ref[axis]
        if s != ref:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return list(zip(tensors, pieces))

    return _result(out, tuple(tensors), backward, "concat")


def matmul(a, b):
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape} disagree")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        # collapse leading batch axes introduced by matmul broadcasting
        while ga.ndim > a.data.ndim:
            ga = ga.sum(axis=0)
        while gb.ndim > b.data.ndim:
            gb = gb.sum(axis=0)
        return [(a, ga), (b, gb)]

    return _result(out, (a, b), backward, "matmul")


def softmax(a, axis=-1):
    """Numerically stabilized softmax (row max subtracted)."""
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return [(a, out * (g - dot))]

    return _result(out, (a,), backward, "softmax")


def mean_sq(a):
    """Mean of squared entries, as a scalar tensor."""
    n = a.data.size
    out = np.array(np.sum(a.data.astype(np.float64) ** 2) / n, dtype=a.data.dtype)
    return _result(out, (a,), lambda g: [(a, (2.0 / n) * a.data * g)], "mean_sq")


def mse(a, b):
    _same_shape(a, b, "mse")
    return mean_sq(sub(a, b))


# ---------------------------------------------------------------------------
# convolution kernels (im2col / col2im)

def _conv_out_dim(h, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1


def _im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = _conv_out_dim(h, k, stride, pad)
    wo = _conv_out_dim(w, k, stride, pad)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (n, c, ho, wo, k, k) -> (n, c*k*k, ho*wo)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)
    return cols, ho, wo


def _col2im(cols, x_shape, k, stride, pad, ho, wo):
    n, c, h, w = x_shape
    blocks = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += blocks[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def conv2d(x, weight, bias, stride=1, padding=0):
    """2-D convolution, NCHW input, OIkk weight, per-output-channel bias."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIkk weight")
    n, c, h, w = x.data.shape
    o, ci, k, k2 = weight.data.shape
    if k != k2:
        raise ShapeError("conv2d: non-square kernels unsupported")
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ci}")
    if bias.data.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({o},)")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d: spatial dims {h}x{w} (pad {padding}) smaller than kernel {k}")

    cols, ho, wo = _im2col(x.data, k, stride, padding)
    wf = weight.data.reshape(o, c * k * k)
    out = np.matmul(wf, cols)  # (n, o, ho*wo) via broadcasting over n
    out = out.reshape(n, o, ho, wo) + bias.data.reshape(1, o, 1, 1)

    def backward(g):
        gf = g.reshape(n, o, ho * wo)
        gw = np.tensordot(gf, cols, axes=([0, 2], [0, 2])).reshape(o, c, k, k)
        gb = gf.sum(axis=(0, 2))
        gcols = np.matmul(wf.T, gf)
        gx = _col2im(gcols, x.data.shape, k, stride, padding, ho, wo)
        return [(x, gx), (weight, gw), (bias, gb)]

    return _result(out, (x, weight, bias), backward, "conv2d")


def conv2d_transposed(x, weight, bias, stride=1, padding=0):
    """Transposed convolution: the exact adjoint of conv2d under the same
    (weight, stride, padding).  Input is N,O,H,W; weight is OIkk; the output
    has I channels and spatial dim (H-1)*stride - 2*padding + k.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d_transposed expects NCHW input and OIkk weight")
    n, co, hy, wy = x.data.shape
    o, i, k, k2 = weight.data.shape
    if k != k2:
        raise ShapeError("conv2d_transposed: non-square kernels unsupported")
    if co != o:
        raise ShapeError(f"conv2d_transposed: input has {co} channels but weight expects {o}")
    if bias.data.shape != (i,):
        raise ShapeError(f"conv2d_transposed: bias shape {bias.data.shape} != ({i},)")
    h = (hy - 1) * stride - 2 * padding + k
    w = (wy - 1) * stride - 2 * padding + k
    if h < 1 or w < 1:
        raise ShapeError("conv2d_transposed: output spatial dim would be empty")

    wf = weight.data.reshape(o, i * k * k)
    xf = x.data.reshape(n, o, hy * wy)
    cols = np.matmul(wf.T, xf)  # (n, i*k*k, hy*wy)
    out = _col2im(cols, (n, i, h, w), k, stride, padding, hy, wy)
    out = out + bias.data.reshape(1, i, 1, 1)

    def backward(g):
        gcols, gho, gwo = _im2col(g, k, stride, padding)
        # d/dx: forward conv of g with the same weight
        gx = np.matmul(wf, gcols).reshape(n, o, gho, gwo)
        gw = np.tensordot(xf, gcols, axes=([0, 2], [0, 2])).reshape(o, i, k, k)
        gb = g.sum(axis=(0, 2, 3))
        return [(x, gx), (weight, gw), (bias, gb)]

    return _result(out, (x, weight, bias), backward, "conv2d_transposed")


def linear(x, weight, bias):
    """x @ weight + bias with x (..., in), weight (in, out), bias (out,)."""
    if x.data.shape[-1] != weight.data.shape[0]:
        raise ShapeError(f"linear: input dim {x.data.shape[-1]} != weight fan-in {weight.data.shape[0]}")
    if bias.data.shape != (weight.data.shape[1],):
        raise ShapeError("linear: bias shape mismatch")
    out = np.matmul(x.data, weight.data) + bias.data

    def backward(g):
        gx = np.matmul(g, weight.data.T)
        xf = x.data.reshape(-1, x.data.shape[-1])
        gf = g.reshape(-1, g.shape[-1])
        gw = xf.T @ gf
        gb = gf.sum(axis=0)
        return [(x, gx), (weight, gw), (bias, gb)]

    return _result(out, (x, weight, bias), backward, "linear")


def cross_attention(queries, tokens):
    """Scaled dot-product attention of query vectors over key/value tokens.

    queries: (N, Tq, d), tokens: (N, Tk, d) used as both keys and values.
    Rows of the attention matrix sum to 1.
    """
    if queries.data.ndim != 3 or tokens.data.ndim != 3:
        raise ShapeError("cross_attention expects (N, T, d) operands")
    if queries.data.shape[-1] != tokens.data.shape[-1]:
        raise ShapeError("cross_attention: query/token feature dims differ")
    if queries.data.shape[0] != tokens.data.shape[0]:
        raise ShapeError("cross_attention: batch sizes differ")
    d = queries.data.shape[-1]
    keys_t = _transpose_last(tokens)
    logits = scale(matmul(queries, keys_t), 1.0 / np.sqrt(d))
    attn = softmax(logits, axis=-1)
    return matmul(attn, tokens)


def _transpose_last(a):
    out = np.swapaxes(a.data, -1, -2)
    return _result(out, (a,), lambda g: [(a, np.swapaxes(g, -1, -2))], "transpose")


# ---------------------------------------------------------------------------
# parameters and the optimizer

def kaiming_uniform(shape, fan_in, rng, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParameterStore:
    """Named parameter tensors plus per-parameter AdamW state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._step: dict[str, int] = {}

    def add(self, name, data):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = True
        self.params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        self._step[name] = 0
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return sorted(self.params)

    def step_count(self, name):
        return self._step[name]

    def num_values(self):
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self):
        out = {}
        for name, t in self.params.items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out

    def state_arrays(self):
        """All parameter arrays in name order (for checksums / checkpoints)."""
        return {name: self.params[name].data for name in self.names()}

    def load_arrays(self, arrays):
        for name, arr in arrays.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r} in checkpoint")
            cur = self.params[name]
            if cur.data.shape != arr.shape:
                raise ShapeError(f"parameter {name!r}: checkpoint shape {arr.shape} != {cur.data.shape}")
            cur.data = arr.astype(cur.data.dtype).copy()


def adamw_step(store, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One decoupled-weight-decay AdamW update, in place."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name in store.names():
        p = store.params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adamw_step: gradient for {name!r} has shape {g.shape}, expected {p.data.shape}")
        store._step[name] += 1
        t = store._step[name]
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data = p.data - lr * weight_decay * p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        _check_finite(p.data, f"adamw_step[{name}]")
    return store
