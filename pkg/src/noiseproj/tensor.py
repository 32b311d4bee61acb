"""Dense tensors with reverse-mode automatic differentiation.

A define-by-run tape: every op records its parents and a backward closure
on the output tensor; ``backward()`` walks the tape in reverse topological
order. Data buffers are numpy arrays and are never mutated by ops.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {' and '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = shapes


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _fast_pow(x, p):
    # np.power is an order of magnitude slower than the equivalent
    # multiplies for the small exponents used here
    if p == 0:
        return np.ones_like(x)
    if p == 1:
        return x.copy()
    if p == 2:
        return x * x
    if p == 3:
        return x * x * x
    if p == -1:
        return 1.0 / x
    if p == -2:
        return 1.0 / (x * x)
    if p == 0.5:
        return np.sqrt(x)
    if p == -0.5:
        return 1.0 / np.sqrt(x)
    if p == -1.5:
        s = np.sqrt(x)
        return 1.0 / (x * s)
    return x ** p


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # ---- construction helpers -------------------------------------------

    @staticmethod
    def _result(data, parents, backward_fn):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    def _accumulate(self, grad):
        grad = np.asarray(grad, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # ---- backward pass ---------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # ---- arithmetic ops ----------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        try:
            data = self.data + other.data
        except ValueError:
            raise ShapeError("add", self.shape, other.shape)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._result(data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            if self.requires_grad:
                self._accumulate(-g)

        return Tensor._result(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        try:
            data = self.data * other.data
        except ValueError:
            raise ShapeError("mul", self.shape, other.shape)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._result(data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        data = self.data / other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * self.data / (other.data ** 2), other.shape))

        return Tensor._result(data, (self, other), backward)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("pow supports scalar exponents only")
        data = _fast_pow(self.data, p)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * p * _fast_pow(self.data, p - 1))

        return Tensor._result(data, (self,), backward)

    def matmul(self, other):
        other = self._coerce(other)
        if self.data.ndim < 1 or other.data.ndim < 2:
            raise ShapeError("matmul", self.shape, other.shape)
        # non-contiguous operands knock np.matmul off the BLAS fast path
        a = np.ascontiguousarray(self.data)
        b = np.ascontiguousarray(other.data)
        try:
            data = np.matmul(a, b)
        except ValueError:
            raise ShapeError("matmul", self.shape, other.shape)

        def backward(g):
            if self.requires_grad:
                ga = np.matmul(g, np.ascontiguousarray(np.swapaxes(b, -1, -2)))
                self._accumulate(_unbroadcast(ga, self.shape))
            if other.requires_grad:
                gb = np.matmul(np.ascontiguousarray(np.swapaxes(a, -1, -2)), g)
                other._accumulate(_unbroadcast(gb, other.shape))

        return Tensor._result(data, (self, other), backward)

    __matmul__ = matmul

    # ---- elementwise nonlinearities -----------------------------------------

    def exp(self):
        data = np.exp(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * data)

        return Tensor._result(data, (self,), backward)

    def log(self):
        data = np.log(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g / self.data)

        return Tensor._result(data, (self,), backward)

    def sqrt(self):
        data = np.sqrt(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * 0.5 / data)

        return Tensor._result(data, (self,), backward)

    def tanh(self):
        data = np.tanh(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * (1.0 - data ** 2))

        return Tensor._result(data, (self,), backward)

    def gelu(self):
        # tanh approximation; smooth everywhere so finite-difference checks hold
        c = self.data.dtype.type(np.sqrt(2.0 / np.pi))
        x = self.data
        inner = c * (x + 0.044715 * (x * x * x))
        t = np.tanh(inner)
        data = 0.5 * x * (1.0 + t)

        def backward(g):
            if self.requires_grad:
                dinner = c * (1.0 + 3 * 0.044715 * (x * x))
                dt = (1.0 - t ** 2) * dinner
                self._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * dt))

        return Tensor._result(data, (self,), backward)

    def sigmoid(self):
        data = 1.0 / (1.0 + np.exp(-self.data))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * data * (1.0 - data))

        return Tensor._result(data, (self,), backward)

    def softplus(self):
        data = np.logaddexp(0.0, self.data).astype(self.data.dtype)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g / (1.0 + np.exp(-self.data)))

        return Tensor._result(data, (self,), backward)

    def clamp(self, lo, hi):
        data = np.clip(self.data, lo, hi)

        def backward(g):
            if self.requires_grad:
                mask = (self.data >= lo) & (self.data <= hi)
                self._accumulate(g * mask)

        return Tensor._result(data, (self,), backward)

    # ---- reductions / shape ops ---------------------------------------------

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape))
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        return Tensor._result(data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.shape[a] for a in axis]))
        else:
            n = self.shape[axis]
        if isinstance(axis, tuple):
            out = self
            for a in sorted(axis, reverse=True):
                out = out.sum(axis=a, keepdims=True)
            if not keepdims:
                out = out.reshape(tuple(s for i, s in enumerate(self.shape) if i not in axis))
            return out * (1.0 / n)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, shape):
        data = self.data.reshape(shape)
        orig = self.shape

        def backward(g):
            if self.requires_grad:
                self._accumulate(g.reshape(orig))

        return Tensor._result(data, (self,), backward)

    def transpose(self, axes):
        data = self.data.transpose(axes)
        inv = np.argsort(axes)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g.transpose(inv))

        return Tensor._result(data, (self,), backward)

    def __getitem__(self, key):
        data = self.data[key]

        def backward(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                full[key] = g
                self._accumulate(full)

        return Tensor._result(data, (self,), backward)

    def repeat2x(self):
        """Nearest-neighbour 2x upsample of the last two axes."""
        data = self.data.repeat(2, axis=-2).repeat(2, axis=-1)

        def backward(g):
            if self.requires_grad:
                s = g.shape
                blocked = g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2))
                self._accumulate(blocked.sum(axis=(-3, -1)))

        return Tensor._result(data, (self,), backward)

    def pad2d(self, p):
        """Zero-pad the last two axes by p on every side."""
        width = [(0, 0)] * (self.data.ndim - 2) + [(p, p), (p, p)]
        data = np.pad(self.data, width)
        sl = (Ellipsis, slice(p, p + self.shape[-2]), slice(p, p + self.shape[-1]))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g[sl])

        return Tensor._result(data, (self,), backward)

    # ---- fused numerically-stable primitives ---------------------------------

    def softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        data = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            if self.requires_grad:
                dot = (g * data).sum(axis=axis, keepdims=True)
                self._accumulate(data * (g - dot))

        return Tensor._result(data, (self,), backward)

    def log_softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        data = shifted - lse

        def backward(g):
            if self.requires_grad:
                self._accumulate(g - np.exp(data) * g.sum(axis=axis, keepdims=True))

        return Tensor._result(data, (self,), backward)


def concat(tensors, axis=0):
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._result(data, tuple(tensors), backward)


def stack(tensors, axis=0):
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(moved[i])

    return Tensor._result(data, tuple(tensors), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return centered * inv * gain + bias


def _im2col_3x3(arr):
    """(B, C, H, W) -> (B*H*W, C*9) patch matrix for same-padding 3x3."""
    b, c, h, w = arr.shape
    padded = np.pad(arr, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, c * 9)


def conv2d_3x3(x, weight, bias=None):
    """3x3 same-padding convolution on (B, C_in, H, W); weight is
    (C_out, C_in, 3, 3). One im2col gemm forward; the input gradient is
    the correlation of the output gradient with the flipped kernel.
    """
    if x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d_3x3", x.shape, weight.shape)
    b, c_in, h, w = x.shape
    c_out = weight.shape[0]
    cols = _im2col_3x3(x.data)
    w_mat = np.ascontiguousarray(weight.data.reshape(c_out, c_in * 9).T)
    out = (cols @ w_mat).reshape(b, h, w, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)

    def backward(g):
        g_flat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * h * w, c_out)
        if weight.requires_grad:
            dw = (g_flat.T @ cols).reshape(c_out, c_in, 3, 3)
            weight._accumulate(dw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            f_mat = np.ascontiguousarray(flipped.reshape(c_in, c_out * 9).T)
            g_cols = _im2col_3x3(g)
            dx = (g_cols @ f_mat).reshape(b, h, w, c_in).transpose(0, 3, 1, 2)
            x._accumulate(np.ascontiguousarray(dx))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward)


def avg_pool_2x(x):
    """2x2 average pooling on (B, C, H, W); H and W must be even."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("avg_pool_2x", x.shape)
    return x.reshape((b, c, h // 2, 2, w // 2, 2)).mean(axis=(3, 5))
