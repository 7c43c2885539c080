"""Dense float tensors with reverse-mode automatic differentiation.

Covers exactly the layer set the embedding and baseline networks need:
valid cross-correlation, ReLU, batch normalization, 2x2 max pooling,
affine layers, row-wise L2 normalization, row gathering and the
elementwise/reduction glue required to express the training losses.
No broadcasting, no GPU, no dynamic shapes beyond what those nets use.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

DEFAULT_DTYPE = np.float32

# Chunked im2col buffers are capped at roughly this many bytes.
_IM2COL_BUDGET = 96 * 1024 * 1024

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the context (eval/serving paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    return np.ascontiguousarray(arr, dtype=dtype)


class Tensor:
    """A dense float array plus an optional gradient buffer.

    Tensors are plain values; a graph built from them belongs to a single
    execution context. ``backward`` may run once per graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward_fn", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple[Tensor, ...] = ()
        self._backward_fn: Optional[Callable[[], None]] = None
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar. Rejects a second sweep on the same graph."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._backward_ran:
            raise RuntimeError("backward already ran on this graph; build a fresh graph instead of re-running it")
        self._backward_ran = True

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn()
        # The closures reference their output node, a cycle the reference
        # counter cannot free; large graphs would pile up until a full gc
        # pass. The sweep is single-shot, so release everything interior.
        for node in topo:
            if node._prev:
                node._backward_fn = None
                node._prev = ()
                if node is not self:
                    node.grad = None


def _make_node(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# Elementwise / reduction glue


def add(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "add")
        out = _make_node(a.data + b.data, (a, b))
        if out.requires_grad:
            def _bw():
                if a.requires_grad:
                    a._accumulate(out.grad)
                if b.requires_grad:
                    b._accumulate(out.grad)
            out._backward_fn = _bw
        return out
    out = _make_node(a.data + a.data.dtype.type(b), (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad)
        out._backward_fn = _bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = _make_node(a.data - b.data, (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(out.grad)
            if b.requires_grad:
                b._accumulate(-out.grad)
        out._backward_fn = _bw
    return out


def mul(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "mul")
        out = _make_node(a.data * b.data, (a, b))
        if out.requires_grad:
            def _bw():
                if a.requires_grad:
                    a._accumulate(out.grad * b.data)
                if b.requires_grad:
                    b._accumulate(out.grad * a.data)
            out._backward_fn = _bw
        return out
    scal = a.data.dtype.type(b)
    out = _make_node(a.data * scal, (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad * scal)
        out._backward_fn = _bw
    return out


def tsum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis not in (None, 1):
        raise ValueError("sum supports axis=None (total) or axis=1 (row sums)")
    out = _make_node(np.sum(x.data, axis=axis), (x,))
    if out.requires_grad:
        def _bw():
            if axis is None:
                x._accumulate(np.full_like(x.data, out.grad))
            else:
                x._accumulate(np.repeat(out.grad[:, None], x.data.shape[1], axis=1))
        out._backward_fn = _bw
    return out


def relu(x: Tensor) -> Tensor:
    out = _make_node(np.maximum(x.data, 0), (x,))
    if out.requires_grad:
        mask = x.data > 0  # subgradient at 0 is 0
        def _bw():
            x._accumulate(out.grad * mask)
        out._backward_fn = _bw
    return out


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    out = _make_node(x.data[idx], (x,))
    if out.requires_grad:
        def _bw():
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, out.grad)
            x._accumulate(gx)
        out._backward_fn = _bw
    return out


def flatten2d(x: Tensor) -> Tensor:
    b = x.data.shape[0]
    out = _make_node(x.data.reshape(b, -1), (x,))
    if out.requires_grad:
        def _bw():
            x._accumulate(out.grad.reshape(x.data.shape))
        out._backward_fn = _bw
    return out


Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(self, other)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(self, other)
Tensor.__neg__ = lambda self: mul(self, -1.0)
Tensor.sum = tsum
Tensor.relu = relu


# ---------------------------------------------------------------------------
# Convolution


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B,C,H,W) -> contiguous (B, Ho*Wo, C*kh*kw) patch matrix, stride 1."""
    b, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    s0, s1, s2, s3 = x.strides
    v = as_strided(x, (b, c, ho, wo, kh, kw), (s0, s1, s2, s3, s2, s3))
    return v.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)


def _conv_chunk(n_patches: int, patch_len: int, itemsize: int) -> int:
    per_image = n_patches * patch_len * itemsize
    return max(1, _IM2COL_BUDGET // max(per_image, 1))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Valid cross-correlation, stride 1, no padding. x (B,Cin,H,W), weight (Cout,Cin,kh,kw)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d: need 4-d input and kernel, got input {x.data.shape}, kernel {weight.data.shape}")
    b, cin, h, w = x.data.shape
    cout, cin_k, kh, kw = weight.data.shape
    if cin != cin_k:
        raise ValueError(f"conv2d: input has {cin} channels but kernel expects {cin_k} (input {x.data.shape}, kernel {weight.data.shape})")
    if h < kh or w < kw:
        raise ValueError(f"conv2d: spatial size {h}x{w} smaller than kernel {kh}x{kw}")
    if bias is not None and bias.data.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} does not match {cout} output channels")

    ho, wo = h - kh + 1, w - kw + 1
    w_mat = weight.data.reshape(cout, cin * kh * kw)
    chunk = _conv_chunk(ho * wo, cin * kh * kw, x.data.itemsize)

    y = np.empty((b, cout, ho, wo), dtype=x.data.dtype)
    for i in range(0, b, chunk):
        cols = _im2col(x.data[i:i + chunk], kh, kw)
        out = cols @ w_mat.T  # (n, Ho*Wo, Cout)
        y[i:i + chunk] = out.transpose(0, 2, 1).reshape(-1, cout, ho, wo)
    if bias is not None:
        y += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)
    node = _make_node(y, parents)
    if node.requires_grad:
        def _bw():
            gy = node.grad
            if bias is not None and bias.requires_grad:
                bias._accumulate(gy.sum(axis=(0, 2, 3)))
            if weight.requires_grad:
                gw = np.zeros((cout, cin * kh * kw), dtype=weight.data.dtype)
                for i in range(0, b, chunk):
                    cols = _im2col(x.data[i:i + chunk], kh, kw)
                    gy_mat = gy[i:i + chunk].transpose(0, 2, 3, 1).reshape(-1, cout)
                    gw += gy_mat.T @ cols.reshape(-1, cin * kh * kw)
                weight._accumulate(gw.reshape(weight.data.shape))
            if x.requires_grad:
                # full correlation of the padded output gradient with the flipped kernel
                wf = weight.data[:, :, ::-1, ::-1]
                k2 = np.ascontiguousarray(wf.transpose(0, 2, 3, 1)).reshape(cout * kh * kw, cin)
                gx = np.empty_like(x.data)
                pad = np.zeros((chunk, cout, ho + 2 * (kh - 1), wo + 2 * (kw - 1)), dtype=gy.dtype)
                for i in range(0, b, chunk):
                    n = min(chunk, b - i)
                    pad[:n, :, kh - 1:kh - 1 + ho, kw - 1:kw - 1 + wo] = gy[i:i + n]
                    cols2 = _im2col(pad[:n], kh, kw)  # (n, H*W, Cout*kh*kw)
                    gx[i:i + n] = (cols2 @ k2).transpose(0, 2, 1).reshape(n, cin, h, w)
                x._accumulate(gx)
        node._backward_fn = _bw
    return node


# ---------------------------------------------------------------------------
# Pooling


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; gradient routes to the first max in row-major window order."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2d: need 4-d input, got {x.data.shape}")
    b, c, h, w = x.data.shape
    if h < 2 or w < 2:
        raise ValueError(f"maxpool2d: spatial size {h}x{w} smaller than 2x2 window")
    ho, wo = h // 2, w // 2
    xc = x.data[:, :, :ho * 2, :wo * 2]
    windows = xc.reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
    arg = np.argmax(windows, axis=-1)  # first occurrence on ties
    y = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    node = _make_node(y, (x,))
    if node.requires_grad:
        def _bw():
            gwin = np.zeros((b, c, ho, wo, 4), dtype=x.data.dtype)
            np.put_along_axis(gwin, arg[..., None], node.grad[..., None], axis=-1)
            gx = np.zeros_like(x.data)
            gx[:, :, :ho * 2, :wo * 2] = (
                gwin.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * 2, wo * 2)
            )
            x._accumulate(gx)
        node._backward_fn = _bw
    return node


# ---------------------------------------------------------------------------
# Affine


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (B,Nin) @ weight (Nout,Nin)^T + bias (Nout)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError(f"linear: need 2-d input and weight, got {x.data.shape}, {weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ValueError(f"linear: input width {x.data.shape[1]} does not match weight width {weight.data.shape[1]}")
    if bias is not None and bias.data.shape != (weight.data.shape[0],):
        raise ValueError(f"linear: bias shape {bias.data.shape} does not match {weight.data.shape[0]} outputs")
    y = x.data @ weight.data.T
    if bias is not None:
        y += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    node = _make_node(y, parents)
    if node.requires_grad:
        def _bw():
            gy = node.grad
            if x.requires_grad:
                x._accumulate(gy @ weight.data)
            if weight.requires_grad:
                weight._accumulate(gy.T @ x.data)
            if bias is not None and bias.requires_grad:
                bias._accumulate(gy.sum(axis=0))
        node._backward_fn = _bw
    return node


# ---------------------------------------------------------------------------
# Row-wise L2 normalization

NORM_GUARD = 1e-12


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each row of (B,d) to unit Euclidean norm."""
    if x.data.ndim != 2:
        raise ValueError(f"l2_normalize: need 2-d input, got {x.data.shape}")
    norms = np.sqrt(np.sum(np.square(x.data), axis=1, keepdims=True))
    bad = np.flatnonzero(norms[:, 0] <= NORM_GUARD)
    if bad.size:
        raise ValueError(f"l2_normalize: rows {bad.tolist()} have norm <= {NORM_GUARD}")
    y = x.data / norms
    node = _make_node(y, (x,))
    if node.requires_grad:
        def _bw():
            g = node.grad
            proj = np.sum(g * y, axis=1, keepdims=True)
            x._accumulate((g - y * proj) / norms)
        node._backward_fn = _bw
    return node


def sigmoid_bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits, fused for numerical stability.

    Per element: max(z,0) - z*y + log1p(exp(-|z|)). Targets are fixed 0/1
    values, not differentiated through.
    """
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise ValueError(f"bce: target shape {y.shape} vs logits {z.shape}")
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = _make_node(np.asarray(per.mean(), dtype=z.dtype), (logits,))
    if out.requires_grad:
        def _bw():
            sig = 1.0 / (1.0 + np.exp(-z.astype(np.float64)))
            logits._accumulate(out.grad * ((sig - y) / z.size).astype(z.dtype))
        out._backward_fn = _bw
    return out


# ---------------------------------------------------------------------------
# Batch normalization


class BatchNorm2d:
    """Per-channel batch normalization with affine scale/shift and running stats.

    Train mode normalizes by batch statistics and updates the running buffers;
    eval mode normalizes by the running buffers. Running variance uses the
    unbiased batch estimate, normalization the biased one.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.scale = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != self.channels:
            raise ValueError(f"batchnorm2d: expected (B,{self.channels},H,W), got {x.data.shape}")
        b, c, h, w = x.data.shape
        m = b * h * w
        dt = x.data.dtype

        if training:
            if m < 2:
                raise ValueError("batchnorm2d: train mode needs at least 2 elements per channel (variance undefined)")
            mean = x.data.mean(axis=(0, 2, 3))
            var = x.data.var(axis=(0, 2, 3))
            mom = dt.type(self.momentum)
            self.running_mean = ((1 - mom) * self.running_mean + mom * mean).astype(self.running_mean.dtype)
            self.running_var = ((1 - mom) * self.running_var + mom * var * (m / (m - 1))).astype(self.running_var.dtype)
        else:
            mean = self.running_mean.astype(dt)
            var = self.running_var.astype(dt)

        inv_std = 1.0 / np.sqrt(var + dt.type(self.eps))
        xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = xhat * self.scale.data[None, :, None, None] + self.shift.data[None, :, None, None]

        node = _make_node(y, (x, self.scale, self.shift))
        if node.requires_grad:
            scale, shift = self.scale, self.shift
            def _bw():
                gy = node.grad
                if shift.requires_grad:
                    shift._accumulate(gy.sum(axis=(0, 2, 3)))
                if scale.requires_grad:
                    scale._accumulate((gy * xhat).sum(axis=(0, 2, 3)))
                if x.requires_grad:
                    gxhat = gy * scale.data[None, :, None, None]
                    if training:
                        sum_g = gxhat.sum(axis=(0, 2, 3))
                        sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3))
                        gx = (inv_std[None, :, None, None] / m) * (
                            m * gxhat
                            - sum_g[None, :, None, None]
                            - xhat * sum_gx[None, :, None, None]
                        )
                    else:
                        gx = gxhat * inv_std[None, :, None, None]
                    x._accumulate(gx)
            node._backward_fn = _bw
        return node

    def state_dict(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var}
