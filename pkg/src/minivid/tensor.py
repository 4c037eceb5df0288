"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float64 by default, float32 selectable)
and records the operations applied to it. Calling :func:`backward` on a
scalar result replays the recorded graph in reverse topological order --
each recorded operation is visited exactly once -- and accumulates
``grad`` arrays on every tensor that requires gradients.

Broadcasting is deliberately narrow: elementwise ops accept exact-shape
tensors or python scalars. Anything wider (gating planes over channel
groups, per-channel biases over feature maps) goes through an explicit
:func:`expand`.

Tensors are safe to share read-only across threads; mutation (backward,
grad accumulation) is single-threaded per graph.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional array with gradient support.

    Attributes:
        data: contiguous numpy array of float32/float64 values.
        requires_grad: whether backward should populate ``grad``.
        grad: accumulated gradient, same shape as ``data``. Reads as
            zeros for tensors the loss never touched.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents: tuple = ()
        self._backward_fn = None

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self):
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- graph bookkeeping -------------------------------------------------

    def _record(self, parents, backward_fn):
        if any(p.requires_grad for p in parents):
            self.requires_grad = True
            self._parents = tuple(parents)
            self._backward_fn = backward_fn
        return self

    def _accumulate(self, g):
        if self._grad is None:
            self._grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self._grad += g

    def zero_grad(self):
        self._grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- backward ----------------------------------------------------------

    def backward(self):
        """Populate gradients of every reachable requires_grad tensor.

        Only scalar (single-element) tensors may seed a backward pass.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise ValueError("loss does not depend on any requires_grad tensor")

        order = _toposort(self)
        self._grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node._grad is not None:
                node._backward_fn(node._grad)

    # -- elementwise arithmetic ---------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape("add", self, other)
            out = Tensor(self.data + other.data)

            def bwd(g):
                if self.requires_grad:
                    self._accumulate(g)
                if other.requires_grad:
                    other._accumulate(g)

            return out._record((self, other), bwd)
        out = Tensor(self.data + float(other))

        def bwd(g):
            self._accumulate(g)

        return out._record((self,), bwd)

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data)

        def bwd(g):
            self._accumulate(-g)

        return out._record((self,), bwd)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape("sub", self, other)
            out = Tensor(self.data - other.data)

            def bwd(g):
                if self.requires_grad:
                    self._accumulate(g)
                if other.requires_grad:
                    other._accumulate(-g)

            return out._record((self, other), bwd)
        return self + (-float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape("multiply", self, other)
            out = Tensor(self.data * other.data)

            def bwd(g):
                if self.requires_grad:
                    self._accumulate(g * other.data)
                if other.requires_grad:
                    other._accumulate(g * self.data)

            return out._record((self, other), bwd)
        c = float(other)
        out = Tensor(self.data * c)

        def bwd(g):
            self._accumulate(g * c)

        return out._record((self,), bwd)

    __rmul__ = __mul__

    # -- nonlinearities ------------------------------------------------------

    def tanh(self) -> "Tensor":
        out = Tensor(np.tanh(self.data))

        def bwd(g):
            self._accumulate(g * (1.0 - out.data * out.data))

        return out._record((self,), bwd)

    def sigmoid(self) -> "Tensor":
        # sign-split form avoids overflow in exp for large |x|
        x = self.data
        y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        out = Tensor(y.astype(x.dtype, copy=False))

        def bwd(g):
            self._accumulate(g * out.data * (1.0 - out.data))

        return out._record((self,), bwd)

    def relu(self) -> "Tensor":
        out = Tensor(np.maximum(self.data, 0.0))

        def bwd(g):
            self._accumulate(g * (self.data > 0.0))

        return out._record((self,), bwd)

    def exp(self) -> "Tensor":
        out = Tensor(np.exp(self.data))

        def bwd(g):
            self._accumulate(g * out.data)

        return out._record((self,), bwd)

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.data))

        def bwd(g):
            self._accumulate(g / self.data)

        return out._record((self,), bwd)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.shape
        out = Tensor(self.data.reshape(shape))

        def bwd(g):
            self._accumulate(g.reshape(src_shape))

        return out._record((self,), bwd)

    def __getitem__(self, idx) -> "Tensor":
        out = Tensor(self.data[idx])

        def bwd(g):
            full = np.zeros_like(self.data)
            full[idx] += g
            self._accumulate(full)

        return out._record((self,), bwd)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None and not keepdims:
            out = Tensor(np.asarray(self.data.sum(), dtype=self.data.dtype))

            def bwd(g):
                self._accumulate(np.full_like(self.data, g))

            return out._record((self,), bwd)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % self.ndim for a in axes)
        out = Tensor(self.data.sum(axis=axes, keepdims=keepdims))

        def bwd(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            self._accumulate(np.broadcast_to(g, self.shape).astype(self.dtype, copy=False))

        return out._record((self,), bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        for d, (da, db) in enumerate(zip(a.shape, b.shape)):
            if da != db:
                raise ValueError(
                    f"{op}: dimension {d} mismatch ({da} vs {db}); shapes {a.shape} vs {b.shape}"
                )
        raise ValueError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _toposort(root: Tensor):
    """Iterative depth-first ordering of the recorded operation graph."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Run reverse-mode differentiation from a scalar loss."""
    loss.backward()


# -- constructors -------------------------------------------------------------


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# -- reductions ---------------------------------------------------------------


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over the given axes. Empty reduction axes are rejected."""
    if axis is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axis, int):
        axes = (axis % x.ndim,)
    else:
        axes = tuple(a % x.ndim for a in axis)
    count = 1
    for a in axes:
        if x.shape[a] == 0:
            raise ValueError(f"mean: reduction axis {a} is empty")
        count *= x.shape[a]
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims))

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(g / count, x.shape).astype(x.dtype, copy=False))

    return out._record((x,), bwd)


def avg_pool_spatial(x: Tensor, keepdims: bool = False) -> Tensor:
    """Mean over the trailing two (spatial) axes."""
    if x.ndim < 2:
        raise ValueError(f"avg_pool_spatial needs >=2 dims, got shape {x.shape}")
    return mean(x, axis=(x.ndim - 2, x.ndim - 1), keepdims=keepdims)


def avg_pool_temporal(x: Tensor, axis: int = 0) -> Tensor:
    """Mean over the time axis (dropped from the output shape)."""
    return mean(x, axis=axis, keepdims=False)


# -- structural ops -----------------------------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    axis = axis % tensors[0].ndim
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + n)
            if t.requires_grad:
                t._accumulate(g[tuple(sl)])
            offset += n

    return out._record(tuple(tensors), bwd)


def expand(x: Tensor, shape) -> Tensor:
    """Materialized broadcast of size-1 axes up to ``shape`` (same rank)."""
    shape = tuple(shape)
    if len(shape) != x.ndim:
        raise ValueError(f"expand: rank mismatch {x.shape} -> {shape}")
    for d, (src, dst) in enumerate(zip(x.shape, shape)):
        if src != dst and src != 1:
            raise ValueError(f"expand: dimension {d} cannot grow {src} -> {dst}")
    out = Tensor(np.broadcast_to(x.data, shape).copy())
    reduce_axes = tuple(d for d in range(x.ndim) if x.shape[d] == 1 and shape[d] != 1)

    def bwd(g):
        x._accumulate(g.sum(axis=reduce_axes, keepdims=True) if reduce_axes else g)

    return out._record((x,), bwd)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul: inner dimension mismatch ({a.shape[1]} vs {b.shape[0]})"
        )
    out = Tensor(a.data @ b.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return out._record((a, b), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map: out[b, k] = sum_d weight[k, d] * x[b, d] + bias[k]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"linear expects 2-D input/weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear: feature dimension mismatch (input has {x.shape[1]}, weight has {weight.shape[1]})"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(
            f"linear: bias shape {bias.shape} does not match output dimension {weight.shape[0]}"
        )
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return out._record(parents, bwd)


# -- convolution ---------------------------------------------------------------


def _conv_out_size(size: int, pad: int, k: int, stride: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride=(1, 1),
    padding=(0, 0),
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation.

    x: (B, C_in, H, W); weight: (C_out, C_in/groups, kH, kW); bias: (C_out,).
    Output spatial size: (H + 2*pad - k) // stride + 1 per axis.
    """
    if isinstance(stride, int):
        stride = (stride, stride)
    if isinstance(padding, int):
        padding = (padding, padding)
    sh, sw = stride
    ph, pw = padding
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-D (B,C,H,W), got {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be 4-D, got {weight.shape}")
    B, cin, H, W = x.shape
    cout, cin_g, kh, kw = weight.shape
    if cin % groups != 0:
        raise ValueError(f"conv2d: input channels {cin} not divisible by groups {groups}")
    if cout % groups != 0:
        raise ValueError(f"conv2d: output channels {cout} not divisible by groups {groups}")
    if cin_g != cin // groups:
        raise ValueError(
            f"conv2d: weight channel dimension is {cin_g}, expected {cin // groups} "
            f"(= {cin} input channels / {groups} groups)"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    if H + 2 * ph < kh or W + 2 * pw < kw:
        raise ValueError(
            f"conv2d: kernel ({kh}x{kw}) larger than padded input ({H + 2 * ph}x{W + 2 * pw})"
        )
    if sh < 1 or sw < 1:
        raise ValueError(f"conv2d: stride must be positive, got {(sh, sw)}")

    ho = _conv_out_size(H, ph, kh, sh)
    wo = _conv_out_size(W, pw, kw, sw)
    xp = x.data if ph == 0 and pw == 0 else np.pad(
        x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    # win: (B, C_in, Ho, Wo, kh, kw); columns keep positions contiguous:
    # per group a (B, cg*kh*kw, Ho*Wo) stack feeding one batched GEMM
    cg = cin // groups
    og = cout // groups
    dt = x.data.dtype
    cols = []
    out_data = np.empty((B, cout, ho, wo), dtype=dt)
    wflat = weight.data.reshape(cout, cg * kh * kw)
    for g in range(groups):
        wg = win[:, g * cg:(g + 1) * cg]                      # B,cg,Ho,Wo,kh,kw
        col = np.ascontiguousarray(wg.transpose(0, 1, 4, 5, 2, 3)).reshape(
            B, cg * kh * kw, ho * wo
        )
        cols.append(col)
        scores = np.matmul(wflat[g * og:(g + 1) * og][None], col)   # (B, og, Ho*Wo)
        out_data[:, g * og:(g + 1) * og] = scores.reshape(B, og, ho, wo)
    if bias is not None:
        out_data += bias.data.reshape(1, cout, 1, 1)
    out = Tensor(out_data)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        need_x = x.requires_grad
        need_w = weight.requires_grad
        if not (need_x or need_w):
            return
        gx_padded = np.zeros((B, cin, H + 2 * ph, W + 2 * pw), dtype=dt) if need_x else None
        gw = np.zeros_like(weight.data) if need_w else None
        for gi in range(groups):
            go = g[:, gi * og:(gi + 1) * og].reshape(B, og, ho * wo)
            wg_flat = wflat[gi * og:(gi + 1) * og]
            if need_w:
                per_batch = np.matmul(go, cols[gi].transpose(0, 2, 1))  # (B, og, cg*kh*kw)
                gw[gi * og:(gi + 1) * og] = per_batch.sum(axis=0).reshape(og, cg, kh, kw)
            if need_x:
                gcols = np.matmul(wg_flat.T[None], go)          # (B, cg*kh*kw, Ho*Wo)
                gcols = gcols.reshape(B, cg, kh, kw, ho, wo)
                gxg = gx_padded[:, gi * cg:(gi + 1) * cg]
                for i in range(kh):
                    for j in range(kw):
                        s = gxg[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
                        np.add(s, gcols[:, :, i, j], out=s)
        if need_w:
            weight._accumulate(gw)
        if need_x:
            x._accumulate(gx_padded[:, :, ph:ph + H, pw:pw + W])

    return out._record(parents, bwd)


# -- softmax family -------------------------------------------------------------


def softmax_spatial(x: Tensor) -> Tensor:
    """Per-sample softmax over the H*W plane of a (B, 1, H, W) tensor.

    Computed with max subtraction; output values are positive and sum
    to 1 over each plane.
    """
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"softmax_spatial expects (B,1,H,W), got {x.shape}")
    B, _, H, W = x.shape
    flat = x.data.reshape(B, H * W)
    shifted = flat - flat.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y.reshape(B, 1, H, W))

    def bwd(g):
        gf = g.reshape(B, H * W)
        yf = out.data.reshape(B, H * W)
        dot = (gf * yf).sum(axis=1, keepdims=True)
        x._accumulate((yf * (gf - dot)).reshape(B, 1, H, W))

    return out._record((x,), bwd)


def softmax_vector(x: Tensor) -> Tensor:
    """Row-wise softmax of a (B, K) tensor."""
    if x.ndim != 2:
        raise ValueError(f"softmax_vector expects (B,K), got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * out.data).sum(axis=1, keepdims=True)
        x._accumulate(out.data * (g - dot))

    return out._record((x,), bwd)


def cross_entropy(scores: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (B, K) scores against integer labels."""
    if scores.ndim != 2:
        raise ValueError(f"cross_entropy expects (B,K) scores, got {scores.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, K = scores.shape
    if labels.shape[0] != B:
        raise ValueError(f"cross_entropy: {labels.shape[0]} labels for batch of {B}")
    if labels.min() < 0 or labels.max() >= K:
        bad = labels[(labels < 0) | (labels >= K)][0]
        raise ValueError(f"cross_entropy: label {bad} out of range [0, {K})")
    shifted = scores.data - scores.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(B), labels] - lse
    out = Tensor(np.asarray(-logp.mean(), dtype=scores.dtype))

    def bwd(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(B), labels] -= 1.0
        scores._accumulate(g * p / B)

    return out._record((scores,), bwd)


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel y = x * scale[c] + shift[c] for (B, C, H, W) input."""
    if x.ndim != 4:
        raise ValueError(f"channel_affine expects (B,C,H,W), got {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError(
            f"channel_affine: scale/shift must have shape ({c},), got {scale.shape}/{shift.shape}"
        )
    s4 = scale.data.reshape(1, c, 1, 1)
    out = Tensor(x.data * s4 + shift.data.reshape(1, c, 1, 1))

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * s4)
        if scale.requires_grad:
            scale._accumulate((g * x.data).sum(axis=(0, 2, 3)))
        if shift.requires_grad:
            shift._accumulate(g.sum(axis=(0, 2, 3)))

    return out._record((x, scale, shift), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * Tensor(mask)


# -- elementwise dispatcher ------------------------------------------------------

_UNARY = {"tanh": Tensor.tanh, "sigmoid": Tensor.sigmoid, "relu": Tensor.relu}
_BINARY = {"multiply": Tensor.__mul__, "add": Tensor.__add__}


def elementwise(op: str, *args) -> Tensor:
    """Apply a named pointwise op: tanh, sigmoid, relu, multiply, add."""
    if op in _UNARY:
        (x,) = args
        return _UNARY[op](x)
    if op in _BINARY:
        a, b = args
        return _BINARY[op](a, b)
    raise ValueError(f"elementwise: unknown op {op!r}")
