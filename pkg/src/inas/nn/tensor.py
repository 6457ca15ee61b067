"""Reverse-mode automatic differentiation over numpy arrays.

The op set is deliberately narrow: grouped/depthwise convolution,
dense, ReLU6, per-channel affine, global average pooling, sigmoid,
softmax cross-entropy, and the elementwise/reduction arithmetic the
policy-gradient loss needs. No higher-order gradients, no control
flow on the tape.
"""
from __future__ import annotations

import contextlib

import numpy as np

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Skip tape construction inside the block (inference paths)."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


def set_default_dtype(dtype) -> None:
    """Select float64 (verification mode) or float32 (speed mode)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A numpy array plus the tape node that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE) if not isinstance(data, np.ndarray) else data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward_fn = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_as_array(other, self.dtype))

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _as_array(value, dtype):
    if isinstance(value, np.ndarray):
        return value
    return np.asarray(value, dtype=dtype)


def _node(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def backward(loss: Tensor) -> None:
    """Populate .grad on every tensor reachable from `loss`."""
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise RuntimeError("backward already ran for this tensor; re-run the forward pass first")
    loss._done = True
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b) -> Tensor:
    bv = b.data if isinstance(b, Tensor) else _as_array(b, a.dtype)
    out_data = a.data + bv
    if isinstance(b, Tensor):
        def bwd(g):
            _accumulate(a, _unbroadcast(g, a.data.shape))
            _accumulate(b, _unbroadcast(g, b.data.shape))
        return _node(out_data, (a, b), bwd)

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
    return _node(out_data, (a,), bwd)


def mul(a: Tensor, b) -> Tensor:
    bv = b.data if isinstance(b, Tensor) else _as_array(b, a.dtype)
    out_data = a.data * bv
    if isinstance(b, Tensor):
        def bwd(g):
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))
        return _node(out_data, (a, b), bwd)

    def bwd(g):
        _accumulate(a, _unbroadcast(g * bv, a.data.shape))
    return _node(out_data, (a,), bwd)


def reduce_sum(t: Tensor, axis=None) -> Tensor:
    out_data = t.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            _accumulate(t, np.broadcast_to(g, t.data.shape).astype(t.dtype, copy=False))
        else:
            _accumulate(t, np.broadcast_to(np.expand_dims(g, axis), t.data.shape))
    return _node(out_data, (t,), bwd)


def reduce_mean(t: Tensor, axis=None) -> Tensor:
    n = t.size if axis is None else t.data.shape[axis]
    return mul(reduce_sum(t, axis), 1.0 / n)


def clamp(t: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(t.data, lo, hi)
    mask = (t.data >= lo) & (t.data <= hi)

    def bwd(g):
        _accumulate(t, g * mask)
    return _node(out_data, (t,), bwd)


def log(t: Tensor) -> Tensor:
    out_data = np.log(t.data)

    def bwd(g):
        _accumulate(t, g / t.data)
    return _node(out_data, (t,), bwd)


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accumulate(t, g * out_data * (1.0 - out_data))
    return _node(out_data, (t,), bwd)


def relu6(t: Tensor) -> Tensor:
    out_data = np.clip(t.data, 0.0, 6.0)
    mask = (t.data > 0.0) & (t.data < 6.0)

    def bwd(g):
        _accumulate(t, g * mask)
    return _node(out_data, (t,), bwd)


def reshape(t: Tensor, shape) -> Tensor:
    out_data = t.data.reshape(shape)

    def bwd(g):
        _accumulate(t, g.reshape(t.data.shape))
    return _node(out_data, (t,), bwd)


# ---------------------------------------------------------------------------
# dense / pooling / normalization


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2:
        raise ValueError(f"dense expects 2-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"dense: input feature dim {x.shape[1]} != weight rows {w.shape[0]}")
    out_data = x.data @ w.data
    if b is not None:
        out_data = out_data + b.data

    def bwd(g):
        _accumulate(x, g @ w.data.T)
        _accumulate(w, x.data.T @ g)
        if b is not None:
            _accumulate(b, g.sum(axis=0))
    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, bwd)


def global_avg_pool(t: Tensor) -> Tensor:
    if t.ndim != 4:
        raise ValueError(f"global_avg_pool expects NCHW input, got shape {t.shape}")
    n, c, h, w = t.shape
    out_data = t.data.mean(axis=(2, 3))
    scale = 1.0 / (h * w)

    def bwd(g):
        _accumulate(t, np.broadcast_to(g[:, :, None, None] * scale, t.data.shape))
    return _node(out_data, (t,), bwd)


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel learned scale+shift over NCHW (the normalization stand-in)."""
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"channel_affine: scale/shift must have shape ({c},), got {scale.shape}/{shift.shape}")
    s = scale.data[None, :, None, None]
    out_data = x.data * s + shift.data[None, :, None, None]

    def bwd(g):
        _accumulate(x, g * s)
        _accumulate(scale, (g * x.data).sum(axis=(0, 2, 3)))
        _accumulate(shift, g.sum(axis=(0, 2, 3)))
    return _node(out_data, (x, scale, shift), bwd)


# ---------------------------------------------------------------------------
# convolution


def _conv_out_hw(h, w, k, stride, padding):
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    return oh, ow


def _pad_nchw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    """Return patches [N, C*k*k, OH*OW] (a copy) and the output spatial dims."""
    n, c, h, w = x.shape
    oh, ow = _conv_out_hw(h, w, k, stride, padding)
    if k == 1 and stride == 1 and padding == 0:
        return x.reshape(n, c, h * w), oh, ow
    xp = _pad_nchw(x, padding)
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return win.reshape(n, c * k * k, oh * ow), oh, ow


def _col2im(dpatches: np.ndarray, x_shape, k: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh, ow = _conv_out_hw(h, w, k, stride, padding)
    if k == 1 and stride == 1 and padding == 0:
        return dpatches.reshape(n, c, h, w)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dpatches.dtype)
    dp = dpatches.reshape(n, c, k, k, oh, ow)
    for a in range(k):
        for b in range(k):
            dxp[:, :, a:a + stride * (oh - 1) + 1:stride, b:b + stride * (ow - 1) + 1:stride] += dp[:, :, a, b]
    if padding == 0:
        return dxp
    return dxp[:, :, padding:padding + h, padding:padding + w]


def _depthwise_fwd(x, w, stride, padding, oh, ow):
    n, c = x.shape[:2]
    k = w.shape[2]
    xp = _pad_nchw(x, padding)
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            out += w[:, 0, a, b][None, :, None, None] * xp[:, :, a:a + stride * (oh - 1) + 1:stride, b:b + stride * (ow - 1) + 1:stride]
    return out


def _depthwise_bwd(g, x, w, stride, padding, oh, ow):
    n, c, h, wd = x.shape
    k = w.shape[2]
    xp = _pad_nchw(x, padding)
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for a in range(k):
        for b in range(k):
            sl = np.s_[:, :, a:a + stride * (oh - 1) + 1:stride, b:b + stride * (ow - 1) + 1:stride]
            dw[:, 0, a, b] = (g * xp[sl]).sum(axis=(0, 2, 3))
            dxp[sl] += g * w[:, 0, a, b][None, :, None, None]
    dx = dxp if padding == 0 else dxp[:, :, padding:padding + h, padding:padding + wd]
    return dx, dw


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-d cross-correlation, NCHW input, [OC, C/groups, K, K] weight, no bias."""
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-d NCHW, got shape {x.shape}")
    if w.ndim != 4:
        raise ValueError(f"conv2d: weight must be 4-d, got shape {w.shape}")
    n, c, h, wd = x.shape
    oc, cg, kh, kw = w.shape
    if kh != kw:
        raise ValueError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if groups < 1 or c % groups != 0:
        raise ValueError(f"conv2d: input channels {c} not divisible by groups {groups}")
    if oc % groups != 0:
        raise ValueError(f"conv2d: output channels {oc} not divisible by groups {groups}")
    if cg != c // groups:
        raise ValueError(f"conv2d: weight expects {cg} channels per group, input provides {c // groups}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {kh} exceeds padded input {h + 2 * padding}x{wd + 2 * padding}")

    oh, ow = _conv_out_hw(h, wd, kh, stride, padding)
    k = kh
    depthwise = groups == c and oc == c and groups > 1

    if depthwise:
        out_data = _depthwise_fwd(x.data, w.data, stride, padding, oh, ow)

        def bwd(g):
            dx, dw = _depthwise_bwd(g, x.data, w.data, stride, padding, oh, ow)
            _accumulate(x, dx)
            _accumulate(w, dw)
        return _node(out_data, (x, w), bwd)

    if groups == 1:
        patches, _, _ = _im2col(x.data, k, stride, padding)
        w2 = w.data.reshape(oc, cg * k * k)
        out_data = np.matmul(w2, patches).reshape(n, oc, oh, ow)

        def bwd(g):
            g2 = g.reshape(n, oc, oh * ow)
            pat, _, _ = _im2col(x.data, k, stride, padding)
            dw2 = np.einsum("nop,nkp->ok", g2, pat, optimize=True)
            _accumulate(w, dw2.reshape(w.data.shape))
            dpatches = np.matmul(w2.T, g2)
            _accumulate(x, _col2im(dpatches, x.data.shape, k, stride, padding))
        return _node(out_data, (x, w), bwd)

    # general grouped case: per-group dense conv
    ocg = oc // groups
    out_data = np.empty((n, oc, oh, ow), dtype=x.dtype)
    for gi in range(groups):
        pat, _, _ = _im2col(x.data[:, gi * cg:(gi + 1) * cg], k, stride, padding)
        wg = w.data[gi * ocg:(gi + 1) * ocg].reshape(ocg, cg * k * k)
        out_data[:, gi * ocg:(gi + 1) * ocg] = np.matmul(wg, pat).reshape(n, ocg, oh, ow)

    def bwd(g):
        dw = np.zeros_like(w.data)
        dx = np.zeros_like(x.data)
        for gi in range(groups):
            gg = g[:, gi * ocg:(gi + 1) * ocg].reshape(n, ocg, oh * ow)
            xg = x.data[:, gi * cg:(gi + 1) * cg]
            pat, _, _ = _im2col(xg, k, stride, padding)
            dwg = np.einsum("nop,nkp->ok", gg, pat, optimize=True)
            dw[gi * ocg:(gi + 1) * ocg] = dwg.reshape(ocg, cg, k, k)
            wg = w.data[gi * ocg:(gi + 1) * ocg].reshape(ocg, cg * k * k)
            dpat = np.matmul(wg.T, gg)
            dx[:, gi * cg:(gi + 1) * cg] = _col2im(dpat, xg.shape, k, stride, padding)
        _accumulate(w, dw)
        _accumulate(x, dx)
    return _node(out_data, (x, w), bwd)


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-subtracted."""
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: logits must be [N, K], got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"softmax_cross_entropy: label {bad} out of range [0, {k})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    loge = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    nll = -loge[np.arange(n), labels]
    out_data = np.asarray(nll.mean(), dtype=z.dtype)

    def bwd(g):
        soft = np.exp(loge)
        soft[np.arange(n), labels] -= 1.0
        _accumulate(logits, g * soft / n)
    return _node(out_data, (logits,), bwd)
