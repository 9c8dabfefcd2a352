"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active, so plain
forward passes (inference, purification) carry no bookkeeping cost::

    with Tape() as tape:
        loss = F.mse(model(x), x)
    tape.backward(loss)

Values are numpy arrays of the current default dtype (float32 unless changed
with :func:`default_dtype`); every op keeps the dtype of its inputs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_DEFAULT_DTYPE = np.float32
_TAPES: list["Tape"] = []


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype new tensors are cast to (e.g. float64 for gradient checks)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True
        self.name = name

    # ---- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # ---- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class _Op:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Ops are appended in execution order, so walking the list backwards is a
    valid reverse topological order. A tape can be replayed once; call
    :meth:`reset` before reusing it.
    """

    def __init__(self, retain_grads: bool = False):
        self.ops: list[_Op] = []
        self.retain_grads = retain_grads
        self.node_grads: dict[int, np.ndarray] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def reset(self) -> None:
        self.ops.clear()
        self.node_grads.clear()
        self._consumed = False

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.ops.append(_Op(out, tuple(inputs), backward))

    def grad(self, t: Tensor) -> np.ndarray | None:
        """Gradient of the last backward's loss w.r.t. any recorded tensor (needs ``retain_grads``)."""
        if t.is_leaf:
            return t.grad
        return self.node_grads.get(id(t))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if self._consumed:
            raise ContractError("tape already replayed; call reset() before a second backward")
        if grad is None:
            if loss.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        for op in reversed(self.ops):
            g = grads.pop(id(op.out), None)
            if g is None:
                continue
            if self.retain_grads:
                self.node_grads[id(op.out)] = g
            in_grads = op.backward(g)
            for t, gi in zip(op.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.is_leaf:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += gi
                else:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        if loss.is_leaf and loss.requires_grad:
            loss.grad = (loss.grad if loss.grad is not None else 0) + grads.get(id(loss), 0)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _make(data: np.ndarray, inputs: Iterable[Tensor], backward: Callable) -> Tensor:
    inputs = tuple(inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.is_leaf = False
    tape = _active_tape()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape.record(out, inputs, backward)
    else:
        out.is_leaf = True
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * g * ad,))


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[i] for i in axes]))
    scale = a.dtype.type(1.0 / count)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, shape).copy(),)

    return _make(np.asarray(a.data.mean(axis=axis)), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must be in [0, 1), got {slope}")
    xd = x.data
    pos = xd > 0
    s = xd.dtype.type(slope)
    out = np.where(pos, xd, xd * s)
    return _make(out, (x,), lambda g: (np.where(pos, g, g * s),))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd > 0
    return _make(xd * pos, (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow."""
    xd = x.data
    out = np.minimum(xd, 0) - np.log1p(np.exp(-np.abs(xd)))
    return _make(out, (x,), lambda g: (g * _sigmoid(-xd),))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    xd = x.data
    keep = xd >= floor
    return _make(np.where(keep, xd, xd.dtype.type(floor)), (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# losses with fused backward rules
# ---------------------------------------------------------------------------

def mse(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise DimensionError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    scale = a.dtype.type(2.0 / diff.size)
    return _make(np.asarray(np.mean(diff * diff)), (a, b),
                 lambda g: (g * scale * diff, -g * scale * diff))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch; ``labels`` are integer class ids."""
    z = logits.data
    n, k = z.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {z.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# indexing
# ---------------------------------------------------------------------------

def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """``table[indices]`` for a 2-D table; gradient is scattered back per row."""
    idx = np.asarray(indices).ravel()
    k = table.shape[0]

    def backward(g):
        onehot = np.zeros((idx.size, k), dtype=g.dtype)
        onehot[np.arange(idx.size), idx] = 1
        return (onehot.T @ g.reshape(idx.size, -1),)

    return _make(table.data[idx], (table,), backward)


def straight_through(z: Tensor, quantized: np.ndarray) -> Tensor:
    """Forward value ``quantized`` (bitwise copy); backward copies the gradient to ``z``."""
    if z.shape != quantized.shape:
        raise DimensionError(f"straight-through shapes differ: {z.shape} vs {quantized.shape}")
    return _make(np.array(quantized, dtype=z.dtype, copy=True), (z,), lambda g: (g,))


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """Columns of a padded NCHW array laid out as (C*kh*kw, N*Ho*Wo)."""
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp.transpose(1, 0, 2, 3), (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return cols, ho, wo


def _col2im(cols: np.ndarray, out_shape, kh: int, kw: int, stride: int, ho: int, wo: int):
    """Adjoint of :func:`_im2col`; returns an NCHW view of a (C, N, H, W) buffer."""
    n, c, hp, wp = out_shape
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + hs:stride, j:j + ws:stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _channel_major(a: np.ndarray) -> np.ndarray:
    """NCHW -> (C, N*H*W)."""
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3)).reshape(a.shape[1], -1)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW ``x`` with an (F, C, kh, kw) kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernel expects {kc}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    xp = _pad(x.data, padding)
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wm = kernel.data.reshape(f, -1)
    out = wm @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3))
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gm = _channel_major(g)
        gx = None
        if x.requires_grad:
            gx = _col2im(wm.T @ gm, xp.shape, kh, kw, stride, ho, wo)
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
        gk = (gm @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, gm.sum(axis=1)

    return _make(out, inputs, backward)


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` used as a forward map; kernel is (C_in, F, kh, kw)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d_transpose expects 4-D tensors, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    kc, f, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d_transpose channel mismatch: input has {c}, kernel expects {kc}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    if hf - 2 * padding < 1 or wf - 2 * padding < 1:
        raise DimensionError("padding removes the whole output")
    xm = _channel_major(x.data)
    km = kernel.data.reshape(c, f * kh * kw)
    full = _col2im(km.T @ xm, (n, f, hf, wf), kh, kw, stride, h, w)
    out = full[:, :, padding:hf - padding, padding:wf - padding] if padding else full
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = np.ascontiguousarray(out)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gcols, _, _ = _im2col(_pad(g, padding), kh, kw, stride)
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray((km @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3))
        gk = (xm @ gcols.T).reshape(kernel.shape) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    return _make(out, inputs, backward)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"group_norm expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"channels ({c}) not divisible by groups ({groups})")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    gd = gamma.data[:, None, None]
    out = xhat * gd + beta.data[:, None, None]

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = (g * gd).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                        - xh * (dxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(n, c, h, w)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# spectral normalisation
# ---------------------------------------------------------------------------

class PowerIterState:
    """Persistent left/right singular-vector estimates for one weight."""

    def __init__(self, out_dim: int, in_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.u = _unit(rng.standard_normal(out_dim)).astype(dtype)
        self.v = _unit(rng.standard_normal(in_dim)).astype(dtype)


def _unit(a: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return a / (np.linalg.norm(a) + eps)


def spectral_normalize(weight: Tensor, state: PowerIterState, power_iters: int = 1,
                       update: bool = True) -> Tensor:
    """Divide ``weight`` by a power-iteration estimate of its largest singular value.

    Conv kernels are viewed as (out, in*kh*kw). The singular vectors are
    treated as constants in the backward pass.
    """
    if power_iters < 1:
        raise ValueError("power_iters must be >= 1")
    w2 = weight.data.reshape(weight.shape[0], -1)
    u, v = state.u, state.v
    if update:
        for _ in range(power_iters):
            v = _unit(w2.T @ u)
            u = _unit(w2 @ v)
        state.u, state.v = u.astype(w2.dtype), v.astype(w2.dtype)
    sigma = float(u @ w2 @ v)
    if not np.isfinite(sigma) or abs(sigma) < 1e-12:
        zeros = np.zeros_like(weight.data)
        return _make(zeros, (weight,), lambda g: (np.zeros_like(g),))
    w_sn = weight.data / weight.dtype.type(sigma)
    uv = np.outer(u, v).reshape(weight.shape).astype(weight.dtype)

    def backward(g):
        return ((g - (g * w_sn).sum() * uv) / weight.dtype.type(sigma),)

    return _make(w_sn, (weight,), backward)
