"""Reverse-mode automatic differentiation on dense float64 arrays.

A ``Tensor`` wraps a numpy array; operations executed while a ``GradTape``
is active are recorded as a linear Wengert list.  ``GradTape.backward``
replays the list in reverse, visiting every recorded op exactly once, and
accumulates gradients additively into every tensor that requires them.
Running backward twice without clearing the tape therefore doubles every
gradient exactly.

Binary elementwise ops require equal shapes; the only broadcasting allowed
is scalar-against-tensor (either operand of size one).  This keeps every
backward rule auditable by hand.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes violate an op contract."""


class DomainError(ValueError):
    """Raised when values fall outside an op's mathematical domain."""


_TAPE_STACK: list["GradTape"] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    __slots__ = ("_data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._tape = None

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value):
        # always hold a float64 ndarray; plain assignment of a numpy scalar
        # (e.g. the result of 0-d arithmetic) would otherwise demote it
        self._data = np.asarray(value, dtype=np.float64)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; plain numbers become constant tensors
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class GradTape:
    """Ordered record of executed ops.  Use as a context manager:

        with GradTape() as tape:
            loss = ...
        tape.backward(loss)
    """

    def __init__(self):
        self._entries = []       # (out, inputs, vjp)
        self._tensors = {}       # id -> Tensor, for clear()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def record(self, out: Tensor, inputs, vjp):
        self._entries.append((out, inputs, vjp))
        self._tensors[id(out)] = out
        for t in inputs:
            self._tensors[id(t)] = t

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(t) into t.grad for every recorded tensor
        that requires grad.  loss must be scalar."""
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        adjoint = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._entries):
            g = adjoint.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                acc = adjoint.get(id(t))
                adjoint[id(t)] = gi if acc is None else acc + gi
        for tid, g in adjoint.items():
            t = self._tensors.get(tid)
            if t is None:       # the loss itself when it is a leaf
                t = loss if tid == id(loss) else None
            if t is not None and t.requires_grad:
                t.accumulate_grad(g)

    def clear(self):
        """Drop all recorded ops and reset the grads of every tensor that
        appeared on the tape to zero."""
        for t in self._tensors.values():
            t.zero_grad()
        self._entries.clear()
        self._tensors.clear()


def backward(loss: Tensor):
    """Convenience wrapper: run backward on the tape that recorded `loss`."""
    if loss._tape is None:
        raise RuntimeError("loss was not produced under an active GradTape")
    loss._tape.backward(loss)


def _make(data, inputs, vjp) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, vjp)
        out._tape = tape
    return out


def _check_elementwise(a: Tensor, b: Tensor, opname: str):
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are neither equal nor scalar")


def _reduce_to(g, shape):
    # undo scalar broadcasting: collapse g back to the scalar operand's shape
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_reduce_to(g * b.data, a.shape),
                            _reduce_to(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: divisor contains zero")
    return _make(a.data / b.data, (a, b),
                 lambda g: (_reduce_to(g / b.data, a.shape),
                            _reduce_to(-g * a.data / (b.data ** 2), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise DomainError(f"clamp: lo={lo} > hi={hi}")
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dims {ad.shape} @ {bd.shape}")

        def vjp(g):
            return g @ bd.T, ad.T @ g

    elif ad.ndim == 3 and bd.ndim == 2:
        if ad.shape[2] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dims {ad.shape} @ {bd.shape}")

        def vjp(g):
            k, n = bd.shape
            return (g @ bd.T,
                    ad.reshape(-1, k).T @ g.reshape(-1, n))

    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ShapeError(f"matmul: batched dims {ad.shape} @ {bd.shape}")

        def vjp(g):
            return (g @ bd.transpose(0, 2, 1),
                    ad.transpose(0, 2, 1) @ g)

    else:
        raise ShapeError(f"matmul: unsupported ranks {ad.ndim} and {bd.ndim}")
    return _make(ad @ bd, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes (plain transpose for 2-d tensors)."""
    if a.data.ndim < 2:
        raise ShapeError("transpose needs rank >= 2")
    return _make(np.swapaxes(a.data, -1, -2), (a,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(f"concat: leading dims differ {a.shape} vs {b.shape}")
    na = a.data.shape[-1]
    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b),
                 lambda g: (g[..., :na], g[..., na:]))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate (B,C,H,W) feature maps along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels needs 4-d inputs, got {a.shape} and {b.shape}")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape} vs {b.shape}")
    ca = a.data.shape[1]
    return _make(np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :ca], g[:, ca:]))


def slice_last(a: Tensor, lo: int, hi: int) -> Tensor:
    """a[..., lo:hi] with scatter backward."""
    def vjp(g):
        full = np.zeros_like(a.data)
        full[..., lo:hi] = g
        return (full,)
    return _make(a.data[..., lo:hi].copy(), (a,), vjp)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., n] + b[n], bias broadcast over leading axes."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"add_bias: {x.shape} + {b.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _make(x.data + b.data, (x, b),
                 lambda g: (g, g.sum(axis=axes)))


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup table[idx] (embedding); backward scatter-adds."""
    if table.data.ndim != 2:
        raise ShapeError("gather_rows: table must be 2-d")
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (dt,)

    return _make(table.data[idx], (table,), vjp)


def select_batch(a: Tensor, i: int) -> Tensor:
    """Pick element i along the leading axis; backward scatters into a zero slab."""
    if a.data.ndim < 1:
        raise ShapeError("select_batch: input must have a leading axis")
    if not 0 <= i < a.data.shape[0]:
        raise ShapeError(f"select_batch: index {i} out of range for axis of size {a.data.shape[0]}")

    def vjp(g):
        da = np.zeros_like(a.data)
        da[i] = g
        return (da,)

    return _make(a.data[i].copy(), (a,), vjp)


# ---------------------------------------------------------------------------
# reductions and normalizations


def tsum(a: Tensor) -> Tensor:
    return _make(np.sum(a.data).reshape(()), (a,),
                 lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.mean(a.data).reshape(()), (a,),
                 lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


def softmax_rows(a: Tensor) -> Tensor:
    """Numerically stable softmax along the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = np.sum(g * s, axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (a,), vjp)


def l2_normalize(a: Tensor) -> Tensor:
    """x / ||x|| for 1-d x; the zero vector maps to itself with zero grad."""
    if a.data.ndim != 1:
        raise ShapeError("l2_normalize expects a 1-d tensor")
    n = float(np.linalg.norm(a.data))
    if n < NORM_EPS:
        return _make(np.zeros_like(a.data), (a,),
                     lambda g: (np.zeros_like(a.data),))
    y = a.data / n

    def vjp(g):
        return ((g - y * np.dot(y, g)) / n,)

    return _make(y, (a,), vjp)


# ---------------------------------------------------------------------------
# grid ops for the toy segmentor (NCHW layout)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 same-padding convolution, stride 1.

    x: (B, Cin, H, W), w: (Cout, Cin, 3, 3), b: (Cout,).
    """
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or wd.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: got x{xd.shape}, w{wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch x{xd.shape} w{wd.shape}")
    B, Cin, H, W = xd.shape
    Cout = wd.shape[0]
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # cols: (B, H, W, Cin, 3, 3) -> (B*H*W, Cin*9)
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, Cin * 9)
    wf = wd.reshape(Cout, Cin * 9)
    out = (cols @ wf.T + b.data).reshape(B, H, W, Cout).transpose(0, 3, 1, 2)

    def vjp(g):
        gf = g.transpose(0, 2, 3, 1).reshape(B * H * W, Cout)
        dw = (gf.T @ cols).reshape(Cout, Cin, 3, 3)
        db = gf.sum(axis=0)
        dcols = (gf @ wf).reshape(B, H, W, Cin, 3, 3)
        dxp = np.zeros_like(xp)
        for ky in range(3):
            for kx in range(3):
                dxp[:, :, ky:ky + H, kx:kx + W] += dcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1], dw, db

    return _make(out, (x, w, b), vjp)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("avg_pool2d expects (B, C, H, W)")
    B, C, H, W = xd.shape
    if H % factor or W % factor:
        raise ShapeError(f"avg_pool2d: {H}x{W} not divisible by {factor}")
    if factor == 1:
        return _make(xd.copy(), (x,), lambda g: (g,))
    r = xd.reshape(B, C, H // factor, factor, W // factor, factor)
    out = r.mean(axis=(3, 5))

    def vjp(g):
        gexp = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        return (gexp / (factor * factor),)

    return _make(out, (x,), vjp)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("upsample_nearest expects (B, C, H, W)")
    if factor == 1:
        return _make(xd.copy(), (x,), lambda g: (g,))
    out = np.repeat(np.repeat(xd, factor, axis=2), factor, axis=3)
    B, C, H, W = xd.shape

    def vjp(g):
        r = g.reshape(B, C, H, factor, W, factor)
        return (r.sum(axis=(3, 5)),)

    return _make(out, (x,), vjp)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route gradient to the first argument."""
    _check_elementwise(a, b, "minimum")
    take_a = a.data <= b.data
    return _make(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (_reduce_to(g * take_a, a.shape),
                            _reduce_to(g * ~take_a, b.shape)))
