"""Dense float64 tensors with a reverse-mode gradient tape.

Every primitive that touches a tensor flagged ``requires_grad`` appends its
output to the active thread's :class:`GradTape`. :func:`backward` replays the
tape in reverse recorded order, pushing adjoints to the inputs, and then
clears it. Use :func:`no_grad` around evaluation code so that nothing is
recorded.
"""

import contextlib
import threading

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, DimensionError

_SQRT_2PI = np.sqrt(2.0 * np.pi)


class GradTape:
    """Ordered record of recorded primitive outputs."""

    def __init__(self):
        self.entries = []
        self.enabled = True

    def record(self, out):
        self.entries.append(out)

    def clear(self):
        for out in self.entries:
            out._inputs = ()
            out._backward = None
        self.entries = []

    def __len__(self):
        return len(self.entries)


_local = threading.local()


def current_tape():
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = GradTape()
    return tape


@contextlib.contextmanager
def no_grad():
    tape = current_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_inputs", "_backward", "_adj")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._inputs = ()
        self._backward = None
        self._adj = None

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
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only supported by scalars")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(data, inputs, backward):
    """Create the output tensor of a primitive and tape it if needed.

    ``backward(g)`` must return one adjoint (or None) per input.
    """
    tape = current_tape()
    needs = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._inputs = tuple(inputs)
        out._backward = backward
        tape.record(out)
    return out


def backward(loss):
    """Populate ``.grad`` on every requires_grad ancestor of a scalar loss."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", type(loss).__name__)
        raise ContractError(f"backward() needs a scalar loss, got shape {shape}")
    tape = current_tape()
    if not loss.requires_grad:
        tape.clear()
        raise ContractError("loss does not depend on any tensor with requires_grad")
    loss._adj = np.ones_like(loss.data)
    leaves = {}
    for out in reversed(tape.entries):
        g = out._adj
        if g is None:
            continue
        grads = out._backward(g)
        for inp, gi in zip(out._inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            inp._adj = gi if inp._adj is None else inp._adj + gi
            if inp._backward is None:
                leaves[id(inp)] = inp
        out.grad = g if out.grad is None else out.grad + g
        out._adj = None
    if loss._backward is None:
        leaves[id(loss)] = loss
    for leaf in leaves.values():
        leaf.grad = leaf._adj if leaf.grad is None else leaf.grad + leaf._adj
        leaf._adj = None
    tape.clear()


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    # Only bias-like broadcasting: the result must have the shape of one operand.
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match") from None
    if out != a.shape and out != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return record_op(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return record_op(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return record_op(ad * bd, (a, b), bw)


def matmul(a, b):
    """Matrix product over the last two axes; leading axes of ``a`` batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # Collapse leading axes so the product is a single GEMM call.
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

        def bw(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return record_op(out, (a, b), bw)

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return record_op(ad @ bd, (a, b), bw)


def reshape(x, shape):
    x = as_tensor(x)
    src = x.shape
    return record_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x, idx):
    x = as_tensor(x)
    shape = x.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return record_op(x.data[idx], (x,), bw)


def take_rows(table, idx):
    """Gather rows of a 2-D table; adjoints scatter-add back."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return record_op(table.data[idx], (table,), bw)


def tsum(x, axis=None):
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record_op(x.data.sum(axis=axis), (x,), bw)


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis) * (1.0 / n)


def square(x):
    x = as_tensor(x)
    xd = x.data
    return record_op(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def mse(pred, target):
    """Mean of squared elementwise differences."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        gp = (2.0 / n) * diff * g
        return gp, -gp

    return record_op(np.mean(diff * diff), (pred, target), bw)


def softmax_rows(x, scale=1.0):
    """Softmax of ``scale * x`` over the last axis, stabilised by the row max."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_rows: needs a non-empty last axis, got {x.shape}")
    if scale <= 0:
        raise ContractError(f"softmax_rows: scale must be positive, got {scale}")
    z = scale * x.data
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (scale * y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record_op(y, (x,), bw)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    x = as_tensor(x)
    xd = x.data
    cdf = ndtr(xd)

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) / _SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return record_op(xd * cdf, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gx = g * gain.data
        dx = inv * (
            gx - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record_op(xhat * gain.data + bias.data, (x, gain, bias), bw)


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference estimate of d f(x) / dx for a scalar-valued ``f``.

    ``x`` is perturbed in place and restored; ``f`` runs with the tape off.
    """
    if eps <= 0:
        raise ContractError("finite_diff_grad: eps must be positive")
    x = as_tensor(x)
    flat = x.data.reshape(-1)
    out = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f(x))
            flat[i] = orig - eps
            fm = _scalar(f(x))
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * eps)
    return Tensor(out.reshape(x.shape))


def _scalar(v):
    return float(v.data) if isinstance(v, Tensor) else float(v)


def max_rel_error(a, b, floor=1e-6):
    """Largest elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a = a.data if isinstance(a, Tensor) else np.asarray(a)
    b = b.data if isinstance(b, Tensor) else np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
