"""Dense float64 tensors with reverse-mode automatic differentiation.

Ops execute eagerly on numpy arrays and record a backward closure on the
output tensor. `backward` topologically sorts the recorded subgraph into a
tape and replays it in reverse, accumulating gradients on requires_grad
leaves. Everything is float64 so finite-difference checks stay tight.

The op set is the minimal closure over the region-pooling pipeline and its
losses: arithmetic, matmul, 1x1/3x3 convolution, sigmoid, softmax, log,
power, sin/cos, clamp, reductions, reshape/transpose/concat and layer norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes incompatible; message names the offending op."""


class DomainError(ValueError):
    """Input outside an op's documented domain (e.g. log of a negative)."""


class TapeNode:
    """One recorded op: its name, input tensors and local-gradient closure.

    `grad_fn(out_grad)` returns one gradient array per input (or None for
    inputs that do not need one).
    """

    __slots__ = ("op", "inputs", "grad_fn")

    def __init__(self, op, inputs, grad_fn):
        self.op = op
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tensor:
    """A dense float64 array, optionally tracked for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def backward(self):
        return backward(self)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _live(*tensors):
    """True if any input is on the tape or wants a gradient."""
    return any(t.requires_grad or t.node is not None for t in tensors)


def _make(data, op, inputs, grad_fn):
    out = Tensor(data)
    if _live(*inputs):
        out.node = TapeNode(op, tuple(inputs), grad_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(a.data + b.data, "add", (a, b), grad_fn)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(a.data - b.data, "sub", (a, b), grad_fn)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, "mul", (a, b), grad_fn)


def div(a, b):
    """a / b as a * b**-1; b must be nonzero."""
    return mul(a, power(b, -1.0))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not align")

    def grad_fn(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _make(ad @ bd, "matmul", (a, b), grad_fn)


# ---------------------------------------------------------------------------
# nonlinearities and pointwise functions

def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _make(out, "sigmoid", (a,), grad_fn)


def silu(a):
    """Smooth nonlinearity x * sigmoid(x), composed from tape ops."""
    a = as_tensor(a)
    return mul(a, sigmoid(a))


def log(a):
    """Natural log over [0, inf); values below 1e-12 are floored there."""
    a = as_tensor(a)
    x = a.data
    if np.any(x < 0):
        raise DomainError("log: negative input")
    safe = np.maximum(x, LOG_FLOOR)

    def grad_fn(g):
        return (g * (x >= LOG_FLOOR) / safe,)

    return _make(np.log(safe), "log", (a,), grad_fn)


def power(a, p):
    """Elementwise a**p for a real exponent; fractional p requires a >= 0."""
    a = as_tensor(a)
    p = float(p)
    x = a.data
    if p != round(p) and np.any(x < 0):
        raise DomainError(f"power: fractional exponent {p} on negative base")
    if p < 0 and np.any(x == 0):
        raise DomainError(f"power: exponent {p} at zero base")
    out = np.power(x, p)

    def grad_fn(g):
        if p == 0.0:
            return (np.zeros_like(x),)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(x, p - 1.0)
        # subgradient 0 where x**(p-1) blows up at the origin
        d = np.where(np.isfinite(d), d, 0.0)
        return (g * d,)

    return _make(out, "power", (a,), grad_fn)


def sin(a):
    a = as_tensor(a)
    x = a.data

    def grad_fn(g):
        return (g * np.cos(x),)

    return _make(np.sin(x), "sin", (a,), grad_fn)


def cos(a):
    a = as_tensor(a)
    x = a.data

    def grad_fn(g):
        return (-g * np.sin(x),)

    return _make(np.cos(x), "cos", (a,), grad_fn)


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes only where unclamped."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)

    def grad_fn(g):
        return (g * inside,)

    return _make(np.clip(x, lo, hi), "clamp", (a,), grad_fn)


def softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, "softmax", (a,), grad_fn)


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    x = a.data
    n = x.shape[-1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({n},)")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    gd = gain.data

    def grad_fn(g):
        dgain = (g * xhat).reshape(-1, n).sum(axis=0)
        dbias = g.reshape(-1, n).sum(axis=0)
        gx = g * gd
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _make(xhat * gd + bias.data, "layer_norm", (a, gain, bias), grad_fn)


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    x = a.data
    out = x.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, "sum", (a,), grad_fn)


def mean_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    x = a.data
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[ax] for ax in axes]))
    out = x.mean(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(out, "mean", (a,), grad_fn)


def reshape(a, shape):
    a = as_tensor(a)
    x = a.data
    if np.prod(shape, dtype=int) != x.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _make(x.reshape(shape), "reshape", (a,), grad_fn)


def transpose(a, axes=None):
    a = as_tensor(a)
    x = a.data
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)

    def grad_fn(g):
        return (g.transpose(inverse),)

    return _make(x.transpose(axes), "transpose", (a,), grad_fn)


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate(datas, axis=axis), "concatenate", tensors, grad_fn)


# ---------------------------------------------------------------------------
# convolutions on (W, H, C) feature maps

def conv1x1(a, weight, bias=None):
    """Pointwise channel map: (W, H, Cin) x (Cin, Cout) -> (W, H, Cout)."""
    a, weight = as_tensor(a), as_tensor(weight)
    w_dim, h_dim, cin = a.data.shape
    if weight.data.shape[0] != cin:
        raise ShapeError(f"conv1x1: input has {cin} channels, kernel expects {weight.data.shape[0]}")
    flat = reshape(a, (w_dim * h_dim, cin))
    out = matmul(flat, weight)
    if bias is not None:
        out = add(out, bias)
    return reshape(out, (w_dim, h_dim, weight.data.shape[1]))


def conv2d_3x3(a, weight, bias):
    """3x3 convolution with zero padding 1: (W, H, Cin) -> (W, H, Cout)."""
    a, weight, bias = as_tensor(a), as_tensor(weight), as_tensor(bias)
    x = a.data
    w_dim, h_dim, cin = x.shape
    if weight.data.shape[:3] != (3, 3, cin):
        raise ShapeError(f"conv2d_3x3: kernel {weight.data.shape} does not match input {x.shape}")
    cout = weight.data.shape[3]

    xp = np.zeros((w_dim + 2, h_dim + 2, cin))
    xp[1:-1, 1:-1, :] = x
    cols = np.concatenate(
        [xp[di:di + w_dim, dj:dj + h_dim, :] for di in range(3) for dj in range(3)],
        axis=2,
    ).reshape(w_dim * h_dim, 9 * cin)
    wmat = weight.data.reshape(9 * cin, cout)
    out = (cols @ wmat + bias.data).reshape(w_dim, h_dim, cout)

    def grad_fn(g):
        gf = g.reshape(w_dim * h_dim, cout)
        dw = (cols.T @ gf).reshape(3, 3, cin, cout)
        db = gf.sum(axis=0)
        dcols = (gf @ wmat.T).reshape(w_dim, h_dim, 9, cin)
        dxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                dxp[di:di + w_dim, dj:dj + h_dim, :] += dcols[:, :, di * 3 + dj, :]
        return dxp[1:-1, 1:-1, :], dw, db

    return _make(out, "conv2d_3x3", (a, weight, bias), grad_fn)


# ---------------------------------------------------------------------------
# tape construction and backward pass

class Tape:
    """Topologically ordered list of recorded ops below one output tensor."""

    def __init__(self, order):
        self.order = order  # tensors with nodes, producers before consumers

    @classmethod
    def from_root(cls, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            t, done = stack.pop()
            if done:
                order.append(t)
                continue
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t.node.inputs:
                stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.order)

    def backward(self, root):
        """Replay recorded ops in reverse once, accumulating leaf gradients."""
        grads = {id(root): np.ones_like(root.data)}
        leaves = {}
        if root.node is None:
            if root.requires_grad:
                leaves[id(root)] = root
        for t in reversed(self.order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            for parent, pg in zip(t.node.inputs, t.node.grad_fn(g)):
                if pg is None:
                    continue
                if parent.node is None and not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent.node is None:
                    leaves[key] = parent
        result = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64).reshape(leaf.data.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            result[leaf] = g
        return result


def backward(loss):
    """Accumulate d(loss)/d(leaf) on every requires_grad leaf below `loss`.

    Returns the map from leaf tensors to this call's gradient contribution.
    Repeated calls keep accumulating into `.grad`.
    """
    loss = as_tensor(loss)
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    return Tape.from_root(loss).backward(loss)


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst: tuple | None = None  # (leaf position, flat index)
    note: str = ""

    def __bool__(self):
        return self.passed


def grad_check(f, leaves, step=1e-5, tol=1e-4):
    """Compare analytic gradients of scalar `f(*leaves)` to central differences.

    Perturbs each leaf coordinate by +/-step in place, so `f` must recompute
    from the tensors' current data. Relative error uses an absolute floor of
    1e-8 to avoid blowing up near-zero gradients. Non-finite evaluations are
    reported as failure rather than raised.
    """
    if not 0 < step <= 1e-2:
        raise ValueError(f"grad_check: step {step} outside (0, 1e-2]")
    for leaf in leaves:
        leaf.grad = None
    out = f(*leaves)
    if not np.isfinite(out.data).all():
        return GradCheckReport(False, np.inf, note="non-finite forward value")
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in leaves]

    max_rel = 0.0
    worst = None
    for li, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        a_flat = analytic[li].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(*leaves).item()
            flat[i] = orig - step
            lo = f(*leaves).item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                return GradCheckReport(False, np.inf, (li, i), "non-finite evaluation")
            numeric = (hi - lo) / (2.0 * step)
            rel = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel, worst = rel, (li, i)
    return GradCheckReport(max_rel < tol, max_rel, worst)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None
