"""Define-by-run reverse-mode differentiation.

A :class:`Tape` is built fresh for each loss evaluation.  Parameters enter
the tape through :meth:`Tape.watch`, which returns the same leaf every time
it is called for a given parameter, so a weight read by both the encoding
pass and the transposed decoding pass collects the sum of both path
contributions in one gradient slot.

Only operations registered in :data:`OPS` can be recorded; each carries its
own vector-Jacobian product.
"""
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, NumericError

OPS = {}


def register(name):
    def deco(fn):
        OPS[name] = fn
        return fn

    return deco


class Parameter:
    """A named trainable array with a gradient slot of the same shape."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = value
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


class ParamSet:
    """Ordered registry of :class:`Parameter` objects with unique names."""

    def __init__(self, params=()):
        self._params = OrderedDict()
        self.step = 0
        for p in params:
            self.add(p)

    def add(self, param):
        if param.name in self._params:
            raise ContractError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def new(self, name, value):
        return self.add(Parameter(name, value))

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for p in self:
            p.grad = np.zeros_like(p.value)

    def grads(self):
        return {p.name: p.grad for p in self}

    def values(self):
        return {p.name: p.value for p in self}

    def load_values(self, values):
        for name, v in values.items():
            p = self._params[name]
            if v.shape != p.value.shape or v.dtype != p.value.dtype:
                raise DimensionError(
                    f"{name}: expected {p.value.shape}/{p.value.dtype}, got {v.shape}/{v.dtype}"
                )
            p.value = v.copy()

    def total_size(self):
        return sum(p.size for p in self)


class Var:
    """A value on a tape.  Supports the arithmetic operators."""

    __slots__ = ("value", "tape", "idx", "needs_grad")
    __array_priority__ = 1000

    def __init__(self, value, tape, idx, needs_grad):
        self.value = value
        self.tape = tape
        self.idx = idx
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(shape={self.value.shape}, idx={self.idx})"

    def _lift(self, other):
        if isinstance(other, Var):
            return other
        return self.tape.const(np.asarray(other, dtype=self.value.dtype))

    def __add__(self, o):
        return self.tape.apply("add", self, self._lift(o))

    def __radd__(self, o):
        return self.tape.apply("add", self._lift(o), self)

    def __sub__(self, o):
        return self.tape.apply("sub", self, self._lift(o))

    def __rsub__(self, o):
        return self.tape.apply("sub", self._lift(o), self)

    def __mul__(self, o):
        return self.tape.apply("mul", self, self._lift(o))

    def __rmul__(self, o):
        return self.tape.apply("mul", self._lift(o), self)

    def __truediv__(self, o):
        return self.tape.apply("div", self, self._lift(o))

    def __neg__(self):
        return self.tape.apply("neg", self)

    def sum(self, axis=None, keepdims=False):
        return self.tape.apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.tape.apply("mean", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape.apply("reshape", self, shape=shape)


class Tape:
    """Records operations for one backward pass.

    ``Tape(record=False)`` evaluates the same ops without keeping any
    backward state; it is what inference and finite differencing use.
    """

    def __init__(self, record=True):
        self.record = record
        self.nodes = []
        self.n_vars = 0
        self._leaves = {}

    def _new_var(self, value, needs_grad):
        v = Var(value, self, self.n_vars, needs_grad)
        self.n_vars += 1
        return v

    def const(self, value, dtype=None):
        value = np.asarray(value, dtype=dtype)
        return self._new_var(value, False)

    def watch(self, param):
        """Leaf for ``param``; repeated calls return the same leaf."""
        leaf = self._leaves.get(id(param))
        if leaf is None:
            leaf = self._new_var(param.value, self.record)
            self._leaves[id(param)] = (param, leaf)
            return leaf
        return leaf[1]

    def apply(self, name, *inputs, **kw):
        op = OPS.get(name)
        if op is None:
            raise ContractError(f"operation {name!r} has no registered gradient rule")
        for v in inputs:
            if v.tape is not self:
                raise ContractError(f"{name}: input belongs to another tape")
        out, vjp = op(*[v.value for v in inputs], **kw)
        needs = self.record and any(v.needs_grad for v in inputs)
        res = self._new_var(out, needs)
        if needs:
            self.nodes.append((res.idx, tuple(v.idx if v.needs_grad else -1 for v in inputs), vjp, name))
        return res

    def backward(self, loss, params=None):
        """Fill gradient slots with d(loss)/d(param) and return them by name.

        Every parameter in ``params`` (default: all watched on this tape)
        receives a gradient; unreached ones get zeros.
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ContractError("loss must be a Var recorded on this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        grads = [None] * self.n_vars
        if loss.needs_grad:
            grads[loss.idx] = np.ones_like(loss.value)
        for out_idx, in_idx, vjp, name in reversed(self.nodes):
            g = grads[out_idx]
            if g is None:
                continue
            in_grads = vjp(g)
            for i, gi in zip(in_idx, in_grads):
                if i < 0 or gi is None:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NumericError(f"non-finite gradient flowing out of node {out_idx} ({name})")
                grads[i] = gi if grads[i] is None else grads[i] + gi
        if params is None:
            targets = [p for p, _ in self._leaves.values()]
        else:
            targets = list(params)
        out = {}
        for p in targets:
            entry = self._leaves.get(id(p))
            g = grads[entry[1].idx] if entry is not None else None
            p.grad = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=p.value.dtype).reshape(p.value.shape)
            out[p.name] = p.grad
        return out


def backward(tape, loss, params=None):
    return tape.backward(loss, params)


# --------------------------------------------------------------------------
# Registered operations.  Each returns (value, vjp) where vjp maps the
# output cotangent to a tuple of input cotangents.
# --------------------------------------------------------------------------


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


@register("add")
def _add(a, b):
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@register("sub")
def _sub(a, b):
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


@register("mul")
def _mul(a, b):
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@register("div")
def _div(a, b):
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


@register("neg")
def _neg(a):
    return -a, lambda g: (-g,)


@register("exp")
def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


@register("log")
def _log(a):
    return np.log(a), lambda g: (g / a,)


@register("square")
def _square(a):
    return a * a, lambda g: (2 * g * a,)


def _sigmoid_np(a):
    # stable for large |a|
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)


@register("sigmoid")
def _sigmoid(a):
    s = _sigmoid_np(a)
    return s, lambda g: (g * s * (1 - s),)


@register("gnova")
def _gnova(a, alpha=1.0, beta=1.0):
    s = _sigmoid_np(beta * a)
    out = alpha * a + a * s

    def vjp(g):
        return (g * (alpha + s + beta * a * s * (1 - s)),)

    return out, vjp


@register("clip")
def _clip(a, lo=None, hi=None):
    out = np.clip(a, lo, hi)
    inside = (a >= (lo if lo is not None else -np.inf)) & (a <= (hi if hi is not None else np.inf))
    return out, lambda g: (g * inside,)


@register("sum")
def _sum(a, axis=None, keepdims=False):
    out = np.sum(a, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return np.asarray(out), vjp


@register("mean")
def _mean(a, axis=None, keepdims=False):
    out = np.mean(a, axis=axis, keepdims=keepdims)
    count = a.size // max(np.asarray(out).size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return np.asarray(out, dtype=a.dtype), vjp


@register("reshape")
def _reshape(a, shape):
    return a.reshape(shape), lambda g: (g.reshape(a.shape),)


@register("tile0")
def _tile0(a, reps=1):
    """Stack ``reps`` copies along a new leading axis, flattened into axis 0."""
    out = np.tile(a, (reps,) + (1,) * (a.ndim - 1))
    return out, lambda g: (g.reshape((reps,) + a.shape).sum(axis=0),)


@register("logsumexp")
def _logsumexp(a, axis=-1, keepdims=False):
    m = np.max(a, axis=axis, keepdims=True)
    e = np.exp(a - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    w = e / s

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * w,)

    return (out if keepdims else np.squeeze(out, axis=axis)), vjp


@register("bce_logits")
def _bce_logits(logits, target):
    # -[t ln s(l) + (1 - t) ln(1 - s(l))] = max(l, 0) - l t + ln(1 + e^-|l|)
    out = np.maximum(logits, 0) - logits * target + np.log1p(np.exp(-np.abs(logits)))
    s = _sigmoid_np(logits)
    return out, lambda g: (g * (s - target), g * -logits)


@register("log_softmax_nll")
def _log_softmax_nll(logits, onehot):
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = logits.shape[0]
    out = np.asarray(-(logp * onehot).sum() / n, dtype=logits.dtype)
    p = np.exp(logp)
    return out, lambda g: (g * (p - onehot) / n, None)


@register("dense")
def _dense(x, w, b=None):
    """``x[B, n_in] @ w[n_out, n_in].T + b``."""
    out = x @ w.T
    if b is not None:
        out = out + b

    def vjp(g):
        return (g @ w, g.T @ x) + ((g.sum(axis=0),) if b is not None else ())

    return out, vjp


@register("dense_t")
def _dense_t(h, w, b=None):
    """``h[B, n_out] @ w[n_out, n_in] + b``: the transposed map of ``dense``."""
    out = h @ w
    if b is not None:
        out = out + b

    def vjp(g):
        return (g @ w.T, h.T @ g) + ((g.sum(axis=0),) if b is not None else ())

    return out, vjp


@register("conv2d")
def _conv2d(x, k, b=None, stride=1, pad=0):
    out = T.conv2d(x, k, stride, pad)
    if b is not None:
        out = out + b[:, None, None]

    def vjp(g):
        gx = T.conv2d_transpose(g, k, stride, pad, out_hw=x.shape[-2:])
        gk = T.conv2d_kernel_grad(x, g, k.shape[-1], stride, pad)
        return (gx, gk) + ((g.sum(axis=(0, 2, 3)),) if b is not None else ())

    return out, vjp


@register("conv2d_t")
def _conv2d_t(y, k, b=None, stride=1, pad=0, out_hw=None):
    out = T.conv2d_transpose(y, k, stride, pad, out_hw=out_hw)
    if b is not None:
        out = out + b[:, None, None]

    def vjp(g):
        gy = T.conv2d(g, k, stride, pad)
        # <conv_t(y, K), g> = <y, conv(g, K)>, so dK is the conv kernel grad with roles swapped
        gk = T.conv2d_kernel_grad(g, y, k.shape[-1], stride, pad)
        return (gy, gk) + ((g.sum(axis=(0, 2, 3)),) if b is not None else ())

    return out, vjp


# --------------------------------------------------------------------------
# Thin functional wrappers
# --------------------------------------------------------------------------


def exp(a):
    return a.tape.apply("exp", a)


def log(a):
    return a.tape.apply("log", a)


def square(a):
    return a.tape.apply("square", a)


def sigmoid(a):
    return a.tape.apply("sigmoid", a)


def gnova(a, alpha=1.0, beta=1.0):
    return a.tape.apply("gnova", a, alpha=alpha, beta=beta)


def clip(a, lo=None, hi=None):
    return a.tape.apply("clip", a, lo=lo, hi=hi)


def tile0(a, reps):
    return a.tape.apply("tile0", a, reps=reps)


def logsumexp(a, axis=-1, keepdims=False):
    return a.tape.apply("logsumexp", a, axis=axis, keepdims=keepdims)


def bce_logits(logits, target):
    return logits.tape.apply("bce_logits", logits, logits._lift(target))


def softmax_cross_entropy(logits, onehot):
    return logits.tape.apply("log_softmax_nll", logits, logits._lift(onehot))


def dense(x, w, b=None):
    args = (x, w) if b is None else (x, w, b)
    return x.tape.apply("dense", *args)


def dense_t(h, w, b=None):
    args = (h, w) if b is None else (h, w, b)
    return h.tape.apply("dense_t", *args)


def conv2d(x, k, b=None, stride=1, pad=0):
    args = (x, k) if b is None else (x, k, b)
    return x.tape.apply("conv2d", *args, stride=stride, pad=pad)


def conv2d_t(y, k, b=None, stride=1, pad=0, out_hw=None):
    args = (y, k) if b is None else (y, k, b)
    return y.tape.apply("conv2d_t", *args, stride=stride, pad=pad, out_hw=out_hw)


# --------------------------------------------------------------------------
# Finite-difference check
# --------------------------------------------------------------------------


def grad_check(f, params, eps=1e-5, max_coords=None, rng=None):
    """Compare tape gradients of ``f(tape) -> scalar Var`` to central differences.

    Returns the max over coordinates of ``|a - n| / max(1, |a|, |n|)``.
    With ``max_coords`` only that many coordinates per parameter are
    probed, chosen with ``rng``.
    """
    params = list(params)
    for p in params:
        if p.value.dtype != np.float64:
            raise ContractError(f"grad_check needs double precision, {p.name} is {p.value.dtype}")
    if not 1e-6 <= eps <= 1e-4:
        raise ContractError(f"eps {eps} outside [1e-6, 1e-4]")
    tape = Tape()
    loss = f(tape)
    analytic = {k: v.copy() for k, v in tape.backward(loss, params).items()}

    def value():
        return float(f(Tape(record=False)).value)

    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or T.Rng(0)
            coords = np.sort(rng.choice(flat.size, max_coords))
        a_flat = analytic[p.name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = a_flat[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
