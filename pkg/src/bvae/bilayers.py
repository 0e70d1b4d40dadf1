"""Bidirectional layers: one weight block, forward map to encode and the
transposed map to decode.

Every layer exposes ``fwd(v)`` and ``rev(v)`` on tape variables.  With
``tied=False`` a layer keeps a second, independent weight for the reverse
direction; that is how the unidirectional twin gets matched shapes.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import ContractError, DimensionError, ShapeConfigError
from .tensor import conv_out_extent


@dataclass(frozen=True)
class GNova:
    """Generalized nonvanishing activation ``alpha*x + x*sigmoid(beta*x)``."""

    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ContractError(f"G-NoVa needs alpha > 0 and beta > 0, got {self.alpha}, {self.beta}")

    def __call__(self, v):
        return ad.gnova(v, self.alpha, self.beta)


def gnova(x, p=GNova()):
    """Elementwise G-NoVa on a plain array."""
    x = np.asarray(x)
    return ad.OPS["gnova"](x, alpha=p.alpha, beta=p.beta)[0]


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(shape, -limit, limit, dtype=dtype)


class Layer:
    """Base class.  Subclasses fill ``weights`` and ``biases``."""

    tied = True

    def weight_params(self):
        return []

    def bias_params(self):
        return []

    def params(self):
        return self.weight_params() + self.bias_params()

    def fwd(self, v):
        raise NotImplementedError

    def rev(self, v):
        raise NotImplementedError


class Flatten(Layer):
    """Reshape ``[B, C, H, W]`` to ``[B, C*H*W]`` and back."""

    def __init__(self, shape):
        self.in_shape = tuple(shape)
        self.out_shape = (int(np.prod(shape)),)

    def fwd(self, v):
        return v.reshape(v.shape[0], self.out_shape[0])

    def rev(self, v):
        return v.reshape((v.shape[0],) + self.in_shape)

    def __repr__(self):
        return f"Flatten({self.in_shape})"


class BiDense(Layer):
    """``fwd: act(W x + b_fwd)``, ``rev: act(W^T h + b_rev)`` with W[n_out, n_in]."""

    def __init__(self, n_in, n_out, *, rng, dtype=np.float32, act=GNova(), act_fwd=True,
                 act_rev=True, tied=True, name="dense"):
        self.n_in, self.n_out = n_in, n_out
        self.in_shape, self.out_shape = (n_in,), (n_out,)
        self.act = act
        self.act_fwd = act_fwd and act is not None
        self.act_rev = act_rev and act is not None
        self.tied = tied
        self.W = Parameter(f"{name}.W", glorot_uniform(rng, (n_out, n_in), n_in, n_out, dtype))
        self.W_rev = self.W if tied else Parameter(
            f"{name}.W_rev", glorot_uniform(rng, (n_out, n_in), n_in, n_out, dtype))
        self.b_fwd = Parameter(f"{name}.b_fwd", np.zeros(n_out, dtype=dtype))
        self.b_rev = Parameter(f"{name}.b_rev", np.zeros(n_in, dtype=dtype))

    def weight_params(self):
        return [self.W] if self.tied else [self.W, self.W_rev]

    def bias_params(self):
        return [self.b_fwd, self.b_rev]

    def fwd(self, x):
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"{self.W.name}: forward input {x.shape} needs {self.n_in} features")
        t = x.tape
        h = ad.dense(x, t.watch(self.W), t.watch(self.b_fwd))
        return self.act(h) if self.act_fwd else h

    def rev(self, h):
        if h.shape[-1] != self.n_out:
            raise DimensionError(f"{self.W.name}: reverse input {h.shape} needs {self.n_out} features")
        t = h.tape
        x = ad.dense_t(h, t.watch(self.W_rev), t.watch(self.b_rev))
        return self.act(x) if self.act_rev else x

    def __repr__(self):
        return f"BiDense({self.n_in}->{self.n_out}, tied={self.tied})"


class BiConv2D(Layer):
    """Convolution forward, transposed convolution (same kernel) in reverse.

    The forward input shape ``in_hw`` is fixed at construction and the
    reverse pass reproduces it exactly.
    """

    def __init__(self, c_in, c_out, k, *, in_hw, stride=1, pad=0, rng, dtype=np.float32,
                 act=GNova(), act_fwd=True, act_rev=True, tied=True, name="conv"):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.pad = stride, pad
        self.in_hw = tuple(in_hw)
        try:
            self.out_hw = (conv_out_extent(in_hw[0], k, stride, pad),
                           conv_out_extent(in_hw[1], k, stride, pad))
        except ShapeConfigError as e:
            raise ShapeConfigError(f"{name}: {e}") from None
        if min(self.out_hw) < 1:
            raise ShapeConfigError(f"{name}: empty output for input {in_hw}")
        self.in_shape = (c_in,) + self.in_hw
        self.out_shape = (c_out,) + self.out_hw
        self.act = act
        self.act_fwd = act_fwd and act is not None
        self.act_rev = act_rev and act is not None
        self.tied = tied
        fan_in, fan_out = c_in * k * k, c_out * k * k
        shape = (c_out, c_in, k, k)
        self.K = Parameter(f"{name}.K", glorot_uniform(rng, shape, fan_in, fan_out, dtype))
        self.K_rev = self.K if tied else Parameter(
            f"{name}.K_rev", glorot_uniform(rng, shape, fan_in, fan_out, dtype))
        self.b_fwd = Parameter(f"{name}.b_fwd", np.zeros(c_out, dtype=dtype))
        self.b_rev = Parameter(f"{name}.b_rev", np.zeros(c_in, dtype=dtype))

    def weight_params(self):
        return [self.K] if self.tied else [self.K, self.K_rev]

    def bias_params(self):
        return [self.b_fwd, self.b_rev]

    def fwd(self, x):
        if tuple(x.shape[1:]) != self.in_shape:
            raise DimensionError(f"{self.K.name}: forward input {x.shape} needs {self.in_shape}")
        t = x.tape
        y = ad.conv2d(x, t.watch(self.K), t.watch(self.b_fwd), self.stride, self.pad)
        return self.act(y) if self.act_fwd else y

    def rev(self, y):
        if tuple(y.shape[1:]) != self.out_shape:
            raise DimensionError(f"{self.K.name}: reverse input {y.shape} needs {self.out_shape}")
        t = y.tape
        x = ad.conv2d_t(y, t.watch(self.K_rev), t.watch(self.b_rev), self.stride, self.pad,
                        out_hw=self.in_hw)
        return self.act(x) if self.act_rev else x

    def __repr__(self):
        return (f"BiConv2D({self.c_in}->{self.c_out}, k={self.k}, s={self.stride}, "
                f"p={self.pad}, {self.in_hw}->{self.out_hw}, tied={self.tied})")


class BiResBlock(Layer):
    """``fwd: x + conv2(a(conv1(x)))``, ``rev: y + conv1_rev(a(conv2_rev(y)))``."""

    def __init__(self, conv1, conv2, act=GNova()):
        for c in (conv1, conv2):
            if c.in_shape != c.out_shape:
                raise ShapeConfigError(f"residual member {c!r} is not shape-preserving")
        if conv1.out_shape != conv2.in_shape:
            raise ShapeConfigError("residual member convs do not chain")
        if conv1.act_fwd or conv1.act_rev or conv2.act_fwd or conv2.act_rev:
            raise ContractError("residual member convs must not carry their own activation")
        self.conv1, self.conv2, self.act = conv1, conv2, act
        self.in_shape = self.out_shape = conv1.in_shape
        self.tied = conv1.tied

    @classmethod
    def build(cls, channels, hw, k=3, *, rng, dtype=np.float32, act=GNova(), tied=True, name="res"):
        convs = [
            BiConv2D(channels, channels, k, in_hw=hw, stride=1, pad=k // 2, rng=rng, dtype=dtype,
                     act=None, tied=tied, name=f"{name}.conv{i}")
            for i in (1, 2)
        ]
        return cls(*convs, act=act)

    def weight_params(self):
        return self.conv1.weight_params() + self.conv2.weight_params()

    def bias_params(self):
        return self.conv1.bias_params() + self.conv2.bias_params()

    def fwd(self, x):
        return x + self.conv2.fwd(self.act(self.conv1.fwd(x)))

    def rev(self, y):
        return y + self.conv1.rev(self.act(self.conv2.rev(y)))

    def __repr__(self):
        return f"BiResBlock({self.in_shape}, k={self.conv1.k}, tied={self.tied})"


class Dense(Layer):
    """Forward-only affine map ``W x + b`` (the log-variance head)."""

    def __init__(self, n_in, n_out, *, rng, dtype=np.float32, name="dense"):
        self.n_in, self.n_out = n_in, n_out
        self.W = Parameter(f"{name}.W", glorot_uniform(rng, (n_out, n_in), n_in, n_out, dtype))
        self.b = Parameter(f"{name}.b", np.zeros(n_out, dtype=dtype))

    def weight_params(self):
        return [self.W]

    def bias_params(self):
        return [self.b]

    def fwd(self, x):
        t = x.tape
        return ad.dense(x, t.watch(self.W), t.watch(self.b))


class BiStack(Layer):
    """Layers applied in order forward and in reverse order backward."""

    def __init__(self, layers):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if tuple(a.out_shape) != tuple(b.in_shape):
                raise ShapeConfigError(f"{a!r} output {a.out_shape} does not feed {b!r} input {b.in_shape}")
        if self.layers:
            self.in_shape = self.layers[0].in_shape
            self.out_shape = self.layers[-1].out_shape

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def weight_params(self):
        return [p for layer in self.layers for p in layer.weight_params()]

    def bias_params(self):
        return [p for layer in self.layers for p in layer.bias_params()]

    def fwd(self, x):
        for layer in self.layers:
            x = layer.fwd(x)
        return x

    def rev(self, y):
        for layer in reversed(self.layers):
            y = layer.rev(y)
        return y


def param_count(model):
    """Tunable scalar counts.

    ``weights`` and ``biases`` cover the direction-carrying layers (trunk
    and mean head); a forward-only log-variance head is reported as
    ``head``.  ``total`` is the sum.  Shared parameters count once.
    """
    if model is None:
        return {"weights": 0, "biases": 0, "head": 0, "total": 0}

    def unique_size(params):
        seen = {}
        for p in params:
            seen[id(p)] = p.size
        return sum(seen.values())

    if isinstance(model, Layer):
        body, head = model, None
    else:
        body, head = model.body, getattr(model, "logvar_head", None)
    weights = unique_size(body.weight_params())
    biases = unique_size(body.bias_params())
    head_n = unique_size(head.params()) if head is not None else 0
    return {"weights": weights, "biases": biases, "head": head_n, "total": weights + biases + head_n}
