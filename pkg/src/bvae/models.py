"""BVAE and its unidirectional twin.

The BVAE encodes with ``mu = W(N(x))`` and ``logvar = V(N(x))`` and
decodes through the transposes, ``x_hat = sigmoid(N^T(W^T(z)))``.  The
twin has the same layer list but untied weights, so its encoder (phi) and
decoder (theta) are independent networks.
"""
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tape
from .bilayers import BiConv2D, BiDense, BiResBlock, BiStack, Dense, Flatten, GNova
from .errors import ConfigError, ContractError, DimensionError, StateError
from .tensor import Rng, as_dtype

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0

DEFAULT_LAYERS = "conv:16:4:2:1,conv:32:4:2:1,dense:128"


@dataclass
class Architecture:
    """Layer list plus latent size.

    ``layers`` is a comma-separated string of ``conv:C_out:k:stride:pad``,
    ``res:k`` (residual block keeping the channel count) and
    ``dense:n_out`` items.  A flatten step is inserted before the first
    dense item.
    """

    input_shape: tuple = (1, 28, 28)
    layers: str = DEFAULT_LAYERS
    latent_dim: int = 16
    gnova_alpha: float = 1.0
    gnova_beta: float = 1.0

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        self.parse_layers()

    def parse_layers(self):
        out = []
        for item in filter(None, (s.strip() for s in self.layers.split(","))):
            kind, *args = item.split(":")
            try:
                args = [int(a) for a in args]
            except ValueError:
                raise ConfigError(f"bad layer item {item!r}") from None
            arity = {"conv": 4, "res": 1, "dense": 1}.get(kind)
            if arity is None or len(args) != arity:
                raise ConfigError(f"bad layer item {item!r}")
            out.append((kind, *args))
        return out

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "layers": self.layers,
            "latent_dim": self.latent_dim,
            "gnova_alpha": self.gnova_alpha,
            "gnova_beta": self.gnova_beta,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input_shape"]), d["layers"], int(d["latent_dim"]),
                   float(d["gnova_alpha"]), float(d["gnova_beta"]))


@dataclass
class GaussianPosterior:
    mu: np.ndarray
    logvar: np.ndarray

    @property
    def std(self):
        return np.exp(0.5 * self.logvar)


def reparameterize(q, eps):
    """``z = mu + eps * exp(logvar / 2)`` on plain arrays."""
    eps = np.asarray(eps, dtype=q.mu.dtype)
    if eps.shape != q.mu.shape:
        raise DimensionError(f"eps shape {eps.shape} does not match posterior {q.mu.shape}")
    return q.mu + eps * np.exp(0.5 * q.logvar)


def reparameterize_vars(mu, logvar, eps):
    return mu + eps * ad.exp(logvar * 0.5)


def _build_trunk(arch, rng, dtype, tied, act):
    layers = []
    shape = arch.input_shape
    first = True
    for idx, (kind, *args) in enumerate(arch.parse_layers()):
        name = f"trunk.{idx}"
        if kind == "conv":
            if len(shape) != 3:
                raise ConfigError(f"{name}: conv after dense is not supported")
            c_out, k, stride, pad = args
            layer = BiConv2D(shape[0], c_out, k, in_hw=shape[1:], stride=stride, pad=pad,
                             rng=rng, dtype=dtype, act=act, act_rev=not first, tied=tied, name=name)
        elif kind == "res":
            if len(shape) != 3:
                raise ConfigError(f"{name}: residual block after dense is not supported")
            if first:
                raise ConfigError("the first trunk layer cannot be a residual block")
            layer = BiResBlock.build(shape[0], shape[1:], args[0], rng=rng, dtype=dtype,
                                     act=act, tied=tied, name=name)
        else:
            if len(shape) != 1:
                layers.append(Flatten(shape))
                shape = layers[-1].out_shape
            layer = BiDense(shape[0], args[0], rng=rng, dtype=dtype, act=act, act_rev=not first,
                            tied=tied, name=name)
        layers.append(layer)
        shape = layer.out_shape
        first = False
    if len(shape) != 1:
        layers.append(Flatten(shape))
        shape = layers[-1].out_shape
    return BiStack(layers), shape[0]


class _VaeBase:
    tied = True

    def __init__(self, arch=None, *, seed=0, precision="single"):
        self.arch = arch or Architecture()
        self.dtype = as_dtype(precision)
        rng = Rng(seed)
        act = GNova(self.arch.gnova_alpha, self.arch.gnova_beta)
        self.trunk, feat = _build_trunk(self.arch, rng, self.dtype, self.tied, act)
        J = self.arch.latent_dim
        # the mean head's reverse output is a hidden feature unless the trunk has no weights
        hidden = any(not isinstance(layer, Flatten) for layer in self.trunk)
        self.mean_head = BiDense(feat, J, rng=rng, dtype=self.dtype, act=act, act_fwd=False,
                                 act_rev=hidden, tied=self.tied, name="mean_head")
        self.logvar_head = Dense(feat, J, rng=rng, dtype=self.dtype, name="logvar_head")
        self.body = BiStack(list(self.trunk) + [self.mean_head])
        self.params = ParamSet()
        for p in self.body.params() + self.logvar_head.params():
            if p.name not in self.params:
                self.params.add(p)

    @property
    def latent_dim(self):
        return self.arch.latent_dim

    @property
    def input_shape(self):
        return self.arch.input_shape

    # -- tape-level -------------------------------------------------------

    def _check_x(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"input shape {x.shape[1:]} does not match model {self.input_shape}")

    def encode_vars(self, x):
        """(mu, logvar) tape variables for a batch ``x[B, C, H, W]``."""
        self._check_x(x)
        h = self.trunk.fwd(x)
        mu = self.mean_head.fwd(h)
        logvar = ad.clip(self.logvar_head.fwd(h), LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar

    def decode_vars(self, z):
        """Pixel logits ``[B, C, H, W]`` for latents ``z[B, J]``."""
        if z.shape[-1] != self.latent_dim:
            raise DimensionError(f"latent has {z.shape[-1]} entries, model expects {self.latent_dim}")
        return self.trunk.rev(self.mean_head.rev(z))

    # -- array-level ------------------------------------------------------

    def _prep(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == len(self.input_shape):
            x = x[None]
        return x

    def encode(self, x):
        x = self._prep(x)
        t = Tape(record=False)
        mu, logvar = self.encode_vars(t.const(x))
        return GaussianPosterior(mu.value, logvar.value)

    def decode_logits(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=self.dtype))
        t = Tape(record=False)
        return self.decode_vars(t.const(z)).value

    def decode(self, z):
        return ad.OPS["sigmoid"](self.decode_logits(z))[0]

    def reconstruct(self, x):
        return self.decode(self.encode(x).mu)

    def generate(self, n, sampler="standard-normal", *, rng, gmm=None):
        """``n`` images decoded from latents drawn from the prior or a fitted GMM."""
        if n == 0:
            return np.zeros((0,) + self.input_shape, dtype=self.dtype)
        if sampler in ("standard-normal", "gaussian"):
            z = rng.standard_normal((n, self.latent_dim), dtype=self.dtype)
        elif sampler == "gmm":
            if gmm is None:
                raise StateError("gmm sampler requested but no GMM has been fitted")
            z = gmm.sample(n, rng).astype(self.dtype)
        else:
            raise ContractError(f"unknown sampler {sampler!r}")
        return self.decode(z)

    def interpolate(self, x_a, x_b, steps=10, space="latent"):
        """Decoded path between two images.

        ``space="latent"`` mixes posterior means; ``space="pixel"`` mixes the
        images and encodes each mixture.
        """
        if steps < 2:
            raise ContractError(f"interpolation needs steps >= 2, got {steps}")
        lam = np.linspace(0.0, 1.0, steps).astype(self.dtype)[:, None]
        x_a, x_b = self._prep(x_a), self._prep(x_b)
        if space == "latent":
            mu_a, mu_b = self.encode(x_a).mu, self.encode(x_b).mu
            z = (1 - lam) * mu_a + lam * mu_b
        elif space == "pixel":
            mix = (1 - lam[:, :, None, None]) * x_a + lam[:, :, None, None] * x_b
            z = self.encode(mix).mu
        else:
            raise ContractError(f"unknown interpolation space {space!r}")
        return self.decode(z)

    def zero_(self):
        for p in self.params:
            p.value[...] = 0
        return self


class BvaeModel(_VaeBase):
    """One weight-shared network: forward pass encodes, transposed pass decodes."""

    tied = True


class UnidirectionalTwin(_VaeBase):
    """Encoder (phi) and decoder (theta) with independent weights, BVAE-shaped."""

    tied = False

    def __init__(self, arch=None, *, seed=0, precision="single"):
        super().__init__(arch, seed=seed, precision=precision)
        # forward-direction tensors belong to the encoder, reverse ones to the decoder
        dec = []
        for layer in self._leaf_layers():
            dec += [layer.W_rev if hasattr(layer, "W_rev") else layer.K_rev, layer.b_rev]
        dec_ids = {id(p) for p in dec}
        self.theta = ParamSet(dec)
        self.phi = ParamSet([p for p in self.params if id(p) not in dec_ids])

    def _leaf_layers(self):
        for layer in self.body:
            if isinstance(layer, BiResBlock):
                yield layer.conv1
                yield layer.conv2
            elif isinstance(layer, (BiConv2D, BiDense)):
                yield layer

    def tie_to(self, bvae):
        """Copy a BVAE's weights: encoder gets W, decoder gets W^T (same biases)."""
        src = {p.name: p.value for p in bvae.params}
        for p in self.params:
            name = p.name
            for suffix in (".W_rev", ".K_rev"):
                if name.endswith(suffix):
                    name = name[: -len("_rev")]
            p.value = src[name].copy()
        return self


def build_model(kind="bvae", arch=None, *, seed=0, precision="single"):
    if kind == "bvae":
        return BvaeModel(arch, seed=seed, precision=precision)
    if kind == "twin":
        return UnidirectionalTwin(arch, seed=seed, precision=precision)
    raise ConfigError(f"unknown model kind {kind!r}")
