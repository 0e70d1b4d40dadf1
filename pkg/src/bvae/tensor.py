"""Dense tensor kernels and the deterministic random source.

Tensors are plain numpy arrays of dtype float32 (default) or float64.
Every kernel here refuses to mix the two and checks its output is finite.
"""
import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, NumericError, ShapeConfigError

DTYPES = {"single": np.dtype(np.float32), "double": np.dtype(np.float64)}


def as_dtype(precision):
    """Map ``"single"``/``"double"`` (or a numpy dtype) to a numpy dtype."""
    if isinstance(precision, str) and precision in DTYPES:
        return DTYPES[precision]
    dt = np.dtype(precision)
    if dt not in DTYPES.values():
        raise ContractError(f"unsupported precision {precision!r}")
    return dt


def _same_dtype(*arrays):
    dt = arrays[0].dtype
    for a in arrays[1:]:
        if a.dtype != dt:
            raise DimensionError(f"dtype mismatch: {dt} vs {a.dtype}")
    if dt not in DTYPES.values():
        raise DimensionError(f"unsupported dtype {dt}")
    return dt


def _finite(out, op):
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite values")
    return out


def matmul(a, b):
    """Matrix product of ``a[m, k]`` and ``b[k, n]``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    _same_dtype(a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return _finite(out, "matmul")


def conv_out_extent(size, k, stride, pad):
    """Output extent of a convolution; raises if it is not a positive integer."""
    span = size + 2 * pad - k
    if stride < 1 or k < 1 or pad < 0:
        raise ShapeConfigError(f"invalid conv geometry k={k} stride={stride} pad={pad}")
    if span < 0 or span % stride:
        raise ShapeConfigError(
            f"({size} + 2*{pad} - {k}) / {stride} is not a non-negative integer"
        )
    return span // stride + 1


def _batched(x, ndim_single):
    if x.ndim == ndim_single:
        return x[None], True
    if x.ndim == ndim_single + 1:
        return x, False
    raise DimensionError(f"expected a {ndim_single}-d or batched tensor, got shape {x.shape}")


def conv2d(x, kernel, stride=1, pad=0):
    """Cross-correlation of ``x[C_in, H, W]`` (or ``[N, C_in, H, W]``) with
    ``kernel[C_out, C_in, k, k]``.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    xb, single = _batched(x, 3)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"kernel must be [C_out, C_in, k, k], got {kernel.shape}")
    if xb.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d input {x.shape} does not match kernel {kernel.shape}")
    _same_dtype(xb, kernel)
    c_out, c_in, k, _ = kernel.shape
    n, _, h, w = xb.shape
    oh = conv_out_extent(h, k, stride, pad)
    ow = conv_out_extent(w, k, stride, pad)
    cols = kernels.im2col(np.ascontiguousarray(xb), k, stride, pad, oh, ow)
    out = np.matmul(kernel.reshape(c_out, c_in * k * k), cols).reshape(n, c_out, oh, ow)
    _finite(out, "conv2d")
    return out[0] if single else out


def conv2d_transpose(y, kernel, stride=1, pad=0, out_hw=None):
    """Adjoint of :func:`conv2d` with the same kernel, stride and padding.

    ``out_hw`` fixes the spatial size of the result.  Without it the
    smallest size whose forward convolution yields ``y``'s extent is used.
    """
    y = np.asarray(y)
    kernel = np.asarray(kernel)
    yb, single = _batched(y, 3)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"kernel must be [C_out, C_in, k, k], got {kernel.shape}")
    if yb.shape[1] != kernel.shape[0]:
        raise DimensionError(
            f"conv2d_transpose input {y.shape} does not match kernel {kernel.shape}"
        )
    _same_dtype(yb, kernel)
    c_out, c_in, k, _ = kernel.shape
    n, _, oh, ow = yb.shape
    if out_hw is None:
        out_hw = ((oh - 1) * stride + k - 2 * pad, (ow - 1) * stride + k - 2 * pad)
    h, w = out_hw
    if h < 1 or w < 1:
        raise DimensionError(f"conv2d_transpose target {out_hw} is empty")
    try:
        ok = conv_out_extent(h, k, stride, pad) == oh and conv_out_extent(w, k, stride, pad) == ow
    except ShapeConfigError:
        ok = False
    if not ok:
        raise DimensionError(
            f"{y.shape} is not a conv2d output of a {out_hw} input "
            f"with k={k} stride={stride} pad={pad}"
        )
    flat = np.ascontiguousarray(yb).reshape(n, c_out, oh * ow)
    cols = np.matmul(kernel.reshape(c_out, c_in * k * k).T, flat)
    out = kernels.col2im(np.ascontiguousarray(cols), c_in, h, w, k, stride, pad, oh, ow)
    _finite(out, "conv2d_transpose")
    return out[0] if single else out


def conv2d_kernel_grad(x, grad_out, k, stride=1, pad=0):
    """Gradient of ``sum(conv2d(x, K) * grad_out)`` with respect to ``K``."""
    n, c_in, h, w = x.shape
    _, c_out, oh, ow = grad_out.shape
    cols = kernels.im2col(np.ascontiguousarray(x), k, stride, pad, oh, ow)
    g = grad_out.reshape(n, c_out, oh * ow)
    # sum over batch of g_n @ cols_n^T
    gk = np.einsum("nol,nil->oi", g, cols, optimize=True)
    return gk.reshape(c_out, c_in, k, k)


# --------------------------------------------------------------------------
# Random numbers
# --------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _splitmix(z):
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


class Rng:
    """Counter-based SplitMix64 generator.

    Draw ``i`` (zero-based, counting from construction) is
    ``splitmix64_finalize(seed + (i + 1) * 0x9E3779B97F4A7C15 mod 2**64)``.
    Uniforms take the top 53 bits.  Normals use Box-Muller on consecutive
    draw pairs ``(u1, u2)`` with ``u1`` mapped into (0, 1]; a request for
    ``n`` normals consumes ``2 * ceil(n / 2)`` draws and keeps both the
    cosine and sine outputs, interleaved.  The whole state is
    ``(seed, counter)``.
    """

    def __init__(self, seed=0, counter=0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def state(self):
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state):
        return cls(state["seed"], state["counter"])

    def spawn(self, stream):
        """Independent generator keyed on ``(seed, stream)``; does not advance self."""
        key = _splitmix(np.array([(self.seed ^ (int(stream) * 0xD1B54A32D192ED03)) & _MASK64],
                                 dtype=np.uint64))
        return Rng(int(key[0]))

    def raw(self, n):
        """``n`` raw 64-bit draws as a uint64 array."""
        with np.errstate(over="ignore"):
            idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
            z = np.uint64(self.seed) + idx * _GOLDEN
        self.counter += n
        return _splitmix(z)

    def uniform(self, shape=(), low=0.0, high=1.0, dtype=np.float64):
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * u).reshape(shape).astype(dtype)

    def standard_normal(self, shape=(), dtype=np.float64):
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        r = self.raw(2 * m) >> np.uint64(11)
        u1 = (r[0::2].astype(np.float64) + 1.0) * 2.0**-53
        u2 = r[1::2].astype(np.float64) * 2.0**-53
        rad = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * m)
        out[0::2] = rad * np.cos(2.0 * np.pi * u2)
        out[1::2] = rad * np.sin(2.0 * np.pi * u2)
        return out[:n].reshape(shape).astype(dtype)

    def permutation(self, n):
        return np.argsort(self.raw(n), kind="stable")

    def choice(self, n, size):
        """``size`` distinct indices from ``range(n)``, in draw order."""
        if size > n:
            raise ContractError(f"cannot choose {size} of {n} without replacement")
        return self.permutation(n)[:size]


def standard_normal(rng, shape, dtype=np.float64):
    """i.i.d. N(0, 1) draws from ``rng``; advances it."""
    return rng.standard_normal(shape, dtype=dtype)
