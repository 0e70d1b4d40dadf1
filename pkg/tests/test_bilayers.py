import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from bvae import autodiff as ad
from bvae.autodiff import Tape
from bvae.bilayers import BiConv2D, BiDense, BiResBlock, BiStack, Dense, GNova, gnova, param_count
from bvae.errors import ContractError, DimensionError, ShapeConfigError
from bvae.models import Architecture, build_model
from bvae.tensor import Rng


def run(fn, x):
    return fn(Tape(record=False).const(x)).value


def test_gnova_values():
    assert gnova(np.array(0.0), GNova(3.0, 0.7)) == 0.0
    assert abs(gnova(np.array(1.0), GNova(0.5, 2.0)) - 1.3807971) < 5e-8
    assert abs(gnova(np.array(-30.0)) - (-30.0)) < 1e-10


def test_gnova_matches_definition():
    x = np.linspace(-20, 20, 401)
    for a, b in [(1, 1), (0.3, 2.5), (2, 0.1)]:
        assert np.allclose(gnova(x, GNova(a, b)), a * x + x * expit(b * x), rtol=0, atol=1e-12)


def test_gnova_rejects_nonpositive():
    with pytest.raises(ContractError):
        GNova(0.0, 1.0)
    with pytest.raises(ContractError):
        GNova(1.0, -1.0)


def test_gnova_monotone_grid():
    x = np.linspace(-100, 100, 200001)
    for a in (0.1, 0.5, 1.0, 3.0):
        for b in (0.1, 1.0, 2.0, 4.0):
            assert np.all(np.diff(gnova(x, GNova(a, b))) > 0), (a, b)


def test_bidense_example():
    layer = BiDense(2, 2, rng=Rng(0), dtype=np.float64, act=None)
    layer.W.value = np.array([[1.0, 2], [3, 4]])
    h = run(layer.fwd, np.array([[1.0, 1]]))
    assert np.array_equal(h, [[3, 7]])
    assert np.array_equal(run(layer.rev, h), [[24, 34]])


def test_bidense_identity_roundtrip():
    layer = BiDense(3, 3, rng=Rng(0), dtype=np.float64, act=None)
    layer.W.value = np.eye(3)
    x = Rng(1).standard_normal((2, 3))
    assert np.array_equal(run(lambda v: layer.rev(layer.fwd(v)), x), x)


def test_bidense_shape_errors():
    layer = BiDense(4, 3, rng=Rng(0), dtype=np.float64)
    with pytest.raises(DimensionError):
        run(layer.fwd, np.ones((1, 3)))
    with pytest.raises(DimensionError):
        run(layer.rev, np.ones((1, 4)))


def test_biconv_zero_input_bias_only():
    r = Rng(2)
    layer = BiConv2D(2, 3, 4, in_hw=(8, 8), stride=2, pad=1, rng=r, dtype=np.float64, act=None)
    layer.b_fwd.value = np.array([1.0, -2.0, 0.5])
    layer.b_rev.value = np.array([0.25, 3.0])
    y = run(layer.fwd, np.zeros((1, 2, 8, 8)))
    assert np.array_equal(y, np.broadcast_to(layer.b_fwd.value[None, :, None, None], y.shape))
    x = run(layer.rev, np.zeros((1, 3, 4, 4)))
    assert x.shape == (1, 2, 8, 8)
    assert np.array_equal(x, np.broadcast_to(layer.b_rev.value[None, :, None, None], x.shape))


def test_biconv_recorded_shape_roundtrip():
    for hw in [(28, 28), (14, 10), (6, 8)]:
        layer = BiConv2D(1, 2, 4, in_hw=hw, stride=2, pad=1, rng=Rng(0), dtype=np.float64)
        out = run(lambda v: layer.rev(layer.fwd(v)), np.ones((1, 1) + hw))
        assert out.shape == (1, 1) + hw


def test_biconv_bad_shape_is_construction_error():
    with pytest.raises(ShapeConfigError):
        BiConv2D(1, 2, 2, in_hw=(5, 5), stride=2, rng=Rng(0))


def _random_layer(r, kind):
    if kind == "dense":
        n_in, n_out = int(r.uniform() * 6) + 1, int(r.uniform() * 6) + 1
        layer = BiDense(n_in, n_out, rng=r, dtype=np.float64, act=None)
        return layer, (3, n_in), (3, n_out)
    k = int(r.uniform() * 3) + 2
    s = int(r.uniform() * 2) + 1
    p = int(r.uniform() * (k // 2 + 1))
    o = int(r.uniform() * 4) + 2
    h = (o - 1) * s + k - 2 * p
    ci, co = int(r.uniform() * 3) + 1, int(r.uniform() * 3) + 1
    layer = BiConv2D(ci, co, k, in_hw=(h, h), stride=s, pad=p, rng=r, dtype=np.float64, act=None)
    return layer, (2, ci, h, h), (2, co, o, o)


@pytest.mark.parametrize("kind", ["dense", "conv"])
def test_layer_adjointness(kind):
    r = Rng(17)
    for _ in range(20):
        layer, xs, ys = _random_layer(r, kind)
        x, y = r.standard_normal(xs), r.standard_normal(ys)
        lhs = np.sum(run(layer.fwd, x) * y)
        rhs = np.sum(x * run(layer.rev, y))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def scalar_resblock(x, K1, K2, a, b, reverse=False):
    # straight-line 1-channel, k=3, pad=1 reimplementation with python loops
    H, W = len(x), len(x[0])

    def corr(img, K):
        out = [[0.0] * W for _ in range(H)]
        for i in range(H):
            for j in range(W):
                s = 0.0
                for di in range(3):
                    for dj in range(3):
                        ii, jj = i + di - 1, j + dj - 1
                        if 0 <= ii < H and 0 <= jj < W:
                            s += img[ii][jj] * K[di][dj]
                out[i][j] = s
        return out

    def corr_t(img, K):
        out = [[0.0] * W for _ in range(H)]
        for i in range(H):
            for j in range(W):
                for di in range(3):
                    for dj in range(3):
                        ii, jj = i + di - 1, j + dj - 1
                        if 0 <= ii < H and 0 <= jj < W:
                            out[ii][jj] += img[i][j] * K[di][dj]
        return out

    def act(img):
        return [[a * v + v / (1 + np.exp(-b * v)) for v in row] for row in img]

    if not reverse:
        inner = corr(act(corr(x, K1)), K2)
    else:
        inner = corr_t(act(corr_t(x, K2)), K1)
    return [[x[i][j] + inner[i][j] for j in range(W)] for i in range(H)]


def test_resblock_matches_scalar_reimplementation():
    r = Rng(23)
    block = BiResBlock.build(1, (4, 4), 3, rng=r, dtype=np.float64, act=GNova(0.7, 1.3))
    x = r.standard_normal((1, 1, 4, 4))
    K1, K2 = block.conv1.K.value[0, 0].tolist(), block.conv2.K.value[0, 0].tolist()
    fwd = np.array(scalar_resblock(x[0, 0].tolist(), K1, K2, 0.7, 1.3))
    rev = np.array(scalar_resblock(x[0, 0].tolist(), K1, K2, 0.7, 1.3, reverse=True))
    assert np.allclose(run(block.fwd, x)[0, 0], fwd, atol=1e-12, rtol=0)
    assert np.allclose(run(block.rev, x)[0, 0], rev, atol=1e-12, rtol=0)


def test_resblock_zero_kernels_identity():
    block = BiResBlock.build(2, (5, 5), 3, rng=Rng(0), dtype=np.float64)
    for c in (block.conv1, block.conv2):
        c.K.value[...] = 0
    x = Rng(1).standard_normal((1, 2, 5, 5))
    assert np.array_equal(run(block.fwd, x), x)
    assert np.array_equal(run(block.rev, x), x)


def test_resblock_rejects_non_shape_preserving():
    r = Rng(0)
    c1 = BiConv2D(1, 1, 4, in_hw=(8, 8), stride=2, pad=1, rng=r, act=None)
    c2 = BiConv2D(1, 1, 3, in_hw=(8, 8), pad=1, rng=r, act=None)
    with pytest.raises(ShapeConfigError):
        BiResBlock(c1, c2)


def test_stack_reverse_order_law():
    r = Rng(31)
    for _ in range(5):
        dims = [int(r.uniform() * 5) + 1 for _ in range(4)]
        layers = [BiDense(a, b, rng=r, dtype=np.float64) for a, b in zip(dims, dims[1:])]
        stack = BiStack(layers)
        y = r.standard_normal((2, dims[-1]))
        manual = y
        for layer in reversed(layers):
            manual = run(layer.rev, manual)
        assert np.array_equal(run(stack.rev, y), manual)


def test_param_count_examples():
    r = Rng(0)
    assert param_count(BiDense(4, 3, rng=r)) == {"weights": 12, "biases": 7, "head": 0, "total": 19}
    twin = param_count(BiDense(4, 3, rng=r, tied=False))
    assert twin["total"] == 31
    assert param_count(None)["total"] == 0
    assert param_count(BiStack([]))["total"] == 0


GRID = [
    ((1, 28, 28), "conv:16:4:2:1,conv:32:4:2:1,dense:128", 16),
    ((1, 28, 28), "conv:8:4:2:1,res:3,conv:16:4:2:1,res:3,dense:64", 8),
    ((3, 32, 32), "conv:32:4:2:1,res:3,conv:64:4:2:1,res:3,dense:256", 32),
    ((1, 8, 8), "dense:32,dense:16", 4),
    ((3, 64, 64), "conv:32:4:2:1,conv:64:4:2:1,conv:128:4:2:1,res:3,dense:256", 64),
]


@pytest.mark.parametrize("shape,layers,J", GRID)
def test_param_ratio_grid(shape, layers, J):
    arch = Architecture(shape, layers, J)
    b = param_count(build_model("bvae", arch))
    t = param_count(build_model("twin", arch))
    assert 2 * b["weights"] == t["weights"]
    assert 0.45 < b["total"] / t["total"] < 0.55


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_bidense_adjoint_property(n_in, n_out, seed):
    r = Rng(seed)
    layer = BiDense(n_in, n_out, rng=r, dtype=np.float64, act=None)
    x, y = r.standard_normal((1, n_in)), r.standard_normal((1, n_out))
    assert abs(np.sum(run(layer.fwd, x) * y) - np.sum(x * run(layer.rev, y))) < 1e-10
