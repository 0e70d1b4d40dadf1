import math
import warnings

import numpy as np
import pytest

from bvae.errors import ContractError, DimensionError
from bvae.metrics import (EvalReport, REPORT_COLUMNS, active_units, downstream_train_eval, fit_gmm,
                          importance_log_weights, negative_elbo, nll_importance, psnr, ssim)
from bvae.tensor import Rng

from conftest import tiny_model
from oracles import LinearGaussian1D, is_standard_error

HALF_LN_4PI = 0.5 * math.log(4 * math.pi)


def test_oracle_constant():
    assert abs(HALF_LN_4PI - 1.2655121) < 1e-7
    assert abs(LinearGaussian1D().true_nll(0.0) - HALF_LN_4PI) < 1e-15


def test_nll_exact_posterior_proposal():
    model = LinearGaussian1D()
    est = nll_importance(model, np.array([0.0]), S=10**4, rng=Rng(0))
    lw = importance_log_weights(model, np.array([0.0]), 10**4, Rng(0))
    assert abs(est - HALF_LN_4PI) <= 3 * is_standard_error(lw)[0] + 1e-12


@pytest.mark.parametrize("x", [0.0, 1.3, -2.0])
def test_nll_offset_proposal_within_3se(x):
    model = LinearGaussian1D(shift=0.4, scale=1.6)
    lw = importance_log_weights(model, np.array([x]), 10**4, Rng(1))
    est = nll_importance(model, np.array([x]), 10**4, Rng(1))
    assert abs(est - model.true_nll(x)) < 3 * is_standard_error(lw)[0]


def test_nll_se_shrinks_like_inverse_sqrt_s():
    model = LinearGaussian1D(shift=0.5, scale=1.5)
    sds = []
    for S in (10**2, 10**3, 10**4):
        reps = [nll_importance(model, np.array([0.0]), S, Rng(100 * S + r)) for r in range(60)]
        sds.append(np.std(reps))
    for a, b in zip(sds, sds[1:]):
        assert 1.8 < a / b < 5.5  # sqrt(10) = 3.16 up to sampling noise


def test_nll_monotone_in_s_paired():
    m = tiny_model(seed=3)
    x = Rng(2).uniform((100, 1, 8, 8))
    n1 = nll_importance(m, x, 1, Rng(5), reduce=False)
    n64 = nll_importance(m, x, 64, Rng(6), reduce=False)
    d = n1 - n64
    assert d.mean() + 3 * d.std() / math.sqrt(100) >= 0
    assert negative_elbo(m, x[:3], Rng(0)).shape == (3,)
    with pytest.raises(ContractError):
        nll_importance(m, x, 0)


def test_active_units():
    assert active_units(np.zeros((10, 4))) == 0
    r = Rng(0)
    a = r.standard_normal((1000, 2))
    a = (a - a.mean(0)) / a.std(0) * np.sqrt([0.05, 0.0099])
    assert active_units(a) == 1
    assert active_units(a[r.permutation(1000)]) == 1
    assert active_units(a, eps=0.001) >= active_units(a, eps=0.01) >= active_units(a, eps=0.1)
    with pytest.raises(ContractError):
        active_units(np.zeros((1, 3)))


def test_active_units_population_variance():
    # values {0, 0.2}: population variance 0.01, sample variance 0.02
    m = np.array([[0.0], [0.2]])
    assert active_units(m, eps=0.01) == 1
    assert active_units(m, eps=0.0100001) == 0


def test_psnr_examples():
    a = Rng(0).uniform((3, 1, 8, 8), 0.2, 0.8)
    assert psnr(a, a) == math.inf
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-9
    assert abs(psnr(np.zeros((4, 4)), np.full((4, 4), 0.5)) - 10 * math.log10(4)) < 1e-12
    assert abs(10 * math.log10(4) - 6.0206) < 1e-4
    with pytest.raises(DimensionError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_symmetric_and_decreasing():
    r = Rng(1)
    a = r.uniform((2, 1, 16, 16), 0.3, 0.7)
    noise = r.uniform((2, 1, 16, 16), -1, 1)
    vals = [psnr(a, a + amp * noise) for amp in (0.01, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(vals, vals[1:]))
    b = a + 0.05 * noise
    assert psnr(a, b) == psnr(b, a)


def test_ssim_examples():
    a = Rng(2).uniform((1, 28, 28))
    assert abs(ssim(a, a) - 1.0) < 1e-12
    c1 = 1e-4
    assert abs(ssim(np.zeros((16, 16)), np.ones((16, 16))) - c1 / (1 + c1)) < 1e-12
    b = Rng(3).uniform((1, 28, 28))
    assert ssim(a, b) == ssim(b, a)
    assert ssim(a, b) <= 1


def test_ssim_small_image_global_fallback():
    a, b = Rng(0).uniform((5, 5)), Rng(1).uniform((5, 5))
    mu_a, mu_b = a.mean(), b.mean()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    c1, c2 = 1e-4, 9e-4
    want = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (a.var() + b.var() + c2))
    assert abs(ssim(a, b) - want) < 1e-12


def test_ssim_matches_brute_force_window():
    a, b = Rng(4).uniform((12, 13)), Rng(5).uniform((12, 13))
    r = np.arange(11) - 5
    g = np.exp(-(r**2) / (2 * 1.5**2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    vals = []
    for i in range(2):
        for j in range(3):
            pa, pb = a[i : i + 11, j : j + 11], b[i : i + 11, j : j + 11]
            ma, mb = np.sum(w * pa), np.sum(w * pb)
            va, vb = np.sum(w * pa * pa) - ma**2, np.sum(w * pb * pb) - mb**2
            cv = np.sum(w * pa * pb) - ma * mb
            vals.append(((2 * ma * mb + 1e-4) * (2 * cv + 9e-4)) / ((ma**2 + mb**2 + 1e-4) * (va + vb + 9e-4)))
    assert abs(ssim(a, b) - np.mean(vals)) < 1e-12


def test_classifier_separable():
    r = Rng(0)
    z = r.standard_normal((400, 5))
    y = (z[:, 0] + 0.5 * z[:, 1] > 0).astype(int)
    keep = np.abs(z[:, 0] + 0.5 * z[:, 1]) > 0.2
    z, y = z[keep], y[keep]
    acc = downstream_train_eval(z[:250], y[:250], z[250:], y[250:], seed=0)
    assert acc == 1.0
    assert downstream_train_eval(z[:250], y[:250], z[250:], y[250:], head="mlp", hidden=16, seed=0) > 0.95


def test_classifier_chance_on_shuffled_labels():
    r = Rng(1)
    z = r.standard_normal((6000, 16))
    y = (r.uniform((6000,)) * 10).astype(int)
    acc = downstream_train_eval(z[:4000], y[:4000], z[4000:], y[4000:], seed=1)
    assert abs(acc - 0.1) <= 0.03


def test_classifier_deterministic_and_missing_class_warns():
    r = Rng(2)
    z = r.standard_normal((200, 3))
    y = (z[:, 0] > 0).astype(int)
    a = downstream_train_eval(z[:150], y[:150], z[150:], y[150:], seed=4)
    assert a == downstream_train_eval(z[:150], y[:150], z[150:], y[150:], seed=4)
    y_test = y[150:].copy()
    y_test[0] = 2
    with pytest.warns(UserWarning, match="absent"):
        downstream_train_eval(z[:150], y[:150], z[150:], y_test, seed=4)


def gmm_datasets():
    r = Rng(42)
    blobs = np.concatenate([r.standard_normal((200, 2)) * 0.5 + c for c in ([0, 0], [4, 4], [-4, 3])])
    aniso = r.standard_normal((500, 3)) * np.array([3.0, 0.2, 1.0]) + 1.0
    ring = np.stack([np.cos(t := r.uniform((400,), 0, 2 * np.pi)), np.sin(t)], 1) * 5 + r.standard_normal((400, 2)) * 0.3
    return [blobs, aniso, ring]


@pytest.mark.parametrize("i", range(3))
def test_gmm_em_monotone(i):
    X = gmm_datasets()[i]
    g = fit_gmm(X, k=4, rng=Rng(i), tol=1e-10)
    h = np.array(g.history)
    assert len(h) > 2
    assert np.all(np.diff(h) >= -1e-12 * np.abs(h[:-1]))
    assert abs(g.weights.sum() - 1) < 1e-12 and np.all(g.variances > 0)


def test_gmm_k1_sample_statistics():
    X = Rng(3).standard_normal((300, 4)) * [1, 2, 3, 4] + [10, -5, 0, 100]
    g = fit_gmm(X, k=1, rng=Rng(0))
    assert np.max(np.abs(g.means[0] - X.mean(0))) < 1e-10
    assert np.max(np.abs(g.variances[0] - X.var(0))) < 1e-10


def test_gmm_two_clusters():
    r = Rng(6)
    X = np.concatenate([r.standard_normal((300, 2)) + [-5, 0], r.standard_normal((300, 2)) + [5, 2]])
    g = fit_gmm(X, k=2, rng=Rng(1))
    centers = sorted(g.means.tolist())
    assert np.allclose(centers[0], [-5, 0], atol=0.2) and np.allclose(centers[1], [5, 2], atol=0.2)
    s = g.sample(2000, Rng(2))
    assert s.shape == (2000, 2)
    assert g.log_likelihood(X) == pytest.approx(g.history[-1], abs=1e-9)


def test_gmm_errors_and_floor_warning():
    with pytest.raises(ContractError):
        fit_gmm(np.zeros((3, 2)), k=4)
    X = np.concatenate([np.zeros((20, 2)), Rng(0).standard_normal((20, 2)) + 10])
    with pytest.warns(UserWarning, match="floor"):
        fit_gmm(X, k=2, rng=Rng(0))


def test_eval_report_serialization():
    rep = EvalReport(101.5, 12, 18.2, 0.77, 0.9, 215169)
    d = rep.to_dict()
    assert tuple(d) == REPORT_COLUMNS
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert lines[1].split(",")[1] == "12"
    import json
    assert json.loads(rep.to_json()) == d
