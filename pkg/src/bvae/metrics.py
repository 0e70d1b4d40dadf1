"""Evaluation: importance-sampled NLL, active units, PSNR, SSIM, downstream
classification on latent means, and a diagonal GMM fitted to latents.
"""
import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import ParamSet, Tape
from .errors import ContractError, DimensionError, NumericError
from .objectives import iwae_log_weights
from .tensor import Rng

# -- negative log-likelihood ------------------------------------------------


def importance_log_weights(model, x, S, rng, chunk=64):
    """``[S, B]`` log weights ``ln p(x|z) + ln p(z) - ln q(z|x)``, ``z ~ q(z|x)``.

    Models may supply their own ``importance_log_weights(x, S, rng)``;
    VAE models go through the decoder in chunks of ``chunk`` samples.
    """
    own = getattr(model, "importance_log_weights", None)
    if own is not None:
        return np.asarray(own(x, S, rng), dtype=np.float64)
    x = model._prep(x)
    out = []
    done = 0
    while done < S:
        k = min(chunk, S - done)
        t = Tape(record=False)
        eps = rng.standard_normal((k, x.shape[0], model.latent_dim), dtype=model.dtype)
        lw = iwae_log_weights(model, t.const(x), eps)[0]
        out.append(lw.value.astype(np.float64))
        done += k
    return np.concatenate(out, axis=0)


def nll_importance(model, x, S=512, rng=None, reduce=True):
    """``-(logsumexp_s w_s - ln S)`` with the model's own posterior as proposal.

    Returns the batch mean, or per-datum values with ``reduce=False``.
    """
    if S < 1:
        raise ContractError(f"S must be >= 1, got {S}")
    rng = rng or Rng(0)
    lw = importance_log_weights(model, x, S, rng)
    per = -(logsumexp(lw, axis=0) - math.log(S))
    return float(per.mean()) if reduce else per


def negative_elbo(model, x, rng):
    """Single-sample negative ELBO per datum (the S=1 importance estimate)."""
    return nll_importance(model, x, 1, rng, reduce=False)


# -- active units -----------------------------------------------------------


def active_units(posterior_means, eps=0.01):
    """Number of latent coordinates whose population variance of the
    posterior mean across the data is at least ``eps``."""
    m = np.asarray(posterior_means, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2:
        raise ContractError(f"active_units needs [N >= 2, J] means, got shape {m.shape}")
    return int(np.sum(m.var(axis=0) >= eps))


# -- image quality ----------------------------------------------------------


def _as_images(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return a[None, None]
    if a.ndim == 3:
        return a[None]
    if a.ndim == 4:
        return a
    raise DimensionError(f"expected [H, W], [C, H, W] or [N, C, H, W], got {a.shape}")


def psnr(a, b):
    """Mean per-image PSNR in dB with peak 1.  Identical images give ``inf``."""
    a, b = _as_images(a), _as_images(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes {a.shape} and {b.shape} differ")
    mse = ((a - b) ** 2).reshape(a.shape[0], -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        vals = 10.0 * np.log10(1.0 / mse)
    return float(np.mean(vals))


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    g /= g.sum()
    return g


def _filter_valid(img, g):
    # separable valid-mode correlation over the last two axes
    from numpy.lib.stride_tricks import sliding_window_view

    n = g.size
    rows = sliding_window_view(img, n, axis=-2) @ g
    return sliding_window_view(rows, n, axis=-1) @ g


def ssim(a, b, win=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM over valid windows, channels and images (dynamic range 1).

    Images smaller than the window use global statistics.
    """
    a, b = _as_images(a), _as_images(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim shapes {a.shape} and {b.shape} differ")
    c1, c2 = k1**2, k2**2
    if min(a.shape[-2:]) < win:
        ax = (-2, -1)
        mu_a, mu_b = a.mean(axis=ax), b.mean(axis=ax)
        va, vb = a.var(axis=ax), b.var(axis=ax)
        cov = ((a - mu_a[..., None, None]) * (b - mu_b[..., None, None])).mean(axis=ax)
    else:
        g = _gaussian_window(win, sigma)
        mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
        va = _filter_valid(a * a, g) - mu_a**2
        vb = _filter_valid(b * b, g) - mu_b**2
        cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (va + vb + c2)
    return float(np.mean(num / den))


# -- downstream classification ---------------------------------------------


def downstream_train_eval(z_train, y_train, z_test, y_test, head="linear", hidden=100, *,
                          seed=0, epochs=200, batch_size=256, lr=1e-2, weight_decay=1e-4,
                          patience=5, tol=1e-4):
    """Train a softmax head on frozen latent means; return test accuracy.

    ``head`` is ``"linear"`` or ``"mlp"`` (one logistic hidden layer of
    width ``hidden``).  Features are standardized with training statistics.
    Training stops after ``epochs`` or when the epoch loss has not improved
    by a relative ``tol`` for ``patience`` epochs.
    """
    from .train import AdamW

    z_train = np.asarray(z_train, dtype=np.float64)
    z_test = np.asarray(z_test, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    y_test = np.asarray(y_test, dtype=np.int64)
    C = int(max(y_train.max(), y_test.max())) + 1
    missing = sorted(set(range(C)) - set(np.unique(y_train).tolist()))
    if missing:
        warnings.warn(f"classes {missing} are absent from the training labels", stacklevel=2)
    mean, std = z_train.mean(axis=0), z_train.std(axis=0) + 1e-8
    z_train = (z_train - mean) / std
    z_test = (z_test - mean) / std
    rng = Rng(seed)
    d = z_train.shape[1]

    def init(n_in, n_out):
        lim = math.sqrt(6.0 / (n_in + n_out))
        return rng.uniform((n_out, n_in), -lim, lim)

    params = ParamSet()
    if head == "linear":
        layers = [(params.new("out.W", init(d, C)), params.new("out.b", np.zeros(C)))]
    elif head == "mlp":
        layers = [(params.new("hid.W", init(d, hidden)), params.new("hid.b", np.zeros(hidden))),
                  (params.new("out.W", init(hidden, C)), params.new("out.b", np.zeros(C)))]
    else:
        raise ContractError(f"unknown head {head!r}")

    def logits(t, z):
        h = t.const(z)
        for i, (W, b) in enumerate(layers):
            h = ad.dense(h, t.watch(W), t.watch(b))
            if i < len(layers) - 1:
                h = ad.sigmoid(h)
        return h

    opt = AdamW(params, weight_decay=weight_decay)
    onehot = np.eye(C)[y_train]
    best, stale = np.inf, 0
    n = z_train.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            t = Tape()
            loss = ad.softmax_cross_entropy(logits(t, z_train[idx]), onehot[idx])
            t.backward(loss, params)
            opt.step(lr)
            total += float(loss.value) * idx.size
        total /= n
        if total < best * (1 - tol):
            best, stale = total, 0
        else:
            stale += 1
            if stale >= patience:
                break
    pred = logits(Tape(record=False), z_test).value.argmax(axis=1)
    return float(np.mean(pred == y_test))


# -- Gaussian mixture sampler ----------------------------------------------


@dataclass
class GmmModel:
    """Diagonal-covariance Gaussian mixture."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    history: list = field(default_factory=list)

    def __post_init__(self):
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ContractError("mixture weights must sum to 1")
        if np.any(self.variances <= 0):
            raise ContractError("mixture variances must be positive")

    @property
    def k(self):
        return self.weights.size

    def component_log_density(self, X):
        X = np.asarray(X, dtype=np.float64)
        diff = X[:, None, :] - self.means[None]
        return -0.5 * (np.sum(diff**2 / self.variances[None], axis=2)
                       + np.sum(np.log(2 * np.pi * self.variances), axis=1)[None])

    def log_likelihood(self, X):
        """Mean per-point log-likelihood."""
        lp = self.component_log_density(X) + np.log(self.weights)[None]
        return float(logsumexp(lp, axis=1).mean())

    def sample(self, n, rng):
        u = rng.uniform((n,))
        comp = np.minimum(np.searchsorted(np.cumsum(self.weights), u, side="right"), self.k - 1)
        eps = rng.standard_normal((n, self.means.shape[1]))
        return self.means[comp] + eps * np.sqrt(self.variances[comp])


def _kmeans_pp(X, k, rng):
    n = X.shape[0]
    centers = [X[int(rng.uniform() * n) % n]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        tot = d2.sum()
        if tot <= 0:
            idx = int(rng.uniform() * n) % n
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.uniform() * tot, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def fit_gmm(latents, k=10, rng=None, max_iter=200, tol=1e-6, var_floor=1e-6):
    """Diagonal GMM by EM from a k-means++ start.

    Stops when the relative change of the mean log-likelihood falls below
    ``tol`` or after ``max_iter`` iterations.  The per-iteration
    log-likelihood is kept in ``history`` and must never decrease.
    """
    X = np.asarray(latents, dtype=np.float64)
    n, d = X.shape
    if not 1 <= k <= n:
        raise ContractError(f"need 1 <= k <= N, got k={k}, N={n}")
    rng = rng or Rng(0)
    means = _kmeans_pp(X, k, rng)
    variances = np.tile(np.maximum(X.var(axis=0), var_floor), (k, 1))
    weights = np.full(k, 1.0 / k)
    history = []
    floored = False
    for it in range(max_iter):
        # E step
        lp = -0.5 * (np.sum((X[:, None, :] - means[None]) ** 2 / variances[None], axis=2)
                     + np.sum(np.log(2 * np.pi * variances), axis=1)[None]) + np.log(weights)[None]
        norm = logsumexp(lp, axis=1)
        resp = np.exp(lp - norm[:, None])
        # M step
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / n
        means = (resp.T @ X) / nk[:, None]
        # centered form; E[x^2] - m^2 loses digits when |m| >> sd
        variances = np.einsum("nk,nkd->kd", resp, (X[:, None, :] - means[None]) ** 2) / nk[:, None]
        if np.any(variances < var_floor):
            floored = True
            variances = np.maximum(variances, var_floor)
        ll = float(np.mean(logsumexp(
            -0.5 * (np.sum((X[:, None, :] - means[None]) ** 2 / variances[None], axis=2)
                    + np.sum(np.log(2 * np.pi * variances), axis=1)[None]) + np.log(weights)[None],
            axis=1)))
        if history and ll < history[-1] - 1e-9 * max(1.0, abs(history[-1])) and not floored:
            raise NumericError(f"EM log-likelihood decreased at iteration {it}: {history[-1]} -> {ll}")
        history.append(ll)
        if len(history) > 1 and abs(history[-1] - history[-2]) <= tol * max(abs(history[-2]), 1e-12):
            break
    if floored:
        warnings.warn("a mixture component collapsed; variance floor applied", stacklevel=2)
    weights = weights / weights.sum()
    return GmmModel(weights, means, variances, history)


# -- report -----------------------------------------------------------------

REPORT_COLUMNS = ("nll", "au", "psnr_db", "ssim", "downstream_accuracy", "param_total")


@dataclass
class EvalReport:
    nll: float
    au: int
    psnr_db: float
    ssim: float
    downstream_accuracy: float
    param_total: int

    def to_dict(self):
        return {k: getattr(self, k) for k in REPORT_COLUMNS}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self, header=True):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(REPORT_COLUMNS)
        w.writerow([repr(v) if isinstance(v, float) else v for v in self.to_dict().values()])
        return buf.getvalue()
