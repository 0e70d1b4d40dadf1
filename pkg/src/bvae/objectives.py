"""Training objectives: the (beta-weighted) BELBO, beta-TCVAE and IWAE losses.

All losses are returned as quantities to *minimize*.  Minimizing
``BCE + beta * KLD`` ascends the bound.  The functions work on tape
variables; :func:`gaussian_kl` and :func:`bernoulli_nll` also accept plain
arrays and then return a float.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import ConfigError, ContractError
from .models import reparameterize_vars

LOG_2PI = float(np.log(2 * np.pi))
KINDS = ("elbo", "beta", "tcvae", "iwae")


@dataclass
class ObjectiveConfig:
    kind: str = "elbo"
    beta_weight: float = 1.0
    iwae_k: int = 5
    dataset_size: int = 60000
    tc_estimator: str = "mws"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"objective kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "elbo" and self.beta_weight != 1.0:
            raise ConfigError("kind 'elbo' implies beta_weight = 1; use kind 'beta'")
        if not self.beta_weight > 0:
            raise ConfigError(f"beta_weight must be > 0, got {self.beta_weight}")
        if self.iwae_k < 1:
            raise ConfigError(f"iwae_k must be >= 1, got {self.iwae_k}")
        if self.tc_estimator not in ("mws", "mss"):
            raise ConfigError(f"tc_estimator must be 'mws' or 'mss', got {self.tc_estimator!r}")


@dataclass
class LossTerms:
    """Scalar tape variables; ``total`` is what gets backpropagated."""

    total: Var
    bce: Var
    kld: Var


def _on_tape(fn, *arrays):
    t = Tape(record=False)
    return float(fn(*[t.const(np.asarray(a, dtype=np.float64)) for a in arrays]).value)


# -- closed-form and per-sample terms ---------------------------------------


def gaussian_kl(mu, logvar):
    """Batch mean of KL(N(mu, diag(exp(logvar))) || N(0, I))."""
    if not isinstance(mu, Var):
        return _on_tape(gaussian_kl, mu, logvar)
    per = (ad.square(mu) + ad.exp(logvar) - 1.0 - logvar).sum(axis=-1) * 0.5
    return per.mean()


def bernoulli_nll(logits, x):
    """Binary cross-entropy from logits, summed over pixels, meaned over the batch."""
    if not isinstance(logits, Var):
        return _on_tape(bernoulli_nll, np.atleast_2d(logits), np.atleast_2d(x))
    per = ad.bce_logits(logits, x).reshape(logits.shape[0], -1).sum(axis=1)
    return per.mean()


def log_bernoulli(logits, x):
    """ln p(x | z) per sample, shape [B]."""
    return -(ad.bce_logits(logits, x).reshape(logits.shape[0], -1).sum(axis=1))


def log_std_normal(z):
    return (ad.square(z) + LOG_2PI).sum(axis=-1) * -0.5


def log_q_from_eps(eps, logvar):
    """ln q(z | x) for z = mu + eps * sigma, written in terms of eps."""
    return (logvar + (eps * eps + LOG_2PI)).sum(axis=-1) * -0.5


# -- losses -----------------------------------------------------------------


def _tape_x(tape, model, x):
    return tape.const(np.asarray(x, dtype=model.dtype))


def belbo_loss(model, x, eps, cfg=None, tape=None):
    """``BCE + beta_weight * KLD`` with one pathwise sample per datum."""
    cfg = cfg or ObjectiveConfig()
    if cfg.kind not in ("elbo", "beta"):
        raise ContractError(f"belbo_loss handles kinds 'elbo' and 'beta', not {cfg.kind!r}")
    tape = tape or Tape()
    xv = _tape_x(tape, model, x)
    mu, logvar = model.encode_vars(xv)
    z = reparameterize_vars(mu, logvar, tape.const(np.asarray(eps, dtype=model.dtype)))
    logits = model.decode_vars(z)
    bce = bernoulli_nll(logits, xv)
    kld = gaussian_kl(mu, logvar)
    total = bce + kld * cfg.beta_weight if cfg.beta_weight != 1.0 else bce + kld
    return LossTerms(total, bce, kld)


def iwae_log_weights(model, xv, eps):
    """Log importance weights ``[k, B]`` for ``eps[k, B, J]``."""
    k, B, J = eps.shape
    mu, logvar = model.encode_vars(xv)
    mu_k, lv_k = ad.tile0(mu, k), ad.tile0(logvar, k)
    e = xv.tape.const(np.asarray(eps, dtype=model.dtype).reshape(k * B, J))
    z = reparameterize_vars(mu_k, lv_k, e)
    logits = model.decode_vars(z)
    lw = log_bernoulli(logits, ad.tile0(xv, k)) + log_std_normal(z) - log_q_from_eps(e, lv_k)
    return lw.reshape(k, B), mu, logvar, logits


def iwae_loss(model, x, k, rng, tape=None):
    """Negative k-sample importance-weighted bound, batch-meaned."""
    if k < 1:
        raise ContractError(f"iwae k must be >= 1, got {k}")
    tape = tape or Tape()
    xv = _tape_x(tape, model, x)
    eps = rng.standard_normal((k, xv.shape[0], model.latent_dim), dtype=model.dtype)
    lw, mu, logvar, logits = iwae_log_weights(model, xv, eps)
    bound = ad.logsumexp(lw, axis=0) - float(np.log(k))
    total = -bound.mean()
    # diagnostics only: first-sample reconstruction and closed-form KL
    B = xv.shape[0]
    bce = ad.OPS["bce_logits"](logits.value[:B], xv.value)[0].reshape(B, -1).sum(axis=1).mean()
    return LossTerms(total, tape.const(np.asarray(bce)), gaussian_kl(mu, logvar))


def _mss_log_weights(B, N):
    """Log of the minibatch-stratified sampling weight matrix [B, B].

    Row i weights the batch posteriors when estimating q(z_i): its own
    posterior gets 1/N, one neighbour stands in for the unsampled
    remainder with (N - M) / (N M), the other M - 1 get 1/M, with
    M = B - 1.  Every row sums to one.
    """
    M = B - 1
    W = np.full((B, B), 1.0 / M)
    idx = np.arange(B)
    W[idx, idx] = 1.0 / N
    W[idx, (idx + 1) % B] = (N - M) / (N * M)
    return np.log(W)


def tc_decomposition(mu, logvar, z, eps, dataset_size, estimator="mws"):
    """Per-sample (mutual information, total correlation, dimension-wise KL).

    ``ln q(z)`` and ``ln prod_d q(z_d)`` are minibatch estimates over the
    ``B`` posteriors in the batch.
    """
    B, J = mu.shape
    if B < 2:
        raise ContractError("total-correlation estimate needs a batch of at least 2")
    tape = mu.tape
    zi = z.reshape(B, 1, J)
    # log q(z_i,d | x_j,d) for all pairs, [B, B, J]
    diff = zi - mu.reshape(1, B, J)
    lv = logvar.reshape(1, B, J)
    pair = (ad.square(diff) * ad.exp(-lv) + lv + LOG_2PI) * -0.5
    if estimator == "mws":
        log_nb = float(np.log(dataset_size * B))
        log_qz = ad.logsumexp(pair.sum(axis=2), axis=1) - log_nb
        log_qz_prod = (ad.logsumexp(pair, axis=1) - log_nb).sum(axis=1)
    else:
        logw = tape.const(_mss_log_weights(B, dataset_size).astype(mu.dtype))
        log_qz = ad.logsumexp(pair.sum(axis=2) + logw, axis=1)
        log_qz_prod = ad.logsumexp(pair + logw.reshape(B, B, 1), axis=1).sum(axis=1)
    log_qzx = log_q_from_eps(eps, logvar)
    log_pz = log_std_normal(z)
    return log_qzx - log_qz, log_qz - log_qz_prod, log_qz_prod - log_pz


def tcvae_loss(model, x, eps, cfg, tape=None):
    """``BCE + MI + beta_weight * TC + dimension-wise KL`` (beta-TCVAE)."""
    x = np.asarray(x)
    if x.shape[0] < 2:
        raise ContractError("tcvae_loss needs a batch of at least 2")
    if cfg.dataset_size < x.shape[0]:
        raise ContractError("dataset_size must be at least the batch size")
    tape = tape or Tape()
    xv = _tape_x(tape, model, x)
    mu, logvar = model.encode_vars(xv)
    e = tape.const(np.asarray(eps, dtype=model.dtype))
    z = reparameterize_vars(mu, logvar, e)
    logits = model.decode_vars(z)
    bce = bernoulli_nll(logits, xv)
    mi, tc, dwkl = tc_decomposition(mu, logvar, z, e, cfg.dataset_size, cfg.tc_estimator)
    kl_part = (mi + tc * cfg.beta_weight + dwkl).mean()
    return LossTerms(bce + kl_part, bce, gaussian_kl(mu, logvar))


def objective_loss(model, x, cfg, rng, tape=None):
    """Dispatch on ``cfg.kind``; draws whatever noise the objective needs from ``rng``."""
    tape = tape or Tape()
    B = np.asarray(x).shape[0]
    if cfg.kind == "iwae":
        return iwae_loss(model, x, cfg.iwae_k, rng, tape)
    eps = rng.standard_normal((B, model.latent_dim), dtype=model.dtype)
    if cfg.kind == "tcvae":
        return tcvae_loss(model, x, eps, cfg, tape)
    return belbo_loss(model, x, eps, cfg, tape)
