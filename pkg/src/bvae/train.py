"""AdamW + one-cycle training over any model/objective pair, plus run I/O.

The loop minimizes ``BCE + KLD`` (or the chosen variant), which is the same
as ascending the bound.  Each epoch shuffles with a generator keyed on
``(seed, epoch)`` and draws reparameterization noise from another keyed
on ``(seed, epoch)``, so a run resumed from an epoch-boundary checkpoint
replays the uninterrupted run exactly.
"""
import csv
import dataclasses
import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import data as dio
from .autodiff import Tape
from .bilayers import param_count
from .errors import ConfigError, ContractError, NumericError
from .models import DEFAULT_LAYERS, Architecture, build_model
from .objectives import ObjectiveConfig, objective_loss
from .tensor import Rng

_SHUFFLE_STREAM = 1_000
_NOISE_STREAM = 2_000_000
_SUBSAMPLE_STREAM = 7


@dataclass
class TrainConfig:
    model: str = "bvae"
    layers: str = DEFAULT_LAYERS
    latent_dim: int = 16
    gnova_alpha: float = 1.0
    gnova_beta: float = 1.0
    objective: str = "elbo"
    beta_weight: float = 1.0
    iwae_k: int = 5
    tc_estimator: str = "mws"
    lr: float = 3e-3
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    precision: str = "single"
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    subsample: int = 0
    test_subsample: int = 0
    out_dir: str = "runs/bvae"
    nll_samples: int = 512
    eval_points: int = 1000
    gmm_k: int = 10
    classifier: str = "linear"
    classifier_hidden: int = 100

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.model not in ("bvae", "twin"):
            raise ConfigError(f"model must be 'bvae' or 'twin', got {self.model!r}")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be 'single' or 'double', got {self.precision!r}")
        self.objective_config()

    def objective_config(self, dataset_size=60000):
        return ObjectiveConfig(self.objective, self.beta_weight, self.iwae_k, dataset_size,
                               self.tc_estimator)

    def architecture(self, input_shape=(1, 28, 28)):
        return Architecture(tuple(input_shape), self.layers, self.latent_dim, self.gnova_alpha,
                            self.gnova_beta)

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_mapping(cls, mapping, base=None):
        """Build from string values (config file lines, CLI overrides)."""
        values = dataclasses.asdict(base) if base is not None else {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in mapping.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                values[key] = types[key](raw.strip() if isinstance(raw, str) else raw)
            except ValueError:
                raise ConfigError(f"bad value {raw!r} for {key}") from None
        return cls(**values)

    @classmethod
    def from_file(cls, path, overrides=None):
        return cls.from_mapping({**parse_config_text(open(path).read()), **(overrides or {})})


def parse_config_text(text):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# -- optimizer and schedule --------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay: ``p -= lr*wd*p + lr*m_hat/(sqrt(v_hat)+eps)``."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value = (p.value - (lr * self.weight_decay) * p.value - lr * upd).astype(p.value.dtype)

    def state_tensors(self):
        out = {}
        for name in self.m:
            out[f"adam_m/{name}"] = self.m[name]
            out[f"adam_v/{name}"] = self.v[name]
        return out

    def load_state(self, tensors, t):
        for name in self.m:
            self.m[name] = np.array(tensors[f"adam_m/{name}"])
            self.v[name] = np.array(tensors[f"adam_v/{name}"])
        self.t = t


def adamw_step(params, state, lr):
    """Functional spelling of :meth:`AdamW.step` (gradients live on the params)."""
    state.step(lr)
    return params, state


def onecycle_lr(t, total, peak, pct_start=0.3, div_factor=25.0, final_div=1e4):
    """Linear warm-up from ``peak/div_factor`` to ``peak`` over the first
    ``pct_start`` of ``total`` steps, then cosine decay to ``peak/final_div``
    at step ``total - 1``."""
    if not 0 <= t < total:
        raise ContractError(f"step {t} outside [0, {total})")
    start, end = peak / div_factor, peak / final_div
    warm = pct_start * total
    if t <= warm:
        return start + (peak - start) * (t / warm if warm > 0 else 1.0)
    span = (total - 1) - warm
    frac = min(1.0, (t - warm) / span) if span > 0 else 1.0
    return end + (peak - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


# -- run state -----------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    optimizer: AdamW
    log: list = field(default_factory=list)
    epoch: int = 0
    config: TrainConfig = None


LOG_COLUMNS = ("epoch", "loss", "bce", "kld", "lr")


def load_split(config, split, rng=None):
    imgs = config.train_images if split == "train" else config.test_images
    labs = config.train_labels if split == "train" else config.test_labels
    if not imgs:
        raise ConfigError(f"no {split} image path configured")
    ds = dio.load_idx(imgs, labs or None, split)
    n = config.subsample if split == "train" else config.test_subsample
    if n:
        ds = ds.subsample(n, rng or Rng(config.seed).spawn(_SUBSAMPLE_STREAM))
    return ds


def save_run(path, result):
    model, opt, cfg = result.model, result.optimizer, result.config
    tensors = {f"param/{p.name}": p.value for p in model.params}
    tensors.update(opt.state_tensors())
    meta = {
        "model": cfg.model if cfg else ("twin" if not model.tied else "bvae"),
        "architecture": model.arch.to_dict(),
        "precision": "double" if model.dtype == np.float64 else "single",
        "step": opt.t,
        "epoch": result.epoch,
        "config": cfg.to_dict() if cfg else None,
        "log": result.log,
        "rng": Rng(cfg.seed if cfg else 0).state(),
    }
    return dio.save_checkpoint(path, tensors, meta)


def load_run(path):
    tensors, meta = dio.load_checkpoint(path)
    arch = Architecture.from_dict(meta["architecture"])
    cfg = TrainConfig(**meta["config"]) if meta.get("config") else None
    model = build_model(meta["model"], arch, precision=meta["precision"])
    model.params.load_values({k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")})
    if cfg is not None:
        opt = AdamW(model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    else:
        opt = AdamW(model.params)
    opt.load_state(tensors, meta["step"])
    return TrainResult(model, opt, list(meta.get("log") or []), int(meta["epoch"]), cfg)


def log_csv(log):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for row in log:
        w.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]])
    return buf.getvalue()


def _grad_norm(params):
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))


def train(config, train_set=None, resume=None, epochs=None, log_fn=None, write=True):
    """Run the loop described in the module docstring.

    ``resume`` is a :class:`TrainResult` (e.g. from :func:`load_run`) to
    continue; ``epochs`` stops early after that many total epochs (the
    schedule still spans ``config.epochs``).  Writes ``model.ckpt``,
    ``metrics.json`` and ``metrics.csv`` to ``config.out_dir`` when
    ``write`` is true.
    """
    if train_set is None:
        train_set = load_split(config, "train")
    x_all = train_set.images
    n = x_all.shape[0]
    B = config.batch_size
    nb = -(-n // B)
    total_steps = config.epochs * nb
    if resume is None:
        model = build_model(config.model, config.architecture(x_all.shape[1:]), seed=config.seed,
                            precision=config.precision)
        opt = AdamW(model.params, config.adam_beta1, config.adam_beta2, config.adam_eps,
                    config.weight_decay)
        result = TrainResult(model, opt, [], 0, config)
    else:
        result = resume
        result.config = config
        model, opt = result.model, result.optimizer
    x_all = x_all.astype(model.dtype, copy=False)
    obj = config.objective_config(dataset_size=n)
    base = Rng(config.seed)
    stop = config.epochs if epochs is None else min(epochs, config.epochs)
    last_norm = float("nan")
    for epoch in range(result.epoch, stop):
        order = base.spawn(_SHUFFLE_STREAM + epoch).permutation(n)
        noise = base.spawn(_NOISE_STREAM + epoch)
        sums = np.zeros(3)
        lr = 0.0
        for b in range(nb):
            idx = order[b * B : (b + 1) * B]
            if obj.kind == "tcvae" and idx.size < 2:
                continue
            step = epoch * nb + b
            lr = onecycle_lr(step, total_steps, config.lr)
            where = f"epoch {epoch} step {step} (lr={lr:.3g}, last grad norm={last_norm:.4g})"
            tape = Tape()
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    terms = objective_loss(model, x_all[idx], obj, noise, tape)
                    loss = float(terms.total.value)
                    if not math.isfinite(loss):
                        raise NumericError("non-finite loss")
                    tape.backward(terms.total, model.params)
            except NumericError as e:
                raise NumericError(f"{e} at {where}") from None
            last_norm = _grad_norm(model.params)
            if 0 < config.grad_clip < last_norm:
                for p in model.params:
                    p.grad = p.grad * (config.grad_clip / last_norm)
            opt.step(lr)
            sums += idx.size * np.array([loss, float(terms.bce.value), float(terms.kld.value)])
        row = {"epoch": epoch + 1, "loss": sums[0] / n, "bce": sums[1] / n, "kld": sums[2] / n, "lr": lr}
        if not all(math.isfinite(row[k]) for k in ("loss", "bce", "kld")):
            raise NumericError(f"non-finite epoch mean at epoch {epoch + 1}")
        result.log.append(row)
        result.epoch = epoch + 1
        if log_fn:
            log_fn(row)
    if write:
        write_outputs(config.out_dir, result)
    return result


def write_outputs(out_dir, result, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    save_run(os.path.join(out_dir, "model.ckpt"), result)
    report = {
        "config": result.config.to_dict() if result.config else None,
        "param_count": param_count(result.model),
        "epochs": result.log,
    }
    if extra:
        report.update(extra)
    with open(os.path.join(out_dir, "metrics.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
        f.write(log_csv(result.log))


# -- evaluation ------------------------------------------------------------------


def latent_means(model, images, batch=500):
    return np.concatenate([model.encode(images[i : i + batch]).mu for i in range(0, len(images), batch)])


def reconstructions(model, images, batch=500):
    return np.concatenate([model.reconstruct(images[i : i + batch]) for i in range(0, len(images), batch)])


def evaluate(model, test_set, train_set, config):
    """Full :class:`~bvae.metrics.EvalReport` on (subsets of) the test split."""
    from .metrics import EvalReport, active_units, downstream_train_eval, nll_importance, psnr, ssim

    rng = Rng(config.seed).spawn(3)
    x_test = test_set.images.astype(model.dtype)
    pts = x_test[: config.eval_points] if config.eval_points else x_test
    nll = np.concatenate([
        nll_importance(model, pts[i : i + 50], config.nll_samples, rng, reduce=False)
        for i in range(0, len(pts), 50)
    ]).mean()
    mu_test = latent_means(model, x_test)
    recon = reconstructions(model, x_test)
    acc = float("nan")
    if train_set.labels is not None and test_set.labels is not None:
        mu_train = latent_means(model, train_set.images.astype(model.dtype))
        acc = downstream_train_eval(mu_train, train_set.labels, mu_test, test_set.labels,
                                    head=config.classifier, hidden=config.classifier_hidden,
                                    seed=config.seed)
    return EvalReport(
        nll=float(nll),
        au=active_units(mu_test),
        psnr_db=psnr(recon, x_test),
        ssim=ssim(recon, x_test),
        downstream_accuracy=acc,
        param_total=param_count(model)["total"],
    )
