"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric abort.
"""
import argparse
import json
import os
import sys

import numpy as np

from . import data as dio
from .bilayers import param_count
from .errors import CheckpointError, ConfigError, NumericError, ParseError
from .models import build_model
from .tensor import Rng
from .train import (TrainConfig, evaluate, latent_means, load_run, load_split,
                    reconstructions, train, write_outputs)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _config(args):
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = v
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if args.config:
        return TrainConfig.from_file(args.config, overrides)
    return TrainConfig.from_mapping(overrides, TrainConfig())


def _load_model(args, cfg):
    path = args.checkpoint or os.path.join(cfg.out_dir, "model.ckpt")
    run = load_run(path)
    return run.model, run


def _write_json(path, obj):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)


def _param_report(cfg):
    arch = cfg.architecture()
    bvae = param_count(build_model("bvae", arch, seed=cfg.seed))
    twin = param_count(build_model("twin", arch, seed=cfg.seed))
    return {
        "bvae": bvae,
        "twin": twin,
        "weight_ratio": bvae["weights"] / twin["weights"] if twin["weights"] else float("nan"),
        "total_ratio": bvae["total"] / twin["total"] if twin["total"] else float("nan"),
    }


def cmd_train(args, cfg):
    if args.dry_run:
        report = {"config": cfg.to_dict(), "param_count": param_count(
            build_model(cfg.model, cfg.architecture(), seed=cfg.seed))}
        print(json.dumps(report["param_count"]))
        _write_json(os.path.join(cfg.out_dir, "metrics.json"), report)
        return EXIT_OK
    resume = load_run(args.resume) if args.resume else None
    result = train(cfg, resume=resume, log_fn=lambda row: print(
        f"epoch {row['epoch']:3d}  loss {row['loss']:.4f}  bce {row['bce']:.4f}  kld {row['kld']:.4f}"))
    if args.evaluate:
        report = evaluate(result.model, load_split(cfg, "test"), load_split(cfg, "train"), cfg)
        write_outputs(cfg.out_dir, result, {"eval": report.to_dict()})
        print(report.to_json())
    return EXIT_OK


def cmd_eval(args, cfg):
    model, _ = _load_model(args, cfg)
    report = evaluate(model, load_split(cfg, "test"), load_split(cfg, "train"), cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "eval.json"), "w") as f:
        f.write(report.to_json())
    with open(os.path.join(cfg.out_dir, "eval.csv"), "w") as f:
        f.write(report.to_csv())
    print(report.to_json())
    return EXIT_OK


def cmd_reconstruct(args, cfg):
    model, _ = _load_model(args, cfg)
    x = load_split(cfg, "test").images[: args.n].astype(model.dtype)
    grid = np.concatenate([x, reconstructions(model, x)])
    path = dio.write_image_grid(grid, args.n, os.path.join(cfg.out_dir, "reconstruct.pgm"))
    print(path)
    return EXIT_OK


def cmd_generate(args, cfg):
    model, _ = _load_model(args, cfg)
    rng = Rng(cfg.seed).spawn(11)
    gmm = None
    if args.sampler == "gmm":
        from .metrics import fit_gmm

        mu = latent_means(model, load_split(cfg, "train").images.astype(model.dtype))
        gmm = fit_gmm(mu, cfg.gmm_k, Rng(cfg.seed).spawn(12))
    imgs = model.generate(args.n, args.sampler, rng=rng, gmm=gmm)
    ext = "pgm" if model.input_shape[0] == 1 else "ppm"
    path = dio.write_image_grid(imgs, args.cols, os.path.join(cfg.out_dir, f"generate_{args.sampler}.{ext}"))
    print(path)
    return EXIT_OK


def cmd_interpolate(args, cfg):
    model, _ = _load_model(args, cfg)
    x = load_split(cfg, "test").images
    rows = []
    for a, b in zip(args.a, args.b):
        rows.append(model.interpolate(x[a], x[b], args.steps, space=args.space))
    path = dio.write_image_grid(np.concatenate(rows), args.steps,
                                os.path.join(cfg.out_dir, "interpolate.pgm"))
    print(path)
    return EXIT_OK


def cmd_classify(args, cfg):
    from .metrics import downstream_train_eval

    model, _ = _load_model(args, cfg)
    tr, te = load_split(cfg, "train"), load_split(cfg, "test")
    if tr.labels is None or te.labels is None:
        raise ConfigError("classify needs train_labels and test_labels")
    acc = downstream_train_eval(latent_means(model, tr.images.astype(model.dtype)), tr.labels,
                                latent_means(model, te.images.astype(model.dtype)), te.labels,
                                head=cfg.classifier, hidden=cfg.classifier_hidden, seed=cfg.seed)
    _write_json(os.path.join(cfg.out_dir, "classify.json"), {"downstream_accuracy": acc})
    print(json.dumps({"downstream_accuracy": acc}))
    return EXIT_OK


def cmd_params(args, cfg):
    report = _param_report(cfg)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_compare_twin(args, cfg):
    report = _param_report(cfg)
    if args.train:
        rows = {}
        tr, te = load_split(cfg, "train"), load_split(cfg, "test")
        for kind in ("bvae", "twin"):
            sub = cfg.replace(model=kind, out_dir=os.path.join(cfg.out_dir, kind))
            result = train(sub, train_set=tr)
            rows[kind] = evaluate(result.model, te, tr, sub)
        report["eval"] = {k: v.to_dict() for k, v in rows.items()}
        with open(os.path.join(cfg.out_dir, "compare.csv"), "w") as f:
            f.write("model," + rows["bvae"].to_csv().splitlines()[0] + "\n")
            for k, v in rows.items():
                f.write(f"{k}," + v.to_csv(header=False))
    _write_json(os.path.join(cfg.out_dir, "compare.json"), report)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="bvae", description="Bidirectional VAE training and evaluation")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--checkpoint", help="model checkpoint (default: <out_dir>/model.ckpt)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--dry-run", action="store_true", help="only report parameter counts")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--evaluate", action="store_true", help="run the evaluation suite afterwards")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="NLL, AU, PSNR, SSIM and downstream accuracy")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("reconstruct", parents=[common], help="grid of test images and reconstructions")
    s.add_argument("--n", type=int, default=10)
    s.set_defaults(fn=cmd_reconstruct)

    s = sub.add_parser("generate", parents=[common], help="sample images")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--cols", type=int, default=8)
    s.add_argument("--sampler", choices=("gaussian", "gmm"), default="gaussian")
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("interpolate", parents=[common], help="latent interpolation between test images")
    s.add_argument("--a", type=int, nargs="+", default=[0])
    s.add_argument("--b", type=int, nargs="+", default=[1])
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--space", choices=("latent", "pixel"), default="latent")
    s.set_defaults(fn=cmd_interpolate)

    s = sub.add_parser("classify", parents=[common], help="downstream classifier on latent means")
    s.set_defaults(fn=cmd_classify)

    s = sub.add_parser("params", parents=[common], help="parameter counts, BVAE vs twin")
    s.set_defaults(fn=cmd_params)

    s = sub.add_parser("compare-twin", parents=[common], help="BVAE vs unidirectional twin")
    s.add_argument("--train", action="store_true", help="train and evaluate both models")
    s.set_defaults(fn=cmd_compare_twin)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        return args.fn(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, CheckpointError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
