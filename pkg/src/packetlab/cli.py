"""Command-line entry points.

Every experiment-shaped subcommand reads the same flat dotted config keys,
either from a file (`--config run.cfg`) or as `--set key=value` overrides,
so a run manifest can be replayed verbatim.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attacks, data, nn, runner, uncertainty


def _add_config_args(sub):
    sub.add_argument("--config", help="flat key = value config file")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     dest="overrides", help="override one config key")


def _resolve_config(args):
    mapping = {}
    if args.config:
        mapping.update(runner.parse_config_file(args.config))
    for item in args.overrides:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        mapping[key.strip()] = value.strip()
    return runner.config_from_mapping(mapping)


def _load_parts(cfg):
    train_full = runner._load_dataset(cfg, "train")
    test_full = runner._load_dataset(cfg, "test")
    train_ds = data.subset(train_full, min(cfg.train_size, len(train_full)),
                           seed=cfg.seed)
    test_ds = data.subset(test_full, min(cfg.test_size, len(test_full)),
                          seed=cfg.seed + 1)
    return train_ds, test_ds


def _cmd_train(args):
    cfg = _resolve_config(args)
    train_ds, test_ds = _load_parts(cfg)
    model = nn.build_model(cfg.model, seed=cfg.seed)
    tcfg = replace(cfg.train, seed=cfg.seed, epochs=cfg.epochs)
    history = nn.train(model, train_ds, tcfg,
                       on_epoch=lambda e, l: print(f"epoch {e + 1}: loss {l:.4f}"))
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / "model.upkt"
    nn.save_model(model, path)
    print(f"train accuracy {nn.accuracy(model, train_ds):.4f}")
    print(f"test accuracy {nn.accuracy(model, test_ds):.4f}")
    print(f"checkpoint {path}")
    return 0


def _cmd_attack_eval(args):
    cfg = _resolve_config(args)
    model = nn.load_model(args.model_path)
    _, test_ds = _load_parts(cfg)
    eval_ds = data.subset(test_ds, min(cfg.eval_subset, len(test_ds)),
                          seed=cfg.seed + 2)
    clean = nn.accuracy(model, eval_ds)
    robust = attacks.robust_accuracy(model, eval_ds, cfg.attack,
                                     clamp_c=cfg.train.clamp_c)
    success = attacks.attack_success_rate(model, eval_ds, cfg.attack,
                                          clamp_c=cfg.train.clamp_c)
    print(f"clean accuracy  {clean:.4f}")
    print(f"robust accuracy {robust:.4f} "
          f"({cfg.attack.kind}, eps={cfg.attack.epsilon})")
    print(f"attack success  {success:.4f}")
    return 0


def _cmd_measure(args):
    cfg = _resolve_config(args)
    model = nn.load_model(args.model_path)
    train_ds, _ = _load_parts(cfg)
    x_base = data.compute_baseline(train_ds).x_base
    labels = runner._measure_labels(cfg, train_ds)
    dims = runner._sample_dims(cfg, labels, train_ds.dim)
    quad = replace(cfg.quad, seed=(cfg.seed, runner._tag("quad")))
    report = runner._measure(model, cfg, quad, x_base, dims, (0.0, 1.0),
                             cfg.train.clamp_c, train_ds.dim)
    for label in sorted(report.dx_by_class):
        print(f"class {label}: dx={report.dx_by_class[label]:.4f} "
              f"(se {report.dx_se_by_class[label]:.4f})  "
              f"dp={report.dp_by_class[label]:.4f} "
              f"(se {report.dp_se_by_class[label]:.4f})")
        skipped = report.skipped_by_class.get(label)
        if skipped:
            print(f"  skipped degenerate dims: {skipped}")
    print(f"aggregate ({report.mode}): dx={report.dx:.4f} dp={report.dp:.4f}")
    return 0


def _cmd_experiment(args):
    cfg = _resolve_config(args)
    records = runner.run_experiment(cfg)
    for rec in records:
        print(rec.csv_row())
    print(f"artifacts in {cfg.outdir}")
    return 0


def _cmd_feature_experiment(args):
    cfg = _resolve_config(args)
    cfg = replace(cfg, mode="feature")
    records = runner.run_feature_mode(cfg)
    for rec in records:
        print(rec.csv_row())
    print(f"artifacts in {cfg.outdir}")
    return 0


def _cmd_verify_oracles(args):
    ok, _ = runner.verify_oracles(out=print)
    print("all oracles passed" if ok else "oracle FAILURES above")
    return 0 if ok else 1


def _cmd_plot(args):
    acc, unc = runner.emit_plots(args.results, outdir=args.outdir)
    print(acc)
    print(unc)
    return 0


def _cmd_make_data(args):
    from . import synthdata
    if args.dataset == "mnist":
        synthdata.make_digits_dataset(args.outdir, n_train=args.n_train,
                                      n_test=args.n_test, seed=args.seed)
    else:
        out = Path(args.outdir)
        synthdata.make_cifar_batches(out / "train", n=args.n_train,
                                     seed=args.seed)
        synthdata.make_cifar_batches(out / "test", n=args.n_test,
                                     seed=args.seed + 1)
    print(f"wrote {args.dataset} stand-in data under {args.outdir}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="packetlab",
        description="Uncertainty measurements of neural loss packets.")
    subs = parser.add_subparsers(dest="command", required=True)

    for name, fn in [("train", _cmd_train),
                     ("experiment", _cmd_experiment),
                     ("feature-experiment", _cmd_feature_experiment)]:
        sub = subs.add_parser(name)
        _add_config_args(sub)
        sub.set_defaults(fn=fn)

    for name, fn in [("attack-eval", _cmd_attack_eval),
                     ("measure", _cmd_measure)]:
        sub = subs.add_parser(name)
        sub.add_argument("model_path", help="model checkpoint path")
        _add_config_args(sub)
        sub.set_defaults(fn=fn)

    sub = subs.add_parser("verify-oracles")
    sub.set_defaults(fn=_cmd_verify_oracles)

    sub = subs.add_parser("plot")
    sub.add_argument("results", help="path to results.csv")
    sub.add_argument("--outdir", default=None)
    sub.set_defaults(fn=_cmd_plot)

    sub = subs.add_parser("make-data",
                          help="generate stand-in datasets in real formats")
    sub.add_argument("--dataset", choices=["mnist", "cifar10"],
                     default="mnist")
    sub.add_argument("--outdir", required=True)
    sub.add_argument("--n-train", type=int, default=4000)
    sub.add_argument("--n-test", type=int, default=1000)
    sub.add_argument("--seed", type=int, default=0)
    sub.set_defaults(fn=_cmd_make_data)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
