"""Command-line entry point: ``fedslr run|eval|account|plot``.

Seed and output directory resolve as: command-line flag, then the
``FEDSLR_SEED`` / ``FEDSLR_OUT`` environment variables, then the config file.
"""

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, checkpoint_load
from .config import ConfigError, load_config
from .data import DataError, load_csv, load_idx
from .diagnostics import BYTES_PER_ELEMENT, dense_profile_bytes, downlink_elements
from .model import Batch, ModelSpec, evaluate
from .reshape import Dense, factorize
from .runner import RunError, build_task, config_from_checkpoint, run_experiment

log = logging.getLogger("fedslr")


def _apply_overrides(cfg, seed, out):
    seed = seed if seed is not None else os.environ.get("FEDSLR_SEED")
    out = out if out is not None else os.environ.get("FEDSLR_OUT")
    if seed is not None:
        cfg.seed = int(seed)
    if out is not None:
        cfg.output_dir = str(out)
    return cfg


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args.seed, args.out)
    result = run_experiment(cfg, resume=args.resume)
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    if args.plot:
        from .plotting import plot_metrics
        for path in plot_metrics(result.metrics_path, Path(cfg.output_dir) / "figures"):
            print(f"figure: {path}")
    return 0


def _spec_from_checkpoint(w, activation) -> ModelSpec:
    dense = [k for k in w.kinds if isinstance(k, Dense)]
    if not dense:
        raise CheckpointError("checkpoint does not hold a classifier model")
    sizes = [dense[0].in_features] + [k.out_features for k in dense[:-1]]
    return ModelSpec(layer_sizes=sizes, num_classes=dense[-1].out_features, activation=activation)


def cmd_eval(args) -> int:
    params, meta = checkpoint_load(args.checkpoint)
    cfg = config_from_checkpoint(args.checkpoint)
    w = params["w"]
    spec = _spec_from_checkpoint(w, cfg.model["activation"])
    if args.labels:
        X, y = load_idx(args.data, args.labels)
    else:
        X, y = load_csv(args.data)
    test = Batch(X, y)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["round", "model", "accuracy"])
    writer.writerow([meta["round"], "gkr", repr(evaluate(spec, w, None, test))])
    ps = [params[f"client/{i}/p"] for i in range(meta["clients"]) if f"client/{i}/p" in params]
    if ps:
        mixed = float(np.mean([evaluate(spec, w, p, test) for p in ps]))
        writer.writerow([meta["round"], "mixed_mean", repr(mixed)])
    return 0


def cmd_account(args) -> int:
    rows = []
    if args.params is not None:
        if args.clients_per_round is None or args.rounds is None:
            raise ConfigError("<args>", "--params", "needs --clients-per-round and --rounds")
        params = int(args.params) if float(args.params).is_integer() else args.params
        k, rounds = args.clients_per_round, args.rounds
    else:
        if args.config is None:
            raise ConfigError("<args>", "--config", "either --config or --params is required")
        cfg = load_config(args.config)
        task = build_task(cfg)
        M = len(task.objectives)
        params = task.w0.size
        k = max(1, int(round(cfg.hyper.participation * M)))
        rounds = args.rounds if args.rounds is not None else cfg.hyper.T
        fact_down = downlink_elements(factorize(task.w0)) * BYTES_PER_ELEMENT * k * rounds
        rows.append(("initial_factorized_downlink", params, k, rounds, fact_down))
    rows.insert(0, ("dense", params, k, rounds, dense_profile_bytes(params, k, rounds)))
    rows.insert(1, ("dense_x2", params, k, rounds, dense_profile_bytes(params, k, rounds, 2)))
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["profile", "params", "clients_per_round", "rounds", "bytes", "gb"])
    for name, p, kk, r, b in rows:
        writer.writerow([name, p, kk, r, repr(float(b)), repr(float(b) / 1e9)])
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_metrics
    for path in plot_metrics(args.metrics, args.out):
        print(f"figure: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedslr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--plot", action="store_true", help="also write PNG figures")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a labelled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="CSV file, or IDX images with --labels")
    p.add_argument("--labels", help="IDX label file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("account", help="communication totals without training")
    p.add_argument("--config")
    p.add_argument("--params", type=float)
    p.add_argument("--clients-per-round", type=int)
    p.add_argument("--rounds", type=int)
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("plot", help="PNG figures from a metrics CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, DataError, RunError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, (ConfigError, FileNotFoundError)) else 1


if __name__ == "__main__":
    sys.exit(main())
