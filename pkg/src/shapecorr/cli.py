"""Command line entry point: ``shapecorr {train,eval,infer,plot-acc,synth}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import load_config, save_config
from .evaluation import (
    DEFAULT_TOLERANCES,
    augment_test_set,
    evaluate,
    infer_correspondence,
    plot_accuracy,
    read_report,
    write_report,
)
from .geometry import read_cloud, write_indices
from .synth import make_dataset, read_dataset, write_dataset
from .training import build_state, load_checkpoint, save_checkpoint, similarity, train

log = logging.getLogger("shapecorr")


def _model(state, config):
    return state.teacher if config.train.use_teacher_for_eval else state.student


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.seor"
    if args.resume:
        state = load_checkpoint(args.resume)
        config = state.config
        log.info("resumed at step %d", state.step)
    else:
        config = load_config(args.config)
        state = build_state(config)
        (out / "metrics.jsonl").unlink(missing_ok=True)
    save_config(config, out / "config.yaml")
    d = config.data
    if d.manifest:
        pairs = read_dataset(d.manifest)
    else:
        pairs = make_dataset(d.pairs, d.points, seed=d.seed, template_seed=d.template_seed)
    torch.manual_seed(config.train.seed)
    train(state, pairs, metrics_path=out / "metrics.jsonl", checkpoint_path=ckpt,
          log_every=args.log_every, logger=log)
    save_checkpoint(state, ckpt)
    log.info("wrote %s", ckpt)
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    pairs = read_dataset(args.manifest)
    pairs = augment_test_set(pairs, args.noise, args.rotate, args.sigma, args.seed)
    report, records = evaluate(_model(state, state.config), pairs, args.tolerances)
    if args.report:
        write_report(report, records, args.report)
    print(json.dumps(report.to_dict()))
    return 0


def cmd_infer(args) -> int:
    state = load_checkpoint(args.checkpoint)
    model = _model(state, state.config)
    S = similarity(model, read_cloud(args.source), read_cloud(args.target))
    write_indices(args.out, infer_correspondence(S).mapping)
    return 0


def cmd_plot(args) -> int:
    plot_accuracy(read_report(args.report), args.out)
    return 0


def cmd_synth(args) -> int:
    pairs = make_dataset(args.pairs, args.points, seed=args.seed, template_seed=args.template_seed,
                         rotation_labels=args.rotation_labels, same_shape=args.same_shape,
                         shuffle=args.shuffle)
    manifest = write_dataset(pairs, args.out)
    print(manifest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapecorr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--noise", action="store_true", help="add Gaussian noise to both clouds")
    p.add_argument("--rotate", action="store_true", help="randomly rotate each source about z")
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerances", type=float, nargs="+", default=list(DEFAULT_TOLERANCES))
    p.add_argument("--report", help="write per-pair and aggregate records here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="map one source cloud onto one target cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("plot-acc", help="plot accuracy against tolerance from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("synth", help="generate a synthetic pair dataset")
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--template-seed", type=int, default=0)
    p.add_argument("--rotation-labels", action="store_true")
    p.add_argument("--same-shape", action="store_true")
    p.add_argument("--shuffle", action="store_true")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.command == "train" and not (args.config or args.resume):
        print("train: one of --config or --resume is required", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
