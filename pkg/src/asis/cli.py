"""Command line: gen | train | infer | eval | gradcheck | selftest.

Exit codes: 0 success, 1 usage error, 2 malformed data or files,
3 numeric failure. Every run prints its fully resolved configuration
before doing any work, so logs always record what actually ran.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import __version__
from .checks import GRADIENT_TOLERANCE, check_gradients, run_selftest
from .errors import DataFormatError, NumericError
from .cloud import read_scene
from .metrics import MetricsAccumulator
from .synthgen import SceneSpec, generate_dataset, load_scene_spec
from .trainer import RunConfig, infer_file, load_run_config, train

USAGE_ERROR = 1
DATA_ERROR = 2
NUMERIC_ERROR = 3


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="asis", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"asis {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset directory")
    gen.add_argument("--scenes", type=int, required=True, help="number of scenes")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--spec", default=None, help="scene spec JSON file")

    tr = sub.add_parser("train", help="train a network on a dataset directory")
    tr.add_argument("--data", required=True, help="dataset directory")
    tr.add_argument("--config", required=True, help="run config JSON file")
    tr.add_argument("--out", required=True, help="checkpoint path to write")
    tr.add_argument("--no-sa", action="store_true", help="disable the semantic-to-instance path")
    tr.add_argument("--no-if", action="store_true", help="disable the neighborhood fusion path")

    inf = sub.add_parser("infer", help="predict labels for one scene file")
    inf.add_argument("--model", required=True, help="checkpoint path")
    inf.add_argument("--scene", required=True, help="scene file")
    inf.add_argument("--out", required=True, help="prediction file to write")

    ev = sub.add_parser("eval", help="score a prediction against ground truth")
    ev.add_argument("--pred", required=True, help="prediction scene file")
    ev.add_argument("--gt", required=True, help="ground-truth scene file")
    ev.add_argument("--report", default=None, help="write the JSON report here")

    gc = sub.add_parser("gradcheck", help="compare tape gradients with finite differences")
    gc.add_argument("--seed", type=int, default=0)

    sub.add_parser("selftest", help="run the built-in numeric checks")
    return parser


def _print_config(label: str, payload: dict) -> None:
    print(f"config {label}: {json.dumps(payload, sort_keys=True)}")


def _cmd_gen(args) -> int:
    spec = load_scene_spec(args.spec) if args.spec else SceneSpec()
    if args.scenes < 1:
        raise DataFormatError("--scenes must be positive")
    _print_config("gen", {"scenes": args.scenes, "seed": args.seed,
                          "out": args.out, "spec": spec.to_dict()})
    manifest = generate_dataset(args.out, args.scenes, spec, args.seed)
    total = sum(entry["n_points"] for entry in manifest["scenes"])
    print(f"wrote {args.scenes} scenes ({total} points) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    run = load_run_config(args.config)
    if args.no_sa or args.no_if:
        network = dataclasses.replace(
            run.network,
            use_sa=run.network.use_sa and not args.no_sa,
            use_if=run.network.use_if and not args.no_if,
        )
        run = dataclasses.replace(run, network=network)
    _print_config("train", {"data": args.data, "out": args.out, **run.to_dict()})
    rows = train(args.data, run, args.out)
    last = rows[-1]
    print(f"trained {last['step']} steps, final loss {last['total']:.4f}; "
          f"checkpoint at {args.out}")
    return 0


def _cmd_infer(args) -> int:
    from .trainer import load_trained

    _, run = load_trained(args.model)
    _print_config("infer", {"model": args.model, "scene": args.scene,
                            "out": args.out, **run.to_dict()})
    prediction = infer_file(args.model, args.scene, args.out)
    n_instances = prediction.instances.n_instances
    print(f"predicted {n_instances} instances; wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    gt = read_scene(args.gt)
    pred = read_scene(args.pred)
    if len(gt) != len(pred):
        raise DataFormatError(
            f"point counts differ: gt has {len(gt)}, prediction has {len(pred)}"
        )
    if gt.n_classes != pred.n_classes:
        raise DataFormatError(
            f"class counts differ: gt has {gt.n_classes}, prediction has {pred.n_classes}"
        )
    _print_config("eval", {"pred": args.pred, "gt": args.gt,
                           "iou_threshold": 0.5, "n_classes": gt.n_classes})
    if (pred.instance_ids < 0).any():
        raise DataFormatError("prediction contains unlabeled instance ids")
    accumulator = MetricsAccumulator(gt.n_classes, iou_threshold=0.5)
    accumulator.add_scene(gt.semantic_labels, gt.instance_ids,
                          pred.semantic_labels, pred.instance_ids)
    report = accumulator.compute()
    print(report.format_table())
    print(report.to_json())
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
        print(f"report written to {args.report}")
    return 0


def _cmd_gradcheck(args) -> int:
    _print_config("gradcheck", {"seed": args.seed, "tolerance": GRADIENT_TOLERANCE})
    ok, results = check_gradients(args.seed)
    for name, err in results.items():
        print(f"{name}: max relative error {err:.3e}")
    if not ok:
        print("gradient check FAILED", file=sys.stderr)
        return NUMERIC_ERROR
    print("gradient check passed")
    return 0


def _cmd_selftest(args) -> int:
    _print_config("selftest", {"seed": 0})
    ok, lines = run_selftest()
    for line in lines:
        print(line)
    if not ok:
        print("selftest FAILED", file=sys.stderr)
        return NUMERIC_ERROR
    print("selftest passed")
    return 0


_HANDLERS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return NUMERIC_ERROR


if __name__ == "__main__":
    sys.exit(main())
