"""Command-line entry point: ``dpreg {synth,register,train,eval,w2-study}``.

Exit codes: 0 success, 1 usage error or missing checkpoint, 2 data error,
3 numeric failure (rejection limit or diverging loss).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import CheckpointError, load_params, save_params
from .pipeline import (
    SELECTORS,
    DivergenceError,
    RegistrationConfig,
    StageError,
    aggregate,
    evaluate_pair,
    register,
    train,
    unregistered_report,
    w2_specificity_study,
)
from .features import FEATURE_KINDS
from .metrics import evaluate
from .points import write_points_csv
from .synth import RejectionLimitError, SyntheticSpec, read_dataset, synth_generate, write_dataset
from .volume import Volume, VolumeFormatError, read_lab3, read_vol3, warp_labels, write_vol3

log = logging.getLogger("dpreg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2))


def _load_config(args) -> RegistrationConfig:
    cfg = RegistrationConfig.load(args.config) if args.config else RegistrationConfig()
    overrides = {k: getattr(args, k) for k in ("features", "selector", "epochs", "lr", "seed")
                 if getattr(args, k, None) is not None}
    return replace(cfg, **overrides)


def _load_checkpoint(args, cfg: RegistrationConfig):
    if args.params:
        try:
            return load_params(args.params)
        except FileNotFoundError as exc:
            raise UsageError(f"checkpoint not found: {args.params}") from exc
    if cfg.learnable:
        raise UsageError(f"features={cfg.features!r}, selector={cfg.selector!r} need --params")
    return None


def _dataset(path):
    pairs = read_dataset(path)
    if not pairs:
        raise DataError(f"{path} contains no pairNNN directories")
    return pairs


def write_points(points, path) -> None:
    """Points CSV plus a ``<csv>.meta.json`` sidecar carrying provenance."""
    write_points_csv(points, path)
    meta = {"provenance": points.provenance, "image_dims": list(points.image_dims), "count": len(points)}
    _write_json(meta, f"{path}.meta.json")


def cmd_synth(args) -> int:
    spec = SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else SyntheticSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    pairs = synth_generate(spec, args.count) if args.count > 0 else []
    write_dataset(pairs, out)
    log.info("wrote %d pairs to %s", len(pairs), out)
    return EXIT_OK


def _dump_stages(res, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.savez(
        d / "stages.npz",
        feat_fixed=res.feat_fixed.values.data,
        feat_moving=res.feat_moving.values.data,
        points=res.points.coords,
        potentials=res.potentials,
        marginals=res.marginals,
        sparse=res.sparse,
        dense=res.field.data,
    )


def cmd_register(args) -> int:
    cfg = _load_config(args)
    params = _load_checkpoint(args, cfg)
    fixed, moving = read_vol3(args.fixed), read_vol3(args.moving)
    res = register(fixed, moving, cfg, params)
    # metrics describe the field as stored, i.e. after rounding to float32
    field = Volume(res.field.data.astype(np.float32))
    write_vol3(field, args.out_field)
    write_points(res.points, args.out_points)
    if args.dump_stages:
        _dump_stages(res, args.dump_stages)
    if args.out_metrics:
        if not (args.fixed_labels and args.moving_labels):
            raise UsageError("--out-metrics needs --fixed-labels and --moving-labels")
        fl, ml = read_lab3(args.fixed_labels), read_lab3(args.moving_labels)
        evaluate(fl, warp_labels(ml, field), field).save(args.out_metrics)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if not cfg.learnable:
        raise UsageError("nothing to train: choose features=learned or selector=predicted")
    pairs = _dataset(args.data)
    init = _load_checkpoint(args, replace(cfg, features="intensity", selector="grid"))
    params, trace = train(pairs, cfg, params=init)
    save_params(params, args.out)
    if args.loss_trace:
        with open(args.loss_trace, "w") as fh:
            fh.write("step,loss\n")
            for step, loss in enumerate(trace):
                fh.write(f"{step},{loss!r}\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    params = _load_checkpoint(args, cfg)
    pairs = _dataset(args.data)
    workers = args.workers or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=workers) as pool:
        reports = list(pool.map(lambda p: evaluate_pair(p, cfg, params)[0], pairs))
    report = aggregate(reports)
    report["unregistered"] = aggregate([unregistered_report(p) for p in pairs])
    report["per_pair"] = [json.loads(r.to_json()) for r in reports]
    report["config"] = cfg.to_dict()
    _write_json(report, args.out)
    return EXIT_OK


def cmd_w2(args) -> int:
    cfg = _load_config(args)
    try:
        params = load_params(args.params)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {args.params}") from exc
    pairs = _dataset(args.data)
    if len(pairs) < 3:
        raise DataError(f"w2-study needs at least 3 pairs, found {len(pairs)}")
    _write_json(w2_specificity_study(params, pairs, cfg), args.out)
    return EXIT_OK


def _config_flags(p, training=False):
    p.add_argument("--config", help="RegistrationConfig JSON (defaults used when omitted)")
    p.add_argument("--features", choices=FEATURE_KINDS, help="override config features")
    p.add_argument("--selector", choices=SELECTORS, help="override config selector")
    if training:
        p.add_argument("--epochs", type=int, help="override config epochs")
        p.add_argument("--lr", type=float, help="override config learning rate")
    p.add_argument("--seed", type=int, help="override config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpreg", description="Driving-point deformable registration toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--spec", help="SyntheticSpec JSON (defaults used when omitted)")
    p.add_argument("--count", type=int, required=True, help="number of pairs")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override spec seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("register", help="register one moving volume onto a fixed volume")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    _config_flags(p)
    p.add_argument("--params", help="PRM1 checkpoint for learned components")
    p.add_argument("--out-field", required=True, help="dense displacement (VOL3, 3 channels)")
    p.add_argument("--out-points", required=True, help="driving points CSV")
    p.add_argument("--out-metrics", help="MetricsReport JSON; needs both label volumes")
    p.add_argument("--fixed-labels")
    p.add_argument("--moving-labels")
    p.add_argument("--dump-stages", metavar="DIR", help="write every stage output to DIR/stages.npz")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("train", help="train learned features and/or the point predictor")
    p.add_argument("--data", required=True, help="dataset directory")
    _config_flags(p, training=True)
    p.add_argument("--params", help="start from this checkpoint instead of a fresh init")
    p.add_argument("--out", required=True, help="output PRM1 checkpoint")
    p.add_argument("--loss-trace", help="per-step loss CSV (step,loss)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="aggregate metrics over a dataset")
    p.add_argument("--data", required=True)
    _config_flags(p)
    p.add_argument("--params")
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--workers", type=int, default=0, help="threads (0: one per CPU)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("w2-study", help="W2 specificity of predicted point sets")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    _config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_w2)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, CheckpointError)):
        return EXIT_USAGE
    if isinstance(exc, (RejectionLimitError, DivergenceError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, StageError) and exc.__cause__ is not None:
        return _exit_code(exc.__cause__)
    return EXIT_DATA


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, CheckpointError, DataError, VolumeFormatError, StageError, OSError,
            ValueError, RejectionLimitError, DivergenceError, FloatingPointError) as exc:
        print(f"dpreg {args.command}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
