"""``ucaps`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 invalid configuration or arguments,
3 runtime failure (I/O, malformed files, non-finite values, failed checks).
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from typing import List, Optional

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_network, save_checkpoint
from .config import ExperimentConfig, config_hash, network_from_dict
from .metrics import evaluate
from .network import ConfigError, UCapsNet, count_depth, count_parameters
from .phantom import PhantomError, PhantomSpec, generate_phantom
from .volume import (ManifestEntry, Volume, VolumeFormatError, normalize, read_volume,
                     write_manifest, write_volume)

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_run_manifest(out_dir: str, command: str, config: dict, seed, argv) -> None:
    os.makedirs(out_dir, exist_ok=True)
    record = {
        "command": command,
        "argv": list(argv),
        "config_hash": config_hash(config),
        "config": config,
        "seed": seed,
        "toolkit_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    with open(os.path.join(out_dir, "run-manifest.json"), "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None


# --- commands -------------------------------------------------------------------------

def cmd_gen_phantom(args, argv) -> int:
    spec_dict = _load_json(args.spec) if args.spec else {}
    spec = PhantomSpec.from_dict(spec_dict)
    if args.count < 0 or args.val < 0 or args.test < 0 or args.val + args.test > args.count:
        raise ConfigError("need count >= 0 and val + test <= count")
    os.makedirs(args.out, exist_ok=True)
    entries = []
    n_train = args.count - args.val - args.test
    for i in range(args.count):
        img, lab = generate_phantom(PhantomSpec.from_dict({**spec.to_dict(), "seed": spec.seed + i}))
        image_name, label_name = f"phantom_{i:03d}_image.vvol", f"phantom_{i:03d}_label.vvol"
        write_volume(os.path.join(args.out, image_name), img)
        write_volume(os.path.join(args.out, label_name), lab)
        split = "train" if i < n_train else ("val" if i < n_train + args.val else "test")
        entries.append(ManifestEntry(image_name, label_name, split))
    write_manifest(os.path.join(args.out, "manifest.json"), entries)
    _write_run_manifest(args.out, "gen-phantom", spec.to_dict(), spec.seed, argv)
    print(json.dumps({"count": args.count, "manifest": os.path.join(args.out, "manifest.json")}))
    return EXIT_OK


def _dataset(cfg: ExperimentConfig):
    from .trainer import SegDataset
    if cfg.data.manifest:
        return SegDataset.from_manifest(cfg.data.manifest)
    spec = PhantomSpec.from_dict(cfg.data.phantom)
    return SegDataset.from_phantoms(spec, cfg.data.n_train, cfg.data.n_val, cfg.data.n_test)


def cmd_train(args, argv) -> int:
    from .trainer import evaluate_dataset, train
    cfg = ExperimentConfig.load(args.config)
    out = args.out or cfg.io.out_dir
    data = _dataset(cfg)
    if not data.train or not data.val:
        raise ConfigError("training needs at least one train and one val volume")
    net = UCapsNet(cfg.network)
    os.makedirs(out, exist_ok=True)
    _write_run_manifest(out, "train", cfg.to_dict(), cfg.train.seed, argv)
    start = time.perf_counter()
    log = (lambda r: print(json.dumps(r), file=sys.stderr)) if args.verbose else None
    result = train(net, data, cfg.train, history_path=os.path.join(out, "history.jsonl"), log=log)
    net.load_state_dict(result.best_state)
    eval_p = cfg.eval.patch_size or cfg.train.eval_patch_size or cfg.train.patch_size
    eval_overlap = cfg.eval.overlap if cfg.eval.overlap is not None else cfg.train.eval_overlap
    summary = {
        "best_val_dice": result.state.best_dice,
        "best_iter": result.state.best_iter,
        "iterations": result.state.iteration,
        "stop_reason": result.stop_reason,
        "seconds": round(time.perf_counter() - start, 3),
        "eval_patch_size": eval_p,
        "eval_overlap": eval_overlap,
    }
    if data.test:
        mean, per = evaluate_dataset(net, data.test, cfg.network.num_classes, eval_p, eval_overlap)
        summary["test_mean_dice"] = mean
        with open(os.path.join(out, "metrics.json"), "w") as fh:
            json.dump({"mean_dice": mean, "volumes": [m.to_dict() for m in per]}, fh, indent=2)
    save_checkpoint(os.path.join(out, "checkpoint.ucap"), result.best_state,
                    cfg.network.to_dict(), summary)
    print(json.dumps(summary))
    return EXIT_OK


def _predict_labels(net, image: np.ndarray, patch_size, overlap) -> np.ndarray:
    from .trainer import predict_volume
    probs = predict_volume(net, image[None].astype(np.float32), patch_size, overlap)
    return probs.argmax(0).astype(np.uint8)


def _eval_window(meta: dict, args):
    extra = meta.get("extra", {})
    p = args.patch_size or extra.get("eval_patch_size")
    overlap = args.overlap if args.overlap is not None else extra.get("eval_overlap")
    return p, overlap


def cmd_predict(args, argv) -> int:
    net, meta = load_network(args.ckpt)
    vol = read_volume(args.input)
    if vol.is_label:
        raise ConfigError(f"{args.input} holds labels, expected an image")
    p, overlap = _eval_window(meta, args)
    seg = _predict_labels(net, normalize(vol).data, p, overlap)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_volume(args.out, Volume(seg, vol.spacing))
    _write_run_manifest(out_dir, "predict", meta.get("config") or {}, None, argv)
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    pred = read_volume(args.pred).data
    truth = read_volume(args.truth).data
    if pred.shape != truth.shape:
        raise ConfigError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    k = args.num_classes or int(max(pred.max(), truth.max())) + 1
    metrics = evaluate(pred, truth, k)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(metrics.to_csv())
    print(metrics.to_json())
    return EXIT_OK


def _parse_angles(text: Optional[str]):
    from .perturb import DEFAULT_ANGLES
    if not text:
        return list(DEFAULT_ANGLES)
    try:
        angles = [float(a) for a in text.split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse angles {text!r}") from None
    if any(abs(a) > 180 for a in angles):
        raise ConfigError("angles must lie in [-180, 180]")
    return [int(a) if a.is_integer() else a for a in angles]


def cmd_perturb(args, argv) -> int:
    from .perturb import robustness_sweep
    angles = _parse_angles(args.angles)
    if any(a not in "xyz" for a in args.axis) or not args.axis:
        raise ConfigError(f"axis must be drawn from x, y, z; got {args.axis!r}")
    if args.kind == "rotation" and len(args.axis) != 1:
        raise ConfigError("rotation sweeps take a single axis")
    net, meta = load_network(args.ckpt)
    if args.input:
        if not args.truth:
            raise ConfigError("--in requires --truth")
        image, labels = normalize(read_volume(args.input)), read_volume(args.truth)
    else:
        image, labels = generate_phantom(PhantomSpec(seed=args.phantom_seed))
    p, overlap = _eval_window(meta, args)
    result = robustness_sweep(lambda img: _predict_labels(net, img, p, overlap), image, labels,
                              net.config.num_classes, kind=args.kind, axis=args.axis,
                              angles=angles, repeats=args.repeats, seed=args.seed)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(args.out)[0]
    with open(args.out, "w") as fh:
        fh.write(result.to_csv())
    with open(stem + ".json", "w") as fh:
        fh.write(result.to_json(indent=2))
    with open(stem + ".dat", "w") as fh:
        fh.write(result.to_gnuplot())
    _write_run_manifest(out_dir, "perturb", meta.get("config") or {}, args.seed, argv)
    print(json.dumps({"settings": result.settings,
                      "mean_dice": [m.mean_dice for m in result.metrics]}))
    return EXIT_OK


def cmd_params(args, argv) -> int:
    if args.config:
        net_cfg = ExperimentConfig.from_dict(_load_json(args.config)).network
    else:
        net_cfg = network_from_dict({"preset": args.preset, "in_channels": args.in_channels,
                                     "num_classes": args.num_classes})
    net = UCapsNet(net_cfg)
    print(json.dumps({"parameters": count_parameters(net), "depth": count_depth(net)}))
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    from .gradsuite import run_suite
    results = run_suite(instances=args.instances, seed=args.seed, full=args.full)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(json.dumps({"passed": not failed, "failed": failed}))
    return EXIT_OK if not failed else EXIT_RUNTIME


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ucaps", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-phantom", help="write synthetic (image, label) volumes and a manifest")
    p.add_argument("--spec", help="phantom spec JSON (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--val", type=int, default=0, help="how many of the volumes go to 'val'")
    p.add_argument("--test", type=int, default=0, help="how many of the volumes go to 'test'")
    p.set_defaults(func=cmd_gen_phantom)

    p = sub.add_parser("train", help="train from an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides io.out_dir)")
    p.add_argument("--verbose", action="store_true", help="log each eval record to stderr")
    p.set_defaults(func=cmd_train)

    def window_args(p):
        p.add_argument("--patch-size", type=int, default=None)
        p.add_argument("--overlap", type=int, default=None)

    p = sub.add_parser("predict", help="segment one image volume")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    window_args(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score a label volume against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--csv", help="also write the per-class table as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perturb", help="rotation or motion-artifact robustness sweep")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--kind", choices=["rotation", "motion"], required=True)
    p.add_argument("--axis", default="z", help="x, y or z (motion accepts several, e.g. xyz)")
    p.add_argument("--out", required=True, help="CSV path; .json and .dat siblings are written too")
    p.add_argument("--in", dest="input", help="image volume (default: a generated phantom)")
    p.add_argument("--truth", help="label volume matching --in")
    p.add_argument("--phantom-seed", type=int, default=10_000)
    p.add_argument("--angles", help="comma-separated rotation angles (default 0,5,...,90)")
    p.add_argument("--repeats", type=int, default=5, help="motion draws averaged per axis")
    p.add_argument("--seed", type=int, default=0)
    window_args(p)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("params", help="print parameter count and depth")
    p.add_argument("--config")
    p.add_argument("--preset", choices=["reference", "reduced"], default="reference")
    p.add_argument("--in-channels", type=int, default=1)
    p.add_argument("--num-classes", type=int, default=4)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all backward passes")
    p.add_argument("--full", action="store_true", help="check every network parameter entry")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except (OSError, VolumeFormatError, CheckpointError, FloatingPointError) as exc:
        print(f"ucaps {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, PhantomError, ValueError, KeyError) as exc:
        print(f"ucaps {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
