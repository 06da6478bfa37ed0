"""Command-line interface: generate / train / infer / eval / verify.

Every subcommand is deterministic given an explicit --seed.  Success exits
0; any failure exits nonzero after printing one machine-parseable JSON line
on stderr.  Human-readable tables go to stdout; machine outputs are files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import (SceneSpec, generate, generate_dataset, load_image_pair,
                      load_manifest, load_pgm, save_pgm)
from .evaluation import DEFAULT_TOLERANCE, evaluate, nms_thin
from .network import ABLATIONS, ContourNet, ModelConfig
from .oracle import run_suites, SUITES
from .tensor import Tensor
from .training import TrainConfig, parse_config_text, train_loop


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # single-line errors instead of argparse's usage dump
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="agcrf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic contour dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=20, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="square canvas side")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.03, help="additive noise sigma")
    p.add_argument("--blur", type=float, default=0.8, help="Gaussian blur sigma")
    p.add_argument("--spec", help="JSON scene spec file: render this one scene instead")

    p = sub.add_parser("train", help="train a model from a dataset manifest")
    p.add_argument("--config", help="key=value file of model/training settings")
    p.add_argument("--manifest", required=True, help="image<TAB>mask manifest")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--seed", type=int, default=None, help="overrides config seed")
    p.add_argument("--iters", type=int, default=None, help="overrides config iterations")
    p.add_argument("--variant", choices=ABLATIONS, default=None,
                   help="overrides config ablation")
    p.add_argument("--sign", choices=("plus", "minus"), default=None,
                   help="gate pre-activation sign convention")
    p.add_argument("--log", default=None, help="metrics JSONL path "
                   "(default: checkpoint path + .metrics.jsonl)")

    p = sub.add_parser("infer", help="run a checkpoint on one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input PGM image")
    p.add_argument("--out-dir", required=True, help="where the maps get written")
    p.add_argument("--seed", type=int, default=0, help="unused; accepted for symmetry")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred-dir", required=True, help="directory of predicted .pgm maps")
    p.add_argument("--gt-dir", required=True, help="directory of same-named GT masks")
    p.add_argument("--tol", type=float, default=DEFAULT_TOLERANCE,
                   help="match radius as a fraction of the image diagonal")
    p.add_argument("--raw", action="store_true",
                   help="skip the thinning pass before scoring")
    p.add_argument("--out", default=None, help="results JSON path "
                   "(default: <pred-dir>/results.json)")
    p.add_argument("--seed", type=int, default=0, help="unused; accepted for symmetry")

    p = sub.add_parser("verify", help="run brute-force oracle suites")
    p.add_argument("suite", nargs="?", default="all",
                   choices=tuple(SUITES) + ("all",))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", default=None, help="also write reports as JSON lines")
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec = SceneSpec.from_json(fh.read())
        os.makedirs(args.out, exist_ok=True)
        sample = generate(spec)
        img_path = os.path.join(args.out, "img_0000.pgm")
        mask_path = os.path.join(args.out, "gt_0000.pgm")
        save_pgm(img_path, sample.image.data[0])
        save_pgm(mask_path, sample.edges * 255)
        manifest = os.path.join(args.out, "manifest.txt")
        with open(manifest, "w", encoding="utf-8") as fh:
            fh.write("img_0000.pgm\tgt_0000.pgm\n")
    else:
        manifest = generate_dataset(args.out, args.count, args.size, args.size,
                                    seed=args.seed, noise_sigma=args.noise,
                                    blur_sigma=args.blur)
    print(json.dumps({"manifest": manifest}))
    return 0


def _train_configs(args) -> tuple[ModelConfig, TrainConfig]:
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            raw = parse_config_text(fh.read())
        model_keys = ModelConfig.field_names()
        train_keys = TrainConfig.field_names()
        unknown = set(raw) - model_keys - train_keys
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        model_cfg = ModelConfig.from_mapping(
            {k: v for k, v in raw.items() if k in model_keys})
        train_cfg = TrainConfig.from_mapping(
            {k: v for k, v in raw.items() if k in train_keys})
    else:
        model_cfg, train_cfg = ModelConfig(), TrainConfig()
    if args.variant is not None:
        model_cfg = dataclasses.replace(model_cfg, ablation=args.variant)
    if args.sign is not None:
        model_cfg = dataclasses.replace(
            model_cfg, gate_sign=1.0 if args.sign == "plus" else -1.0)
    if args.iters is not None:
        train_cfg = dataclasses.replace(train_cfg, iterations=args.iters)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    model_cfg.validate()
    return model_cfg, train_cfg


def cmd_train(args) -> int:
    model_cfg, train_cfg = _train_configs(args)
    pairs = load_manifest(args.manifest)
    if not pairs:
        raise ValueError(f"manifest {args.manifest} lists no samples")
    dataset = [load_image_pair(img, mask) for img, mask in pairs]
    model = ContourNet(model_cfg, np.random.default_rng(train_cfg.seed))
    log_path = args.log if args.log else args.out + ".metrics.jsonl"
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(log_path, "w", encoding="utf-8") as log_fh:
        metrics = train_loop(dataset, model, train_cfg, log_fh=log_fh)
    save_checkpoint(args.out, model)
    final = metrics[-1]["loss"] if metrics else None
    print(json.dumps({"checkpoint": args.out, "iterations": len(metrics),
                      "final_loss": final, "metrics_log": log_path}))
    return 0


def cmd_infer(args) -> int:
    net = load_checkpoint(args.checkpoint)
    image = load_pgm(args.image).astype(np.float64) / 255.0
    if net.config.image_channels != 1:
        raise ValueError("this command feeds single-channel PGM images; the "
                         f"checkpoint wants {net.config.image_channels} channels")
    preds = net.forward(Tensor(image[np.newaxis]))
    os.makedirs(args.out_dir, exist_ok=True)
    written = []
    for i, head in enumerate(preds.heads, 1):
        path = os.path.join(args.out_dir, f"head_{i}.pgm")
        save_pgm(path, head.data[0])
        written.append(path)
    fused_path = os.path.join(args.out_dir, "fused.pgm")
    save_pgm(fused_path, preds.fused.data[0])
    written.append(fused_path)
    print(json.dumps({"maps": written}))
    return 0


def cmd_eval(args) -> int:
    names = sorted(n for n in os.listdir(args.pred_dir) if n.endswith(".pgm"))
    if not names:
        raise ValueError(f"no .pgm predictions found in {args.pred_dir}")
    preds, gts = [], []
    for name in names:
        gt_path = os.path.join(args.gt_dir, name)
        if not os.path.exists(gt_path):
            raise ValueError(f"no ground-truth file for '{name}' in {args.gt_dir}")
        pred = load_pgm(os.path.join(args.pred_dir, name)).astype(np.float64) / 255.0
        preds.append(pred if args.raw else nms_thin(pred))
        gts.append(load_pgm(gt_path) > 127)
    result, curve = evaluate(preds, gts, tol_frac=args.tol)
    out_path = args.out if args.out else os.path.join(args.pred_dir, "results.json")
    doc = result.to_dict()
    doc["tolerance"] = args.tol
    doc["curve"] = [{"threshold": t, "precision": p, "recall": r, "F": f}
                    for t, p, r, f in curve]
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
    print(f"images    {len(preds)}")
    print(f"ODS       {result.ods:.4f}  (threshold {result.ods_threshold:.2f})")
    print(f"OIS       {result.ois:.4f}")
    print(f"AP        {result.ap:.4f}")
    print(f"results   {out_path}")
    return 0


def cmd_verify(args) -> int:
    reports = run_suites(args.suite, seed=args.seed)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            for rep in reports:
                fh.write(rep.to_json() + "\n")
    width = max(len(r.check) for r in reports) + 2
    iw = max(len(r.instance) for r in reports) + 2
    print(f"{'check':<{width}}{'instance':<{iw}}{'value':>12}  {'tolerance':>10}  status")
    failed = 0
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        failed += 0 if r.passed else 1
        print(f"{r.check:<{width}}{r.instance:<{iw}}{r.value:>12.3e}  "
              f"{r.tolerance:>10.1e}  {status}")
    print(f"{len(reports)} checks, {failed} failed")
    return 1 if failed else 0


_COMMANDS = {"generate": cmd_generate, "train": cmd_train, "infer": cmd_infer,
             "eval": cmd_eval, "verify": cmd_verify}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        sys.stderr.write(json.dumps({"error": str(exc), "kind": "usage"}) + "\n")
        return 2
    except Exception as exc:  # contract: one JSON line on stderr, nonzero exit
        sys.stderr.write(json.dumps({"error": str(exc),
                                     "kind": type(exc).__name__}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
