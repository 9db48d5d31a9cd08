"""Command-line entry point: ``sgdiff <command> --seed N --config cfg.json --out DIR``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import datagen, training
from .checkpoint import CheckpointError
from .scenegraph import ParseError, SchemaError
from .tensor import NonFiniteError
from .textenc import Vocabulary

log = logging.getLogger("sgdiff")

# exit code per error category
EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "checkpoint": 5, "input": 6, "numeric": 7,
              "check": 8, "internal": 1}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _config(args) -> training.RunConfig:
    cfg = training.RunConfig.load(args.config) if args.config else training.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_generate_data(args) -> None:
    cfg = _config(args)
    seed = args.seed if args.seed is not None else cfg.data_seed
    out = Path(cfg.out_dir)
    train, held = training.generate_split(seed, args.n_train or cfg.n_train, args.n_heldout or cfg.n_heldout)
    datagen.save_dataset(out / "train", train, seed)
    datagen.save_dataset(out / "heldout", held, seed)
    Vocabulary.from_grammar().save(out / "vocab.txt")
    print(f"wrote {len(train)} training and {len(held)} held-out samples to {out}")


def cmd_train(args) -> None:
    cfg = _config(args)
    tr = training.train(cfg, resume=args.resume)
    last = tr.losses[-1]["loss"] if tr.losses else float("nan")
    print(f"trained stages {tr.completed}; final loss {last:.6f}; checkpoint {Path(cfg.out_dir) / 'checkpoint.ckpt'}")


def _load_model(args, cfg):
    if not args.checkpoint:
        raise CliError("usage", "--checkpoint is required")
    model, saved = training.load_model(args.checkpoint)
    cfg.use_scene_graph = saved.use_scene_graph
    cfg.use_swin_unet = saved.use_swin_unet
    return model


def cmd_sample(args) -> None:
    cfg = _config(args)
    model = _load_model(args, cfg)
    path = Path(args.captions)
    if not path.exists():
        raise CliError("input", f"captions file {path} does not exist")
    lines = path.read_text(encoding="utf-8").splitlines()
    seed = cfg.seed
    rows = training.sample_to_files(model, cfg, lines, seed, cfg.out_dir, steps=args.steps)
    bad = sum("error" in r for r in rows)
    print(f"wrote {len(rows) - bad} images to {cfg.out_dir}; {bad} captions rejected")


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    model = _load_model(args, cfg)
    if args.n < 2:
        raise CliError("input", "--n must be at least 2")
    _, held = training.load_data(cfg)
    report = training.evaluate(model, held, args.n, seed=cfg.seed, role=args.stage,
                               use_graph=cfg.use_scene_graph, net=training.feature_net(cfg.data_seed),
                               steps=args.steps)
    _write_json(Path(cfg.out_dir) / "report.json", report)
    print(json.dumps(report, sort_keys=True))


def cmd_ablate(args) -> None:
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    rows = training.ablate(cfg, seeds, eval_samples=args.eval_samples)
    out = Path(cfg.out_dir)
    _write_json(out / "ablation.json", rows)
    table = training.format_table(rows)
    (out / "ablation.md").write_text(table + "\n", encoding="utf-8")
    print(table)


def cmd_grad_check(args) -> None:
    from .gradchecks import run_all

    seed = args.seed if args.seed is not None else 0
    rows = run_all(seed, include_model=not args.skip_model)
    if args.out:
        _write_json(Path(args.out) / "grad_check.json", rows)
    for r in rows:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['name']}: {r['error']:.3e} (< {r['tolerance']:g})")
    if not all(r["passed"] for r in rows):
        raise CliError("check", "gradient check failed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgdiff", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", type=str, default=None, help="JSON run configuration")
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.set_defaults(func=fn)
        return p

    p = add("generate-data", cmd_generate_data, "render the synthetic dataset")
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-heldout", type=int, default=None)
    p = add("train", cmd_train, "train the cascade")
    p.add_argument("--resume", type=str, default=None, help="checkpoint to resume from")
    p = add("sample", cmd_sample, "sample images for captions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--captions", required=True, help="text file with one caption per line")
    p.add_argument("--steps", type=int, default=None)
    p = add("evaluate", cmd_evaluate, "FID-proxy / IS-proxy report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--stage", choices=training.ROLES, default="base")
    p.add_argument("--steps", type=int, default=None)
    p = add("ablate", cmd_ablate, "scene-graph / swin-unet ablation table")
    p.add_argument("--seeds", type=str, default=None, help="comma-separated seeds")
    p.add_argument("--eval-samples", type=int, default=32)
    p = add("grad-check", cmd_grad_check, "finite-difference gradient checks")
    p.add_argument("--skip-model", action="store_true")
    return parser


def _categorize(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, training.ConfigError):
        return "config"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, (ParseError, SchemaError)):
        return "input"
    if isinstance(exc, (NonFiniteError, FloatingPointError)):
        return "numeric"
    if isinstance(exc, (FileNotFoundError, KeyError, json.JSONDecodeError)):
        return "data"
    if isinstance(exc, ValueError):
        return "input"
    return "internal"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CODES["usage"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(all="ignore")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a categorized exit
        cat = _categorize(exc)
        print(f"error[{cat}]: {exc}", file=sys.stderr)
        if args.verbose:
            log.exception("details")
        return EXIT_CODES[cat]
    return 0


if __name__ == "__main__":
    sys.exit(main())
