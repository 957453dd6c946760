"""Command-line entry points.

Subcommands mirror the experiment lifecycle: ``gen`` materializes a synthetic
corpus with its scenario pools, ``train`` runs the optimization, ``calibrate``
derives the decision threshold from a checkpoint, ``eval`` scores the test
split and writes reports, ``sweep`` retrains across a hyperparameter grid and
``plot`` turns exported scores into histogram tables. Exit codes: 0 on
success, 1 for usage errors, 2 for runtime failures. Setting
``$WOOD_OUTPUT_DIR`` redirects all artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import ExperimentConfig, desk_config, resolve_output_dir
from .detect import DetectionScores, score_histograms, write_histograms
from .scenarios import PairedDataset, save_dataset

__all__ = ["main", "build_parser"]

DEFAULT_LAM_GRID = (0.2, 0.4, 0.6, 0.8, 1.0)
DEFAULT_MARGIN_GRID = (0.0, 0.1, 0.2, 0.3, 0.4)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; omit for the desk preset")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="override the output directory")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else desk_config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace(output_dir=args.out)
    return cfg


def _cmd_gen(args) -> int:
    cfg = _load_config(args)
    bundle = harness.prepare_data(cfg)
    out = resolve_output_dir(cfg)
    corpus = bundle.corpus
    if corpus is not None:
        save_dataset(corpus.id_train, out, "id_train")
        save_dataset(corpus.id_test, out, "id_test")
        save_dataset(corpus.external, out, "external")
    for name, pool in sorted(bundle.ood_train_pools.items()):
        save_dataset(PairedDataset(pool), out, f"pool_{name}")
    save_dataset(bundle.test_split, out, "test_split")
    cfg.save(out / "config.json")
    comp = bundle.test_split.manifest.get("composition", {})
    print(f"wrote corpus and pools to {out}")
    print(
        f"id_train={len(bundle.id_train_pool)} calibration={len(bundle.calibration_pool)} "
        f"test_split={dict(comp)}"
    )
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    result = harness.train(cfg)
    final = result.log[-1] if result.log else {}
    print(f"trained {cfg.epochs} epochs, {len(result.log)} steps")
    if final:
        print(
            f"final losses: total={final['total']:.6f} "
            f"l_cl={final['l_cl']:.6f} l_bc={final['l_bc']:.6f}"
        )
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    return 0


def _cmd_calibrate(args) -> int:
    ckpt = harness.load_checkpoint(args.checkpoint)
    bundle = harness.prepare_data(ckpt.config)
    target = args.target if args.target is not None else ckpt.config.calibration_target
    calibration = harness.calibrate_model(ckpt.model, bundle.calibration_pool, target)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    path = out / "calibration.json"
    path.write_text(
        json.dumps(calibration.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    print(f"delta={calibration.delta:.6f} (target {target:g}, n={calibration.calibration_size})")
    print(f"wrote {path}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = harness.load_checkpoint(args.checkpoint)
    bundle = harness.prepare_data(ckpt.config)
    result = harness.evaluate(
        ckpt.model,
        bundle.test_split,
        delta=args.delta,
        calibration_pool=None if args.delta is not None else bundle.calibration_pool,
        target=ckpt.config.calibration_target,
    )
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    paths = harness.export_evaluation(result, out, bins=args.bins)
    print(result.report.format_table())
    print(f"wrote {paths['report_json']}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    values = args.values
    if values is None:
        values = DEFAULT_LAM_GRID if args.param == "lam" else DEFAULT_MARGIN_GRID
    result = harness.ablation_sweep(cfg, args.param, values)
    paths = harness.write_sweep(result, resolve_output_dir(cfg))
    print(harness.format_sweep_table(result))
    print(f"wrote {paths['tsv']}")
    return 0


def _read_scores_tsv(path: Path):
    p_bc, p_cl, flags, scenarios, origins = [], [], [], [], []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 7:
            raise ValueError(f"{path}: expected 7 columns, got {len(cols)}")
        origins.append(cols[0])
        scenarios.append(cols[1])
        flags.append(cols[2] == "1")
        p_bc.append(float(cols[3]))
        p_cl.append(float(cols[4]))
    scores = DetectionScores.from_components(
        np.array(p_bc), np.array(p_cl), np.array(flags, dtype=bool), tuple(scenarios)
    )
    return scores, origins


def _cmd_plot(args) -> int:
    run = Path(args.run)
    scores, _ = _read_scores_tsv(run / "scores.tsv")
    thresholds = {}
    calib_path = run / "calibration.json"
    if calib_path.exists():
        thresholds["combined"] = float(json.loads(calib_path.read_text())["delta"])
    rows = score_histograms(scores, bins=args.bins, thresholds=thresholds)
    path = write_histograms(rows, run / "histograms.tsv")
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="wood",
        description="Weakly-supervised multi-modal OOD detection experiments.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen", parents=[], help="generate a corpus and scenario pools")
    _add_config_args(p)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train a model from a config")
    _add_config_args(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("calibrate", help="calibrate the decision threshold")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint (.npz)")
    p.add_argument("--target", type=float, default=None, help="ID retention target")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its test split")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint (.npz)")
    p.add_argument("--delta", type=float, default=None, help="fixed threshold; omit to calibrate")
    p.add_argument("--bins", type=int, default=20, help="histogram bins")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="retrain across a hyperparameter grid")
    _add_config_args(p)
    p.add_argument("--param", required=True, choices=("lam", "margin"))
    p.add_argument("--values", type=float, nargs="+", default=None, help="grid values")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("plot", help="rebuild histogram tables from exported scores")
    p.add_argument("--run", required=True, help="directory holding scores.tsv")
    p.add_argument("--bins", type=int, default=20, help="histogram bins")
    p.set_defaults(func=_cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.error("a command is required")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return int(args.func(args))
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
