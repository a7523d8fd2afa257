"""Command-line interface.

Subcommands: gen-data (synthesize a dataset), train (run the two-stage
pipeline), eval (score checkpoints on a split), sweep (grids over one axis).
Exit codes: 0 success, 2 configuration/usage errors, 3 runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as dataio
from . import experiment, losses
from .experiment import ConfigError
from .infer import sliding_window_infer
from .network import ViewModel

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _default_out_root() -> str:
    return os.environ.get("VOXCOT_OUT_ROOT", ".")


def _positive_int(value: str) -> int:
    iv = int(value)
    if iv < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return iv


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="voxcot",
        description="Uncertainty-weighted multi-view co-training for "
                    "volumetric segmentation (CPU, self-contained).")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--cases", type=_positive_int, required=True)
    g.add_argument("--extent", type=_positive_int, default=32)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--out", default=None, help="output directory")

    t = sub.add_parser("train", help="run stage-1 and stage-2 training")
    t.add_argument("--config", default=None, help="experiment config JSON")
    t.add_argument("--manifest", default=None)
    t.add_argument("--out", default=None, help="run output directory")
    t.add_argument("--mode", choices=["semi", "full", "supervised"], default=None)
    t.add_argument("--views", type=_positive_int, default=None)
    t.add_argument("--fusion", choices=["ulf", "uniform"], default=None)
    t.add_argument("--lambda-cot", type=float, default=None)
    t.add_argument("--kernel-mode", choices=["asymmetric", "symmetric"],
                   default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--labeled-fraction", type=float, default=None)
    t.add_argument("--stage1-iters", type=int, default=None)
    t.add_argument("--stage2-iters", type=int, default=None)
    t.add_argument("--stage1-from", default=None,
                   help="reuse stage-1 checkpoints from this run directory")

    e = sub.add_parser("eval", help="evaluate checkpoints on a manifest split")
    e.add_argument("--checkpoints", required=True, help="run directory")
    e.add_argument("--manifest", required=True,
                   help="split manifest (e.g. run's split_manifest.tsv)")
    e.add_argument("--split", default="test",
                   choices=["test", "labeled-train", "unlabeled-train"])
    e.add_argument("--report", required=True, help="output CSV path")
    e.add_argument("--ensemble", choices=["mean", "majority", "none"],
                   default="none")
    e.add_argument("--window", type=_positive_int, default=32)
    e.add_argument("--overlap", type=float, default=0.5)
    e.add_argument("--oracle", action="store_true",
                   help="debug: use ground-truth labels as predictions")

    s = sub.add_parser("sweep", help="run an experiment grid over one axis")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, choices=list(experiment.SWEEP_AXES))
    s.add_argument("--values", required=True,
                   help="comma-separated axis values")
    s.add_argument("--replicates", type=_positive_int, default=3)
    s.add_argument("--seed-base", type=int, default=None)
    s.add_argument("--out", default=None, help="sweep output root")
    s.add_argument("--parallel", type=_positive_int, default=1)
    return p


def _cmd_gen_data(args) -> int:
    out = Path(args.out) if args.out else Path(_default_out_root()) / "dataset"
    manifest = dataio.generate_synthetic(args.cases, args.extent, out, args.seed)
    print(out / "manifest.tsv")
    return EXIT_OK


def _train_overrides(args) -> dict:
    over: dict = {"train": {}, "arch": {}}
    if args.manifest is not None:
        over["manifest"] = args.manifest
    if args.out is not None:
        over["out_dir"] = args.out
    if args.views is not None:
        over["views"] = args.views
    if args.seed is not None:
        over["seed"] = args.seed
    if args.labeled_fraction is not None:
        over["labeled_fraction"] = args.labeled_fraction
    if args.stage1_from is not None:
        over["stage1_from"] = args.stage1_from
    if args.mode is not None:
        over["train"]["mode"] = args.mode
    if args.fusion is not None:
        over["train"]["fusion"] = args.fusion
    if args.lambda_cot is not None:
        over["train"]["lambda_cot"] = args.lambda_cot
    if args.stage1_iters is not None:
        over["train"]["stage1_iters"] = args.stage1_iters
    if args.stage2_iters is not None:
        over["train"]["stage2_iters"] = args.stage2_iters
    if args.kernel_mode is not None:
        over["arch"]["kernel_mode"] = args.kernel_mode
    if not over["train"]:
        del over["train"]
    if not over["arch"]:
        del over["arch"]
    return over


def _cmd_train(args) -> int:
    base = experiment.load_config_file(args.config) if args.config else {}
    cfg = experiment.resolve_config(base, _train_overrides(args))
    summary = experiment.run_experiment(cfg)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _load_run_models(run_dir: Path):
    models = []
    for stage in (2, 1):
        i = 0
        found = []
        while True:
            path = run_dir / f"stage{stage}_view{i}_final.ckpt"
            if not path.exists():
                break
            found.append(ViewModel.load(path))
            i += 1
        if found:
            models = found
            break
    if not models:
        raise ConfigError(f"no final checkpoints found under {run_dir}")
    return models


def _cmd_eval(args) -> int:
    run_dir = Path(args.checkpoints)
    manifest = dataio.read_manifest(args.manifest)
    cases = manifest.by_split(args.split)
    if not cases:
        raise ConfigError(f"manifest has no cases in split {args.split!r}")
    models = None if args.oracle else _load_run_models(run_dir)
    num_classes = 2 if models is None else models[0].descriptor.num_classes
    rows, single, ens = [], [], []
    for c in cases:
        image_v, label_v = dataio.load_case(manifest, c, with_label=True)
        label = label_v.data
        if args.oracle:
            d = losses.mean_foreground_dsc(label, label, num_classes)
            rows.append((c.case_id, "oracle", d))
            single.append(d)
            continue
        for vi, model in enumerate(models):
            pred = sliding_window_infer([model], image_v.data, args.window,
                                        args.overlap, "single")
            d = losses.mean_foreground_dsc(pred, label, num_classes)
            rows.append((c.case_id, f"view{vi}", d))
            single.append(d)
        if args.ensemble != "none" and len(models) >= 2:
            pred = sliding_window_infer(models, image_v.data, args.window,
                                        args.overlap, "ensemble", args.ensemble)
            d = losses.mean_foreground_dsc(pred, label, num_classes)
            rows.append((c.case_id, "ensemble", d))
            ens.append(d)
    summary = {"mean_single_view_dsc": float(np.mean(single)),
               "ensemble_dsc": float(np.mean(ens)) if ens else None,
               "n_test_cases": len(cases)}
    experiment.write_eval_csv(args.report, rows, summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    base = experiment.load_config_file(args.config)
    values_raw = [v for v in args.values.split(",") if v.strip()]
    if not values_raw:
        raise ConfigError("--values is empty")
    if args.axis == "views":
        values = [int(v) for v in values_raw]
    else:
        values = [float(v) for v in values_raw]
    out_root = Path(args.out) if args.out else Path(_default_out_root()) / "sweep"
    results = experiment.run_sweep(base, args.axis, values, args.replicates,
                                   out_root, args.seed_base, args.parallel)
    failures = [r for r in results if r[4] != "ok"]
    print(out_root / "sweep.csv")
    if failures:
        print(f"{len(failures)} of {len(results)} runs failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"gen-data": _cmd_gen_data, "train": _cmd_train,
                "eval": _cmd_eval, "sweep": _cmd_sweep}
    try:
        return handlers[args.command](args)
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # runtime failure
        logging.getLogger("voxcot").exception("run failed")
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
