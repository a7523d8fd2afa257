"""Experiment orchestration: resolved configs, runs, evaluation, sweeps.

A run directory contains: run_manifest.json (the fully resolved config plus
format versions, written before any work), split_manifest.tsv, stage
checkpoints, iteration CSVs, uncertainty.csv (semi/full modes), eval.csv and
summary.json. Re-running from a run manifest reproduces every artifact
bit-identically apart from wall-clock columns.
"""

from __future__ import annotations

import concurrent.futures
import copy
import dataclasses
import hashlib
import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import data as dataio
from . import losses
from .checkpoint import CHECKPOINT_VERSION
from .infer import sliding_window_infer
from .network import ArchitectureDescriptor, ViewModel
from .rng import RngStream
from .training import (IterationRecord, TrainConfig, train_stage1,
                       train_stage2, write_records_csv)
from .views import standard_view_set
from . import __version__

log = logging.getLogger("voxcot.experiment")

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


_DEFAULTS = {
    "schema_version": CONFIG_SCHEMA_VERSION,
    "manifest": None,
    "out_dir": None,
    "seed": 1,
    "views": 3,
    "labeled_fraction": 0.1,
    "test_count": 18,
    "arch": {},            # ArchitectureDescriptor overrides
    "train": {},           # TrainConfig overrides
    "per_view_dropout": None,  # optional list of dropout_p per view
    "stage1_from": None,   # directory with stage1_view*_final.ckpt to reuse
    "eval_ensemble": "mean",   # mean | majority | none
    "eval_window": None,   # defaults to train.patch_size
    "eval_overlap": 0.5,
}


def resolve_config(base: Optional[dict] = None, overrides: Optional[dict] = None) -> dict:
    """Materialize every default; validate; return a plain JSON-able dict."""
    cfg = copy.deepcopy(_DEFAULTS)
    for src in (base or {}), (overrides or {}):
        for k, v in src.items():
            if k not in _DEFAULTS:
                raise ConfigError(f"unknown config field {k!r}")
            if k in ("arch", "train") and v is not None:
                cfg[k] = {**cfg[k], **v}
            elif v is not None or k in ("per_view_dropout", "stage1_from",
                                        "eval_window", "manifest", "out_dir"):
                cfg[k] = v
    if cfg["schema_version"] != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {cfg['schema_version']}")
    if cfg["manifest"] is None:
        raise ConfigError("config field 'manifest' is required")
    if cfg["out_dir"] is None:
        raise ConfigError("config field 'out_dir' is required")
    if not isinstance(cfg["views"], int) or cfg["views"] < 1:
        raise ConfigError("views must be a positive integer")
    if cfg["eval_ensemble"] not in ("mean", "majority", "none"):
        raise ConfigError(f"bad eval_ensemble {cfg['eval_ensemble']!r}")
    # instantiate to validate field values; stored form stays dict
    try:
        arch = ArchitectureDescriptor(**cfg["arch"])
        train = TrainConfig(**{**cfg["train"], "seed": cfg["seed"]})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    cfg["arch"] = arch.to_meta()
    cfg["train"] = train.to_meta()
    pvd = cfg["per_view_dropout"]
    if pvd is not None:
        if len(pvd) != cfg["views"]:
            raise ConfigError("per_view_dropout must list one rate per view")
        for p in pvd:
            if not (0.0 <= float(p) < 1.0):
                raise ConfigError(f"per-view dropout {p} out of [0, 1)")
    if cfg["eval_window"] is None:
        cfg["eval_window"] = train.patch_size
    return cfg


def load_config_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return raw


def _load_split_cases(manifest: dataio.DatasetManifest):
    """Read volumes into memory. Unlabeled label files are never opened."""
    labeled, unlabeled, test = [], [], []
    for c in manifest.by_split("labeled-train"):
        img, lab = dataio.load_case(manifest, c, with_label=True)
        labeled.append((img.data, lab.data))
    for c in manifest.by_split("unlabeled-train"):
        img, _ = dataio.load_case(manifest, c, with_label=False)
        unlabeled.append((img.data, None))
    for c in manifest.by_split("test"):
        img, lab = dataio.load_case(manifest, c, with_label=True)
        test.append((c.case_id, img.data, lab.data))
    return labeled, unlabeled, test


def build_models(cfg: dict, root: RngStream) -> List[ViewModel]:
    views = standard_view_set(cfg["views"])
    pvd = cfg["per_view_dropout"]
    models = []
    for i, view in enumerate(views):
        arch_meta = dict(cfg["arch"])
        if pvd is not None:
            arch_meta["dropout_p"] = float(pvd[i])
        desc = ArchitectureDescriptor.from_meta(arch_meta)
        stage1_from = cfg.get("stage1_from")
        if stage1_from:
            path = Path(stage1_from) / f"stage1_view{i}_final.ckpt"
            if not path.exists():
                raise ConfigError(f"stage1_from checkpoint missing: {path}")
            m = ViewModel.build(desc, view, root.child("model", i),
                                init="from_file", init_path=path)
        else:
            m = ViewModel.build(desc, view, root.child("model", i))
        models.append(m)
    return models


def evaluate_models(models: Sequence[ViewModel], test_cases, window: int,
                    overlap: float, ensemble_mode: str):
    """Per-case per-view single-view DSC plus optional ensemble DSC."""
    num_classes = models[0].descriptor.num_classes
    rows = []
    single = []
    ens_scores = []
    for case_id, image, label in test_cases:
        for vi, model in enumerate(models):
            pred = sliding_window_infer([model], image, window, overlap, "single")
            d = losses.mean_foreground_dsc(pred, label, num_classes)
            rows.append((case_id, f"view{vi}", d))
            single.append(d)
        if ensemble_mode != "none" and len(models) >= 2:
            pred = sliding_window_infer(models, image, window, overlap,
                                        "ensemble", ensemble_mode)
            d = losses.mean_foreground_dsc(pred, label, num_classes)
            rows.append((case_id, "ensemble", d))
            ens_scores.append(d)
    summary = {
        "mean_single_view_dsc": float(np.mean(single)) if single else float("nan"),
        "ensemble_dsc": float(np.mean(ens_scores)) if ens_scores else None,
        "n_test_cases": len(test_cases),
    }
    return rows, summary


def write_eval_csv(path, rows, summary):
    lines = ["case_id,view,dsc"]
    lines.extend(f"{cid},{view},{d:.6f}" for cid, view, d in rows)
    lines.append(f"summary,mean_single,{summary['mean_single_view_dsc']:.6f}")
    if summary["ensemble_dsc"] is not None:
        lines.append(f"summary,ensemble,{summary['ensemble_dsc']:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def run_experiment(cfg: dict) -> dict:
    """Execute one resolved config end to end; returns the summary dict."""
    cfg = resolve_config(cfg)  # idempotent; guarantees full materialization
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    run_manifest = {
        "config": cfg,
        "package_version": __version__,
        "checkpoint_version": CHECKPOINT_VERSION,
        "volume_format_version": dataio.VOLUME_VERSION,
        "manifest_format_version": dataio.MANIFEST_VERSION,
    }
    (out_dir / "run_manifest.json").write_text(
        json.dumps(run_manifest, indent=2, sort_keys=True) + "\n")

    manifest = dataio.read_manifest(cfg["manifest"])
    train_cfg = TrainConfig.from_meta(cfg["train"])
    split = dataio.split(manifest, cfg["labeled_fraction"], cfg["test_count"],
                         cfg["seed"])
    dataio.write_manifest(out_dir / "split_manifest.tsv",
                          dataio.resolve_manifest(split))
    labeled, unlabeled, test = _load_split_cases(split)
    log.info("split: %d labeled / %d unlabeled / %d test",
             len(labeled), len(unlabeled), len(test))

    root = RngStream(cfg["seed"])
    models = build_models(cfg, root)

    if cfg["stage1_from"]:
        # reusing stage-1 weights: still write the stage-1 checkpoints into
        # this run so it is self-contained and reproducible
        for i, m in enumerate(models):
            m.save(out_dir / f"stage1_view{i}_final.ckpt",
                   {"stage": 1, "view_index": i, "tag": "final",
                    "reused_from": str(cfg["stage1_from"])})
    else:
        rec1 = train_stage1(models, labeled, train_cfg, root, out_dir)
        write_records_csv(out_dir / "stage1_records.csv", rec1)

    urows: list = []
    rec2 = train_stage2(models, labeled, unlabeled, train_cfg, root,
                        out_dir, urows)
    write_records_csv(out_dir / "stage2_records.csv", rec2)
    if urows:
        from . import fusion
        (out_dir / "uncertainty.csv").write_text(
            fusion.report_csv_header() + "\n" + "\n".join(urows) + "\n")

    rows, summary = evaluate_models(models, test, cfg["eval_window"],
                                    cfg["eval_overlap"], cfg["eval_ensemble"])
    write_eval_csv(out_dir / "eval.csv", rows, summary)
    summary["mode"] = train_cfg.mode
    summary["seed"] = cfg["seed"]
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def reproduce_from_manifest(run_manifest_path, out_dir) -> dict:
    """Re-execute a completed run's exact config into a new directory."""
    rm = json.loads(Path(run_manifest_path).read_text())
    cfg = dict(rm["config"])
    cfg["out_dir"] = str(out_dir)
    return run_experiment(cfg)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = ("labeled_fraction", "views", "lambda_cot")


def sweep_seed(seed_base: int, axis: str, value, replicate: int) -> int:
    """seed_base plus a stable hash of (axis, value, replicate): adding new
    values or replicates never changes existing runs' seeds."""
    tag = f"{axis}|{json.dumps(value)}|{replicate}"
    h = hashlib.sha256(tag.encode("utf-8")).digest()
    return seed_base + int.from_bytes(h[:4], "little")


def _apply_axis(cfg: dict, axis: str, value) -> dict:
    out = copy.deepcopy(cfg)
    if axis == "labeled_fraction":
        out["labeled_fraction"] = float(value)
    elif axis == "views":
        out["views"] = int(value)
    elif axis == "lambda_cot":
        out.setdefault("train", {})
        out["train"]["lambda_cot"] = float(value)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r} (expected one of "
                          f"{', '.join(SWEEP_AXES)})")
    return out


def _sweep_one(job):
    cfg, axis, value, rep = job
    try:
        summary = run_experiment(cfg)
        return (axis, value, rep, cfg["seed"], "ok", summary)
    except Exception as e:  # recorded, sweep continues
        log.exception("sweep run failed: %s=%r rep %d", axis, value, rep)
        return (axis, value, rep, cfg["seed"], f"failed: {e}", None)


def run_sweep(base_cfg: dict, axis: str, values: Sequence, replicates: int,
              out_root, seed_base: Optional[int] = None,
              parallel: int = 1) -> List[tuple]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    if replicates < 1:
        raise ConfigError("replicates must be >= 1")
    out_root = Path(out_root)
    if seed_base is None:
        seed_base = int(base_cfg.get("seed", _DEFAULTS["seed"]))
    jobs = []
    seen_dirs = set()
    for value in values:
        for rep in range(replicates):
            cfg = _apply_axis(base_cfg, axis, value)
            cfg["seed"] = sweep_seed(seed_base, axis, value, rep)
            run_dir = out_root / f"{axis}={value}" / f"rep{rep}"
            if run_dir in seen_dirs:
                raise ConfigError(f"duplicate sweep output directory {run_dir}")
            seen_dirs.add(run_dir)
            cfg["out_dir"] = str(run_dir)
            jobs.append((resolve_config(cfg), axis, value, rep))
    if parallel > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=parallel) as ex:
            results = list(ex.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]

    out_root.mkdir(parents=True, exist_ok=True)
    lines = ["axis,value,replicate,seed,status,mean_single_view_dsc,ensemble_dsc"]
    for axis_, value, rep, seed, status, summary in results:
        if summary is None:
            lines.append(f"{axis_},{value},{rep},{seed},{status.split(':')[0]},,")
        else:
            ens = summary["ensemble_dsc"]
            lines.append(
                f"{axis_},{value},{rep},{seed},ok,"
                f"{summary['mean_single_view_dsc']:.6f},"
                f"{'' if ens is None else format(ens, '.6f')}")
    (out_root / "sweep.csv").write_text("\n".join(lines) + "\n")
    return results


# ---------------------------------------------------------------------------
# Reproducibility comparison helpers
# ---------------------------------------------------------------------------

def _records_without_wall_time(path: Path) -> List[str]:
    lines = path.read_text().splitlines()
    return [",".join(l.split(",")[:-1]) for l in lines]


def compare_runs(dir_a, dir_b) -> List[str]:
    """Bit-compare two run directories; wall-time CSV columns are excluded.

    Returns a list of human-readable mismatch descriptions (empty = identical).
    """
    dir_a, dir_b = Path(dir_a), Path(dir_b)
    problems = []
    names_a = {p.name for p in dir_a.iterdir() if p.is_file()}
    names_b = {p.name for p in dir_b.iterdir() if p.is_file()}
    for missing in sorted(names_a ^ names_b):
        problems.append(f"{missing}: present in only one run")
    for name in sorted(names_a & names_b):
        a, b = dir_a / name, dir_b / name
        if name == "run_manifest.json":
            ja = json.loads(a.read_text())
            jb = json.loads(b.read_text())
            ja["config"] = {k: v for k, v in ja["config"].items() if k != "out_dir"}
            jb["config"] = {k: v for k, v in jb["config"].items() if k != "out_dir"}
            if ja != jb:
                problems.append(f"{name}: configs differ")
        elif name.endswith("_records.csv"):
            if _records_without_wall_time(a) != _records_without_wall_time(b):
                problems.append(f"{name}: records differ (ignoring wall time)")
        elif a.read_bytes() != b.read_bytes():
            problems.append(f"{name}: bytes differ")
    return problems
