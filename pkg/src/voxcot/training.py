"""Two-stage co-training loop.

Stage 1 trains each view independently on the labeled set (Dice loss).
Stage 2 continues with a combined loss: supervised Dice on labeled batches
plus lambda_cot times a Dice consistency term against pseudo-labels fused
from the other views' MC-dropout mean predictions on unlabeled batches.

Every stochastic choice derives from a stateless seed stream keyed by
(stage, purpose, iteration, view), so disabling a code path (for instance
lambda_cot = 0 skips all co-training work) cannot perturb the draws of the
paths that still run. That is what makes the lambda_cot = 0 run bit-identical
to the supervised-only run.
"""

from __future__ import annotations

import dataclasses
import logging
import time
import warnings
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import fusion
from .losses import LossValue, dice_loss, one_hot
from .network import ViewModel
from .optim import SGD
from .rng import RngStream
from .tensor import Tensor
from . import ops

log = logging.getLogger("voxcot.training")

# long-form names accepted anywhere a mode is configured
MODE_ALIASES = {"full_supervised_cotrain": "full", "supervised_only": "supervised"}


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    mode: str = "semi"               # semi | full | supervised
    fusion: str = "ulf"              # ulf | uniform
    lambda_cot: float = 0.2
    mc_samples: int = 10
    patch_size: int = 32
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    stage1_iters: int = 1000
    stage2_iters: int = 500
    stage1_lr: float = 7e-3
    stage2_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 4e-5
    fg_ratio: float = 0.5            # fraction of foreground-centered patches
    lambda_ramp: bool = False        # linear ramp of lambda_cot over stage 2
    checkpoint_every: int = 0        # 0 = final checkpoints only
    seed: int = 1

    def __post_init__(self):
        mode = MODE_ALIASES.get(self.mode, self.mode)
        object.__setattr__(self, "mode", mode)
        if mode not in ("semi", "full", "supervised"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.fusion not in ("ulf", "uniform"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.lambda_cot < 0:
            raise ValueError("lambda_cot must be >= 0")
        if self.mc_samples < 2:
            raise ValueError("mc_samples must be >= 2")
        if self.stage1_iters < 1 or self.stage2_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if not (0.0 <= self.fg_ratio <= 1.0):
            raise ValueError("fg_ratio must be in [0, 1]")

    def to_meta(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_meta(cls, meta: dict) -> "TrainConfig":
        kw = {f.name: meta[f.name] for f in dataclasses.fields(cls) if f.name in meta}
        return cls(**kw)


@dataclasses.dataclass
class IterationRecord:
    iteration: int
    stage: int
    lr: float
    l_sup: float        # summed over views (batch-mean per view)
    l_cot: float        # summed over views; 0.0 when co-training is off
    l_total: float
    wall_time_s: float  # excluded from reproducibility comparisons

    @staticmethod
    def csv_header() -> str:
        return "iteration,stage,lr,l_sup,l_cot,l_total,wall_time_s"

    def csv_row(self) -> str:
        return (f"{self.iteration},{self.stage},{self.lr:.9e},{self.l_sup:.9e},"
                f"{self.l_cot:.9e},{self.l_total:.9e},{self.wall_time_s:.3f}")


def write_records_csv(path, records: Sequence[IterationRecord]):
    lines = [IterationRecord.csv_header()]
    lines.extend(r.csv_row() for r in records)
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Patch sampling
# ---------------------------------------------------------------------------

class PatchSampler:
    """Deterministic patch stream over a fixed case list.

    cases: list of (image (D,H,W) float32, label (D,H,W) int or None).
    Draw i is foreground-centered iff floor((i+1)*r) > floor(i*r) with
    r = fg_ratio, a quota schedule that is exact over any prefix (at r = 0.5
    draws alternate uniform/foreground). Each draw derives its own rng from
    the stream and the draw index, so draws are order-independent.
    """

    def __init__(self, cases, patch_size: int, fg_ratio: float, rng: RngStream):
        if not cases:
            raise ValueError("patch sampler needs at least one case")
        self.patch = int(patch_size)
        self.rng = rng
        self.images = []
        self.labels = []
        self.fg_coords = []
        for image, label in cases:
            image = np.asarray(image, dtype=np.float32)
            pad = [max(0, self.patch - s) for s in image.shape]
            if any(pad):
                image = np.pad(image, [(0, p) for p in pad])
                if label is not None:
                    label = np.pad(np.asarray(label), [(0, p) for p in pad])
            self.images.append(image)
            if label is None:
                self.labels.append(None)
                self.fg_coords.append(None)
            else:
                label = np.asarray(label, dtype=np.int16)
                self.labels.append(label)
                coords = np.argwhere(label > 0)
                self.fg_coords.append(coords if len(coords) else None)
        self.has_fg = any(c is not None for c in self.fg_coords)
        self.fg_ratio = float(fg_ratio)
        if self.fg_ratio > 0 and not self.has_fg:
            warnings.warn("patch sampler: fg_ratio > 0 but no foreground in any "
                          "case; falling back to uniform sampling")
            log.warning("no foreground available; sampling uniformly")
            self.fg_ratio = 0.0

    def _want_fg(self, i: int) -> bool:
        r = self.fg_ratio
        return int((i + 1) * r) > int(i * r)

    def draw(self, i: int):
        """Return (image patch (D,H,W), label patch or None)."""
        gen = self.rng.child("draw", i).generator()
        want_fg = self._want_fg(i)
        if want_fg:
            eligible = [c for c in range(len(self.images))
                        if self.fg_coords[c] is not None]
        else:
            eligible = list(range(len(self.images)))
        case = eligible[int(gen.integers(len(eligible)))]
        image, label = self.images[case], self.labels[case]
        shape = image.shape
        if want_fg:
            coords = self.fg_coords[case]
            voxel = coords[int(gen.integers(len(coords)))]
            corner = [int(np.clip(v - self.patch // 2, 0, s - self.patch))
                      for v, s in zip(voxel, shape)]
        else:
            corner = [int(gen.integers(0, s - self.patch + 1)) for s in shape]
        sl = tuple(slice(c, c + self.patch) for c in corner)
        return image[sl], (None if label is None else label[sl])

    def batch(self, first_draw: int, size: int, num_classes: Optional[int] = None):
        """Stack `size` draws into (B,1,P,P,P) images and one-hot labels."""
        imgs, labs = [], []
        for k in range(size):
            img, lab = self.draw(first_draw + k)
            imgs.append(img)
            labs.append(lab)
        x = np.stack(imgs)[:, None].astype(np.float32)
        if num_classes is None or any(l is None for l in labs):
            return x, None
        y = one_hot(np.stack(labs), num_classes)
        return x, y


# ---------------------------------------------------------------------------
# Stage 1: independent supervised training per view
# ---------------------------------------------------------------------------

def _checkpoint(models: List[ViewModel], out_dir, stage: int, tag: str,
                extra: Optional[dict] = None):
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(models):
        meta = {"stage": stage, "view_index": i, "tag": tag}
        if extra:
            meta.update(extra)
        m.save(out_dir / f"stage{stage}_view{i}_{tag}.ckpt", meta)


def train_stage1(models: List[ViewModel], labeled_cases, cfg: TrainConfig,
                 rng: RngStream, out_dir=None) -> List[IterationRecord]:
    """Train each view separately on labeled data with the Dice loss."""
    if not labeled_cases:
        raise ValueError("stage 1 requires a nonempty labeled set")
    num_classes = models[0].descriptor.num_classes
    opts = [SGD(m.parameters, lr=cfg.stage1_lr, momentum=cfg.momentum,
                weight_decay=cfg.weight_decay) for m in models]
    sampler = PatchSampler(labeled_cases, cfg.patch_size, cfg.fg_ratio,
                           rng.child("stage1", "sampler"))
    records = []
    for t in range(cfg.stage1_iters):
        t0 = time.perf_counter()
        x, y = sampler.batch(t * cfg.batch_labeled, cfg.batch_labeled, num_classes)
        l_sup = 0.0
        for vi, (model, opt) in enumerate(zip(models, opts)):
            out = model.predict_through_view(
                x, "train", rng.child("stage1", "drop", t, vi))
            lv = dice_loss(out, y)
            lv.loss.backward()
            opt.step()
            opt.zero_grad()
            l_sup += float(lv)
        rec = IterationRecord(t, 1, cfg.stage1_lr, l_sup, 0.0, l_sup,
                              time.perf_counter() - t0)
        records.append(rec)
        if cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
            _checkpoint(models, out_dir, 1, f"iter{t + 1:05d}")
    _checkpoint(models, out_dir, 1, "final")
    return records


# ---------------------------------------------------------------------------
# Stage 2: co-training
# ---------------------------------------------------------------------------

def _lambda_at(cfg: TrainConfig, t: int) -> float:
    if not cfg.lambda_ramp or cfg.stage2_iters <= 1:
        return cfg.lambda_cot
    frac = min(1.0, (t + 1) / (0.5 * cfg.stage2_iters))
    return cfg.lambda_cot * frac


def cotrain_step(models: List[ViewModel], opts: List[SGD], x_l, y_l, x_u,
                 cfg: TrainConfig, rng: RngStream, t: int,
                 uncertainty_rows: Optional[list] = None) -> IterationRecord:
    """One Algorithm-1 iteration over all views.

    x_l/y_l: labeled batch and one-hot targets. x_u: unlabeled batch or None
    when co-training is disabled. rng children are keyed by iteration t.
    """
    t0 = time.perf_counter()
    lam = _lambda_at(cfg, t)
    cot_active = lam > 0.0 and x_u is not None
    n_views = len(models)

    pseudo = None
    if cot_active:
        n_u = x_u.shape[0]
        means = []   # per view: (N,C,D,H,W)
        confs = np.empty((n_views, n_u))
        for vi, model in enumerate(models):
            samples, mean = fusion.mc_sample_predictions(
                model, x_u, cfg.mc_samples, rng.child("stage2", "mc", t, vi))
            means.append(mean)
            for n in range(n_u):
                rep = fusion.epistemic_uncertainty(samples[:, n], view_index=vi)
                confs[vi, n] = rep.confidence
                if uncertainty_rows is not None:
                    uncertainty_rows.append(fusion.report_csv_row(t, n, rep))
        pseudo = np.empty((n_views, n_u) + means[0].shape[1:], dtype=np.float32)
        for vi in range(n_views):
            for n in range(n_u):
                pl = fusion.fuse_pseudo_label(
                    vi, [m[n] for m in means], confs[:, n], mode=cfg.fusion)
                pseudo[vi, n] = pl.soft_label

    l_sup_total = 0.0
    l_cot_total = 0.0
    for vi, (model, opt) in enumerate(zip(models, opts)):
        out_l = model.predict_through_view(
            x_l, "train", rng.child("stage2", "drop_l", t, vi))
        sup = dice_loss(out_l, y_l)
        if cot_active:
            out_u = model.predict_through_view(
                x_u, "train", rng.child("stage2", "drop_u", t, vi))
            cot = dice_loss(out_u, pseudo[vi])
            total = ops.add(sup.loss, ops.mul_scalar(cot.loss, lam))
            l_cot_total += float(cot)
        else:
            total = sup.loss
        total.backward()
        opt.step()
        opt.zero_grad()
        l_sup_total += float(sup)
    return IterationRecord(t, 2, cfg.stage2_lr, l_sup_total, l_cot_total,
                           l_sup_total + lam * l_cot_total,
                           time.perf_counter() - t0)


def train_stage2(models: List[ViewModel], labeled_cases, unlabeled_cases,
                 cfg: TrainConfig, rng: RngStream, out_dir=None,
                 uncertainty_rows: Optional[list] = None) -> List[IterationRecord]:
    """Run stage-2 iterations per the configured mode.

    semi: pseudo-label consistency on unlabeled data. full: the same loss
    with the 'unlabeled' batches drawn from labeled images, labels ignored.
    supervised: no co-training term at all (baseline arm).
    """
    if not labeled_cases:
        raise ValueError("stage 2 requires a nonempty labeled set")
    num_classes = models[0].descriptor.num_classes
    cot_possible = cfg.mode != "supervised" and cfg.lambda_cot > 0.0
    if cfg.mode == "semi" and cot_possible and not unlabeled_cases:
        raise ValueError("semi mode requires unlabeled cases")
    opts = [SGD(m.parameters, lr=cfg.stage2_lr, momentum=cfg.momentum,
                weight_decay=cfg.weight_decay) for m in models]
    lsampler = PatchSampler(labeled_cases, cfg.patch_size, cfg.fg_ratio,
                            rng.child("stage2", "lsampler"))
    usampler = None
    if cot_possible:
        if cfg.mode == "semi":
            ucases = [(img, None) for img, _ in unlabeled_cases]
        else:  # full: reuse labeled images, ignore their labels
            ucases = [(img, None) for img, _ in labeled_cases]
        usampler = PatchSampler(ucases, cfg.patch_size, 0.0,
                                rng.child("stage2", "usampler"))
    records = []
    for t in range(cfg.stage2_iters):
        x_l, y_l = lsampler.batch(t * cfg.batch_labeled, cfg.batch_labeled,
                                  num_classes)
        x_u = None
        if usampler is not None:
            x_u, _ = usampler.batch(t * cfg.batch_unlabeled, cfg.batch_unlabeled)
        rec = cotrain_step(models, opts, x_l, y_l, x_u, cfg, rng, t,
                           uncertainty_rows)
        records.append(rec)
        if cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
            _checkpoint(models, out_dir, 2, f"iter{t + 1:05d}")
    # no mode tag in the checkpoint meta: a lambda_cot = 0 semi run must
    # produce checkpoints bit-identical to the supervised-only run
    _checkpoint(models, out_dir, 2, "final")
    return records


def train_full_supervised_cotrain(models, labeled_cases, cfg: TrainConfig,
                                  rng: RngStream, out_dir=None,
                                  uncertainty_rows=None):
    """Fine-tune with a co-training consistency term on the labeled images."""
    cfg = dataclasses.replace(cfg, mode="full")
    return train_stage2(models, labeled_cases, [], cfg, rng, out_dir,
                        uncertainty_rows)
