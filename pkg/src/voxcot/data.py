"""Synthetic volumetric data, the on-disk volume format, and dataset manifests.

Volume files are a small binary container (magic, version, extents, voxel
spacing, dtype tag, raw little-endian raster). Manifests are line-oriented
TSV with '#'-prefixed metadata lines; all paths are relative to the manifest.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import warnings
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .rng import RngStream

VOLUME_MAGIC = b"VOXVOL\x00"
VOLUME_VERSION = 1
MANIFEST_VERSION = 1

_DTYPE_TAGS = {
    1: np.dtype("<f4"), 2: np.dtype("<f8"),
    3: np.dtype("<i2"), 4: np.dtype("u1"),
    5: np.dtype("<i4"), 6: np.dtype("<u2"),
}
_TAG_FOR_DTYPE = {v: k for k, v in _DTYPE_TAGS.items()}


class VolumeFormatError(ValueError):
    pass


@dataclasses.dataclass
class Volume:
    data: np.ndarray                 # (D,H,W) or (C,D,H,W)
    spacing: tuple = (1.0, 1.0, 1.0)  # mm per voxel along D,H,W

    @property
    def extents(self):
        return self.data.shape

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), tuple(self.spacing))


def write_volume(path, vol: Volume):
    data = np.asarray(vol.data)
    if data.ndim not in (3, 4):
        raise VolumeFormatError(f"volume must be 3D or 4D, got {data.ndim}D")
    le = data.dtype.newbyteorder("<") if data.dtype.byteorder == ">" else data.dtype
    dt = np.dtype(le)
    if dt not in _TAG_FOR_DTYPE:
        raise VolumeFormatError(f"unsupported dtype {data.dtype}")
    tag = _TAG_FOR_DTYPE[dt]
    sp = tuple(float(s) for s in vol.spacing)
    if len(sp) != 3:
        raise VolumeFormatError("spacing must have 3 entries (D,H,W)")
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<HBB", VOLUME_VERSION, data.ndim, tag))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(struct.pack("<3f", *sp))
        fh.write(np.ascontiguousarray(data, dtype=dt).tobytes())


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        magic = fh.read(len(VOLUME_MAGIC))
        if magic != VOLUME_MAGIC:
            raise VolumeFormatError(f"{path}: bad magic {magic!r}")
        version, ndim, tag = struct.unpack("<HBB", fh.read(4))
        if version != VOLUME_VERSION:
            raise VolumeFormatError(f"{path}: unsupported version {version}")
        if ndim not in (3, 4):
            raise VolumeFormatError(f"{path}: bad dimensionality {ndim}")
        if tag not in _DTYPE_TAGS:
            raise VolumeFormatError(f"{path}: unknown dtype tag {tag}")
        extents = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        spacing = struct.unpack("<3f", fh.read(12))
        dt = _DTYPE_TAGS[tag]
        count = int(np.prod(extents))
        payload = fh.read(count * dt.itemsize)
        if len(payload) != count * dt.itemsize:
            raise VolumeFormatError(f"{path}: truncated payload")
        trailing = fh.read(1)
        if trailing:
            raise VolumeFormatError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(payload, dtype=dt).reshape(extents).copy()
    return Volume(data, tuple(float(s) for s in spacing))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

SPLITS = ("labeled-train", "unlabeled-train", "test", "unsplit")


@dataclasses.dataclass
class CaseEntry:
    case_id: str
    image: str                 # path relative to the manifest directory
    label: Optional[str]       # None for image-only cases
    split: str = "unsplit"


@dataclasses.dataclass
class DatasetManifest:
    cases: List[CaseEntry]
    meta: Dict
    directory: Path = Path(".")

    def by_split(self, split: str) -> List[CaseEntry]:
        return [c for c in self.cases if c.split == split]

    def image_path(self, case: CaseEntry) -> Path:
        return self.directory / case.image

    def label_path(self, case: CaseEntry) -> Optional[Path]:
        return None if case.label is None else self.directory / case.label

    def validate(self):
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise VolumeFormatError("duplicate case_ids in manifest")
        for c in self.cases:
            if c.split not in SPLITS:
                raise VolumeFormatError(f"{c.case_id}: unknown split {c.split!r}")
            if c.split in ("labeled-train", "test") and c.label is None:
                raise VolumeFormatError(
                    f"{c.case_id}: split {c.split} requires a label path")


def write_manifest(path, manifest: DatasetManifest):
    path = Path(path)
    manifest.validate()
    lines = [f"# voxcot-manifest v{MANIFEST_VERSION}",
             "# meta " + json.dumps(manifest.meta, sort_keys=True)]
    for c in manifest.cases:
        label = c.label if c.label is not None else "-"
        lines.append(f"{c.case_id}\t{c.image}\t{label}\t{c.split}")
    path.write_text("\n".join(lines) + "\n")


def resolve_manifest(manifest: DatasetManifest) -> DatasetManifest:
    """Copy with every path made absolute, so the manifest can be rewritten
    anywhere (e.g. into a run directory) and still point at its volumes."""
    cases = [dataclasses.replace(
        c, image=str(manifest.image_path(c).resolve()),
        label=None if c.label is None else str(manifest.label_path(c).resolve()))
        for c in manifest.cases]
    return DatasetManifest(cases, manifest.meta, Path("."))


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    meta = {}
    cases = []
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("meta "):
                meta = json.loads(body[5:])
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise VolumeFormatError(f"{path}: bad manifest line {raw!r}")
        cid, image, label, split = parts
        cases.append(CaseEntry(cid, image, None if label == "-" else label, split))
    m = DatasetManifest(cases, meta, path.parent)
    m.validate()
    return m


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class DifficultyParams:
    """Knobs controlling how hard the synthetic segmentation task is."""

    noise_sigma: float = 0.55          # background noise amplitude
    organ_contrast: tuple = (0.55, 0.9)  # intensity offset range of the organ
    organ_radius_frac: tuple = (0.16, 0.28)  # per-axis radii as extent fraction
    distractor_count: tuple = (3, 6)   # inclusive range of distractor blobs
    distractor_radius_frac: tuple = (0.05, 0.12)
    bias_amplitude: float = 0.35       # smooth multiplicative field strength
    edge_softness: float = 0.8         # gaussian sigma applied to shape fields
    dark_organ_fraction: float = 0.5   # P(organ darker than background per case)
    dark_contrast_scale: float = 0.6   # contrast magnitude multiplier, dark cases

    def to_meta(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_meta(cls, meta: dict) -> "DifficultyParams":
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name in meta:
                v = meta[f.name]
                kw[f.name] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)


def _random_rotation(gen: np.random.Generator) -> np.ndarray:
    """Uniform-ish random 3D rotation via QR of a Gaussian matrix."""
    a = gen.standard_normal((3, 3))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _ellipsoid_mask(extent, center, radii, rotation) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(e, dtype=np.float64) for e in extent],
                        indexing="ij")
    rel = np.stack([g - c for g, c in zip(grids, center)], axis=-1)
    local = rel @ rotation  # rotate coordinates into the ellipsoid frame
    q = np.zeros(extent, dtype=np.float64)
    for ax in range(3):
        q += (local[..., ax] / radii[ax]) ** 2
    return q <= 1.0


def _soft(field: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return field.astype(np.float32)
    return ndimage.gaussian_filter(field.astype(np.float32), sigma=sigma)


def generate_case(extent, params: DifficultyParams, rng: RngStream):
    """One synthetic case: (image float32, label int16)."""
    gen = rng.generator()
    e = np.asarray(extent, dtype=int)
    if (e < 16).any():
        raise ValueError(f"extent must be >= 16 per axis, got {tuple(extent)}")

    image = gen.standard_normal(tuple(e)).astype(np.float32) * params.noise_sigma

    lo, hi = params.organ_radius_frac
    radii = gen.uniform(lo, hi, size=3) * e
    center = gen.uniform(0.32, 0.68, size=3) * e
    mask = _ellipsoid_mask(tuple(e), center, radii, _random_rotation(gen))
    contrast = gen.uniform(*params.organ_contrast)
    # appearance modes: some cases show the organ darker than background and
    # at reduced contrast (the harder mode), with distractor polarity mixed
    # so sign alone cannot identify the organ
    mixed = params.dark_organ_fraction > 0
    if mixed and gen.uniform() < params.dark_organ_fraction:
        contrast = -params.dark_contrast_scale * contrast
    image += contrast * _soft(mask, params.edge_softness)

    n_distr = int(gen.integers(params.distractor_count[0],
                               params.distractor_count[1] + 1))
    dlo, dhi = params.distractor_radius_frac
    for _ in range(n_distr):
        dradii = gen.uniform(dlo, dhi, size=3) * e
        dcenter = gen.uniform(0.08, 0.92, size=3) * e
        dmask = _ellipsoid_mask(tuple(e), dcenter, dradii, _random_rotation(gen))
        dmask &= ~mask  # distractors never relabel organ voxels
        dcontrast = contrast * gen.uniform(0.85, 1.15)
        if mixed and gen.uniform() < 0.5:
            dcontrast = -dcontrast
        image += dcontrast * _soft(dmask, params.edge_softness)

    if params.bias_amplitude > 0:
        coarse = gen.standard_normal((4, 4, 4))
        bias = ndimage.zoom(coarse, np.asarray(tuple(e)) / 4.0, order=3)
        bias = bias[:e[0], :e[1], :e[2]]
        image *= (1.0 + params.bias_amplitude * bias / max(1e-9, np.abs(bias).max())
                  ).astype(np.float32)

    return image.astype(np.float32), mask.astype(np.int16)


def generate_synthetic(n_cases: int, extent, out_dir, seed: int,
                       params: Optional[DifficultyParams] = None,
                       spacing=(1.0, 1.0, 1.0)) -> DatasetManifest:
    """Write n_cases image/label volume pairs plus a manifest; pure in seed."""
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    if isinstance(extent, int):
        extent = (extent, extent, extent)
    params = params or DifficultyParams()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = RngStream(seed)
    cases = []
    for i in range(n_cases):
        image, label = generate_case(extent, params, root.child("case", i))
        img_name = f"case{i:03d}_image.vol"
        lab_name = f"case{i:03d}_label.vol"
        write_volume(out_dir / img_name, Volume(image, spacing))
        write_volume(out_dir / lab_name, Volume(label, spacing))
        cases.append(CaseEntry(f"case{i:03d}", img_name, lab_name, "unsplit"))
    meta = {"generator": "voxcot-synthetic", "seed": seed,
            "extent": list(extent), "n_cases": n_cases,
            "difficulty": params.to_meta()}
    manifest = DatasetManifest(cases, meta, out_dir)
    write_manifest(out_dir / "manifest.tsv", manifest)
    return manifest


# ---------------------------------------------------------------------------
# Normalization, splits, resampling
# ---------------------------------------------------------------------------

def normalize(vol: Volume) -> Volume:
    """Zero-mean unit-variance intensity normalization (population std)."""
    data = np.asarray(vol.data, dtype=np.float64)
    std = float(data.std())
    if std == 0.0:
        warnings.warn("normalize: constant volume, returning zeros")
        return Volume(np.zeros_like(data, dtype=np.float32), tuple(vol.spacing))
    out = (data - data.mean()) / std
    return Volume(out.astype(np.float32), tuple(vol.spacing))


def split(manifest: DatasetManifest, labeled_fraction: float, test_count: int,
          seed: int) -> DatasetManifest:
    """Deterministic test/labeled/unlabeled partition of a manifest."""
    n = len(manifest.cases)
    if not (0 < labeled_fraction <= 1.0):
        raise ValueError("labeled_fraction must be in (0, 1]")
    if not (0 <= test_count < n):
        raise ValueError(f"test_count {test_count} infeasible for {n} cases")
    n_train = n - test_count
    n_labeled = max(1, int(round(labeled_fraction * n_train)))
    if n_labeled > n_train:
        raise ValueError("labeled_fraction leaves no training cases")
    order = RngStream(seed).child("split").generator().permutation(n)
    assignment = {}
    for rank, idx in enumerate(order):
        if rank < test_count:
            s = "test"
        elif rank < test_count + n_labeled:
            s = "labeled-train"
        else:
            s = "unlabeled-train"
        assignment[idx] = s
    cases = []
    for i, c in enumerate(manifest.cases):
        s = assignment[i]
        if s in ("labeled-train", "test") and c.label is None:
            raise ValueError(f"{c.case_id}: assigned {s} but has no label")
        cases.append(CaseEntry(c.case_id, c.image, c.label, s))
    meta = dict(manifest.meta)
    meta["split"] = {"labeled_fraction": labeled_fraction,
                     "test_count": test_count, "seed": seed}
    return DatasetManifest(cases, meta, manifest.directory)


def resample(vol: Volume, new_spacing) -> Volume:
    """Trilinear resample to a new voxel spacing (mm). Honors the header
    spacing; identity when spacings match."""
    new_spacing = tuple(float(s) for s in new_spacing)
    if new_spacing == tuple(vol.spacing):
        return vol.copy()
    factors = [o / t for o, t in zip(vol.spacing, new_spacing)]
    data = ndimage.zoom(np.asarray(vol.data, dtype=np.float32), factors, order=1)
    return Volume(data, new_spacing)


def load_case(manifest: DatasetManifest, case: CaseEntry, with_label: bool):
    image = normalize(read_volume(manifest.image_path(case)))
    label = None
    if with_label:
        lp = manifest.label_path(case)
        if lp is None:
            raise ValueError(f"{case.case_id} has no label")
        label = read_volume(lp)
    return image, label
