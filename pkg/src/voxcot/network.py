"""Per-view encoder-decoder segmentation model with asymmetric 3D kernels.

The encoder is a small residual CNN: a strided stem (7x7x3 by default, like
the inflated first layer of a 2D ResNet) followed by `depth` downsampling
stages, channels doubling each stage. The decoder mirrors it with learned
upsampling, one skip connection per stage, and optional dropout after each
decoder merge so the model can be sampled as an approximate Bayesian
posterior (MC dropout).
"""

from __future__ import annotations

import dataclasses
import json
from typing import Optional

import numpy as np

from . import ops
from .checkpoint import load_params, save_params
from .rng import RngStream
from .tensor import EngineError, Tensor, no_grad
from .views import ViewTransform, transform_array


def _as_triple(v):
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 extents, got {v!r}")
    return t


@dataclasses.dataclass(frozen=True)
class ArchitectureDescriptor:
    """Everything that determines parameter names and shapes."""

    base_channels: int = 8
    depth: int = 3
    kernel_mode: str = "asymmetric"  # asymmetric | symmetric
    stem_kernel: tuple = (7, 7, 3)
    body_kernel: Optional[tuple] = None  # derived from kernel_mode if None
    stem_stride: int = 2
    dropout_p: float = 0.1
    dropout_sites: Optional[tuple] = None  # decoder stage indices; None = all
    num_classes: int = 2
    in_channels: int = 1
    upsample: str = "tconv"  # tconv | trilinear

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValueError("dropout_p must be in [0, 1)")
        if self.kernel_mode not in ("asymmetric", "symmetric"):
            raise ValueError(f"unknown kernel_mode {self.kernel_mode!r}")
        if self.upsample not in ("tconv", "trilinear"):
            raise ValueError(f"unknown upsample {self.upsample!r}")
        if self.stem_stride not in (1, 2):
            raise ValueError("stem_stride must be 1 or 2")
        object.__setattr__(self, "stem_kernel", _as_triple(self.stem_kernel))
        if self.body_kernel is None:
            body = (3, 3, 1) if self.kernel_mode == "asymmetric" else (3, 3, 3)
            object.__setattr__(self, "body_kernel", body)
        else:
            object.__setattr__(self, "body_kernel", _as_triple(self.body_kernel))
        if self.dropout_sites is None:
            object.__setattr__(self, "dropout_sites", tuple(range(self.depth)))
        else:
            sites = tuple(sorted(set(int(s) for s in self.dropout_sites)))
            for s in sites:
                if not (0 <= s < self.depth):
                    raise ValueError(
                        f"dropout site {s} out of range for depth {self.depth}")
            object.__setattr__(self, "dropout_sites", sites)

    @property
    def divisor(self) -> int:
        """Spatial extents must divide this (downsampling factor)."""
        return (2 ** self.depth) * self.stem_stride

    def channels(self, level: int) -> int:
        return self.base_channels * (2 ** level)

    def to_meta(self) -> dict:
        d = dataclasses.asdict(self)
        d["stem_kernel"] = list(d["stem_kernel"])
        d["body_kernel"] = list(d["body_kernel"])
        d["dropout_sites"] = list(d["dropout_sites"])
        return d

    @classmethod
    def from_meta(cls, meta: dict) -> "ArchitectureDescriptor":
        kw = dict(meta)
        for key in ("stem_kernel", "body_kernel", "dropout_sites"):
            if key in kw and kw[key] is not None:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def parameter_slots(desc: ArchitectureDescriptor) -> dict:
    """Ordered map of parameter name -> shape, a pure function of the descriptor."""
    body = desc.body_kernel
    slots = {}

    def conv_slot(name, cout, cin, kernel):
        slots[f"{name}.w"] = (cout, cin) + tuple(kernel)
        slots[f"{name}.b"] = (cout,)

    conv_slot("stem", desc.channels(0), desc.in_channels, desc.stem_kernel)
    conv_slot("enc0.c1", desc.channels(0), desc.channels(0), body)
    conv_slot("enc0.c2", desc.channels(0), desc.channels(0), body)
    for i in range(1, desc.depth + 1):
        conv_slot(f"enc{i}.down", desc.channels(i), desc.channels(i - 1), body)
        conv_slot(f"enc{i}.c1", desc.channels(i), desc.channels(i), body)
        conv_slot(f"enc{i}.c2", desc.channels(i), desc.channels(i), body)
    for i in range(desc.depth, 0, -1):
        hi, lo = desc.channels(i), desc.channels(i - 1)
        if desc.upsample == "tconv":
            slots[f"dec{i - 1}.up.w"] = (hi, lo, 2, 2, 2)
            slots[f"dec{i - 1}.up.b"] = (lo,)
            merged_in = 2 * lo
        else:
            merged_in = hi + lo
        conv_slot(f"dec{i - 1}.merge", lo, merged_in, body)
    if desc.stem_stride == 2:
        if desc.upsample == "tconv":
            slots["final_up.w"] = (desc.channels(0), desc.channels(0), 2, 2, 2)
            slots["final_up.b"] = (desc.channels(0),)
        # trilinear final upsample has no parameters
    conv_slot("head", desc.num_classes, desc.channels(0), (1, 1, 1))
    return slots


def parameter_count(desc: ArchitectureDescriptor) -> int:
    return sum(int(np.prod(s)) for s in parameter_slots(desc).values())


def _init_array(name: str, shape, rng: RngStream, dtype) -> np.ndarray:
    """Fan-in-scaled uniform init (He bound), seeded per parameter name."""
    gen = rng.child("init", name).generator()
    if len(shape) == 1:
        # bias: fan-in of the conv it follows is unknown here; use its width
        bound = 1.0 / np.sqrt(shape[0])
    else:
        if name.endswith("up.w"):
            # transpose conv with stride == kernel: each output voxel sums
            # one tap per input channel, so fan-in is Cin (axis 0), not
            # prod of the trailing axes
            fan_in = int(shape[0])
        else:
            fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
    return gen.uniform(-bound, bound, size=shape).astype(dtype)


class ViewModel:
    """One network bound to one spatial view transform."""

    def __init__(self, descriptor: ArchitectureDescriptor, view: ViewTransform,
                 rng: RngStream, parameters: dict):
        self.descriptor = descriptor
        self.view = view
        self.rng = rng
        self.parameters = parameters  # name -> Tensor (requires_grad)

    # -- construction -------------------------------------------------

    @classmethod
    def build(cls, descriptor: ArchitectureDescriptor, view: ViewTransform,
              rng: RngStream, init: str = "random", init_path=None,
              dtype=np.float32) -> "ViewModel":
        slots = parameter_slots(descriptor)
        params = {}
        if init == "random":
            for name, shape in slots.items():
                params[name] = Tensor(_init_array(name, shape, rng, dtype),
                                      requires_grad=True)
        elif init == "from_file":
            if init_path is None:
                raise ValueError("init='from_file' requires init_path")
            arrays, _meta = load_params(init_path)
            mismatches = []
            for name, shape in slots.items():
                if name not in arrays:
                    mismatches.append(f"{name}: missing from file")
                    continue
                arr = arrays[name]
                if arr.shape == shape:
                    pass
                elif (len(shape) == 5 and shape[-1] == 1
                      and arr.shape == shape[:-1]):
                    # 2D conv weights load into a thin 3D slot by adding the
                    # slice axis
                    arr = arr[..., None]
                else:
                    mismatches.append(
                        f"{name}: file shape {arr.shape}, slot {shape}")
                    continue
                params[name] = Tensor(np.ascontiguousarray(arr, dtype=dtype),
                                      requires_grad=True)
            extras = sorted(set(arrays) - set(slots))
            if extras:
                mismatches.append(f"unused names in file: {', '.join(extras)}")
            if mismatches:
                raise EngineError(
                    "parameter load mismatch:\n  " + "\n  ".join(mismatches))
        else:
            raise ValueError(f"unknown init {init!r}")
        return cls(descriptor, view, rng, params)

    def save(self, path, extra_meta: Optional[dict] = None):
        meta = {"descriptor": self.descriptor.to_meta(),
                "view": self.view.to_config()}
        if extra_meta:
            meta.update(extra_meta)
        save_params(path, {k: v.data for k, v in self.parameters.items()}, meta)

    @classmethod
    def load(cls, path, rng: Optional[RngStream] = None) -> "ViewModel":
        arrays, meta = load_params(path)
        desc = ArchitectureDescriptor.from_meta(meta["descriptor"])
        view = ViewTransform.from_config(meta["view"])
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        expected = parameter_slots(desc)
        for name, shape in expected.items():
            if name not in params or params[name].data.shape != shape:
                raise EngineError(f"checkpoint missing or misshapen: {name}")
        return cls(desc, view, rng if rng is not None else RngStream(0), params)

    def parameter_count(self) -> int:
        return parameter_count(self.descriptor)

    # -- forward ------------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.parameters[name]

    def _conv(self, x, name, stride=1, padding=None):
        w = self._p(f"{name}.w")
        if padding is None:
            padding = tuple(k // 2 for k in w.data.shape[2:])
        y = ops.conv3d(x, w, stride=stride, padding=padding)
        return ops.add_channel_bias(y, self._p(f"{name}.b"))

    def _block(self, x, prefix):
        y = ops.relu(self._conv(x, f"{prefix}.c1"))
        y = self._conv(y, f"{prefix}.c2")
        return ops.relu(ops.add(x, y))

    def _upsample(self, x, prefix):
        if self.descriptor.upsample == "tconv":
            y = ops.transpose_conv3d(x, self._p(f"{prefix}.w"), factor=2)
            return ops.add_channel_bias(y, self._p(f"{prefix}.b"))
        return ops.resize_trilinear(x, factor=2)

    def _check_input(self, x: np.ndarray):
        if x.ndim != 5:
            raise EngineError(f"forward input must be (N,C,D,H,W), got {x.shape}")
        if x.shape[1] != self.descriptor.in_channels:
            raise EngineError(
                f"forward input has {x.shape[1]} channels, model expects "
                f"{self.descriptor.in_channels}")
        div = self.descriptor.divisor
        for ax, ext in zip("DHW", x.shape[2:]):
            if ext % div:
                raise EngineError(
                    f"spatial extent {ax}={ext} not divisible by {div} "
                    f"(depth {self.descriptor.depth}, stem stride "
                    f"{self.descriptor.stem_stride})")

    def _encode(self, x: Tensor):
        desc = self.descriptor
        pad = tuple(k // 2 for k in desc.stem_kernel)
        h = ops.relu(self._conv(x, "stem", stride=desc.stem_stride, padding=pad))
        h = self._block(h, "enc0")
        feats = [h]
        for i in range(1, desc.depth + 1):
            h = ops.relu(self._conv(h, f"enc{i}.down", stride=2))
            h = self._block(h, f"enc{i}")
            feats.append(h)
        return feats

    def _decode(self, feats, mode: str, rng: Optional[RngStream]):
        desc = self.descriptor
        h = feats[desc.depth]
        for i in range(desc.depth, 0, -1):
            site = i - 1
            h = self._upsample(h, f"dec{site}.up")
            h = ops.concat_channels([feats[site], h])
            h = ops.relu(self._conv(h, f"dec{site}.merge"))
            if site in desc.dropout_sites and desc.dropout_p > 0.0:
                h = ops.dropout(h, desc.dropout_p, _DROP_MODE[mode],
                                rng.child("drop", site) if rng is not None else None)
        if desc.stem_stride == 2:
            if desc.upsample == "tconv":
                h = ops.transpose_conv3d(h, self._p("final_up.w"), factor=2)
                h = ops.add_channel_bias(h, self._p("final_up.b"))
            else:
                h = ops.resize_trilinear(h, factor=2)
            h = ops.relu(h)
        logits = self._conv(h, "head", padding=(0, 0, 0))
        return ops.softmax_channel(logits)

    def forward(self, x, mode: str = "eval",
                rng: Optional[RngStream] = None) -> Tensor:
        """Run the network. mode: train | eval | mc_sample.

        Dropout is identity in eval mode and stochastic in train/mc_sample
        modes (inverted scaling), which require an rng stream when any
        dropout site is active.
        """
        if mode not in _DROP_MODE:
            raise EngineError(f"unknown forward mode {mode!r}")
        xt = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(xt.data)
        if (mode != "eval" and self.descriptor.dropout_p > 0.0
                and self.descriptor.dropout_sites and rng is None):
            raise EngineError(f"mode {mode!r} with active dropout needs an rng stream")
        feats = self._encode(xt)
        return self._decode(feats, mode, rng)

    def predict_through_view(self, x, mode: str = "eval",
                             rng: Optional[RngStream] = None) -> Tensor:
        """Transform into this view's frame, run forward, map the scores back."""
        xd = x.data if isinstance(x, Tensor) else np.asarray(x)
        if self.view.is_identity():
            return self.forward(xd, mode, rng)
        xv = transform_array(xd, self.view.perm, self.view.flips)
        out = self.forward(xv, mode, rng)
        inv = self.view.inverse()
        return ops.permute_flip(out, inv.perm, inv.flips)

    def mc_samples_through_view(self, x, k: int, rng: RngStream) -> np.ndarray:
        """K stochastic (mc_sample-mode) passes in the canonical frame.

        The encoder carries no dropout, so its activations are computed once
        and only the decoder is resampled. Returns (K, N, C, D, H, W).
        """
        if k < 2:
            raise ValueError("mc sampling needs K >= 2")
        xd = x.data if isinstance(x, Tensor) else np.asarray(x)
        if not self.view.is_identity():
            xd = transform_array(xd, self.view.perm, self.view.flips)
        inv = self.view.inverse()
        samples = None
        with no_grad():
            feats = self._encode(Tensor(xd))
            for j in range(k):
                out = self._decode(feats, "mc_sample", rng.child("mc", j))
                od = out.data
                if not inv.is_identity():
                    od = transform_array(od, inv.perm, inv.flips)
                if samples is None:
                    samples = np.empty((k,) + od.shape, dtype=od.dtype)
                samples[j] = od
        return samples


_DROP_MODE = {"train": "train", "eval": "eval", "mc_sample": "mc"}


def descriptor_summary(desc: ArchitectureDescriptor) -> str:
    return json.dumps(desc.to_meta(), sort_keys=True)
