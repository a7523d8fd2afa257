"""The 48-element cube symmetry group acting on voxel grids.

A transform is an axis permutation of the three trailing (spatial) axes
followed by optional flips along the permuted axes.  Transforms are exact
index remaps: no interpolation ever happens, so label masks survive them
losslessly and every transform has an exact inverse.

Convention: ``perm`` is the ``np.transpose`` axes tuple restricted to the
spatial axes — output spatial axis ``i`` takes input spatial axis ``perm[i]``.
``flips[i]`` flips output axis ``i`` after the permutation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ViewTransform", "transform_array", "inverse_perm_flips", "identity",
    "all_transforms", "compose", "standard_view_set", "validate_view_set",
]

PERMS = tuple(itertools.permutations((0, 1, 2)))  # lexicographic
_CYCLIC = ((0, 1, 2), (1, 2, 0), (2, 0, 1))


def transform_array(a: np.ndarray, perm, flips) -> np.ndarray:
    """Remap the last three axes of ``a``; leading axes are untouched."""
    if a.ndim < 3:
        raise ValueError(f"need >= 3 axes to transform, got shape {a.shape}")
    lead = a.ndim - 3
    axes = tuple(range(lead)) + tuple(lead + p for p in perm)
    out = np.transpose(a, axes)
    slicer = [slice(None)] * a.ndim
    for i, f in enumerate(flips):
        if f:
            slicer[lead + i] = slice(None, None, -1)
    return np.ascontiguousarray(out[tuple(slicer)])


def inverse_perm_flips(perm, flips):
    """(perm, flips) of the inverse transform, in the same canonical form."""
    q = tuple(int(np.argsort(perm)[i]) for i in range(3))
    g = tuple(bool(flips[q[i]]) for i in range(3))
    return q, g


@dataclass(frozen=True)
class ViewTransform:
    perm: tuple
    flips: tuple

    def __post_init__(self):
        object.__setattr__(self, "perm", tuple(int(p) for p in self.perm))
        object.__setattr__(self, "flips", tuple(bool(f) for f in self.flips))
        if self.perm not in PERMS:
            raise ValueError(f"{self.perm} is not a permutation of (0, 1, 2)")

    @property
    def id(self) -> int:
        bits = self.flips[0] * 4 + self.flips[1] * 2 + self.flips[2] * 1
        return PERMS.index(self.perm) * 8 + bits

    @classmethod
    def from_id(cls, i: int) -> "ViewTransform":
        if not 0 <= i < 48:
            raise ValueError(f"transform id must be in [0, 48), got {i}")
        perm = PERMS[i // 8]
        bits = i % 8
        return cls(perm, (bool(bits & 4), bool(bits & 2), bool(bits & 1)))

    def apply(self, a):
        """Transform an ndarray (last 3 axes) or a Volume (data + spacing)."""
        if hasattr(a, "data") and hasattr(a, "spacing"):
            data = transform_array(np.asarray(a.data), self.perm, self.flips)
            spacing = tuple(a.spacing[p] for p in self.perm)
            return type(a)(data=data, spacing=spacing)
        return transform_array(np.asarray(a), self.perm, self.flips)

    def inverse(self) -> "ViewTransform":
        q, g = inverse_perm_flips(self.perm, self.flips)
        return ViewTransform(q, g)

    def is_identity(self) -> bool:
        return self.perm == (0, 1, 2) and not any(self.flips)

    def to_config(self):
        return {"perm": list(self.perm), "flips": list(self.flips)}

    @classmethod
    def from_config(cls, cfg) -> "ViewTransform":
        return cls(tuple(cfg["perm"]), tuple(cfg["flips"]))


def identity() -> ViewTransform:
    return ViewTransform((0, 1, 2), (False, False, False))


def all_transforms():
    return [ViewTransform.from_id(i) for i in range(48)]


# Composition is resolved by acting on a generic (2,3,4) probe volume and
# looking the result up among the 48 actions; exact by construction.
_PROBE = np.arange(24, dtype=np.int64).reshape(2, 3, 4)
_ACTION_INDEX: dict = {}


def _action_key(a: np.ndarray):
    return (a.shape, a.tobytes())


def _action_index():
    if not _ACTION_INDEX:
        for t in all_transforms():
            _ACTION_INDEX[_action_key(t.apply(_PROBE))] = t.id
    return _ACTION_INDEX


def compose(outer: ViewTransform, inner: ViewTransform) -> ViewTransform:
    """The group element equal to ``x -> outer(inner(x))``."""
    acted = outer.apply(inner.apply(_PROBE))
    idx = _action_index().get(_action_key(acted))
    if idx is None:
        raise RuntimeError("composition left the cube symmetry group (bug)")
    return ViewTransform.from_id(idx)


def standard_view_set(n: int):
    """The default view sets: 2, 3, or 6 transforms; view 0 is the identity.

    The three cyclic axis permutations each bring a different original axis
    into the thin (slice) position of the asymmetric kernels; the 6-view set
    pairs each cyclic permutation with a flip along that slice axis.
    """
    no_flip = (False, False, False)
    slice_flip = (False, False, True)
    if n == 2:
        return [ViewTransform(_CYCLIC[0], no_flip), ViewTransform(_CYCLIC[1], no_flip)]
    if n == 3:
        return [ViewTransform(p, no_flip) for p in _CYCLIC]
    if n == 6:
        return ([ViewTransform(p, no_flip) for p in _CYCLIC]
                + [ViewTransform(p, slice_flip) for p in _CYCLIC])
    raise ValueError(
        f"standard view sets exist for n in {{2, 3, 6}}, got {n}; "
        "pass an explicit transform list for other counts")


def validate_view_set(transforms):
    if len(transforms) < 1:
        raise ValueError("a view set needs at least one transform")
    if not transforms[0].is_identity():
        raise ValueError("view 0 must be the identity transform")
    ids = [t.id for t in transforms]
    if len(set(ids)) != len(ids):
        raise ValueError(f"view set transforms must be pairwise distinct, got ids {ids}")
    return list(transforms)
