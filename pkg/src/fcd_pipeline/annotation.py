"""Per-view box annotations and derived 3D ground-truth lesion masks.

A radiologist marks one 2D box per view (axial, coronal, sagittal). Each
volume axis is seen by exactly two views, so intersecting the per-view
intervals yields the tightest axis-aligned parallelepiped whose
projections fit inside every box. The ground-truth mask is the ellipsoid
inscribed in that parallelepiped (a rectangular variant is kept for
ablation: a box mask marks large non-lesion regions as lesion).

All intervals are inclusive voxel index ranges [lo, hi] in the pipeline's
(X, Y, Z) axis convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np

from . import audit

VIEWS = ("axial", "coronal", "sagittal")

# In-plane axes of each view, in (a_range, b_range) order.
VIEW_AXES = {"axial": ("x", "y"), "coronal": ("x", "z"), "sagittal": ("y", "z")}

LOCALIZATIONS = ("temporal", "non_temporal")


def _check_range(r: tuple[int, int], name: str) -> tuple[int, int]:
    lo, hi = int(r[0]), int(r[1])
    if lo > hi:
        raise ValueError(f"{name} interval [{lo}, {hi}] is empty")
    return lo, hi


@dataclass(frozen=True)
class ViewBox2D:
    """One 2D box: inclusive intervals on the two in-plane axes of a view."""

    view: str
    a_range: tuple[int, int]
    b_range: tuple[int, int]

    def __post_init__(self) -> None:
        if self.view not in VIEWS:
            raise ValueError(f"unknown view '{self.view}'")
        object.__setattr__(self, "a_range", _check_range(self.a_range, f"{self.view} a_range"))
        object.__setattr__(self, "b_range", _check_range(self.b_range, f"{self.view} b_range"))


@dataclass(frozen=True)
class Annotation:
    """Three per-view boxes plus the lesion localization tag."""

    subject_id: str
    boxes: Mapping[str, ViewBox2D]
    localization: str

    def __post_init__(self) -> None:
        if set(self.boxes) != set(VIEWS):
            raise ValueError(f"annotation must contain exactly the views {VIEWS}")
        for view, box in self.boxes.items():
            if box.view != view:
                raise ValueError(f"box stored under '{view}' is tagged '{box.view}'")
        if self.localization not in LOCALIZATIONS:
            raise ValueError(f"localization must be one of {LOCALIZATIONS}")
        object.__setattr__(self, "boxes", MappingProxyType(dict(self.boxes)))


@dataclass(frozen=True)
class Parallelepiped:
    """Axis-aligned box as inclusive (lo, hi) voxel intervals per axis."""

    x_range: tuple[int, int]
    y_range: tuple[int, int]
    z_range: tuple[int, int]

    def __post_init__(self) -> None:
        for name in ("x_range", "y_range", "z_range"):
            object.__setattr__(self, name, _check_range(getattr(self, name), name))

    @property
    def ranges(self) -> tuple[tuple[int, int], ...]:
        return (self.x_range, self.y_range, self.z_range)

    def check_within(self, dims: tuple[int, int, int]) -> None:
        for (lo, hi), n, axis in zip(self.ranges, dims, "xyz"):
            if lo < 0 or hi >= n:
                raise ValueError(f"{axis}_range [{lo}, {hi}] exceeds volume extent {n}")


@dataclass(frozen=True)
class LesionMask:
    """Ground-truth lesion voxels; kind is 'ellipsoid' or 'rectangular'."""

    mask: np.ndarray
    kind: str

    def __post_init__(self) -> None:
        mask = np.ascontiguousarray(self.mask, dtype=bool)
        if mask.ndim != 3:
            raise ValueError("lesion mask must be 3D")
        if self.kind not in ("ellipsoid", "rectangular"):
            raise ValueError(f"unknown mask kind '{self.kind}'")
        if not mask.any():
            raise ValueError("lesion mask is empty")
        object.__setattr__(self, "mask", mask)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.mask.shape)


def _intersect(r1: tuple[int, int], r2: tuple[int, int], axis: str) -> tuple[int, int]:
    lo, hi = max(r1[0], r2[0]), min(r1[1], r2[1])
    if lo > hi:
        raise ValueError(f"inconsistent annotation: empty {axis}-axis intersection of view boxes")
    return lo, hi


def intersect_boxes(a: Annotation) -> Parallelepiped:
    """Intersect the two views constraining each axis into a 3D box."""
    axial, coronal, sagittal = a.boxes["axial"], a.boxes["coronal"], a.boxes["sagittal"]
    return Parallelepiped(
        x_range=_intersect(axial.a_range, coronal.a_range, "x"),
        y_range=_intersect(axial.b_range, sagittal.a_range, "y"),
        z_range=_intersect(coronal.b_range, sagittal.b_range, "z"),
    )


def inscribe_ellipsoid(p: Parallelepiped, dims: tuple[int, int, int]) -> LesionMask:
    """Mask of the ellipsoid inscribed in the parallelepiped.

    Semi-axes are half the voxel extent of the box, (hi - lo + 1) / 2, so
    the ellipsoid fills the box of unit voxel cubes (voxel count close to
    pi/6 of the box count for large boxes) and a degenerate lo == hi axis
    yields a half-voxel semi-axis confining the mask to that plane.
    Membership is tested at integer index coordinates.
    """
    p.check_within(dims)
    mask = np.zeros(dims, dtype=bool)
    (xlo, xhi), (ylo, yhi), (zlo, zhi) = p.ranges
    centers = [(lo + hi) / 2.0 for lo, hi in p.ranges]
    semi = [(hi - lo + 1) / 2.0 for lo, hi in p.ranges]
    xs = (np.arange(xlo, xhi + 1) - centers[0]) / semi[0]
    ys = (np.arange(ylo, yhi + 1) - centers[1]) / semi[1]
    zs = (np.arange(zlo, zhi + 1) - centers[2]) / semi[2]
    q = xs[:, None, None] ** 2 + ys[None, :, None] ** 2 + zs[None, None, :] ** 2
    mask[xlo : xhi + 1, ylo : yhi + 1, zlo : zhi + 1] = q <= 1.0
    assert mask.any(), "inscribed ellipsoid cannot be empty"
    return LesionMask(mask, kind="ellipsoid")


def rectangular_mask(p: Parallelepiped, dims: tuple[int, int, int]) -> LesionMask:
    """Mask of all voxels inside the parallelepiped."""
    p.check_within(dims)
    mask = np.zeros(dims, dtype=bool)
    (xlo, xhi), (ylo, yhi), (zlo, zhi) = p.ranges
    mask[xlo : xhi + 1, ylo : yhi + 1, zlo : zhi + 1] = True
    return LesionMask(mask, kind="rectangular")


# ---------------------------------------------------------------------------
# Annotation file schema
# ---------------------------------------------------------------------------


def annotation_to_dict(a: Annotation) -> dict:
    boxes = {}
    for view in VIEWS:
        box = a.boxes[view]
        axis_a, axis_b = VIEW_AXES[view]
        boxes[view] = {axis_a: list(box.a_range), axis_b: list(box.b_range)}
    return {"subject_id": a.subject_id, "localization": a.localization, "boxes": boxes}


def annotation_from_dict(payload: dict) -> Annotation:
    boxes = {}
    for view in VIEWS:
        entry = payload["boxes"][view]
        axis_a, axis_b = VIEW_AXES[view]
        boxes[view] = ViewBox2D(
            view=view,
            a_range=tuple(entry[axis_a]),
            b_range=tuple(entry[axis_b]),
        )
    return Annotation(
        subject_id=payload["subject_id"],
        boxes=boxes,
        localization=payload["localization"],
    )


def save_annotation(a: Annotation, path: str | Path) -> None:
    Path(path).write_text(json.dumps(annotation_to_dict(a), indent=2) + "\n")


def load_annotation(path: str | Path) -> Annotation:
    audit.record_annotation_read(path)
    return annotation_from_dict(json.loads(Path(path).read_text()))
