"""Candidate patch grids, multi-view mirrored stacks, labels, and datasets.

Patches are h x w windows on axial slices (h along Y, w along X). For
each window the input tensor stacks, per active view, the view's crop and
its midsagittally mirrored counterpart:

  channel 0  axial crop at the slice
  channel 1  same crop taken from the x-reflected volume
  channel 2  coronal plane through the window center (Z vertical, X horizontal)
  channel 3  same coronal crop from the x-reflected volume
  channel 4  sagittal plane through the window center (Z vertical, Y horizontal)
  channel 5  sagittal plane at the mirrored x position (contralateral slice)

with channels 2-5 present only when the coronal/sagittal views are
active, and out-of-bounds crop regions zero-padded.

Lesion overlap is counted on the one-voxel-thick axial footprint; labels
are hard (any overlap -> 1) or soft, (overlap / subject max) ** (1/5).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .annotation import LesionMask
from .volume_io import BrainMask, Volume

logger = logging.getLogger(__name__)

VIEW_ORDER = ("axial", "coronal", "sagittal")
CATEGORIES = ("side", "middle")


def canonical_views(views: Iterable[str]) -> tuple[str, ...]:
    """Validate a view subset and put it in canonical channel order."""
    views = set(views)
    unknown = views - set(VIEW_ORDER)
    if unknown:
        raise ValueError(f"unknown views {sorted(unknown)}")
    if "axial" not in views:
        raise ValueError("views must contain 'axial'")
    return tuple(v for v in VIEW_ORDER if v in views)


@dataclass(frozen=True)
class PatchParams:
    """Patch geometry and grid parameters.

    ``stride_y``/``stride_x`` default to half the patch size, which with
    boundary anchoring guarantees the grid covers every in-bounds window.
    """

    h: int = 24
    w: int = 40
    stride_y: int | None = None
    stride_x: int | None = None
    stride_z: int = 1
    min_brain_fraction: float = 0.5
    views: tuple[str, ...] = ("axial",)

    def __post_init__(self) -> None:
        if self.h < 1 or self.w < 1:
            raise ValueError("patch size must be positive")
        stride_y = max(1, self.h // 2) if self.stride_y is None else int(self.stride_y)
        stride_x = max(1, self.w // 2) if self.stride_x is None else int(self.stride_x)
        object.__setattr__(self, "stride_y", stride_y)
        object.__setattr__(self, "stride_x", stride_x)
        if self.stride_y < 1 or self.stride_x < 1 or self.stride_z < 1:
            raise ValueError("strides must be >= 1")
        if not 0 <= self.min_brain_fraction <= 1:
            raise ValueError("min_brain_fraction must lie in [0, 1]")
        object.__setattr__(self, "views", canonical_views(self.views))

    @property
    def channels(self) -> int:
        return 2 * len(self.views)


@dataclass(frozen=True)
class PatchSpec:
    """One candidate patch: axial slice index and in-plane window."""

    subject_id: str
    z: int
    x0: int
    y0: int
    h: int
    w: int
    category: str

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise ValueError(f"category must be one of {CATEGORIES}")

    @property
    def sort_key(self) -> tuple[int, int, int]:
        return (self.z, self.y0, self.x0)

    def identity(self) -> str:
        return f"{self.subject_id}|z{self.z}|x{self.x0}|y{self.y0}|{self.h}x{self.w}"


@dataclass
class LabeledPatch:
    """A patch spec with its extracted stack, lesion overlap, and label."""

    spec: PatchSpec
    stack: np.ndarray
    overlap: int
    label: float


def _grid_starts(size: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, size - patch + 1, stride))
    last = size - patch
    if starts[-1] != last:
        starts.append(last)
    return starts


def generate_patch_grid(m: BrainMask, p: PatchParams, subject_id: str = "") -> list[PatchSpec]:
    """Enumerate grid patches with enough brain coverage, in (z, y0, x0) order.

    A patch is kept when its axial footprint contains at least
    ``min_brain_fraction * h * w`` brain voxels; it is ``middle`` when the
    footprint's x extent contains the midline index (W - 1) / 2 and
    ``side`` otherwise. Slices with no brain voxels are skipped.
    """
    W, H, D = m.dims
    if p.h > H or p.w > W:
        raise ValueError(f"patch {p.h}x{p.w} exceeds volume extent ({W}, {H})")
    xs = _grid_starts(W, p.w, p.stride_x)
    ys = _grid_starts(H, p.h, p.stride_y)
    midline = (W - 1) / 2.0
    threshold = p.min_brain_fraction * p.h * p.w
    specs: list[PatchSpec] = []
    for z in range(0, D, p.stride_z):
        sl = m.mask[:, :, z]
        if not sl.any():
            continue
        # Padded 2D integral image: window sums in O(1) per candidate.
        integral = np.zeros((W + 1, H + 1), dtype=np.int64)
        np.cumsum(np.cumsum(sl, axis=0), axis=1, out=integral[1:, 1:])
        for y0 in ys:
            for x0 in xs:
                count = (
                    integral[x0 + p.w, y0 + p.h]
                    - integral[x0, y0 + p.h]
                    - integral[x0 + p.w, y0]
                    + integral[x0, y0]
                )
                if count >= threshold:
                    category = "middle" if x0 <= midline <= x0 + p.w - 1 else "side"
                    specs.append(
                        PatchSpec(
                            subject_id=subject_id,
                            z=z,
                            x0=x0,
                            y0=y0,
                            h=p.h,
                            w=p.w,
                            category=category,
                        )
                    )
    return specs


def _crop2d(plane: np.ndarray, r0: int, c0: int, h: int, w: int) -> np.ndarray:
    """Crop plane[r0:r0+h, c0:c0+w] with zero padding outside the plane."""
    out = np.zeros((h, w), dtype=np.float32)
    r_lo, r_hi = max(r0, 0), min(r0 + h, plane.shape[0])
    c_lo, c_hi = max(c0, 0), min(c0 + w, plane.shape[1])
    if r_lo < r_hi and c_lo < c_hi:
        out[r_lo - r0 : r_hi - r0, c_lo - c0 : c_hi - c0] = plane[r_lo:r_hi, c_lo:c_hi]
    return out


def extract_stack(v: Volume, s: PatchSpec, p: PatchParams) -> np.ndarray:
    """Assemble the C x h x w multi-view mirrored stack for one patch."""
    if (s.h, s.w) != (p.h, p.w):
        raise ValueError(f"spec size {s.h}x{s.w} does not match params {p.h}x{p.w}")
    W, H, D = v.dims
    if not (0 <= s.x0 and s.x0 + s.w <= W and 0 <= s.y0 and s.y0 + s.h <= H and 0 <= s.z < D):
        raise ValueError(f"patch footprint out of bounds for volume dims {v.dims}")
    data = v.data
    reflected = data[::-1, :, :]

    channels: list[np.ndarray] = []
    # Axial pair: rows along Y, columns along X.
    axial = data[:, :, s.z].T
    axial_m = reflected[:, :, s.z].T
    channels.append(_crop2d(axial, s.y0, s.x0, s.h, s.w))
    channels.append(_crop2d(axial_m, s.y0, s.x0, s.h, s.w))

    z0 = s.z - s.h // 2
    y_c = s.y0 + s.h // 2
    x_c = s.x0 + s.w // 2
    if "coronal" in p.views:
        # Coronal plane through the window center: rows along Z, columns along X.
        coronal = data[:, y_c, :].T
        coronal_m = reflected[:, y_c, :].T
        channels.append(_crop2d(coronal, z0, s.x0, s.h, s.w))
        channels.append(_crop2d(coronal_m, z0, s.x0, s.h, s.w))
    if "sagittal" in p.views:
        # Sagittal planes at x_c and its contralateral mirror: rows Z, columns Y.
        y0s = y_c - s.w // 2
        sagittal = data[x_c, :, :].T
        sagittal_m = data[W - 1 - x_c, :, :].T
        channels.append(_crop2d(sagittal, z0, y0s, s.h, s.w))
        channels.append(_crop2d(sagittal_m, z0, y0s, s.h, s.w))
    return np.stack(channels, axis=0)


def patch_overlap(s: PatchSpec, mask: LesionMask) -> int:
    """Count lesion voxels inside the one-voxel-thick axial footprint."""
    return int(mask.mask[s.x0 : s.x0 + s.w, s.y0 : s.y0 + s.h, s.z].sum())


def grid_overlaps(specs: Sequence[PatchSpec], mask: LesionMask) -> np.ndarray:
    """Vectorized ``patch_overlap`` over a grid via per-slice integral images."""
    counts = np.zeros(len(specs), dtype=np.int64)
    by_slice: dict[int, list[int]] = {}
    for i, s in enumerate(specs):
        by_slice.setdefault(s.z, []).append(i)
    W, H, _ = mask.dims
    for z, idxs in by_slice.items():
        sl = mask.mask[:, :, z]
        if not sl.any():
            continue
        integral = np.zeros((W + 1, H + 1), dtype=np.int64)
        np.cumsum(np.cumsum(sl, axis=0), axis=1, out=integral[1:, 1:])
        for i in idxs:
            s = specs[i]
            counts[i] = (
                integral[s.x0 + s.w, s.y0 + s.h]
                - integral[s.x0, s.y0 + s.h]
                - integral[s.x0 + s.w, s.y0]
                + integral[s.x0, s.y0]
            )
    return counts


def soft_label(overlap: int, max_overlap: int) -> float:
    """Soft label (overlap / max_overlap) ** (1/5); 0 and 1 at the endpoints."""
    if max_overlap <= 0:
        raise ValueError("max_overlap must be positive")
    if not 0 <= overlap <= max_overlap:
        raise ValueError(f"overlap {overlap} outside [0, {max_overlap}]")
    return float((overlap / max_overlap) ** 0.2)


def hard_label(overlap: int) -> float:
    """Hard label: 1.0 for any non-zero overlap, else 0.0."""
    if overlap < 0:
        raise ValueError("overlap must be non-negative")
    return 1.0 if overlap > 0 else 0.0


GridEntry = tuple[list[PatchSpec], np.ndarray]


def subject_grid_with_overlaps(
    volume: Volume,
    brain: BrainMask,
    lesion: LesionMask | None,
    params: PatchParams,
    grid_cache: dict | None = None,
) -> GridEntry:
    """Grid specs and per-spec lesion overlaps (zeros when no lesion).

    ``grid_cache`` memoizes by (subject_id, params) so ablation runs can
    share grids across folds and configs of equal shape.
    """
    key = (volume.subject_id, params)
    if grid_cache is not None and key in grid_cache:
        return grid_cache[key]
    specs = generate_patch_grid(brain, params, subject_id=volume.subject_id)
    if lesion is not None and specs:
        overlaps = grid_overlaps(specs, lesion)
    else:
        overlaps = np.zeros(len(specs), dtype=np.int64)
    entry = (specs, overlaps)
    if grid_cache is not None:
        grid_cache[key] = entry
    return entry


def build_dataset(
    subjects: Sequence[tuple[Volume, BrainMask, LesionMask | None]],
    params: PatchParams,
    labeling: str = "soft",
    neg_ratio: float = 1.0,
    seed: int = 0,
    grid_cache: dict | None = None,
) -> list[LabeledPatch]:
    """Build a balanced labeled patch set across subjects.

    Every positive (overlap > 0) patch from lesion subjects is included;
    ``neg_ratio`` times as many zero-overlap patches are sampled without
    replacement, uniformly from the pooled negatives of lesion subjects
    and all patches of lesion-free subjects. Per-subject ``max_overlap``
    for soft labels is taken over the subject's full grid.
    """
    if labeling not in ("hard", "soft"):
        raise ValueError(f"labeling must be 'hard' or 'soft', got '{labeling}'")
    if neg_ratio <= 0:
        raise ValueError("neg_ratio must be positive")

    positives: list[LabeledPatch] = []
    negative_pool: list[tuple[Volume, PatchSpec]] = []
    n_lesion_subjects = 0
    for volume, brain, lesion in subjects:
        specs, overlaps = subject_grid_with_overlaps(volume, brain, lesion, params, grid_cache)
        if lesion is None:
            negative_pool.extend((volume, s) for s in specs)
            continue
        n_lesion_subjects += 1
        max_overlap = int(overlaps.max()) if len(specs) else 0
        if max_overlap == 0:
            raise ValueError(
                f"unreachable lesion: no grid patch of '{volume.subject_id}' overlaps its mask"
            )
        for s, ov in zip(specs, overlaps):
            if ov > 0:
                label = soft_label(int(ov), max_overlap) if labeling == "soft" else hard_label(int(ov))
                positives.append(LabeledPatch(s, extract_stack(volume, s, params), int(ov), label))
            else:
                negative_pool.append((volume, s))

    if n_lesion_subjects == 0 or not positives:
        raise ValueError("need at least one subject with a reachable lesion mask")

    n_neg = int(round(neg_ratio * len(positives)))
    if n_neg > len(negative_pool):
        logger.warning(
            "negative pool (%d) smaller than requested %d; using the whole pool",
            len(negative_pool),
            n_neg,
        )
        n_neg = len(negative_pool)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(negative_pool), size=n_neg, replace=False)
    negatives = [
        LabeledPatch(spec, extract_stack(volume, spec, params), 0, 0.0)
        for volume, spec in (negative_pool[i] for i in chosen)
    ]
    return positives + negatives


# ---------------------------------------------------------------------------
# Patch cache file: versioned header, then fixed-stride records
# ---------------------------------------------------------------------------

_CACHE_MAGIC = b"FCDPATCH"
_CACHE_VERSION = 1


def save_patch_cache(
    path: str | Path,
    subject_id: str,
    params: PatchParams,
    specs: Sequence[PatchSpec],
    stacks: np.ndarray,
) -> None:
    """Persist extracted stacks so ablation runs can skip re-extraction.

    Layout: magic, version, record count, (C, h, w), views string,
    subject id, then one fixed-stride record per patch holding the spec
    fields followed by the float32 stack.
    """
    stacks = np.ascontiguousarray(stacks, dtype=np.float32)
    if stacks.shape != (len(specs), params.channels, params.h, params.w):
        raise ValueError(f"stacks shape {stacks.shape} does not match specs/params")
    views_b = ",".join(params.views).encode("utf-8")
    sid_b = subject_id.encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CACHE_MAGIC)
        f.write(struct.pack("<HIHHH", _CACHE_VERSION, len(specs), params.channels, params.h, params.w))
        f.write(struct.pack("<H", len(views_b)) + views_b)
        f.write(struct.pack("<H", len(sid_b)) + sid_b)
        for spec, stack in zip(specs, stacks):
            f.write(
                struct.pack(
                    "<iiiB3x",
                    spec.z,
                    spec.x0,
                    spec.y0,
                    CATEGORIES.index(spec.category),
                )
            )
            f.write(stack.tobytes())


def load_patch_cache(path: str | Path) -> tuple[str, PatchParams, list[PatchSpec], np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _CACHE_MAGIC:
            raise ValueError(f"{path}: not a patch cache file")
        version, n, channels, h, w = struct.unpack("<HIHHH", f.read(12))
        if version != _CACHE_VERSION:
            raise ValueError(f"{path}: unsupported patch cache version {version}")
        (views_len,) = struct.unpack("<H", f.read(2))
        views = tuple(f.read(views_len).decode("utf-8").split(","))
        (sid_len,) = struct.unpack("<H", f.read(2))
        subject_id = f.read(sid_len).decode("utf-8")
        params = PatchParams(h=h, w=w, views=views)
        if params.channels != channels:
            raise ValueError(f"{path}: channel count {channels} inconsistent with views {views}")
        specs: list[PatchSpec] = []
        stacks = np.empty((n, channels, h, w), dtype=np.float32)
        stack_bytes = channels * h * w * 4
        for i in range(n):
            z, x0, y0, cat = struct.unpack("<iiiB3x", f.read(16))
            specs.append(
                PatchSpec(
                    subject_id=subject_id,
                    z=z,
                    x0=x0,
                    y0=y0,
                    h=h,
                    w=w,
                    category=CATEGORIES[cat],
                )
            )
            stacks[i] = np.frombuffer(f.read(stack_bytes), dtype="<f4").reshape(channels, h, w)
    return subject_id, params, specs, stacks
