"""Synthetic skull-stripped brain phantoms with planted ellipsoidal lesions.

A phantom is a centered brain ellipsoid with a white-matter core and a
gray-matter shell, plus Gaussian noise, zero outside the brain. The
lesion is an ellipsoid intensity offset whose boundary is smoothed
(emulating the gray/white blur cue real lesions show) while its interior
keeps the full offset, so the planted contrast is exactly the configured
delta. Each phantom comes with the tight per-view box annotation and the
planted voxel mask, which makes every pipeline stage testable without
clinical data.

"Temporal-like" placement means the inferior-lateral region (low Z, off
the midline); anything else is "non-temporal-like". The two groups only
need to be geometrically distinguishable, not anatomically real.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .annotation import Annotation, LesionMask, ViewBox2D, save_annotation
from .seeding import checksum_bytes, derive_seed
from .volume_io import BrainMask, Volume, save_volume

# Intensity floor for brain voxels: keeps the strictly-positive brain-mask
# convention exact even in extreme noise draws.
_BRAIN_FLOOR = 1e-3

LesionPlacement = tuple[float, float, float] | str | None


@dataclass(frozen=True)
class PhantomParams:
    dims: tuple[int, int, int] = (96, 96, 96)
    brain_semi_axes: tuple[float, float, float] = (38.0, 44.0, 38.0)
    wm_intensity: float = 110.0
    gm_intensity: float = 90.0
    noise_sigma: float = 10.0
    lesion_semi_axes: tuple[float, float, float] = (6.0, 6.0, 6.0)
    lesion_delta: float = 30.0
    lesion_center: LesionPlacement = "random-temporal"
    blur_sigma: float = 1.0
    seed: int = 0
    subject_id: str = "phantom"

    def __post_init__(self) -> None:
        W, H, D = self.dims
        if W < 40 or H < 24 or D < 1:
            raise ValueError("phantom dims too small for default patch sizes")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise_sigma and blur_sigma must be >= 0")
        if any(a <= 0 for a in self.brain_semi_axes):
            raise ValueError("brain semi-axes must be positive")


def classify_localization(center: tuple[float, float, float], dims: tuple[int, int, int]) -> str:
    """Tag a lesion center: inferior-lateral region is temporal-like."""
    W, _, D = dims
    cx = (W - 1) / 2.0
    cz = (D - 1) / 2.0
    if center[2] < cz and abs(center[0] - cx) > W / 8.0:
        return "temporal"
    return "non_temporal"


def _lesion_fits(
    center: np.ndarray,
    lesion_axes: np.ndarray,
    brain_center: np.ndarray,
    brain_axes: np.ndarray,
) -> bool:
    # Conservative containment: ellipsoid-center offset in brain coordinates
    # plus the worst-case scaled lesion radius must stay inside the unit ball.
    offset = np.linalg.norm((center - brain_center) / brain_axes)
    return offset + float(np.max(lesion_axes / brain_axes)) <= 1.0


def _sample_center(
    rng: np.random.Generator,
    kind: str,
    dims: tuple[int, int, int],
    lesion_axes: np.ndarray,
    brain_center: np.ndarray,
    brain_axes: np.ndarray,
) -> np.ndarray:
    W, H, D = dims
    cx, cy, cz = brain_center
    for _ in range(200):
        y = cy + rng.uniform(-0.3, 0.3) * brain_axes[1]
        if kind == "temporal":
            side = rng.choice([-1.0, 1.0])
            x = cx + side * rng.uniform(W / 8.0 + 2.0, 0.7 * brain_axes[0])
            z = cz - rng.uniform(0.15, 0.55) * brain_axes[2]
        else:
            x = cx + rng.uniform(-0.9, 0.9) * (W / 8.0 - 2.0)
            z = cz + rng.uniform(0.1, 0.55) * brain_axes[2]
        center = np.array([x, y, z])
        if not _lesion_fits(center, lesion_axes, brain_center, brain_axes):
            continue
        if classify_localization(tuple(center), dims) == kind:
            return center
    raise ValueError(f"lesion escaping the brain: no valid {kind} placement found")


def _tight_boxes(mask: np.ndarray) -> dict[str, tuple[int, int]]:
    ranges = {}
    for axis, name in enumerate("xyz"):
        hit = np.any(mask, axis=tuple(i for i in range(3) if i != axis))
        idx = np.flatnonzero(hit)
        ranges[name] = (int(idx[0]), int(idx[-1]))
    return ranges


def generate_phantom(
    p: PhantomParams,
) -> tuple[Volume, BrainMask, Annotation | None, LesionMask | None]:
    """Generate one phantom; annotation and mask are None when no lesion.

    ``lesion_center`` may be an explicit voxel triple, "random-temporal"
    or "random-non-temporal" for seeded placement in the matching region,
    or None for a lesion-free (control) phantom.
    """
    rng = np.random.default_rng(p.seed)
    W, H, D = p.dims
    brain_center = np.array([(W - 1) / 2.0, (H - 1) / 2.0, (D - 1) / 2.0])
    brain_axes = np.asarray(p.brain_semi_axes, dtype=np.float64)
    if np.any(brain_center - brain_axes < -0.5) or np.any(brain_center + brain_axes > np.array(p.dims) - 0.5):
        raise ValueError("brain ellipsoid exceeds volume bounds")

    xs = (np.arange(W) - brain_center[0]) / brain_axes[0]
    ys = (np.arange(H) - brain_center[1]) / brain_axes[1]
    zs = (np.arange(D) - brain_center[2]) / brain_axes[2]
    r2 = xs[:, None, None] ** 2 + ys[None, :, None] ** 2 + zs[None, None, :] ** 2
    brain = r2 <= 1.0
    wm = r2 <= 0.75**2

    tissue = np.where(wm, p.wm_intensity, p.gm_intensity)

    lesion_axes = np.asarray(p.lesion_semi_axes, dtype=np.float64)
    annotation: Annotation | None = None
    lesion_mask: LesionMask | None = None
    lesion_field = 0.0
    if p.lesion_center is not None:
        if isinstance(p.lesion_center, str):
            kind = {"random-temporal": "temporal", "random-non-temporal": "non_temporal"}.get(
                p.lesion_center
            )
            if kind is None:
                raise ValueError(f"unknown lesion placement '{p.lesion_center}'")
            center = _sample_center(rng, kind, p.dims, lesion_axes, brain_center, brain_axes)
        else:
            center = np.asarray(p.lesion_center, dtype=np.float64)
            if not _lesion_fits(center, lesion_axes, brain_center, brain_axes):
                raise ValueError(f"lesion escaping the brain at center {tuple(center)}")
        lx = (np.arange(W) - center[0]) / lesion_axes[0]
        ly = (np.arange(H) - center[1]) / lesion_axes[1]
        lz = (np.arange(D) - center[2]) / lesion_axes[2]
        lr2 = lx[:, None, None] ** 2 + ly[None, :, None] ** 2 + lz[None, None, :] ** 2
        hard = lr2 <= 1.0
        assert hard.any(), "planted lesion has no voxels"
        soft = hard.astype(np.float64)
        if p.blur_sigma > 0:
            # Keep the interior at full strength; the blur only adds the
            # outward halo, so planted contrast stays exactly lesion_delta.
            soft = np.maximum(soft, gaussian_filter(soft, p.blur_sigma))
        lesion_field = p.lesion_delta * soft
        lesion_mask = LesionMask(hard, kind="ellipsoid")
        boxes = _tight_boxes(hard)
        annotation = Annotation(
            subject_id=p.subject_id,
            boxes={
                "axial": ViewBox2D("axial", boxes["x"], boxes["y"]),
                "coronal": ViewBox2D("coronal", boxes["x"], boxes["z"]),
                "sagittal": ViewBox2D("sagittal", boxes["y"], boxes["z"]),
            },
            localization=classify_localization(tuple(center), p.dims),
        )

    img = tissue + lesion_field
    if p.noise_sigma > 0:
        img = img + rng.normal(0.0, p.noise_sigma, size=p.dims)
    img = np.where(brain, np.maximum(img, _BRAIN_FLOOR), 0.0)
    volume = Volume(img.astype(np.float32), spacing=(1.0, 1.0, 1.0), subject_id=p.subject_id)
    return volume, BrainMask(brain), annotation, lesion_mask


# ---------------------------------------------------------------------------
# Cohort generation
# ---------------------------------------------------------------------------


def _jittered(base: PhantomParams, rng: np.random.Generator) -> dict:
    return {
        "brain_semi_axes": tuple(a * rng.uniform(0.92, 1.05) for a in base.brain_semi_axes),
        "wm_intensity": base.wm_intensity * rng.uniform(0.97, 1.03),
        "gm_intensity": base.gm_intensity * rng.uniform(0.97, 1.03),
        "lesion_semi_axes": tuple(a * rng.uniform(0.85, 1.25) for a in base.lesion_semi_axes),
    }


def generate_cohort(
    n_temporal: int,
    n_non_temporal: int,
    n_controls: int,
    n_unlabeled: int,
    base: PhantomParams,
    seed: int,
    out_dir: str | Path,
) -> dict:
    """Write a phantom cohort (volumes, annotations, masks) plus its manifest.

    Labeled subjects are split between temporal-like and non-temporal-like
    lesion placements; unlabeled subjects carry lesions but no emitted
    annotation; controls are lesion-free. Per-subject parameters are
    jittered deterministically from the cohort seed.
    """
    if min(n_temporal, n_non_temporal, n_controls, n_unlabeled) < 0:
        raise ValueError("cohort counts must be >= 0")
    out_dir = Path(out_dir)
    for sub in ("volumes", "annotations", "masks"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    roster: list[tuple[str, str, str | None]] = []
    roster += [(f"t{i:02d}", "labeled", "random-temporal") for i in range(n_temporal)]
    roster += [(f"n{i:02d}", "labeled", "random-non-temporal") for i in range(n_non_temporal)]
    roster += [
        (f"u{i:02d}", "unlabeled", "random-temporal" if i % 2 == 0 else "random-non-temporal")
        for i in range(n_unlabeled)
    ]
    roster += [(f"c{i:02d}", "control", None) for i in range(n_controls)]

    subjects = []
    for name, role, placement in roster:
        subject_id = f"sub-{name}"
        subject_seed = derive_seed(seed, subject_id)
        jitter_rng = np.random.default_rng(derive_seed(seed, subject_id, "jitter"))
        params = replace(
            base,
            **_jittered(base, jitter_rng),
            lesion_center=placement,
            seed=subject_seed,
            subject_id=subject_id,
        )
        volume, _brain, ann, lesion = generate_phantom(params)
        volume_path = out_dir / "volumes" / f"{subject_id}.nii.gz"
        save_volume(volume, volume_path)
        entry = {
            "subject_id": subject_id,
            "role": role,
            "localization": ann.localization if ann is not None else None,
            "volume": str(volume_path.relative_to(out_dir)),
            "annotation": None,
            "planted_mask": None,
            "volume_sha256": checksum_bytes(volume.data.tobytes()),
        }
        if lesion is not None:
            mask_path = out_dir / "masks" / f"{subject_id}_lesion.nii.gz"
            save_volume(
                Volume(lesion.mask.astype(np.float32), subject_id=subject_id), mask_path
            )
            entry["planted_mask"] = str(mask_path.relative_to(out_dir))
        if role == "labeled":
            ann_path = out_dir / "annotations" / f"{subject_id}.json"
            save_annotation(ann, ann_path)
            entry["annotation"] = str(ann_path.relative_to(out_dir))
        subjects.append(entry)

    manifest = {
        "format_version": 1,
        "seed": seed,
        "subjects": subjects,
        "checksum": checksum_bytes("".join(s["volume_sha256"] for s in subjects).encode()),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
