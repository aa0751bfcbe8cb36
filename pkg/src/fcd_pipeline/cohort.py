"""Cohort manifests and in-memory subject records.

A manifest (written by the phantom generator, re-written by the
preprocess command with updated paths) lists every subject with its role:

  labeled    lesion subject with a box annotation; validation target
  unlabeled  lesion subject without annotation; autoencoder pretraining pool
  control    healthy subject; negatives only

Loading a labeled subject derives its ground-truth lesion mask from the
annotation (box intersection, then inscribed ellipsoid). Brain masks come
from a stored mask file when the manifest carries one (the preprocess
command persists them, since normalized volumes are no longer strictly
positive over the brain) and otherwise from the positive-voxel rule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .annotation import Annotation, LesionMask, inscribe_ellipsoid, intersect_boxes, load_annotation
from .volume_io import BrainMask, Volume, compute_brain_mask, load_volume

ROLES = ("labeled", "unlabeled", "control")


@dataclass
class SubjectData:
    """One subject's volume, masks, and (for labeled subjects) annotation."""

    subject_id: str
    role: str
    volume: Volume
    brain_mask: BrainMask
    annotation: Annotation | None = None
    lesion_mask: LesionMask | None = None

    @property
    def localization(self) -> str | None:
        return self.annotation.localization if self.annotation is not None else None


@dataclass
class Cohort:
    labeled: list[SubjectData]
    unlabeled: list[SubjectData]
    controls: list[SubjectData]

    @property
    def all_subjects(self) -> list[SubjectData]:
        return self.labeled + self.unlabeled + self.controls


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing manifest: {path}")
    manifest = json.loads(path.read_text())
    for entry in manifest.get("subjects", []):
        if entry.get("role") not in ROLES:
            raise ValueError(f"manifest entry '{entry.get('subject_id')}' has bad role")
    return manifest


def derive_lesion_mask(annotation: Annotation, dims: tuple[int, int, int]) -> LesionMask:
    """Ground-truth ellipsoid mask from a box annotation."""
    return inscribe_ellipsoid(intersect_boxes(annotation), dims)


def _load_brain_mask(root: Path, entry: dict, volume: Volume) -> BrainMask:
    mask_rel = entry.get("brain_mask")
    if mask_rel:
        mask_vol = load_volume(root / mask_rel)
        if mask_vol.dims != volume.dims:
            raise ValueError(f"brain mask dims mismatch for '{entry['subject_id']}'")
        return BrainMask(mask_vol.data > 0.5)
    return compute_brain_mask(volume)


def load_subject(root: str | Path, entry: dict) -> SubjectData:
    root = Path(root)
    volume = load_volume(root / entry["volume"])
    brain_mask = _load_brain_mask(root, entry, volume)
    annotation = None
    lesion_mask = None
    if entry["role"] == "labeled":
        if not entry.get("annotation"):
            raise ValueError(f"labeled subject '{entry['subject_id']}' has no annotation path")
        annotation = load_annotation(root / entry["annotation"])
        lesion_mask = derive_lesion_mask(annotation, volume.dims)
    return SubjectData(
        subject_id=entry["subject_id"],
        role=entry["role"],
        volume=volume,
        brain_mask=brain_mask,
        annotation=annotation,
        lesion_mask=lesion_mask,
    )


def load_cohort(manifest_path: str | Path) -> Cohort:
    """Load every subject listed in a manifest, grouped by role."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    root = manifest_path.parent
    cohort = Cohort(labeled=[], unlabeled=[], controls=[])
    for entry in manifest["subjects"]:
        subject = load_subject(root, entry)
        {"labeled": cohort.labeled, "unlabeled": cohort.unlabeled, "control": cohort.controls}[
            subject.role
        ].append(subject)
    return cohort
