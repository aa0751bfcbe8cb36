"""Intensity preprocessing: landmark histogram standardization and z-normalization.

Histogram standardization follows the classic landmark scheme: a standard
intensity scale is learned by averaging brain-voxel percentiles across
training volumes; applying it remaps each volume's own landmarks onto the
standard scale with a monotone piecewise-linear map (linear extrapolation
beyond the end landmarks). Z-normalization rescales brain voxels to zero
mean and unit population standard deviation. Non-brain voxels are zeroed
by both transforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .volume_io import BrainMask, Volume

DEFAULT_LANDMARK_PERCENTILES = (1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 99)


@dataclass(frozen=True)
class HistogramStandard:
    """Learned standard intensity scale at fixed percentile landmarks."""

    landmark_percentiles: tuple[float, ...]
    standard_scale: tuple[float, ...]

    def __post_init__(self) -> None:
        pct = tuple(float(p) for p in self.landmark_percentiles)
        scale = tuple(float(s) for s in self.standard_scale)
        if len(pct) != len(scale):
            raise ValueError("landmark_percentiles and standard_scale lengths differ")
        if len(pct) < 2:
            raise ValueError("need at least 2 landmarks")
        if any(not 0 < p < 100 for p in pct):
            raise ValueError("percentiles must lie in the open interval (0, 100)")
        if any(b <= a for a, b in zip(pct, pct[1:])):
            raise ValueError("landmark_percentiles must be strictly increasing")
        if any(b <= a for a, b in zip(scale, scale[1:])):
            raise ValueError("standard_scale must be strictly increasing")
        object.__setattr__(self, "landmark_percentiles", pct)
        object.__setattr__(self, "standard_scale", scale)

    def save(self, path: str | Path) -> None:
        payload = {
            "format_version": 1,
            "landmark_percentiles": list(self.landmark_percentiles),
            "standard_scale": list(self.standard_scale),
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "HistogramStandard":
        payload = json.loads(Path(path).read_text())
        return cls(
            landmark_percentiles=tuple(payload["landmark_percentiles"]),
            standard_scale=tuple(payload["standard_scale"]),
        )


def _brain_values(v: Volume, m: BrainMask) -> np.ndarray:
    if m.dims != v.dims:
        raise ValueError("brain mask dims do not match volume dims")
    values = v.data[m.mask].astype(np.float64)
    if values.size == 0:
        raise ValueError(f"empty brain mask for volume '{v.subject_id}'")
    return values


def fit_histogram_standard(
    volumes: Sequence[tuple[Volume, BrainMask]],
    percentiles: Sequence[float] = DEFAULT_LANDMARK_PERCENTILES,
) -> HistogramStandard:
    """Average brain-voxel percentile landmarks across training volumes.

    Percentiles use linear interpolation between order statistics. Raises
    if the training set is empty, any volume has fewer than 2 distinct
    brain intensities, or the averaged scale is not strictly increasing
    (a symptom of degenerate training data).
    """
    if len(volumes) == 0:
        raise ValueError("empty training set")
    pct = np.asarray(percentiles, dtype=np.float64)
    landmarks = []
    for v, m in volumes:
        values = _brain_values(v, m)
        if np.unique(values).size < 2:
            raise ValueError(f"constant-intensity volume '{v.subject_id}'")
        landmarks.append(np.percentile(values, pct))
    scale = np.mean(landmarks, axis=0)
    if np.any(np.diff(scale) <= 0):
        raise ValueError("fitted standard scale is not strictly increasing; check training data")
    return HistogramStandard(tuple(pct), tuple(scale))


def _dedupe_landmarks(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Collapse tied source landmarks, averaging their target values."""
    uniq, inverse = np.unique(src, return_inverse=True)
    if uniq.size == src.size:
        return src, dst
    merged = np.zeros(uniq.size)
    counts = np.bincount(inverse, minlength=uniq.size)
    np.add.at(merged, inverse, dst)
    return uniq, merged / counts


def _piecewise_linear(x: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    y = np.interp(x, src, dst)
    lo_slope = (dst[1] - dst[0]) / (src[1] - src[0])
    hi_slope = (dst[-1] - dst[-2]) / (src[-1] - src[-2])
    below = x < src[0]
    above = x > src[-1]
    y[below] = dst[0] + (x[below] - src[0]) * lo_slope
    y[above] = dst[-1] + (x[above] - src[-1]) * hi_slope
    return y


def apply_histogram_standard(v: Volume, m: BrainMask, h: HistogramStandard) -> Volume:
    """Remap brain intensities onto the standard scale; zero non-brain voxels.

    The volume's own landmark intensities are sent to ``standard_scale``
    by a monotone non-decreasing piecewise-linear map with linear
    extrapolation on the end segments.
    """
    values = _brain_values(v, m)
    if np.unique(values).size < 2:
        raise ValueError(f"constant-intensity volume '{v.subject_id}'")
    src = np.percentile(values, np.asarray(h.landmark_percentiles))
    dst = np.asarray(h.standard_scale, dtype=np.float64)
    src, dst = _dedupe_landmarks(src, dst)
    if src.size < 2:
        raise ValueError(f"constant-intensity volume '{v.subject_id}': landmarks all tie")
    out = np.zeros(v.dims, dtype=np.float32)
    out[m.mask] = _piecewise_linear(values, src, dst).astype(np.float32)
    return Volume(out, spacing=v.spacing, subject_id=v.subject_id)


def z_normalize(v: Volume, m: BrainMask) -> Volume:
    """Center/scale brain voxels to mean 0, population std 1; zero non-brain."""
    values = _brain_values(v, m)
    mu = values.mean()
    sigma = values.std()  # population (ddof=0)
    if sigma == 0:
        raise ValueError(f"constant intensity: volume '{v.subject_id}' has zero std over brain")
    out = np.zeros(v.dims, dtype=np.float32)
    out[m.mask] = ((values - mu) / sigma).astype(np.float32)
    return Volume(out, spacing=v.spacing, subject_id=v.subject_id)
