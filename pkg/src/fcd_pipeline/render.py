"""Axial-slice overlay rendering: patch boxes, probabilities, lesion outline.

Produces a raster image of one axial slice at a fixed integer upscale
(nearest neighbor, default 4x, so probability text stays legible on small
volumes). Side patches are outlined green and middle patches yellow, each
carrying its model probability; the ground-truth ellipsoid cross-section
is overlaid translucently.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .annotation import LesionMask
from .patching import PatchSpec
from .volume_io import Volume

SIDE_COLOR = (0, 255, 0)
MIDDLE_COLOR = (255, 255, 0)
LESION_TINT = (160, 220, 255)
LESION_ALPHA = 110
DEFAULT_SCALE = 4


def render_slice(
    volume: Volume,
    z: int,
    patches: Sequence[tuple[PatchSpec, float]] = (),
    lesion_mask: LesionMask | None = None,
    scale: int = DEFAULT_SCALE,
) -> Image.Image:
    """Render one axial slice with patch and lesion overlays."""
    W, H, D = volume.dims
    if not 0 <= z < D:
        raise ValueError(f"slice {z} out of range [0, {D})")
    if scale < 1:
        raise ValueError("scale must be >= 1")

    # Image rows along Y, columns along X, matching the patch axes.
    sl = volume.data[:, :, z].T.astype(np.float64)
    lo, hi = float(sl.min()), float(sl.max())
    gray = np.zeros_like(sl) if hi <= lo else (sl - lo) / (hi - lo)
    img = Image.fromarray((gray * 255).astype(np.uint8), mode="L").convert("RGBA")
    img = img.resize((W * scale, H * scale), resample=Image.NEAREST)

    if lesion_mask is not None:
        if lesion_mask.dims != volume.dims:
            raise ValueError("lesion mask dims do not match volume dims")
        cross = lesion_mask.mask[:, :, z].T
        if cross.any():
            tint = np.zeros((H, W, 4), dtype=np.uint8)
            tint[cross] = (*LESION_TINT, LESION_ALPHA)
            overlay = Image.fromarray(tint, mode="RGBA").resize(
                (W * scale, H * scale), resample=Image.NEAREST
            )
            img = Image.alpha_composite(img, overlay)

    draw = ImageDraw.Draw(img)
    for spec, prob in patches:
        if spec.z != z:
            continue
        color = MIDDLE_COLOR if spec.category == "middle" else SIDE_COLOR
        x0, y0 = spec.x0 * scale, spec.y0 * scale
        x1, y1 = (spec.x0 + spec.w) * scale - 1, (spec.y0 + spec.h) * scale - 1
        draw.rectangle([x0, y0, x1, y1], outline=color, width=1)
        draw.text((x0 + 2, y0 + 1), f"{prob:.2f}", fill=color)
    return img.convert("RGB")


def save_render(image: Image.Image, path: str | Path) -> None:
    image.save(Path(path), format="PNG")
