"""Skull-stripped 3D volume I/O, brain masking, and midsagittal mirroring.

Volumes are kept in a fixed (X, Y, Z) axis order: X indexes sagittal
position (left/right), Y coronal, Z axial. Files in other on-disk axis
orders are permuted/flipped to this convention on load using the NIfTI
header orientation. Saved files always carry an identity-rotation affine
scaled by the voxel spacing.

NIfTI-1 reading/writing is implemented directly (single-volume scalar
images, plain or gzip). Writes are byte-deterministic: gzip streams are
produced with a zeroed timestamp.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_HDR_SIZE = 348
_MAGIC_SINGLE = b"n+1\x00"

# NIfTI-1 datatype code -> numpy dtype (scalar types only)
_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
    768: np.dtype(np.uint32),
    1024: np.dtype(np.int64),
}


@dataclass(frozen=True)
class Volume:
    """A 3D scalar image with voxel spacing metadata.

    ``data`` is float32 with shape (W, H, D); ``spacing`` gives
    millimeters per voxel along (X, Y, Z).
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    subject_id: str = ""

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"volume dims must be >= 1, got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("volume contains non-finite intensities")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing components must be > 0, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)


@dataclass(frozen=True)
class BrainMask:
    """Boolean voxel mask with the same (W, H, D) dims as its Volume."""

    mask: np.ndarray

    def __post_init__(self) -> None:
        mask = np.ascontiguousarray(self.mask, dtype=bool)
        if mask.ndim != 3:
            raise ValueError(f"brain mask must be 3D, got shape {mask.shape}")
        object.__setattr__(self, "mask", mask)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.mask.shape)


def compute_brain_mask(v: Volume) -> BrainMask:
    """Brain mask of a skull-stripped volume: strictly positive voxels."""
    mask = v.data > 0
    if not mask.any():
        raise ValueError(f"empty brain: volume '{v.subject_id}' has no positive voxels")
    return BrainMask(mask)


def mirror_x(x: int, width: int) -> int:
    """Reflect a sagittal voxel index about the midline: x -> width - 1 - x."""
    if not 0 <= x < width:
        raise ValueError(f"index {x} out of range [0, {width})")
    return width - 1 - x


# ---------------------------------------------------------------------------
# NIfTI-1 reading
# ---------------------------------------------------------------------------


def _read_file_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _quaternion_affine(hdr: dict) -> np.ndarray:
    b, c, d = hdr["quatern"]
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = hdr["pixdim"][0]
    if qfac == 0:
        qfac = 1.0
    zooms = np.array([hdr["pixdim"][1], hdr["pixdim"][2], qfac * hdr["pixdim"][3]])
    affine = np.eye(4)
    affine[:3, :3] = rot @ np.diag(zooms)
    affine[:3, 3] = hdr["qoffset"]
    return affine


def _header_affine(hdr: dict) -> np.ndarray:
    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[0], affine[1], affine[2] = hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]
        return affine
    if hdr["qform_code"] > 0:
        return _quaternion_affine(hdr)
    return np.diag([hdr["pixdim"][1], hdr["pixdim"][2], hdr["pixdim"][3], 1.0])


def _reorient_to_xyz(data: np.ndarray, affine: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Permute/flip array axes so axis order matches world (X, Y, Z).

    Greedy assignment: each world axis is matched to the voxel axis whose
    affine column has the largest remaining component along it, flipping
    when that component is negative. Returns (data, spacing).
    """
    rot = affine[:3, :3]
    norms = np.linalg.norm(rot, axis=0)
    if np.any(norms <= 0):
        # Degenerate affine: fall back to stored order, unit-guarded zooms.
        spacing = np.where(norms > 0, norms, 1.0)
        return data, spacing
    normed = rot / norms
    score = np.abs(normed.copy())
    axis_of_world = [-1, -1, -1]
    flip = [False, False, False]
    for _ in range(3):
        world, vox = np.unravel_index(np.argmax(score), score.shape)
        axis_of_world[world] = int(vox)
        flip[world] = normed[world, vox] < 0
        score[world, :] = -1.0
        score[:, vox] = -1.0
    out = np.transpose(data, axis_of_world)
    for world_axis in range(3):
        if flip[world_axis]:
            out = np.flip(out, axis=world_axis)
    spacing = norms[axis_of_world]
    return np.ascontiguousarray(out), spacing


def _parse_header(buf: bytes, path: Path) -> dict:
    if len(buf) < _HDR_SIZE:
        raise ValueError(f"unreadable header: {path} is shorter than a NIfTI-1 header")
    for order in ("<", ">"):
        (sizeof_hdr,) = struct.unpack_from(order + "i", buf, 0)
        if sizeof_hdr == _HDR_SIZE:
            break
    else:
        raise ValueError(f"unreadable header: {path} is not a NIfTI-1 file")
    magic = buf[344:348]
    if magic not in (_MAGIC_SINGLE, b"ni1\x00"):
        raise ValueError(f"unreadable header: {path} has bad magic {magic!r}")
    if magic != _MAGIC_SINGLE:
        raise ValueError(f"{path}: two-file (.hdr/.img) NIfTI pairs are not supported")
    dim = struct.unpack_from(order + "8h", buf, 40)
    datatype, _bitpix = struct.unpack_from(order + "2h", buf, 70)
    pixdim = struct.unpack_from(order + "8f", buf, 76)
    (vox_offset,) = struct.unpack_from(order + "f", buf, 108)
    scl_slope, scl_inter = struct.unpack_from(order + "2f", buf, 112)
    qform_code, sform_code = struct.unpack_from(order + "2h", buf, 252)
    quatern = struct.unpack_from(order + "3f", buf, 256)
    qoffset = struct.unpack_from(order + "3f", buf, 268)
    srow_x = struct.unpack_from(order + "4f", buf, 280)
    srow_y = struct.unpack_from(order + "4f", buf, 296)
    srow_z = struct.unpack_from(order + "4f", buf, 312)
    return {
        "order": order,
        "dim": dim,
        "datatype": datatype,
        "pixdim": pixdim,
        "vox_offset": int(vox_offset),
        "scl_slope": scl_slope,
        "scl_inter": scl_inter,
        "qform_code": qform_code,
        "sform_code": sform_code,
        "quatern": quatern,
        "qoffset": qoffset,
        "srow_x": srow_x,
        "srow_y": srow_y,
        "srow_z": srow_z,
    }


def _subject_id_from_path(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def load_volume(path: str | Path) -> Volume:
    """Load a single-volume scalar NIfTI-1 image (.nii or .nii.gz).

    The array is permuted to the (X, Y, Z) axis convention using the
    header orientation and cast to float32.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    buf = _read_file_bytes(path)
    hdr = _parse_header(buf, path)

    ndim = hdr["dim"][0]
    if not 1 <= ndim <= 7:
        raise ValueError(f"unreadable header: {path} has dim[0]={ndim}")
    shape = [max(1, hdr["dim"][1 + i]) for i in range(ndim)]
    if len([n for n in shape[3:] if n > 1]) > 0 or len(shape) < 3 or min(shape[:3]) < 1:
        raise ValueError(f"non-3D volume: {path} has shape {tuple(shape)}")
    shape = shape[:3]

    dtype = _DTYPES.get(hdr["datatype"])
    if dtype is None:
        raise ValueError(f"{path}: unsupported NIfTI datatype code {hdr['datatype']}")
    dtype = dtype.newbyteorder(hdr["order"])
    count = int(np.prod(shape))
    offset = max(hdr["vox_offset"], _HDR_SIZE + 4)
    if len(buf) < offset + count * dtype.itemsize:
        raise ValueError(f"unreadable header: {path} data block is truncated")
    flat = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    data = flat.reshape(shape, order="F").astype(np.float64)

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if not np.isfinite(slope) or slope == 0.0:
        slope = 1.0
    if not np.isfinite(inter):
        inter = 0.0
    if slope != 1.0 or inter != 0.0:
        data = data * slope + inter

    data, spacing = _reorient_to_xyz(data, _header_affine(hdr))
    return Volume(
        data=data.astype(np.float32),
        spacing=(float(spacing[0]), float(spacing[1]), float(spacing[2])),
        subject_id=_subject_id_from_path(path),
    )


# ---------------------------------------------------------------------------
# NIfTI-1 writing
# ---------------------------------------------------------------------------


def _build_header(dims: tuple[int, int, int], spacing: tuple[float, float, float]) -> bytes:
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, 16, 32)  # float32
    struct.pack_into("<8f", hdr, 76, 1.0, spacing[0], spacing[1], spacing[2], 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, float(_HDR_SIZE + 4))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    hdr[123] = 2  # xyzt_units: millimeters
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code=0, sform_code=1
    struct.pack_into("<4f", hdr, 280, spacing[0], 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, spacing[1], 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing[2], 0.0)
    hdr[344:348] = _MAGIC_SINGLE
    return bytes(hdr)


def save_volume(v: Volume, path: str | Path) -> None:
    """Write a Volume as NIfTI-1 (.nii, or .nii.gz when the name ends in .gz).

    Data is stored as little-endian float32 in the (X, Y, Z) convention
    with an identity-rotation affine scaled by spacing, so a load round
    trip reproduces the array bitwise. Repeated saves of the same Volume
    are byte-identical (gzip mtime is zeroed).
    """
    path = Path(path)
    payload = (
        _build_header(v.dims, v.spacing)
        + b"\x00\x00\x00\x00"
        + np.asarray(v.data, dtype="<f4").tobytes(order="F")
    )
    if path.name.endswith(".gz"):
        with open(path, "wb") as f:
            # Empty filename + zero mtime keep the gzip stream byte-deterministic.
            with gzip.GzipFile(filename="", fileobj=f, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        path.write_bytes(payload)
