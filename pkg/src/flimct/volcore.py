"""Volumetric image representation, VVF file I/O, resampling, cropping, resizing.

A volume is a multi-channel 3D scalar grid with voxel spacing in
millimeters.  In memory the grid is a numpy array of shape
``(dz, dy, dx, m)`` so that ``data.ravel()`` walks z-major, then y, then
x, with the channel innermost -- the same order the raw VVF bytes use.
Voxel coordinates are always given as ``(x, y, z)`` tuples.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    DimsMismatch,
    EmptyMask,
    IndexOutOfRange,
    MalformedHeader,
    MissingFile,
    NoComponentFound,
    NonPositiveTarget,
    SizeMismatch,
    ZeroTargetDim,
)

_DTYPES = {"i16": np.int16, "f32": np.float32, "u8": np.uint8}
_DTYPE_NAMES = {np.dtype(np.int16): "i16", np.dtype(np.float32): "f32",
                np.dtype(np.uint8): "u8"}


@dataclass
class Volume:
    """Immutable multi-channel 3D image.

    Attributes:
        data: array of shape (dz, dy, dx, m); indexed as data[z, y, x, c].
        spacing: (sx, sy, sz) millimeters per voxel.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 3:
            arr = arr[..., np.newaxis]
        if arr.ndim != 4 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be (dz, dy, dx, m), got shape {arr.shape}")
        if not all(s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if np.issubdtype(arr.dtype, np.floating) and not np.isfinite(arr).all():
            raise ValueError("volume contains non-finite values")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        """Voxel counts as (dx, dy, dz)."""
        dz, dy, dx, _ = self.data.shape
        return (dx, dy, dz)

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def value_at(self, x: int, y: int, z: int, c: int = 0) -> float:
        return float(self.data[z, y, x, c])


@dataclass
class Mask:
    """Binary mask aligned with a Volume; data shape (dz, dy, dx), values 0/1."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 4 and arr.shape[3] == 1:
            arr = arr[..., 0]
        if arr.ndim != 3:
            raise ValueError(f"mask data must be 3D, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr != 0).astype(np.uint8)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        dz, dy, dx = self.data.shape
        return (dx, dy, dz)


def save_volume(vol: Volume, path: str, dtype: str | None = None) -> None:
    """Write a volume as a VVF pair: <path> header JSON plus a .raw file.

    `path` should end in .vvf.json; the raw file is written next to it.
    """
    if dtype is None:
        dtype = _DTYPE_NAMES.get(vol.data.dtype, "f32")
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    base = os.path.basename(path)
    if base.endswith(".vvf.json"):
        stem = base[: -len(".vvf.json")]
    else:
        stem = os.path.splitext(base)[0]
    raw_name = stem + ".raw"
    dx, dy, dz = vol.dims
    header = {
        "dims": [dx, dy, dz],
        "spacing": list(vol.spacing),
        "channels": vol.channels,
        "dtype": dtype,
        "raw": raw_name,
    }
    raw = np.ascontiguousarray(vol.data.astype(_DTYPES[dtype]))
    raw_path = os.path.join(os.path.dirname(path), raw_name)
    _atomic_write_bytes(raw_path, raw.astype(raw.dtype.newbyteorder("<")).tobytes())
    _atomic_write_bytes(path, json.dumps(header, sort_keys=True).encode())


def load_volume(path: str) -> Volume:
    """Load a VVF volume; raises MissingFile/MalformedHeader/SizeMismatch."""
    if not os.path.isfile(path):
        raise MissingFile(path)
    try:
        with open(path, "rb") as f:
            header = json.loads(f.read())
        dims = header["dims"]
        spacing = header["spacing"]
        m = int(header["channels"])
        dtype = header["dtype"]
        raw_name = header["raw"]
        dx, dy, dz = (int(d) for d in dims)
        sx, sy, sz = (float(s) for s in spacing)
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as e:
        raise MalformedHeader(f"{path}: {e}") from e
    if dtype not in _DTYPES:
        raise MalformedHeader(f"{path}: unknown dtype {dtype!r}")
    if min(dx, dy, dz) < 1 or m < 1 or min(sx, sy, sz) <= 0:
        raise MalformedHeader(f"{path}: invalid dims/spacing/channels")
    raw_path = os.path.join(os.path.dirname(path), raw_name)
    if not os.path.isfile(raw_path):
        raise MissingFile(raw_path)
    np_dtype = np.dtype(_DTYPES[dtype]).newbyteorder("<")
    raw = np.fromfile(raw_path, dtype=np_dtype)
    expected = dx * dy * dz * m
    if raw.size != expected:
        raise SizeMismatch(f"{raw_path}: {raw.size} values, expected {expected}")
    data = raw.astype(_DTYPES[dtype]).reshape(dz, dy, dx, m)
    return Volume(data=data, spacing=(sx, sy, sz))


def save_mask(mask: Mask, path: str) -> None:
    save_volume(Volume(mask.data.astype(np.uint8)[..., np.newaxis]), path, dtype="u8")


def load_mask(path: str) -> Mask:
    return Mask(load_volume(path).data[..., 0])


def _interp_axis_coords(n_out: int, scale: float, n_in: int) -> np.ndarray:
    # voxel-center convention: output center i maps to input coordinate
    # (i + 0.5) * scale - 0.5, clamped to the valid range (edge clamp)
    coords = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    return np.clip(coords, 0.0, n_in - 1.0)


def _trilinear_sample_grid(data: np.ndarray, cz: np.ndarray, cy: np.ndarray,
                           cx: np.ndarray) -> np.ndarray:
    """Sample data (dz,dy,dx,m) on the separable grid cz x cy x cx."""
    z0 = np.floor(cz).astype(np.intp)
    y0 = np.floor(cy).astype(np.intp)
    x0 = np.floor(cx).astype(np.intp)
    z1 = np.minimum(z0 + 1, data.shape[0] - 1)
    y1 = np.minimum(y0 + 1, data.shape[1] - 1)
    x1 = np.minimum(x0 + 1, data.shape[2] - 1)
    fz = (cz - z0)[:, None, None, None]
    fy = (cy - y0)[None, :, None, None]
    fx = (cx - x0)[None, None, :, None]
    d = data.astype(np.float64, copy=False)
    out = np.zeros((len(cz), len(cy), len(cx), data.shape[3]), dtype=np.float64)
    for zi, wz in ((z0, 1.0 - fz), (z1, fz)):
        for yi, wy in ((y0, 1.0 - fy), (y1, fy)):
            for xi, wx in ((x0, 1.0 - fx), (x1, fx)):
                out += wz * wy * wx * d[np.ix_(zi, yi, xi)]
    return out


def resample_isotropic(vol: Volume, target: float) -> Volume:
    """Resample to isotropic `target` mm spacing by trilinear interpolation."""
    if target <= 0:
        raise NonPositiveTarget(str(target))
    dx, dy, dz = vol.dims
    sx, sy, sz = vol.spacing
    # round-half-up for deterministic output dims
    def out_dim(n, s):
        return max(1, int(np.floor(n * s / target + 0.5)))
    ox, oy, oz = out_dim(dx, sx), out_dim(dy, sy), out_dim(dz, sz)
    if (ox, oy, oz) == (dx, dy, dz) and (sx, sy, sz) == (target,) * 3:
        return vol
    cz = _interp_axis_coords(oz, dz / oz, dz)
    cy = _interp_axis_coords(oy, dy / oy, dy)
    cx = _interp_axis_coords(ox, dx / ox, dx)
    data = _trilinear_sample_grid(vol.data, cz, cy, cx)
    return Volume(data=data, spacing=(target, target, target))


def resize_trilinear(vol: Volume, target_dims: tuple[int, int, int]) -> Volume:
    """Resize to target_dims (tx,ty,tz); spacing rescaled to keep physical extent."""
    tx, ty, tz = (int(t) for t in target_dims)
    if min(tx, ty, tz) < 1:
        raise ZeroTargetDim(str(target_dims))
    dx, dy, dz = vol.dims
    if (tx, ty, tz) == (dx, dy, dz):
        return vol
    cz = _interp_axis_coords(tz, dz / tz, dz)
    cy = _interp_axis_coords(ty, dy / ty, dy)
    cx = _interp_axis_coords(tx, dx / tx, dx)
    data = _trilinear_sample_grid(vol.data, cz, cy, cx)
    sx, sy, sz = vol.spacing
    spacing = (sx * dx / tx, sy * dy / ty, sz * dz / tz)
    return Volume(data=data, spacing=spacing)


def mask_bounding_box(mask: Mask) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """Min and max (x,y,z) corners (inclusive) of the nonzero mask voxels."""
    nz = np.nonzero(mask.data)
    if nz[0].size == 0:
        raise EmptyMask("mask has no nonzero voxel")
    zmin, ymin, xmin = (int(a.min()) for a in nz)
    zmax, ymax, xmax = (int(a.max()) for a in nz)
    return (xmin, ymin, zmin), (xmax, ymax, zmax)


def crop_to_mask(vol: Volume, mask: Mask, margin: int = 0) -> Volume:
    """Crop to the mask's bounding box expanded by `margin` voxels."""
    if mask.dims != vol.dims:
        raise DimsMismatch(f"mask dims {mask.dims} != volume dims {vol.dims}")
    (xmin, ymin, zmin), (xmax, ymax, zmax) = mask_bounding_box(mask)
    dx, dy, dz = vol.dims
    xmin = max(0, xmin - margin); ymin = max(0, ymin - margin); zmin = max(0, zmin - margin)
    xmax = min(dx - 1, xmax + margin); ymax = min(dy - 1, ymax + margin); zmax = min(dz - 1, zmax + margin)
    data = vol.data[zmin:zmax + 1, ymin:ymax + 1, xmin:xmax + 1, :]
    return Volume(data=data.copy(), spacing=vol.spacing)


def slice_extract(vol: Volume, axis: int, index: int, channel: int = 0) -> np.ndarray:
    """Extract one plane of voxel values; axis 0=x, 1=y, 2=z.

    Returns a 2D array; for axis 2 the rows are y and columns x.
    """
    if axis not in (0, 1, 2):
        raise IndexOutOfRange(f"axis {axis}")
    dx, dy, dz = vol.dims
    n = (dx, dy, dz)[axis]
    if not 0 <= index < n:
        raise IndexOutOfRange(f"index {index} out of range for axis {axis} (size {n})")
    if not 0 <= channel < vol.channels:
        raise IndexOutOfRange(f"channel {channel}")
    if axis == 0:
        return np.array(vol.data[:, :, index, channel])  # (z, y)
    if axis == 1:
        return np.array(vol.data[:, index, :, channel])  # (z, x)
    return np.array(vol.data[index, :, :, channel])      # (y, x)


def naive_lung_mask(vol: Volume, threshold: float, channel: int = 0) -> Mask:
    """Largest 6-connected dark component, excluding the all-border background.

    Demo fallback for when no proper segmentation mask is supplied.
    """
    dark = vol.data[..., channel] < threshold
    structure = ndimage.generate_binary_structure(3, 1)  # 6-connectivity
    labels, n = ndimage.label(dark, structure=structure)
    if n == 0:
        raise NoComponentFound("no voxel below threshold")
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    # background = a component touching all six faces simultaneously
    faces = [labels[0], labels[-1], labels[:, 0], labels[:, -1],
             labels[:, :, 0], labels[:, :, -1]]
    face_sets = [set(np.unique(f)) - {0} for f in faces]
    excluded = set.intersection(*face_sets) if face_sets else set()
    best_label, best_size = 0, -1
    for lab in range(1, n + 1):
        if lab in excluded:
            continue
        if sizes[lab - 1] > best_size:
            best_label, best_size = lab, sizes[lab - 1]
    if best_label == 0:
        raise NoComponentFound("all dark components touch every border face")
    return Mask((labels == best_label).astype(np.uint8))


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)
