"""Synthetic volumetric dataset for desk-scale verification.

Normal volumes are a smooth low-intensity background plus bright tubular
structures (vessel analogue).  Abnormal volumes additionally contain a
few blurred mid-intensity ellipsoidal blobs (ground-glass analogue), so
the intensity histogram stays bimodal and markers drawn inside blobs
versus background yield discriminative kernels.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .flim import Marker, MarkerSet
from .volcore import Volume, _atomic_write_bytes

BACKGROUND_MEAN = 100.0
BACKGROUND_WOBBLE = 25.0
TUBE_INTENSITY = 800.0
TUBE_RADIUS = 2.0            # thin relative to the dilated receptive field
TUBE_EDGE = 1.0              # soft falloff width so the core stays uniform
N_TUBES = 24
BLOB_INTENSITY = 420.0       # between the two histogram summits
BLOB_BLUR_SIGMA = 2.0
BLUR_TRUNCATE = 4.0          # gaussian support radius = truncate * sigma
BLOB_RADIUS_FRAC = (0.18, 0.27)   # ellipsoid radii relative to the short axis
N_BLOBS = (4, 6)


@dataclass
class BlobBox:
    """Inclusive (x,y,z) min/max corners covering one blob's full support."""
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]


@dataclass
class SynthVolume:
    volume: Volume
    baseline: Volume            # the paired normal field, blobs excluded
    label: int                  # -1 normal, +1 abnormal
    blob_boxes: list[BlobBox]


def _tube_field(dims: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    dx, dy, dz = dims
    zz, yy, xx = np.meshgrid(np.arange(dz), np.arange(dy), np.arange(dx),
                             indexing="ij")
    field = np.zeros((dz, dy, dx), dtype=np.float64)
    for _ in range(N_TUBES):
        p0 = rng.uniform(0, [dx, dy, dz])
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        # distance from each voxel to the infinite line through p0
        rel = np.stack([xx - p0[0], yy - p0[1], zz - p0[2]], axis=-1)
        proj = rel @ direction
        dist = np.sqrt(np.maximum((rel ** 2).sum(axis=-1) - proj ** 2, 0.0))
        # uniform bright core with a soft edge, so the histogram keeps a
        # well-defined high-intensity summit
        profile = np.clip((TUBE_RADIUS + TUBE_EDGE / 2 - dist) / TUBE_EDGE, 0.0, 1.0)
        field = np.maximum(field, profile)
    return field


def _background(dims: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    dx, dy, dz = dims
    noise = rng.normal(0.0, 1.0, size=(dz, dy, dx))
    smooth = ndimage.gaussian_filter(noise, sigma=6.0)
    smooth /= max(np.abs(smooth).max(), 1e-12)
    fine = rng.normal(0.0, 8.0, size=(dz, dy, dx))
    return BACKGROUND_MEAN + BACKGROUND_WOBBLE * smooth + fine


def _blob_field(dims: tuple[int, int, int], rng: np.random.Generator
                ) -> tuple[np.ndarray, list[BlobBox]]:
    dx, dy, dz = dims
    n_blobs = int(rng.integers(N_BLOBS[0], N_BLOBS[1] + 1))
    stamped = np.zeros((dz, dy, dx), dtype=np.float64)
    margin = int(np.ceil(BLUR_TRUNCATE * BLOB_BLUR_SIGMA))
    boxes = []
    zz, yy, xx = np.meshgrid(np.arange(dz), np.arange(dy), np.arange(dx),
                             indexing="ij")
    short_axis = min(dims)
    for _ in range(n_blobs):
        radii = rng.uniform(BLOB_RADIUS_FRAC[0] * short_axis,
                            BLOB_RADIUS_FRAC[1] * short_axis, size=3)
        center = rng.uniform(radii + 2, [dx, dy, dz] - radii - 2)
        inside = (((xx - center[0]) / radii[0]) ** 2 +
                  ((yy - center[1]) / radii[1]) ** 2 +
                  ((zz - center[2]) / radii[2]) ** 2) <= 1.0
        stamped[inside] = BLOB_INTENSITY
        lo = tuple(max(0, int(np.floor(c - r)) - margin)
                   for c, r in zip(center, radii))
        hi = tuple(min(n - 1, int(np.ceil(c + r)) + margin)
                   for c, r, n in zip(center, radii, (dx, dy, dz)))
        boxes.append(BlobBox(lo=lo, hi=hi))
    blurred = ndimage.gaussian_filter(stamped, sigma=BLOB_BLUR_SIGMA,
                                      truncate=BLUR_TRUNCATE)
    return blurred, boxes


def generate_volume(dims: tuple[int, int, int], seed_seq: np.random.SeedSequence,
                    abnormal: bool) -> SynthVolume:
    rng = np.random.default_rng(seed_seq)
    dx, dy, dz = dims
    base = _background(dims, rng)
    tubes = _tube_field(dims, rng)
    baseline = base + (TUBE_INTENSITY - base) * tubes
    if abnormal:
        blobs, boxes = _blob_field(dims, rng)
        data = np.maximum(baseline, BACKGROUND_MEAN + blobs)
        # additive outside-of-box leakage must be exactly zero
        data = baseline + np.where(blobs > 0, data - baseline, 0.0)
    else:
        blobs, boxes = None, []
        data = baseline
    return SynthVolume(volume=Volume(data[..., np.newaxis], spacing=(1.0, 1.0, 1.0)),
                       baseline=Volume(baseline[..., np.newaxis], spacing=(1.0, 1.0, 1.0)),
                       label=1 if abnormal else -1,
                       blob_boxes=boxes)


def generate_dataset(n_normal: int, n_abnormal: int, dims: tuple[int, int, int],
                     seed: int) -> list[tuple[str, SynthVolume]]:
    """Deterministic list of (volume id, SynthVolume), normals first."""
    out = []
    for i in range(n_normal):
        sv = generate_volume(dims, np.random.SeedSequence([seed, 0, i]), abnormal=False)
        out.append((f"normal_{i:03d}", sv))
    for i in range(n_abnormal):
        sv = generate_volume(dims, np.random.SeedSequence([seed, 1, i]), abnormal=True)
        out.append((f"abnormal_{i:03d}", sv))
    return out


def auto_markers(volume_id: str, sv: SynthVolume, n_per_label: int = 40,
                 seed: int = 0) -> MarkerSet:
    """Place markers from the generator's ground truth.

    Abnormal markers sample voxels inside blob cores; normal markers
    sample dark background away from blobs and tubes.
    """
    stable_id = zlib.crc32(volume_id.encode())
    rng = np.random.default_rng(np.random.SeedSequence([seed, stable_id]))
    data = sv.volume.data[..., 0]
    dx, dy, dz = sv.volume.dims
    markers = []
    if sv.blob_boxes:
        abn = []
        per_box = max(1, n_per_label // len(sv.blob_boxes))
        for box in sv.blob_boxes:
            cx = (box.lo[0] + box.hi[0]) // 2
            cy = (box.lo[1] + box.hi[1]) // 2
            cz = (box.lo[2] + box.hi[2]) // 2
            for _ in range(per_box):
                x = int(np.clip(cx + rng.integers(-3, 4), 0, dx - 1))
                y = int(np.clip(cy + rng.integers(-3, 4), 0, dy - 1))
                z = int(np.clip(cz + rng.integers(-3, 4), 0, dz - 1))
                abn.append((x, y, z))
        markers.append(Marker(label="abnormal", voxels=sorted(set(abn))))
    # exact blob support from the paired baseline, tighter than the boxes
    blob_free = sv.volume.data[..., 0] == sv.baseline.data[..., 0]

    def outside_blobs(x, y, z):
        return bool(blob_free[z, y, x])

    # dark parenchyma-like background, away from blobs
    norm = []
    tries = 0
    while len(norm) < n_per_label and tries < 50 * n_per_label:
        tries += 1
        x, y, z = (int(rng.integers(0, n)) for n in (dx, dy, dz))
        if data[z, y, x] < BACKGROUND_MEAN + 3 * BACKGROUND_WOBBLE and \
                outside_blobs(x, y, z):
            norm.append((x, y, z))
    markers.append(Marker(label="normal", voxels=sorted(set(norm))))

    # bright vessel-like tubes are normal anatomy too; marking them teaches
    # the kernels to tell them apart from the blob pattern
    bright = np.argwhere(data > 0.8 * TUBE_INTENSITY)   # (z, y, x) rows
    bright = [(int(x), int(y), int(z)) for z, y, x in bright
              if outside_blobs(int(x), int(y), int(z))]
    if bright:
        picks = rng.choice(len(bright), size=min(n_per_label, len(bright)),
                           replace=False)
        markers.append(Marker(label="normal",
                              voxels=sorted(bright[i] for i in picks)))
    return MarkerSet(volume_id=volume_id, markers=markers)


def write_dataset(entries: list[tuple[str, SynthVolume]], out_dir: str,
                  dims: tuple[int, int, int], seed: int) -> str:
    """Write VVF volumes plus a label manifest; returns the manifest path."""
    from .volcore import save_volume
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"seed": seed, "dims": list(dims), "images": []}
    for vid, sv in entries:
        path = os.path.join(out_dir, f"{vid}.vvf.json")
        save_volume(sv.volume, path, dtype="f32")
        manifest["images"].append({
            "id": vid,
            "patient": vid,
            "label": "abnormal" if sv.label > 0 else "normal",
            "file": f"{vid}.vvf.json",
            "blob_boxes": [{"lo": list(b.lo), "hi": list(b.hi)}
                           for b in sv.blob_boxes],
        })
    manifest_path = os.path.join(out_dir, "manifest.json")
    _atomic_write_bytes(manifest_path,
                        json.dumps(manifest, sort_keys=True, indent=1).encode())
    return manifest_path
