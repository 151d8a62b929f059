/** Brush rasterization: canvas drag paths to voxel coordinates. */

import type { BrushState, Marker, MarkerSet } from './types.js';

export interface SlicePoint {
  /** Column on the displayed axial slice (maps to x). */
  u: number;
  /** Row on the displayed axial slice (maps to y). */
  v: number;
}

type Voxel = [number, number, number];

function voxelKey(v: Voxel): string {
  return `${v[0]},${v[1]},${v[2]}`;
}

/**
 * Rasterize a drag path into deduplicated in-bounds voxels.
 *
 * Each path sample stamps a disc of the brush radius on the current
 * axial slice; fractional pixel positions are rounded to the nearest
 * voxel and anything outside the volume is clipped silently.  Painting
 * is axial-only, so the slice index becomes the z coordinate.
 */
export function rasterizePath(
  path: SlicePoint[],
  brush: BrushState,
  dims: [number, number, number],
): Voxel[] {
  if (brush.axis !== 2) {
    throw new Error('painting is supported on axial slices only');
  }
  if (brush.radius < 0 || !Number.isInteger(brush.index)) {
    throw new Error('brush radius must be >= 0 and slice index an integer');
  }
  const [dx, dy, dz] = dims;
  const z = brush.index;
  const out: Voxel[] = [];
  if (z < 0 || z >= dz) {
    return out;
  }
  const seen = new Set<string>();
  const r = brush.radius;
  const rCeil = Math.ceil(r);
  for (const point of path) {
    const cx = Math.round(point.u);
    const cy = Math.round(point.v);
    for (let oy = -rCeil; oy <= rCeil; oy++) {
      for (let ox = -rCeil; ox <= rCeil; ox++) {
        if (ox * ox + oy * oy > r * r) {
          continue;
        }
        const x = cx + ox;
        const y = cy + oy;
        if (x < 0 || x >= dx || y < 0 || y >= dy) {
          continue;
        }
        const voxel: Voxel = [x, y, z];
        const key = voxelKey(voxel);
        if (!seen.has(key)) {
          seen.add(key);
          out.push(voxel);
        }
      }
    }
  }
  return out;
}

/**
 * Merge freshly painted voxels into a marker set under the active label.
 *
 * Existing voxel order is preserved and duplicates are dropped, so
 * repeated strokes over the same region do not grow the set.
 */
export function mergeIntoMarkerSet(
  existing: MarkerSet,
  voxels: Voxel[],
  label: Marker['label'],
): MarkerSet {
  const markers: Marker[] = existing.markers.map((m) => ({
    label: m.label,
    voxels: [...m.voxels],
  }));
  let target = markers.find((m) => m.label === label);
  if (target === undefined) {
    target = { label, voxels: [] };
    markers.push(target);
  }
  const seen = new Set(target.voxels.map(voxelKey));
  for (const voxel of voxels) {
    const key = voxelKey(voxel);
    if (!seen.has(key)) {
      seen.add(key);
      target.voxels.push(voxel);
    }
  }
  return { volume_id: existing.volume_id, markers };
}

/** One-call convenience wrapping rasterization and merging. */
export function paintMarker(
  existing: MarkerSet,
  path: SlicePoint[],
  brush: BrushState,
  dims: [number, number, number],
): MarkerSet {
  return mergeIntoMarkerSet(existing, rasterizePath(path, brush, dims), brush.label);
}
