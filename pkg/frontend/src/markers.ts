/** Marker set serialization matching the service's JSON byte-for-byte. */

import type { MarkerSet } from './types.js';

/**
 * Serialize with the exact field order and compact separators the
 * service uses, so a PUT followed by a GET returns identical bytes.
 */
export function serializeMarkerSet(set: MarkerSet): string {
  return JSON.stringify({
    volume_id: set.volume_id,
    markers: set.markers.map((m) => ({ label: m.label, voxels: m.voxels })),
  });
}

/** Parse a service response, checking the coordinate invariants. */
export function parseMarkerSet(text: string): MarkerSet {
  const raw = JSON.parse(text) as MarkerSet;
  if (typeof raw.volume_id !== 'string' || !Array.isArray(raw.markers)) {
    throw new Error('malformed marker set payload');
  }
  for (const marker of raw.markers) {
    for (const voxel of marker.voxels) {
      if (voxel.length !== 3 || voxel.some((c) => !Number.isInteger(c))) {
        throw new Error(`non-integer voxel in marker "${marker.label}"`);
      }
    }
  }
  return raw;
}

/** True when every voxel lies inside the volume. */
export function inBounds(set: MarkerSet, dims: [number, number, number]): boolean {
  return set.markers.every((m) =>
    m.voxels.every(
      ([x, y, z]) =>
        x >= 0 && x < dims[0] && y >= 0 && y < dims[1] && z >= 0 && z < dims[2],
    ),
  );
}
