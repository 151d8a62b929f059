/** Client-side mirror of the server's slice windowing, for previews and tests. */

/** Linear window [lo, hi] -> [0, 255] with round-half-up and clamping. */
export function windowToU8(value: number, lo: number, hi: number): number {
  if (hi <= lo) {
    hi = lo + 1.0;
  }
  const scaled = ((value - lo) / (hi - lo)) * 255.0;
  return Math.min(255, Math.max(0, Math.floor(scaled + 0.5)));
}

/** Window a whole plane of raw intensities into an 8-bit buffer. */
export function windowPlane(
  plane: Float32Array | Float64Array | number[],
  lo: number,
  hi: number,
): Uint8Array {
  const out = new Uint8Array(plane.length);
  for (let i = 0; i < plane.length; i++) {
    out[i] = windowToU8(plane[i], lo, hi);
  }
  return out;
}
