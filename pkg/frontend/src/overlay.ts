/** Alpha compositing of activation maps over grayscale slices. */

/**
 * Composite one activation pixel over one base pixel.
 *
 * Standard source-over blending with a uniform opacity: opacity 0
 * returns the base unchanged, opacity 1 returns the activation value.
 * Output is rounded half up to stay consistent with the windowing.
 */
export function compositePixel(base: number, activation: number, opacity: number): number {
  if (opacity < 0 || opacity > 1) {
    throw new Error('opacity must lie in [0, 1]');
  }
  return Math.min(255, Math.max(0, Math.floor(opacity * activation + (1 - opacity) * base + 0.5)));
}

/** Composite a whole activation plane over a base plane of equal size. */
export function compositePlane(
  base: Uint8Array,
  activation: Uint8Array,
  opacity: number,
): Uint8Array {
  if (base.length !== activation.length) {
    throw new Error('base and activation planes differ in size');
  }
  const out = new Uint8Array(base.length);
  for (let i = 0; i < base.length; i++) {
    out[i] = compositePixel(base[i], activation[i], opacity);
  }
  return out;
}
