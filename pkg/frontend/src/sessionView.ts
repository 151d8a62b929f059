/** Rebuild the full UI state from service GETs alone. */

import type { StudioClient } from './api.js';
import type { MarkerSet, SessionView } from './types.js';

/**
 * Fetch everything the UI needs in one pass.  There is deliberately no
 * client-side authoritative state: reloading the page and calling this
 * again reproduces the view exactly.
 */
export async function loadSessionView(client: StudioClient): Promise<SessionView> {
  const volumes = await client.listVolumes();
  const overlays = new Map<string, MarkerSet>();
  for (const volume of volumes) {
    const markers = await client.getMarkers(volume.id);
    if (markers.markers.length > 0) {
      overlays.set(volume.id, markers);
    }
  }
  const session = await client.getSession();
  return { volumes, overlays, session };
}

/** Overlays must reference loaded volumes only. */
export function checkOverlayInvariant(view: SessionView): void {
  const known = new Set(view.volumes.map((v) => v.id));
  for (const id of view.overlays.keys()) {
    if (!known.has(id)) {
      throw new Error(`overlay references unknown volume ${id}`);
    }
  }
}
