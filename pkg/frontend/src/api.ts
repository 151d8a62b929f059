/** Typed client for the session API. */

import { parseMarkerSet, serializeMarkerSet } from './markers.js';
import type {
  ApiError,
  ConvLayerSpecJson,
  EvalReport,
  MarkerSet,
  SessionInfo,
  VolumeInfo,
} from './types.js';

export class ApiRequestError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

async function raiseFor(response: Response): Promise<never> {
  let code = 'unknown';
  let message = `HTTP ${response.status}`;
  try {
    const body = (await response.json()) as ApiError;
    code = body.error ?? code;
    message = body.message ?? message;
  } catch {
    // non-JSON error body; keep the defaults
  }
  throw new ApiRequestError(response.status, code, message);
}

export interface SliceQuery {
  axis?: number;
  index?: number;
  windowLo?: number;
  windowHi?: number;
  channel?: number;
}

export class StudioClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  private async get(path: string): Promise<Response> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`);
    if (!response.ok) {
      await raiseFor(response);
    }
    return response;
  }

  async listVolumes(): Promise<VolumeInfo[]> {
    return (await this.get('/volumes')).json();
  }

  sliceUrl(volumeId: string, query: SliceQuery = {}): string {
    const params = new URLSearchParams();
    if (query.axis !== undefined) params.set('axis', String(query.axis));
    if (query.index !== undefined) params.set('index', String(query.index));
    if (query.windowLo !== undefined) params.set('window_lo', String(query.windowLo));
    if (query.windowHi !== undefined) params.set('window_hi', String(query.windowHi));
    if (query.channel !== undefined) params.set('channel', String(query.channel));
    const suffix = params.size > 0 ? `?${params.toString()}` : '';
    return `${this.baseUrl}/volumes/${volumeId}/slice${suffix}`;
  }

  async fetchSlicePng(volumeId: string, query: SliceQuery = {}): Promise<Uint8Array> {
    const response = await this.fetchImpl(this.sliceUrl(volumeId, query));
    if (!response.ok) {
      await raiseFor(response);
    }
    return new Uint8Array(await response.arrayBuffer());
  }

  activationSliceUrl(
    volumeId: string,
    layer: number,
    kernel: number,
    axis: number,
    index: number,
  ): string {
    return (
      `${this.baseUrl}/volumes/${volumeId}/activations/${layer}/${kernel}/slice` +
      `?axis=${axis}&index=${index}`
    );
  }

  async getMarkers(volumeId: string): Promise<MarkerSet> {
    const response = await this.get(`/volumes/${volumeId}/markers`);
    return parseMarkerSet(await response.text());
  }

  async putMarkers(set: MarkerSet): Promise<void> {
    const response = await this.fetchImpl(
      `${this.baseUrl}/volumes/${set.volume_id}/markers`,
      {
        method: 'PUT',
        headers: { 'content-type': 'application/json' },
        body: serializeMarkerSet(set),
      },
    );
    if (!response.ok) {
      await raiseFor(response);
    }
  }

  async getSession(): Promise<SessionInfo> {
    return (await this.get('/session')).json();
  }

  async getStatus(): Promise<{ status: string; depth: number }> {
    return (await this.get('/session/status')).json();
  }

  async evaluateLayer(spec: ConvLayerSpecJson): Promise<EvalReport> {
    const response = await this.fetchImpl(`${this.baseUrl}/session/layers`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(spec),
    });
    if (!response.ok) {
      await raiseFor(response);
    }
    return response.json();
  }

  async acceptLayer(spec: ConvLayerSpecJson): Promise<void> {
    const response = await this.fetchImpl(`${this.baseUrl}/session/layers/accept`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(spec),
    });
    if (!response.ok) {
      await raiseFor(response);
    }
  }
}
