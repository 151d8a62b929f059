/** Shared types mirroring the session API's JSON payloads. */

export type MarkerLabel = 'normal' | 'abnormal';

export interface Marker {
  label: MarkerLabel;
  /** (x, y, z) integer voxel coordinates. */
  voxels: [number, number, number][];
}

export interface MarkerSet {
  volume_id: string;
  markers: Marker[];
}

export interface VolumeInfo {
  id: string;
  /** (dx, dy, dz). */
  dims: [number, number, number];
  label: MarkerLabel;
}

export interface PatchSpecJson {
  shape: [number, number, number];
  dilation: number;
}

export interface ConvLayerSpecJson {
  n_kernels: number;
  patch: PatchSpecJson;
  pool_stride: number;
  pool_size: number | null;
  kmeans_k: number;
  seed: number;
}

export interface EvalReport {
  accuracy: number;
  kappa: number;
  confusion: number[][];
}

export interface HistoryEntry {
  spec: ConvLayerSpecJson;
  report: EvalReport;
}

export interface SessionInfo {
  marker_ids: string[];
  validation_ids: string[];
  depth: number;
  status: string;
  history: HistoryEntry[];
}

export interface ApiError {
  error: string;
  message: string;
}

export interface BrushState {
  label: MarkerLabel;
  /** Disc radius in voxels; 0 paints a single voxel. */
  radius: number;
  /** 0 = sagittal (x), 1 = coronal (y), 2 = axial (z). Painting is axial only. */
  axis: 0 | 1 | 2;
  index: number;
  windowLo: number;
  windowHi: number;
}

/** Everything the UI renders, rebuilt purely from service GETs. */
export interface SessionView {
  volumes: VolumeInfo[];
  overlays: Map<string, MarkerSet>;
  session: SessionInfo;
}
