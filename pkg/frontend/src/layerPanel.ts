/** Layer form validation and conversion to the service's spec JSON. */

import type { ConvLayerSpecJson } from './types.js';

export interface LayerForm {
  nKernels: number;
  kernelShape: [number, number, number];
  dilation: number;
  poolStride: number;
  poolSize: number | null;
  kmeansK: number;
  seed: number;
}

/** The stock two-kernel 3x3x3 dilated layer. */
export function defaultLayerForm(seed = 0): LayerForm {
  return {
    nKernels: 2,
    kernelShape: [3, 3, 3],
    dilation: 3,
    poolStride: 4,
    poolSize: null,
    kmeansK: 2,
    seed,
  };
}

/** Human-readable problems, empty when the form can be submitted. */
export function validateLayerForm(form: LayerForm): string[] {
  const problems: string[] = [];
  if (!Number.isInteger(form.nKernels) || form.nKernels < 1) {
    problems.push('kernel count must be a positive integer');
  }
  for (const dim of form.kernelShape) {
    if (!Number.isInteger(dim) || dim < 1 || dim % 2 === 0) {
      problems.push(`kernel dims must be odd positive integers, got ${dim}`);
      break;
    }
  }
  if (!Number.isInteger(form.dilation) || form.dilation < 1) {
    problems.push('dilation must be a positive integer');
  }
  if (!Number.isInteger(form.poolStride) || form.poolStride < 1) {
    problems.push('pool stride must be a positive integer');
  }
  if (form.poolSize !== null && (!Number.isInteger(form.poolSize) || form.poolSize < 1)) {
    problems.push('pool size must be a positive integer or blank');
  }
  if (!Number.isInteger(form.kmeansK) || form.kmeansK < 1) {
    problems.push('k-means k must be a positive integer');
  }
  if (!Number.isInteger(form.seed)) {
    problems.push('seed must be an integer');
  }
  return problems;
}

/** Convert a validated form into the POST /session/layers body. */
export function formToSpec(form: LayerForm): ConvLayerSpecJson {
  const problems = validateLayerForm(form);
  if (problems.length > 0) {
    throw new Error(problems.join('; '));
  }
  return {
    n_kernels: form.nKernels,
    patch: { shape: form.kernelShape, dilation: form.dilation },
    pool_stride: form.poolStride,
    pool_size: form.poolSize,
    kmeans_k: form.kmeansK,
    seed: form.seed,
  };
}
