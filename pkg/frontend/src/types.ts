/** Payload types for the causal-voxel HTTP API. */

export type VolumeName = 'brain' | 'gm' | 'ventricle';
export type Axis = 'sagittal' | 'coronal' | 'axial';
export type EditMode = 'exact' | 'paper_literal';

export interface ModelInfo {
  graph: {
    variables: { name: string; kind: string; bounds: [number, number] | null }[];
    edges: [string, string][];
    image_parents: string[];
  };
  grid: { dims: [number, number, number]; spacing: number };
  style_dim: number;
  volumes: VolumeName[];
  cache: {
    inversions: { hits: number; misses: number };
    responses: { hits: number; misses: number };
  };
}

export interface UploadResponse {
  image_id: string;
  dims: [number, number, number];
  spacing: number;
  volumes: Record<VolumeName, number>;
}

export interface CounterfactualRequest {
  image_id: string;
  interventions: Record<string, number>;
  mode: EditMode;
}

export interface CounterfactualResponse {
  image_id: string;
  result_image_id: string;
  interventions: Record<string, number>;
  mode: EditMode;
  factual_volumes: Record<VolumeName, number>;
  counterfactual_volumes: Record<VolumeName, number>;
  measured_counterfactual_volumes: Record<VolumeName, number>;
  volume_deltas_ml: Record<VolumeName, number>;
  volume_deltas_percent: Record<VolumeName, number>;
  factual_evidence: Record<string, number>;
  counterfactual_evidence: Record<string, number>;
  defaulted_evidence: string[];
  ssim: number;
  inversion: { l1_error: number; converged: boolean };
}

export interface ApiErrorBody {
  code: string;
  message: string;
  details?: Record<string, unknown>;
}
