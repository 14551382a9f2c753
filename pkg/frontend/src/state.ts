/** Explorer state and its pure transitions.
 *
 * The UI never computes science: every displayed number is echoed from a
 * server response. The only client-side arithmetic is request building
 * (turning a relative volume slider into an absolute target using the
 * server-reported factual volume) and slice-index clamping against the
 * server-reported grid. History is append-only within a session, and a
 * replay re-issues the recorded request verbatim.
 */

import type {
  Axis,
  CounterfactualRequest,
  CounterfactualResponse,
  EditMode,
  ModelInfo,
  UploadResponse,
  VolumeName,
} from './types.js';

export const SLIDER_BOUNDS = {
  age: [50, 95] as const,
  mmse: [0, 30] as const,
  volumeFraction: [-0.5, 0.5] as const,
};

export interface InterventionDraft {
  useAge: boolean;
  age: number;
  useSex: boolean;
  sex: 0 | 1;
  useMmse: boolean;
  mmse: number;
  volumeFractions: Partial<Record<VolumeName, number>>;
  mode: EditMode;
}

export interface HistoryEntry {
  request: CounterfactualRequest;
  deltasMl: Record<VolumeName, number>;
  deltasPercent: Record<VolumeName, number>;
  ssim: number;
  resultImageId: string;
}

export interface SliceCursor {
  axis: Axis;
  index: number;
  window: [number, number];
}

export interface ExplorerState {
  modelInfo: ModelInfo | null;
  imageId: string | null;
  factualVolumes: Record<VolumeName, number> | null;
  draft: InterventionDraft;
  lastResponse: CounterfactualResponse | null;
  history: HistoryEntry[];
  slice: SliceCursor;
  diffOverlay: boolean;
}

export function initialState(): ExplorerState {
  return {
    modelInfo: null,
    imageId: null,
    factualVolumes: null,
    draft: emptyDraft(),
    lastResponse: null,
    history: [],
    slice: { axis: 'axial', index: 0, window: [0, 1] },
    diffOverlay: false,
  };
}

export function emptyDraft(): InterventionDraft {
  return {
    useAge: false,
    age: 72,
    useSex: false,
    sex: 0,
    useMmse: false,
    mmse: 25,
    volumeFractions: {},
    mode: 'exact',
  };
}

function clamp(value: number, lo: number, hi: number): number {
  return Math.min(Math.max(value, lo), hi);
}

export function setAge(draft: InterventionDraft, value: number): InterventionDraft {
  const [lo, hi] = SLIDER_BOUNDS.age;
  return { ...draft, useAge: true, age: clamp(value, lo, hi) };
}

export function setMmse(draft: InterventionDraft, value: number): InterventionDraft {
  const [lo, hi] = SLIDER_BOUNDS.mmse;
  return { ...draft, useMmse: true, mmse: clamp(value, lo, hi) };
}

export function setSex(draft: InterventionDraft, value: 0 | 1): InterventionDraft {
  return { ...draft, useSex: true, sex: value };
}

export function setVolumeFraction(
  draft: InterventionDraft,
  volume: VolumeName,
  fraction: number,
): InterventionDraft {
  const [lo, hi] = SLIDER_BOUNDS.volumeFraction;
  return {
    ...draft,
    volumeFractions: { ...draft.volumeFractions, [volume]: clamp(fraction, lo, hi) },
  };
}

export function clearDraftField(
  draft: InterventionDraft,
  field: 'age' | 'sex' | 'mmse' | VolumeName,
): InterventionDraft {
  if (field === 'age') return { ...draft, useAge: false };
  if (field === 'sex') return { ...draft, useSex: false };
  if (field === 'mmse') return { ...draft, useMmse: false };
  const fractions = { ...draft.volumeFractions };
  delete fractions[field];
  return { ...draft, volumeFractions: fractions };
}

export function draftIsEmpty(draft: InterventionDraft): boolean {
  return (
    !draft.useAge &&
    !draft.useSex &&
    !draft.useMmse &&
    Object.keys(draft.volumeFractions).length === 0
  );
}

const VOLUME_VARIABLE: Record<VolumeName, string> = {
  brain: 'brain',
  gm: 'gm',
  ventricle: 'ventricle',
};

/** Build the intervention request from the draft, or null for an empty
 * draft (the caller shows a no-op warning and sends nothing). Relative
 * volume sliders resolve against the server-reported factual volumes. */
export function buildRequest(state: ExplorerState): CounterfactualRequest | null {
  if (!state.imageId || draftIsEmpty(state.draft)) return null;
  const interventions: Record<string, number> = {};
  const draft = state.draft;
  if (draft.useAge) interventions['age'] = draft.age;
  if (draft.useSex) interventions['sex'] = draft.sex;
  if (draft.useMmse) interventions['mmse'] = draft.mmse;
  for (const [volume, fraction] of Object.entries(draft.volumeFractions)) {
    const factual = state.factualVolumes?.[volume as VolumeName];
    if (factual === undefined) return null;
    interventions[VOLUME_VARIABLE[volume as VolumeName]] = factual * (1 + fraction);
  }
  return { image_id: state.imageId, interventions, mode: draft.mode };
}

export function applyUpload(state: ExplorerState, upload: UploadResponse): ExplorerState {
  return {
    ...state,
    imageId: upload.image_id,
    factualVolumes: upload.volumes,
    lastResponse: null,
    slice: { ...state.slice, index: centerIndex(state, state.slice.axis) },
  };
}

export function applyResponse(
  state: ExplorerState,
  request: CounterfactualRequest,
  response: CounterfactualResponse,
): ExplorerState {
  const entry: HistoryEntry = {
    request,
    deltasMl: response.volume_deltas_ml,
    deltasPercent: response.volume_deltas_percent,
    ssim: response.ssim,
    resultImageId: response.result_image_id,
  };
  return { ...state, lastResponse: response, history: [...state.history, entry] };
}

/** The request to re-issue for a history entry; the server is
 * deterministic, so the replayed response reproduces the recorded deltas. */
export function replayRequest(state: ExplorerState, index: number): CounterfactualRequest | null {
  const entry = state.history[index];
  return entry ? entry.request : null;
}

export function sameDeltas(entry: HistoryEntry, response: CounterfactualResponse): boolean {
  const keys: VolumeName[] = ['brain', 'gm', 'ventricle'];
  return (
    keys.every((k) => entry.deltasMl[k] === response.volume_deltas_ml[k]) &&
    keys.every((k) => entry.deltasPercent[k] === response.volume_deltas_percent[k]) &&
    entry.ssim === response.ssim
  );
}

export function axisDim(state: ExplorerState, axis: Axis): number {
  const dims = state.modelInfo?.grid.dims;
  if (!dims) return 1;
  return axis === 'sagittal' ? dims[0] : axis === 'coronal' ? dims[1] : dims[2];
}

export function centerIndex(state: ExplorerState, axis: Axis): number {
  return Math.floor(axisDim(state, axis) / 2);
}

/** Clamp a slice index into the server-reported valid range for the axis. */
export function clampIndex(state: ExplorerState, axis: Axis, index: number): number {
  return clamp(Math.round(index), 0, axisDim(state, axis) - 1);
}

export function setSliceAxis(state: ExplorerState, axis: Axis): ExplorerState {
  return { ...state, slice: { ...state.slice, axis, index: centerIndex(state, axis) } };
}

export function setSliceIndex(state: ExplorerState, index: number): ExplorerState {
  return {
    ...state,
    slice: { ...state.slice, index: clampIndex(state, state.slice.axis, index) },
  };
}

export function setWindow(state: ExplorerState, lo: number, hi: number): ExplorerState {
  if (!(lo < hi)) return state;
  return { ...state, slice: { ...state.slice, window: [lo, hi] } };
}
