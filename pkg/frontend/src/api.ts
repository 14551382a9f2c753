/** Thin typed client for the counterfactual service.
 *
 * Counterfactual requests are single-flight: while one is pending, further
 * apply attempts are rejected so the UI can disable its button instead of
 * queueing stale work. Slice images are plain GET URLs (the service returns
 * byte-identical PNGs, so the browser cache does the rest).
 */

import type {
  Axis,
  ApiErrorBody,
  CounterfactualRequest,
  CounterfactualResponse,
  ModelInfo,
  UploadResponse,
} from './types.js';

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly body: ApiErrorBody,
  ) {
    super(body.message);
  }
}

export class BusyError extends Error {
  constructor() {
    super('a counterfactual request is already in flight');
  }
}

async function parseError(response: Response): Promise<ApiError> {
  let body: ApiErrorBody;
  try {
    body = (await response.json()) as ApiErrorBody;
  } catch {
    body = { code: 'unknown', message: `HTTP ${response.status}` };
  }
  return new ApiError(response.status, body);
}

export class ApiClient {
  private inFlight = false;

  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  get busy(): boolean {
    return this.inFlight;
  }

  async health(): Promise<{ status: string; model_loaded: boolean }> {
    return this.getJson('/v1/health');
  }

  async modelInfo(): Promise<ModelInfo> {
    return this.getJson('/v1/model/info');
  }

  async uploadVolume(bytes: ArrayBuffer | Uint8Array): Promise<UploadResponse> {
    const response = await this.fetchImpl(`${this.baseUrl}/v1/images`, {
      method: 'POST',
      headers: { 'content-type': 'application/octet-stream' },
      body: bytes as BodyInit,
    });
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as UploadResponse;
  }

  async counterfactual(request: CounterfactualRequest): Promise<CounterfactualResponse> {
    if (this.inFlight) throw new BusyError();
    this.inFlight = true;
    try {
      const response = await this.fetchImpl(`${this.baseUrl}/v1/counterfactual`, {
        method: 'POST',
        headers: { 'content-type': 'application/json' },
        body: JSON.stringify(request),
      });
      if (!response.ok) throw await parseError(response);
      return (await response.json()) as CounterfactualResponse;
    } finally {
      this.inFlight = false;
    }
  }

  sliceUrl(imageId: string, axis: Axis, index: number, window: [number, number]): string {
    const params = new URLSearchParams({
      axis,
      index: String(index),
      window: `${window[0]},${window[1]}`,
    });
    return `${this.baseUrl}/v1/images/${imageId}/slice?${params.toString()}`;
  }

  async fetchSlice(
    imageId: string,
    axis: Axis,
    index: number,
    window: [number, number],
    signal?: AbortSignal,
  ): Promise<Blob> {
    const response = await this.fetchImpl(this.sliceUrl(imageId, axis, index, window), {
      signal,
    });
    if (!response.ok) throw await parseError(response);
    return response.blob();
  }

  private async getJson<T>(path: string): Promise<T> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`);
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as T;
  }
}
