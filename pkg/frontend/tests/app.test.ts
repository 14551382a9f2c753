// @vitest-environment happy-dom
import { beforeEach, describe, expect, it, vi } from 'vitest';

import { ApiClient } from '../src/api.js';
import { ExplorerApp } from '../src/app.js';
import type { CounterfactualResponse, ModelInfo, UploadResponse } from '../src/types.js';

const modelInfo: ModelInfo = {
  graph: { variables: [], edges: [], image_parents: ['b', 'v', 'g'] },
  grid: { dims: [64, 64, 64], spacing: 3.0 },
  style_dim: 8,
  volumes: ['brain', 'gm', 'ventricle'],
  cache: { inversions: { hits: 0, misses: 0 }, responses: { hits: 0, misses: 0 } },
};

const upload: UploadResponse = {
  image_id: 'img-1',
  dims: [64, 64, 64],
  spacing: 3.0,
  volumes: { brain: 1354, gm: 527, ventricle: 41 },
};

function response(partial: Partial<CounterfactualResponse> = {}): CounterfactualResponse {
  return {
    image_id: 'img-1',
    result_image_id: 'img-2',
    interventions: { m: 30 },
    mode: 'exact',
    factual_volumes: upload.volumes,
    counterfactual_volumes: { brain: 1358, gm: 560, ventricle: 29 },
    measured_counterfactual_volumes: { brain: 1357.5, gm: 559.2, ventricle: 29.4 },
    volume_deltas_ml: { brain: 3.5, gm: 32.2, ventricle: -11.6 },
    volume_deltas_percent: { brain: 0.26, gm: 6.1, ventricle: -28.3 },
    factual_evidence: {},
    counterfactual_evidence: {},
    defaulted_evidence: ['a', 's'],
    ssim: 0.93,
    inversion: { l1_error: 2e-4, converged: true },
    ...partial,
  };
}

function makeApp() {
  const api = new ApiClient('http://svc');
  vi.spyOn(api, 'modelInfo').mockResolvedValue(modelInfo);
  vi.spyOn(api, 'uploadVolume').mockResolvedValue(upload);
  const counterfactual = vi.spyOn(api, 'counterfactual').mockResolvedValue(response());
  const mount = document.createElement('main');
  document.body.replaceChildren(mount);
  const app = new ExplorerApp(api, mount);
  return { app, api, mount, counterfactual };
}

describe('ExplorerApp', () => {
  beforeEach(() => {
    document.body.replaceChildren();
  });

  it('boots from model info and renders controls', async () => {
    const { app, mount } = makeApp();
    await app.boot();
    expect(mount.querySelector('#apply')).toBeTruthy();
    expect(mount.querySelector('#axis')).toBeTruthy();
  });

  it('warns instead of sending on an empty draft', async () => {
    const { app, mount, counterfactual } = makeApp();
    await app.boot();
    await app.uploadFile(new ArrayBuffer(8));
    await app.apply();
    expect(counterfactual).not.toHaveBeenCalled();
    expect(mount.querySelector('#message')?.textContent).toContain('empty intervention');
  });

  it('applies an intervention, renders deltas, and swaps the right pane', async () => {
    const { app, mount } = makeApp();
    await app.boot();
    await app.uploadFile(new ArrayBuffer(8));
    app.state.draft = { ...app.state.draft, useMmse: true, mmse: 30 };
    await app.apply();
    const ventRow = mount.querySelector('tr[data-volume="ventricle"]');
    expect(ventRow).toBeTruthy();
    expect(Number(ventRow!.querySelector('.delta-ml')!.textContent)).toBeLessThan(0);
    const counterfactualPane = mount.querySelector('#counterfactual-slice');
    expect(counterfactualPane?.getAttribute('src')).toContain('img-2');
    expect(mount.querySelector('#ssim')?.textContent).toContain('0.93');
  });

  it('appends history and replays the identical request', async () => {
    const { app, mount, counterfactual } = makeApp();
    await app.boot();
    await app.uploadFile(new ArrayBuffer(8));
    app.state.draft = { ...app.state.draft, useMmse: true, mmse: 30 };
    await app.apply();
    expect(app.state.history).toHaveLength(1);
    await app.replay(0);
    expect(counterfactual).toHaveBeenCalledTimes(2);
    expect(counterfactual.mock.calls[0]![0]).toEqual(counterfactual.mock.calls[1]![0]);
    // identical deltas: no mismatch message
    expect(mount.querySelector('#message')?.textContent ?? '').not.toContain('mismatch');
    expect(app.state.history).toHaveLength(2); // replays append too
  });

  it('flags replay mismatches when the server answer changed', async () => {
    const { app, api, mount } = makeApp();
    await app.boot();
    await app.uploadFile(new ArrayBuffer(8));
    app.state.draft = { ...app.state.draft, useMmse: true, mmse: 30 };
    await app.apply();
    vi.spyOn(api, 'counterfactual').mockResolvedValue(
      response({ volume_deltas_ml: { brain: 0, gm: 0, ventricle: 0 } }),
    );
    await app.replay(0);
    expect(mount.querySelector('#message')?.textContent).toContain('mismatch');
  });

  it('surfaces server errors inline', async () => {
    const { app, api, mount } = makeApp();
    await app.boot();
    await app.uploadFile(new ArrayBuffer(8));
    app.state.draft = { ...app.state.draft, useMmse: true, mmse: 30 };
    const { ApiError } = await import('../src/api.js');
    vi.spyOn(api, 'counterfactual').mockRejectedValue(
      new ApiError(400, { code: 'invalid_intervention', message: 'm outside [0, 30]' }),
    );
    await app.apply();
    expect(mount.querySelector('#message')?.textContent).toContain('invalid_intervention');
  });

  it('scrubbing the index updates both panes in lockstep', async () => {
    const { app, mount } = makeApp();
    await app.boot();
    await app.uploadFile(new ArrayBuffer(8));
    app.state.draft = { ...app.state.draft, useMmse: true, mmse: 30 };
    await app.apply();
    const slider = mount.querySelector('#slice-index') as HTMLInputElement;
    slider.value = '20';
    slider.dispatchEvent(new Event('input'));
    const factual = mount.querySelector('#factual-slice')!.getAttribute('src')!;
    const counter = mount.querySelector('#counterfactual-slice')!.getAttribute('src')!;
    expect(factual).toContain('index=20');
    expect(counter).toContain('index=20');
    expect(factual).toContain('img-1');
    expect(counter).toContain('img-2');
  });

  it('axis switch recenters the index from model info', async () => {
    const { app, mount } = makeApp();
    await app.boot();
    await app.uploadFile(new ArrayBuffer(8));
    const axis = mount.querySelector('#axis') as HTMLSelectElement;
    axis.value = 'coronal';
    axis.dispatchEvent(new Event('change'));
    expect(app.state.slice.axis).toBe('coronal');
    expect(app.state.slice.index).toBe(32);
  });
});
