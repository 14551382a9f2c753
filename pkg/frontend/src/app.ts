/** DOM wiring for the counterfactual explorer.
 *
 * Layout: an intervention panel (sliders fire only on explicit Apply), two
 * synchronized slice panes (factual left, counterfactual right, optional
 * difference overlay), a delta table echoing the server response, and an
 * append-only history whose entries replay their recorded request.
 */

import { ApiClient, ApiError, BusyError } from './api.js';
import {
  applyResponse,
  applyUpload,
  axisDim,
  buildRequest,
  clearDraftField,
  draftIsEmpty,
  emptyDraft,
  initialState,
  replayRequest,
  sameDeltas,
  setAge,
  setMmse,
  setSex,
  setSliceAxis,
  setSliceIndex,
  setVolumeFraction,
  setWindow,
  SLIDER_BOUNDS,
  type ExplorerState,
} from './state.js';
import type { Axis, CounterfactualRequest, VolumeName } from './types.js';

const VOLUME_LABELS: Record<VolumeName, string> = {
  brain: 'Brain',
  gm: 'Grey matter',
  ventricle: 'Ventricle',
};

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  children: (Node | string)[] = [],
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) node.setAttribute(key, value);
  for (const child of children) node.append(child);
  return node;
}

export class ExplorerApp {
  state: ExplorerState = initialState();
  private root: HTMLElement;

  constructor(
    private readonly api: ApiClient,
    mount: HTMLElement,
  ) {
    this.root = mount;
  }

  async boot(): Promise<void> {
    this.state.modelInfo = await this.api.modelInfo();
    this.render();
  }

  // -- actions ---------------------------------------------------------------

  async uploadFile(bytes: ArrayBuffer): Promise<void> {
    const upload = await this.api.uploadVolume(bytes);
    this.state = applyUpload(this.state, upload);
    this.render();
  }

  /** Apply the current draft; surfaces warnings and server errors inline. */
  async apply(): Promise<void> {
    if (!this.state.imageId) {
      this.showMessage('select or upload an image first', 'warn');
      return;
    }
    if (draftIsEmpty(this.state.draft)) {
      this.showMessage('empty intervention draft: nothing to apply', 'warn');
      return;
    }
    const request = buildRequest(this.state);
    if (!request) {
      this.showMessage('draft could not be resolved against factual volumes', 'warn');
      return;
    }
    await this.send(request);
  }

  async replay(index: number): Promise<void> {
    const request = replayRequest(this.state, index);
    const entry = this.state.history[index];
    if (!request || !entry) return;
    const response = await this.send(request);
    if (response && !sameDeltas(entry, response)) {
      this.showMessage('replay mismatch: deltas differ from the recorded entry', 'error');
    }
  }

  private async send(request: CounterfactualRequest) {
    this.setApplyEnabled(false);
    try {
      const response = await this.api.counterfactual(request);
      this.state = applyResponse(this.state, request, response);
      this.render();
      return response;
    } catch (error) {
      if (error instanceof BusyError) {
        this.showMessage('a request is already running', 'warn');
      } else if (error instanceof ApiError) {
        this.showMessage(`${error.body.code}: ${error.body.message}`, 'error');
      } else {
        this.showMessage('network failure: check the service and retry', 'error');
      }
      return null;
    } finally {
      this.setApplyEnabled(true);
    }
  }

  // -- rendering ---------------------------------------------------------------

  render(): void {
    this.root.replaceChildren(
      this.renderControls(),
      this.renderViewports(),
      this.renderDeltaTable(),
      this.renderHistory(),
      el('div', { id: 'message', class: 'message' }),
    );
  }

  private renderControls(): HTMLElement {
    const draft = this.state.draft;
    const controls = el('section', { id: 'controls', class: 'panel' });

    const file = el('input', { type: 'file', id: 'upload' });
    file.addEventListener('change', async () => {
      const chosen = (file as HTMLInputElement).files?.[0];
      if (chosen) await this.uploadFile(await chosen.arrayBuffer());
    });
    controls.append(el('div', {}, ['Volume (.nii): ', file]));

    controls.append(
      this.sliderRow('age', 'Age', SLIDER_BOUNDS.age[0], SLIDER_BOUNDS.age[1], 1,
        draft.age, draft.useAge,
        (v) => (this.state.draft = setAge(draft, v)),
        () => (this.state.draft = clearDraftField(draft, 'age'))),
      this.toggleRow('sex', 'Sex (male)', draft.sex === 1, draft.useSex,
        (on) => (this.state.draft = setSex(draft, on ? 1 : 0)),
        () => (this.state.draft = clearDraftField(draft, 'sex'))),
      this.sliderRow('mmse', 'MMSE score', SLIDER_BOUNDS.mmse[0], SLIDER_BOUNDS.mmse[1], 1,
        draft.mmse, draft.useMmse,
        (v) => (this.state.draft = setMmse(draft, v)),
        () => (this.state.draft = clearDraftField(draft, 'mmse'))),
    );
    for (const volume of Object.keys(VOLUME_LABELS) as VolumeName[]) {
      const current = draft.volumeFractions[volume];
      controls.append(
        this.sliderRow(`vol-${volume}`, `${VOLUME_LABELS[volume]} volume (%)`,
          -50, 50, 1, (current ?? 0) * 100, current !== undefined,
          (v) => (this.state.draft = setVolumeFraction(this.state.draft, volume, v / 100)),
          () => (this.state.draft = clearDraftField(this.state.draft, volume))),
      );
    }

    const mode = el('select', { id: 'mode' });
    for (const value of ['exact', 'paper_literal']) {
      const option = el('option', { value }, [value]);
      if (draft.mode === value) option.setAttribute('selected', 'selected');
      mode.append(option);
    }
    mode.addEventListener('change', () => {
      this.state.draft = { ...this.state.draft, mode: (mode as HTMLSelectElement).value as never };
    });
    controls.append(el('div', {}, ['Edit mode: ', mode]));

    const apply = el('button', { id: 'apply' }, ['Apply intervention']);
    apply.addEventListener('click', () => void this.apply());
    const reset = el('button', { id: 'reset-draft' }, ['Clear draft']);
    reset.addEventListener('click', () => {
      this.state.draft = emptyDraft();
      this.render();
    });
    controls.append(el('div', { class: 'actions' }, [apply, ' ', reset]));
    return controls;
  }

  private sliderRow(
    id: string, label: string, min: number, max: number, step: number,
    value: number, enabled: boolean,
    onValue: (v: number) => void, onDisable: () => void,
  ): HTMLElement {
    const toggle = el('input', { type: 'checkbox', id: `${id}-on` }) as HTMLInputElement;
    toggle.checked = enabled;
    const slider = el('input', {
      type: 'range', id, min: String(min), max: String(max), step: String(step),
      value: String(value),
    }) as HTMLInputElement;
    const shown = el('span', { id: `${id}-value`, class: 'value' }, [String(value)]);
    // debounce display updates; the draft only matters at Apply time
    slider.addEventListener('input', () => {
      shown.textContent = slider.value;
      toggle.checked = true;
      onValue(Number(slider.value));
    });
    toggle.addEventListener('change', () => {
      if (toggle.checked) onValue(Number(slider.value));
      else onDisable();
    });
    return el('div', { class: 'slider-row' }, [toggle, `${label}: `, slider, shown]);
  }

  private toggleRow(
    id: string, label: string, value: boolean, enabled: boolean,
    onValue: (v: boolean) => void, onDisable: () => void,
  ): HTMLElement {
    const use = el('input', { type: 'checkbox', id: `${id}-on` }) as HTMLInputElement;
    use.checked = enabled;
    const box = el('input', { type: 'checkbox', id }) as HTMLInputElement;
    box.checked = value;
    box.addEventListener('change', () => {
      use.checked = true;
      onValue(box.checked);
    });
    use.addEventListener('change', () => {
      if (use.checked) onValue(box.checked);
      else onDisable();
    });
    return el('div', { class: 'slider-row' }, [use, `${label}: `, box]);
  }

  private renderViewports(): HTMLElement {
    const { slice } = this.state;
    const factualId = this.state.imageId;
    const resultId = this.state.lastResponse?.result_image_id ?? null;

    const panes = el('section', { id: 'viewports', class: 'panel' });
    const axisSelect = el('select', { id: 'axis' });
    for (const axis of ['sagittal', 'coronal', 'axial'] as Axis[]) {
      const option = el('option', { value: axis }, [axis]);
      if (axis === slice.axis) option.setAttribute('selected', 'selected');
      axisSelect.append(option);
    }
    axisSelect.addEventListener('change', () => {
      this.state = setSliceAxis(this.state, (axisSelect as HTMLSelectElement).value as Axis);
      this.render();
    });

    const dim = axisDim(this.state, slice.axis);
    const indexSlider = el('input', {
      type: 'range', id: 'slice-index', min: '0', max: String(dim - 1),
      value: String(slice.index),
    }) as HTMLInputElement;
    indexSlider.addEventListener('input', () => {
      this.state = setSliceIndex(this.state, Number(indexSlider.value));
      this.updateSliceImages();
    });

    const windowInput = el('input', {
      type: 'text', id: 'window', value: `${slice.window[0]},${slice.window[1]}`,
    }) as HTMLInputElement;
    windowInput.addEventListener('change', () => {
      const [lo, hi] = windowInput.value.split(',').map(Number);
      if (Number.isFinite(lo) && Number.isFinite(hi)) {
        this.state = setWindow(this.state, lo as number, hi as number);
        this.updateSliceImages();
      }
    });

    const diffToggle = el('input', { type: 'checkbox', id: 'diff-overlay' }) as HTMLInputElement;
    diffToggle.checked = this.state.diffOverlay;
    diffToggle.addEventListener('change', () => {
      this.state = { ...this.state, diffOverlay: diffToggle.checked };
      this.render();
    });

    panes.append(el('div', { class: 'slice-controls' }, [
      'Axis: ', axisSelect, ' Index: ', indexSlider, ' Window: ', windowInput,
      ' Difference overlay: ', diffToggle,
    ]));

    const factualPane = el('figure', { id: 'factual-pane', class: 'pane' }, [
      el('figcaption', {}, ['Factual']),
      this.sliceImage('factual-slice', factualId),
    ]);
    const rightLabel = this.state.diffOverlay ? 'Difference' : 'Counterfactual';
    const rightPane = el('figure', { id: 'counterfactual-pane', class: 'pane' }, [
      el('figcaption', {}, [rightLabel]),
      this.state.diffOverlay
        ? this.diffCanvas(factualId, resultId)
        : this.sliceImage('counterfactual-slice', resultId),
    ]);
    panes.append(el('div', { class: 'pane-row' }, [factualPane, rightPane]));
    return panes;
  }

  private sliceImage(id: string, imageId: string | null): HTMLElement {
    const { axis, index, window } = this.state.slice;
    const img = el('img', { id, alt: id, class: 'slice' });
    if (imageId) {
      img.setAttribute('src', this.api.sliceUrl(imageId, axis, index, window));
    }
    return img;
  }

  private diffCanvas(aId: string | null, bId: string | null): HTMLElement {
    const canvas = el('canvas', { id: 'diff-canvas', class: 'slice' }) as HTMLCanvasElement;
    if (aId && bId && typeof canvas.getContext === 'function') {
      void this.paintDifference(canvas, aId, bId);
    }
    return canvas;
  }

  private async paintDifference(canvas: HTMLCanvasElement, aId: string, bId: string) {
    const { axis, index, window } = this.state.slice;
    try {
      const [blobA, blobB] = await Promise.all([
        this.api.fetchSlice(aId, axis, index, window),
        this.api.fetchSlice(bId, axis, index, window),
      ]);
      const [imgA, imgB] = await Promise.all([
        createImageBitmap(blobA),
        createImageBitmap(blobB),
      ]);
      canvas.width = imgA.width;
      canvas.height = imgA.height;
      const ctx = canvas.getContext('2d');
      if (!ctx) return;
      ctx.drawImage(imgA, 0, 0);
      const a = ctx.getImageData(0, 0, canvas.width, canvas.height);
      ctx.drawImage(imgB, 0, 0);
      const b = ctx.getImageData(0, 0, canvas.width, canvas.height);
      for (let i = 0; i < a.data.length; i += 4) {
        const diff = Math.abs((a.data[i] ?? 0) - (b.data[i] ?? 0));
        b.data[i] = diff;
        b.data[i + 1] = diff;
        b.data[i + 2] = diff;
        b.data[i + 3] = 255;
      }
      ctx.putImageData(b, 0, 0);
    } catch {
      // difference rendering is best-effort; panes still show slices
    }
  }

  private updateSliceImages(): void {
    const { axis, index, window } = this.state.slice;
    const factual = this.root.querySelector('#factual-slice');
    if (factual && this.state.imageId) {
      factual.setAttribute('src', this.api.sliceUrl(this.state.imageId, axis, index, window));
    }
    const counter = this.root.querySelector('#counterfactual-slice');
    const resultId = this.state.lastResponse?.result_image_id;
    if (counter && resultId) {
      counter.setAttribute('src', this.api.sliceUrl(resultId, axis, index, window));
    }
    const indexSlider = this.root.querySelector('#slice-index') as HTMLInputElement | null;
    if (indexSlider) indexSlider.value = String(index);
  }

  private renderDeltaTable(): HTMLElement {
    const section = el('section', { id: 'deltas', class: 'panel' });
    const response = this.state.lastResponse;
    if (!response) {
      section.append(el('p', {}, ['No counterfactual yet.']));
      return section;
    }
    const table = el('table', { id: 'delta-table' });
    table.append(el('tr', {}, [
      el('th', {}, ['Volume']), el('th', {}, ['Factual (ml)']),
      el('th', {}, ['Counterfactual (ml)']), el('th', {}, ['Delta (ml)']),
      el('th', {}, ['Delta (%)']),
    ]));
    for (const volume of Object.keys(VOLUME_LABELS) as VolumeName[]) {
      table.append(el('tr', { 'data-volume': volume }, [
        el('td', {}, [VOLUME_LABELS[volume]]),
        el('td', { class: 'factual' }, [response.factual_volumes[volume].toFixed(1)]),
        el('td', { class: 'counterfactual' },
          [response.measured_counterfactual_volumes[volume].toFixed(1)]),
        el('td', { class: 'delta-ml' }, [response.volume_deltas_ml[volume].toFixed(1)]),
        el('td', { class: 'delta-percent' },
          [response.volume_deltas_percent[volume].toFixed(1)]),
      ]));
    }
    section.append(table);
    section.append(el('p', { id: 'ssim' }, [`SSIM(factual, counterfactual) = ${response.ssim.toFixed(4)}`]));
    if (response.defaulted_evidence.length > 0) {
      section.append(el('p', { class: 'note' },
        [`defaulted evidence: ${response.defaulted_evidence.join(', ')}`]));
    }
    return section;
  }

  private renderHistory(): HTMLElement {
    const section = el('section', { id: 'history', class: 'panel' });
    section.append(el('h3', {}, ['History']));
    const list = el('ol', { id: 'history-list' });
    this.state.history.forEach((entry, index) => {
      const label = Object.entries(entry.request.interventions)
        .map(([k, v]) => `${k}=${Number(v).toFixed(1)}`)
        .join(', ');
      const replay = el('button', { class: 'replay', 'data-index': String(index) },
        ['replay']);
      replay.addEventListener('click', () => void this.replay(index));
      list.append(el('li', {}, [
        `${label || '(null)'} | ssim ${entry.ssim.toFixed(3)} `, replay,
      ]));
    });
    section.append(list);
    return section;
  }

  private setApplyEnabled(enabled: boolean): void {
    const button = this.root.querySelector('#apply') as HTMLButtonElement | null;
    if (button) button.disabled = !enabled;
  }

  showMessage(text: string, kind: 'warn' | 'error' | 'info' = 'info'): void {
    const box = this.root.querySelector('#message');
    if (box) {
      box.textContent = text;
      box.setAttribute('data-kind', kind);
    }
  }
}
