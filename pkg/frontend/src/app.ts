// Wires the session API, layer stack and brush into the page. One mutating
// request is in flight at a time; every successful mutation refreshes all
// layers from the same state so the view never mixes iterations.

import { ApiClient, ApiError, SessionState } from "./api.js";
import { BrushState, EditTarget, buildCommit } from "./brush.js";
import { canvasEncoder, fetchRgbPlanes, fileToBase64 } from "./encoder.js";
import { CanvasLayerSet, LAYER_NAMES, LayerName } from "./layers.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export class App {
  private api = new ApiClient("");
  private state: SessionState | null = null;
  private layers: CanvasLayerSet;
  private brush: BrushState | null = null;
  private sourceImage: Float32Array | null = null;
  private busy = false;
  private painting = false;
  private panning = false;
  private last = { x: 0, y: 0 };

  constructor() {
    this.layers = new CanvasLayerSet(
      el<HTMLCanvasElement>("view"),
      el<HTMLCanvasElement>("overlay"),
    );
    this.bindControls();
    this.setStatus("no session - choose an image and initial alpha");
    const sid = new URLSearchParams(location.hash.slice(1)).get("sid");
    if (sid) void this.restoreSession(sid);
  }

  /** Reload path: a known session id in the URL hash restores the view. */
  private async restoreSession(sid: string) {
    this.setStatus(`restoring session ${sid}...`);
    try {
      const state = await this.api.getState(sid);
      this.brush = new BrushState(state.width, state.height);
      await this.applyState(state);
      this.sourceImage = (
        await fetchRgbPlanes(this.api.previewUrl(state, "image"))
      ).data;
      this.setBusy(false);
    } catch (e) {
      this.setStatus(
        e instanceof ApiError ? `cannot restore ${sid}: ${e.body.message}` : String(e),
      );
    }
  }

  private setStatus(text: string) {
    el<HTMLSpanElement>("status").textContent = text;
  }

  private setBusy(b: boolean) {
    this.busy = b;
    for (const id of ["btn-step", "btn-step5", "btn-commit", "btn-reset"]) {
      (el<HTMLButtonElement>(id)).disabled = b || this.state === null;
    }
    this.updateCommitButton();
    for (const id of ["btn-export", "btn-export-alpha"]) {
      (el<HTMLButtonElement>(id)).disabled = this.state === null;
    }
  }

  private updateCommitButton() {
    const commit = el<HTMLButtonElement>("btn-commit");
    commit.disabled =
      this.busy || this.state === null || !this.brush || this.brush.dirtyPixels === 0;
  }

  private editTarget(): EditTarget {
    return el<HTMLSelectElement>("edit-target").value as EditTarget;
  }

  private async mutate(fn: () => Promise<SessionState>) {
    if (this.busy || !this.state) return;
    this.setBusy(true);
    try {
      const state = await fn();
      await this.applyState(state);
    } catch (e) {
      this.setStatus(e instanceof ApiError ? `${e.body.code}: ${e.body.message}` : String(e));
    } finally {
      this.setBusy(false);
    }
  }

  private async applyState(state: SessionState) {
    this.state = state;
    location.hash = `sid=${state.id}`;
    el<HTMLSpanElement>("iteration").textContent = String(state.iteration);
    await this.layers.syncAll((layer: LayerName) => this.api.previewUrl(state, layer));
    if (this.brush) this.layers.renderOverlay(this.brush.mask, state.width, state.height);
    this.setStatus(`session ${state.id} - revision ${state.revision}`);
  }

  private bindControls() {
    el<HTMLFormElement>("create-form").addEventListener("submit", (ev) => {
      ev.preventDefault();
      void this.createSession();
    });
    el<HTMLButtonElement>("btn-step").addEventListener("click", () =>
      this.mutate(() => this.api.step(this.state!.id, 1)),
    );
    el<HTMLButtonElement>("btn-step5").addEventListener("click", () =>
      this.mutate(() => this.api.step(this.state!.id, 5)),
    );
    el<HTMLButtonElement>("btn-reset").addEventListener("click", () =>
      this.mutate(async () => {
        const state = await this.api.reset(this.state!.id);
        this.brush?.clear();
        this.layers.clearOverlay();
        return state;
      }),
    );
    el<HTMLButtonElement>("btn-commit").addEventListener("click", () => void this.commit());
    el<HTMLButtonElement>("btn-export").addEventListener("click", () => {
      if (!this.state) return;
      const bg = el<HTMLSelectElement>("export-bg").value;
      this.download(this.api.exportUrl(this.state.id, "composite", bg || undefined, 16));
    });
    el<HTMLButtonElement>("btn-export-alpha").addEventListener("click", () => {
      if (!this.state) return;
      this.download(this.api.exportUrl(this.state.id, "alpha", undefined, 16));
    });
    el<HTMLSelectElement>("layer-select").addEventListener("change", (ev) => {
      this.layers.active = (ev.target as HTMLSelectElement).value as LayerName;
      this.layers.render();
    });
    el<HTMLInputElement>("brush-radius").addEventListener("input", (ev) => {
      if (this.brush) this.brush.radius = Number((ev.target as HTMLInputElement).value);
    });
    el<HTMLSelectElement>("brush-mode").addEventListener("change", (ev) => {
      if (this.brush)
        this.brush.mode = (ev.target as HTMLSelectElement).value as BrushState["mode"];
    });
    el<HTMLInputElement>("brush-color").addEventListener("input", (ev) => {
      const hex = (ev.target as HTMLInputElement).value;
      if (this.brush)
        this.brush.color = {
          r: parseInt(hex.slice(1, 3), 16) / 255,
          g: parseInt(hex.slice(3, 5), 16) / 255,
          b: parseInt(hex.slice(5, 7), 16) / 255,
        };
    });
    el<HTMLInputElement>("brush-alpha").addEventListener("input", (ev) => {
      if (this.brush) this.brush.alphaValue = Number((ev.target as HTMLInputElement).value);
    });
    this.bindCanvas();
  }

  private bindCanvas() {
    const overlay = el<HTMLCanvasElement>("overlay");
    overlay.addEventListener("wheel", (ev) => {
      ev.preventDefault();
      this.layers.zoomAt(ev.offsetX, ev.offsetY, ev.deltaY < 0 ? 1.15 : 1 / 1.15);
      if (this.brush && this.state)
        this.layers.renderOverlay(this.brush.mask, this.state.width, this.state.height);
    });
    overlay.addEventListener("pointerdown", (ev) => {
      overlay.setPointerCapture(ev.pointerId);
      if (ev.button === 1 || ev.shiftKey) {
        this.panning = true;
      } else if (this.brush) {
        this.painting = true;
        const p = this.layers.toImage(ev.offsetX, ev.offsetY);
        this.brush.stamp(p.x, p.y, this.editTarget(), this.sourceImage ?? undefined);
        this.refreshOverlay();
      }
      this.last = { x: ev.offsetX, y: ev.offsetY };
    });
    overlay.addEventListener("pointermove", (ev) => {
      if (this.panning) {
        this.layers.pan(ev.offsetX - this.last.x, ev.offsetY - this.last.y);
        this.refreshOverlay();
      } else if (this.painting && this.brush) {
        const a = this.layers.toImage(this.last.x, this.last.y);
        const b = this.layers.toImage(ev.offsetX, ev.offsetY);
        this.brush.stroke(a.x, a.y, b.x, b.y, this.editTarget(), this.sourceImage ?? undefined);
        this.refreshOverlay();
      }
      this.last = { x: ev.offsetX, y: ev.offsetY };
    });
    const stop = () => {
      this.painting = false;
      this.panning = false;
      this.updateCommitButton();
    };
    overlay.addEventListener("pointerup", stop);
    overlay.addEventListener("pointercancel", stop);
  }

  private refreshOverlay() {
    if (this.brush && this.state)
      this.layers.renderOverlay(this.brush.mask, this.state.width, this.state.height);
  }

  private async createSession() {
    const imageFile = el<HTMLInputElement>("file-image").files?.[0];
    const alphaFile = el<HTMLInputElement>("file-alpha").files?.[0];
    const trimapFile = el<HTMLInputElement>("file-trimap").files?.[0];
    if (!imageFile || !alphaFile) {
      this.setStatus("image and initial alpha are required");
      return;
    }
    this.setStatus("creating session...");
    try {
      const body: Parameters<ApiClient["createSession"]>[0] = {
        image: await fileToBase64(imageFile),
        alpha: await fileToBase64(alphaFile),
      };
      if (trimapFile) body.trimap = await fileToBase64(trimapFile);
      const state = await this.api.createSession(body);
      this.brush = new BrushState(state.width, state.height);
      await this.applyState(state);
      this.sourceImage = (
        await fetchRgbPlanes(this.api.previewUrl(state, "image"))
      ).data;
      this.setBusy(false);
    } catch (e) {
      this.setStatus(
        e instanceof ApiError ? `${e.body.code}: ${e.body.message} ${e.body.detail ?? ""}` : String(e),
      );
    }
  }

  private async commit() {
    if (!this.brush || this.brush.dirtyPixels === 0 || !this.state) return;
    const payload = buildCommit(this.brush, this.editTarget(), canvasEncoder);
    await this.mutate(async () => {
      const r = await this.api.edit(this.state!.id, payload);
      this.brush!.clear();
      this.layers.clearOverlay();
      return r.state;
    });
  }

  private download(url: string) {
    const a = document.createElement("a");
    a.href = url;
    a.download = "";
    a.click();
  }
}
