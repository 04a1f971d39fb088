// Layer stack: one canvas per server preview plus the edit overlay.
// All layers share a resolution and a single viewport transform.

export const LAYER_NAMES = [
  "image",
  "foreground",
  "background",
  "alpha",
  "composite",
] as const;
export type LayerName = (typeof LAYER_NAMES)[number];

export interface Viewport {
  scale: number;
  offsetX: number;
  offsetY: number;
}

export class CanvasLayerSet {
  active: LayerName = "composite";
  viewport: Viewport = { scale: 1, offsetX: 0, offsetY: 0 };
  private bitmaps = new Map<LayerName, ImageBitmap>();

  constructor(
    private canvas: HTMLCanvasElement,
    private overlayCanvas: HTMLCanvasElement,
  ) {}

  async loadLayer(name: LayerName, url: string): Promise<void> {
    const r = await fetch(url);
    if (!r.ok) throw new Error(`preview ${name} failed: HTTP ${r.status}`);
    const bitmap = await createImageBitmap(await r.blob());
    this.bitmaps.get(name)?.close();
    this.bitmaps.set(name, bitmap);
  }

  /** Refresh every preview from the same state so the visible layers always
   *  agree on the iteration index. */
  async syncAll(urlFor: (layer: LayerName) => string): Promise<void> {
    await Promise.all(LAYER_NAMES.map((n) => this.loadLayer(n, urlFor(n))));
    this.render();
  }

  zoomAt(px: number, py: number, factor: number): void {
    const v = this.viewport;
    const next = Math.min(32, Math.max(0.05, v.scale * factor));
    const real = next / v.scale;
    v.offsetX = px - (px - v.offsetX) * real;
    v.offsetY = py - (py - v.offsetY) * real;
    v.scale = next;
    this.render();
  }

  pan(dx: number, dy: number): void {
    this.viewport.offsetX += dx;
    this.viewport.offsetY += dy;
    this.render();
  }

  resetView(): void {
    this.viewport = { scale: 1, offsetX: 0, offsetY: 0 };
    this.render();
  }

  /** Canvas pixel -> image pixel under the current viewport. */
  toImage(px: number, py: number): { x: number; y: number } {
    const v = this.viewport;
    return { x: (px - v.offsetX) / v.scale, y: (py - v.offsetY) / v.scale };
  }

  render(): void {
    const ctx = this.canvas.getContext("2d");
    if (!ctx) return;
    ctx.save();
    ctx.fillStyle = "#20242a";
    ctx.fillRect(0, 0, this.canvas.width, this.canvas.height);
    const bitmap = this.bitmaps.get(this.active);
    if (bitmap) {
      const v = this.viewport;
      ctx.imageSmoothingEnabled = v.scale < 3;
      ctx.setTransform(v.scale, 0, 0, v.scale, v.offsetX, v.offsetY);
      ctx.drawImage(bitmap, 0, 0);
    }
    ctx.restore();
  }

  /** Draw the uncommitted edit accumulation as a translucent tint. */
  renderOverlay(mask: Uint8Array, width: number, height: number): void {
    const ctx = this.overlayCanvas.getContext("2d");
    if (!ctx) return;
    ctx.save();
    ctx.clearRect(0, 0, this.overlayCanvas.width, this.overlayCanvas.height);
    const image = ctx.createImageData(width, height);
    for (let i = 0; i < mask.length; i++) {
      if (mask[i]) {
        image.data[i * 4] = 255;
        image.data[i * 4 + 1] = 64;
        image.data[i * 4 + 2] = 32;
        image.data[i * 4 + 3] = 96;
      }
    }
    const tmp = document.createElement("canvas");
    tmp.width = width;
    tmp.height = height;
    tmp.getContext("2d")!.putImageData(image, 0, 0);
    const v = this.viewport;
    ctx.setTransform(v.scale, 0, 0, v.scale, v.offsetX, v.offsetY);
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(tmp, 0, 0);
    ctx.restore();
  }

  clearOverlay(): void {
    const ctx = this.overlayCanvas.getContext("2d");
    ctx?.clearRect(0, 0, this.overlayCanvas.width, this.overlayCanvas.height);
  }
}
