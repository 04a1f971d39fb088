// Brush state and edit accumulation, kept DOM-free so it is unit-testable.
// Accumulated strokes build a mask plus replacement values; commit sends
// exactly that accumulation and clears it.

export type BrushMode = "paint" | "clone" | "erase";
export type EditTarget = "foreground" | "background" | "alpha";

export interface RGB {
  r: number;
  g: number;
  b: number;
}

export class BrushState {
  radius = 8;
  mode: BrushMode = "paint";
  color: RGB = { r: 0.5, g: 0.5, b: 0.5 };
  alphaValue = 1.0;

  readonly width: number;
  readonly height: number;
  mask: Uint8Array;
  values: Float32Array; // 3 channels, rgb interleaved

  constructor(width: number, height: number) {
    this.width = width;
    this.height = height;
    this.mask = new Uint8Array(width * height);
    this.values = new Float32Array(width * height * 3);
  }

  get dirtyPixels(): number {
    let n = 0;
    for (let i = 0; i < this.mask.length; i++) n += this.mask[i];
    return n;
  }

  clear(): void {
    this.mask.fill(0);
    this.values.fill(0);
  }

  /** Stamp one brush dab at integer canvas coordinates.
   *  `sourceImage` feeds clone mode (rgb interleaved, same size). */
  stamp(cx: number, cy: number, target: EditTarget, sourceImage?: Float32Array): void {
    const r = this.radius;
    const r2 = r * r;
    const x0 = Math.max(0, Math.ceil(cx - r));
    const x1 = Math.min(this.width - 1, Math.floor(cx + r));
    const y0 = Math.max(0, Math.ceil(cy - r));
    const y1 = Math.min(this.height - 1, Math.floor(cy + r));
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        const dy = y - cy;
        if (dx * dx + dy * dy > r2) continue;
        const idx = y * this.width + x;
        if (this.mode === "erase") {
          this.mask[idx] = 0;
          continue;
        }
        this.mask[idx] = 1;
        let v: RGB;
        if (this.mode === "clone") {
          if (!sourceImage) continue;
          v = {
            r: sourceImage[idx * 3],
            g: sourceImage[idx * 3 + 1],
            b: sourceImage[idx * 3 + 2],
          };
        } else if (target === "alpha") {
          v = { r: this.alphaValue, g: this.alphaValue, b: this.alphaValue };
        } else {
          v = this.color;
        }
        this.values[idx * 3] = v.r;
        this.values[idx * 3 + 1] = v.g;
        this.values[idx * 3 + 2] = v.b;
      }
    }
  }

  /** Stamp along a segment so fast pointer moves leave no gaps. */
  stroke(
    x0: number,
    y0: number,
    x1: number,
    y1: number,
    target: EditTarget,
    sourceImage?: Float32Array,
  ): void {
    const dist = Math.hypot(x1 - x0, y1 - y0);
    const steps = Math.max(1, Math.ceil(dist / Math.max(1, this.radius / 2)));
    for (let i = 0; i <= steps; i++) {
      const t = i / steps;
      this.stamp(x0 + (x1 - x0) * t, y0 + (y1 - y0) * t, target, sourceImage);
    }
  }
}

/** Encoders turn raw accumulation planes into base64 PNG payloads; the
 *  browser uses a canvas-backed encoder, tests inject a recording stub. */
export interface RasterEncoder {
  encodeGray(data: Float32Array, width: number, height: number): string;
  encodeRgb(data: Float32Array, width: number, height: number): string;
}

export interface CommitPayload {
  target: EditTarget;
  mask: string;
  values: string;
}

export function buildCommit(
  brush: BrushState,
  target: EditTarget,
  encoder: RasterEncoder,
): CommitPayload {
  const { width, height } = brush;
  const maskPlane = new Float32Array(width * height);
  for (let i = 0; i < maskPlane.length; i++) maskPlane[i] = brush.mask[i];
  let values: string;
  if (target === "alpha") {
    const gray = new Float32Array(width * height);
    for (let i = 0; i < gray.length; i++) gray[i] = brush.values[i * 3];
    values = encoder.encodeGray(gray, width, height);
  } else {
    values = encoder.encodeRgb(brush.values, width, height);
  }
  return { target, mask: encoder.encodeGray(maskPlane, width, height), values };
}
