// Canvas-backed PNG encoding for commit payloads (browser only; tests stub
// the RasterEncoder interface instead).

import type { RasterEncoder } from "./brush.js";

function toPngBase64(image: ImageData): string {
  const canvas = document.createElement("canvas");
  canvas.width = image.width;
  canvas.height = image.height;
  canvas.getContext("2d")!.putImageData(image, 0, 0);
  const dataUrl = canvas.toDataURL("image/png");
  return dataUrl.slice(dataUrl.indexOf(",") + 1);
}

function clamp255(v: number): number {
  return Math.max(0, Math.min(255, Math.round(v * 255)));
}

export const canvasEncoder: RasterEncoder = {
  encodeGray(data: Float32Array, width: number, height: number): string {
    const image = new ImageData(width, height);
    for (let i = 0; i < width * height; i++) {
      const v = clamp255(data[i]);
      image.data[i * 4] = v;
      image.data[i * 4 + 1] = v;
      image.data[i * 4 + 2] = v;
      image.data[i * 4 + 3] = 255;
    }
    return toPngBase64(image);
  },
  encodeRgb(data: Float32Array, width: number, height: number): string {
    const image = new ImageData(width, height);
    for (let i = 0; i < width * height; i++) {
      image.data[i * 4] = clamp255(data[i * 3]);
      image.data[i * 4 + 1] = clamp255(data[i * 3 + 1]);
      image.data[i * 4 + 2] = clamp255(data[i * 3 + 2]);
      image.data[i * 4 + 3] = 255;
    }
    return toPngBase64(image);
  },
};

/** Decode an uploaded file to base64 (sent verbatim; the server decodes). */
export function fileToBase64(file: File): Promise<string> {
  return new Promise((resolve, reject) => {
    const reader = new FileReader();
    reader.onerror = () => reject(reader.error);
    reader.onload = () => {
      const url = reader.result as string;
      resolve(url.slice(url.indexOf(",") + 1));
    };
    reader.readAsDataURL(file);
  });
}

/** Pull the original-image pixels (for the clone brush) from a preview PNG. */
export async function fetchRgbPlanes(url: string): Promise<{
  data: Float32Array;
  width: number;
  height: number;
}> {
  const r = await fetch(url);
  const bitmap = await createImageBitmap(await r.blob());
  const canvas = document.createElement("canvas");
  canvas.width = bitmap.width;
  canvas.height = bitmap.height;
  const ctx = canvas.getContext("2d")!;
  ctx.drawImage(bitmap, 0, 0);
  const image = ctx.getImageData(0, 0, bitmap.width, bitmap.height);
  const out = new Float32Array(bitmap.width * bitmap.height * 3);
  for (let i = 0; i < bitmap.width * bitmap.height; i++) {
    out[i * 3] = image.data[i * 4] / 255;
    out[i * 3 + 1] = image.data[i * 4 + 1] / 255;
    out[i * 3 + 2] = image.data[i * 4 + 2] / 255;
  }
  return { data: out, width: bitmap.width, height: bitmap.height };
}
