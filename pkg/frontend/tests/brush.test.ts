import { describe, expect, it } from "vitest";

import { BrushState, RasterEncoder, buildCommit } from "../src/brush.js";

function recordingEncoder() {
  const calls: { kind: string; data: Float32Array; width: number; height: number }[] = [];
  const encoder: RasterEncoder = {
    encodeGray(data, width, height) {
      calls.push({ kind: "gray", data: data.slice(), width, height });
      return `gray:${calls.length}`;
    },
    encodeRgb(data, width, height) {
      calls.push({ kind: "rgb", data: data.slice(), width, height });
      return `rgb:${calls.length}`;
    },
  };
  return { encoder, calls };
}

describe("BrushState", () => {
  it("stamps a disk of the configured radius", () => {
    const brush = new BrushState(16, 16);
    brush.radius = 3;
    brush.color = { r: 1, g: 0, b: 0 };
    brush.stamp(8, 8, "foreground");
    expect(brush.mask[8 * 16 + 8]).toBe(1);
    expect(brush.mask[8 * 16 + 11]).toBe(1); // distance 3 on the axis
    expect(brush.mask[8 * 16 + 12]).toBe(0); // distance 4
    expect(brush.mask[4 * 16 + 4]).toBe(0); // diagonal distance > 3
    expect(brush.values[(8 * 16 + 8) * 3]).toBe(1);
  });

  it("erase removes previously painted pixels", () => {
    const brush = new BrushState(8, 8);
    brush.radius = 2;
    brush.stamp(4, 4, "alpha");
    expect(brush.dirtyPixels).toBeGreaterThan(0);
    brush.mode = "erase";
    brush.stamp(4, 4, "alpha");
    expect(brush.dirtyPixels).toBe(0);
  });

  it("clone mode copies from the source image", () => {
    const brush = new BrushState(4, 4);
    brush.radius = 0.5;
    brush.mode = "clone";
    const source = new Float32Array(4 * 4 * 3);
    const idx = 2 * 4 + 1;
    source[idx * 3] = 0.25;
    source[idx * 3 + 1] = 0.5;
    source[idx * 3 + 2] = 0.75;
    brush.stamp(1, 2, "background", source);
    expect(brush.mask[idx]).toBe(1);
    expect(brush.values[idx * 3]).toBeCloseTo(0.25);
    expect(brush.values[idx * 3 + 2]).toBeCloseTo(0.75);
  });

  it("stroke leaves no gaps between endpoints", () => {
    const brush = new BrushState(32, 8);
    brush.radius = 1.5;
    brush.stroke(2, 4, 29, 4, "alpha");
    for (let x = 2; x <= 29; x++) {
      expect(brush.mask[4 * 32 + x]).toBe(1);
    }
  });

  it("stays inside the canvas bounds", () => {
    const brush = new BrushState(8, 8);
    brush.radius = 10;
    brush.stamp(0, 0, "alpha");
    expect(brush.dirtyPixels).toBeGreaterThan(0); // and no out-of-bounds crash
  });
});

describe("buildCommit", () => {
  it("sends the accumulated mask and rgb values for color targets", () => {
    const brush = new BrushState(4, 4);
    brush.radius = 0.5;
    brush.color = { r: 0.2, g: 0.4, b: 0.6 };
    brush.stamp(1, 1, "foreground");
    const { encoder, calls } = recordingEncoder();
    const payload = buildCommit(brush, "foreground", encoder);
    expect(payload.target).toBe("foreground");
    const rgb = calls.find((c) => c.kind === "rgb")!;
    const gray = calls.find((c) => c.kind === "gray")!;
    expect(gray.data[1 * 4 + 1]).toBe(1);
    expect(rgb.data[(1 * 4 + 1) * 3 + 1]).toBeCloseTo(0.4);
  });

  it("collapses alpha edits to one gray plane", () => {
    const brush = new BrushState(4, 4);
    brush.radius = 0.5;
    brush.alphaValue = 0.3;
    brush.stamp(2, 2, "alpha");
    const { encoder, calls } = recordingEncoder();
    buildCommit(brush, "alpha", encoder);
    expect(calls.filter((c) => c.kind === "gray")).toHaveLength(2); // values + mask
    const values = calls[0];
    expect(values.data[2 * 4 + 2]).toBeCloseTo(0.3);
  });
});
