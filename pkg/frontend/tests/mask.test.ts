import { describe, expect, it } from "vitest";

import { MaskRaster } from "../src/mask.js";
import { decodePng } from "./decode.js";

describe("MaskRaster", () => {
  it("starts empty and counts painted pixels", () => {
    const mask = new MaskRaster(32, 32);
    expect(mask.isEmpty()).toBe(true);
    mask.stamp(16, 16, 4, true);
    expect(mask.isEmpty()).toBe(false);
    expect(mask.count()).toBeGreaterThan(0);
    expect(mask.get(16, 16)).toBe(true);
    expect(mask.get(0, 0)).toBe(false);
  });

  it("erase undoes paint exactly", () => {
    const mask = new MaskRaster(32, 32);
    mask.stamp(10, 10, 5, true);
    mask.stamp(10, 10, 5, false);
    expect(mask.count()).toBe(0);
    expect(mask.isEmpty()).toBe(true);
  });

  it("stamping the same spot twice does not double-count", () => {
    const mask = new MaskRaster(32, 32);
    mask.stamp(10, 10, 3, true);
    const once = mask.count();
    mask.stamp(10, 10, 3, true);
    expect(mask.count()).toBe(once);
  });

  it("clips stamps at the borders instead of wrapping", () => {
    const mask = new MaskRaster(16, 16);
    mask.stamp(0, 0, 3, true);
    expect(mask.get(0, 0)).toBe(true);
    expect(mask.get(15, 15)).toBe(false);
    expect(mask.get(15, 0)).toBe(false);
    expect(mask.get(-1, 0)).toBe(false);
  });

  it("a fast stroke leaves no gap along the segment", () => {
    const mask = new MaskRaster(64, 64);
    mask.stroke(4, 32, 60, 32, 2, true);
    for (let x = 4; x <= 60; x++) {
      expect(mask.get(x, 32)).toBe(true);
    }
  });

  it("clear resets everything", () => {
    const mask = new MaskRaster(16, 16);
    mask.stroke(0, 0, 15, 15, 4, true);
    mask.clear();
    expect(mask.isEmpty()).toBe(true);
    expect(mask.get(8, 8)).toBe(false);
  });

  it("exports a grayscale PNG holding only 0 and 255", () => {
    const mask = new MaskRaster(24, 18);
    mask.stamp(12, 9, 5, true);
    const decoded = decodePng(mask.toPng());
    expect(decoded.width).toBe(24);
    expect(decoded.height).toBe(18);
    expect(decoded.colorType).toBe(0);
    const values = new Set(decoded.pixels);
    expect([...values].sort((a, b) => a - b)).toEqual([0, 255]);
    expect(decoded.pixels[9 * 24 + 12]).toBe(255);
    expect(decoded.pixels[0]).toBe(0);
  });

  it("rejects a degenerate size", () => {
    expect(() => new MaskRaster(0, 5)).toThrow(/invalid mask size/);
    expect(() => new MaskRaster(5.5, 5)).toThrow(/invalid mask size/);
  });
});
