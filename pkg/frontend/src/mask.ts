import { encodeGrayPng } from "./png.js";

/**
 * Paintable binary mask at the resolution of the uploaded image.
 *
 * Storage is one byte per pixel holding 0 or 1; export quantizes to the 0/255
 * convention the service expects. Brush strokes are discs stamped densely
 * along the pointer path so fast drags leave no gaps.
 */
export class MaskRaster {
  readonly width: number;
  readonly height: number;
  private readonly cells: Uint8Array;
  private painted = 0;

  constructor(width: number, height: number) {
    if (!Number.isInteger(width) || !Number.isInteger(height) || width <= 0 || height <= 0) {
      throw new Error(`invalid mask size ${width}x${height}`);
    }
    this.width = width;
    this.height = height;
    this.cells = new Uint8Array(width * height);
  }

  get(x: number, y: number): boolean {
    if (x < 0 || y < 0 || x >= this.width || y >= this.height) return false;
    return this.cells[y * this.width + x] === 1;
  }

  /** Number of pixels currently inside the mask. */
  count(): number {
    return this.painted;
  }

  isEmpty(): boolean {
    return this.painted === 0;
  }

  clear(): void {
    this.cells.fill(0);
    this.painted = 0;
  }

  /** Stamp a disc of the given radius; value true paints, false erases. */
  stamp(cx: number, cy: number, radius: number, value: boolean): void {
    const r = Math.max(0, radius);
    const r2 = r * r;
    const x0 = Math.max(0, Math.floor(cx - r));
    const x1 = Math.min(this.width - 1, Math.ceil(cx + r));
    const y0 = Math.max(0, Math.floor(cy - r));
    const y1 = Math.min(this.height - 1, Math.ceil(cy + r));
    const fill = value ? 1 : 0;
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        const dy = y - cy;
        if (dx * dx + dy * dy > r2) continue;
        const idx = y * this.width + x;
        if (this.cells[idx] !== fill) {
          this.cells[idx] = fill;
          this.painted += value ? 1 : -1;
        }
      }
    }
  }

  /** Stamp along the segment from (x0, y0) to (x1, y1). */
  stroke(x0: number, y0: number, x1: number, y1: number, radius: number, value: boolean): void {
    const dist = Math.hypot(x1 - x0, y1 - y0);
    // Sub-radius spacing keeps the swept band solid.
    const steps = Math.max(1, Math.ceil(dist / Math.max(1, radius / 2)));
    for (let i = 0; i <= steps; i++) {
      const t = i / steps;
      this.stamp(x0 + (x1 - x0) * t, y0 + (y1 - y0) * t, radius, value);
    }
  }

  /** Binary PNG with mask pixels at 255 and background at 0. */
  toPng(): Uint8Array {
    const pixels = new Uint8Array(this.cells.length);
    for (let i = 0; i < this.cells.length; i++) {
      pixels[i] = this.cells[i] === 1 ? 255 : 0;
    }
    return encodeGrayPng(this.width, this.height, pixels);
  }
}
