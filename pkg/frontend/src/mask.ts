// Binary mask editing at native image resolution. The buffer stores one
// byte per pixel, 0 or 1. Brushes are hard-edged: a pixel is painted iff
// its center lies inside the brush shape, which keeps the export exact
// and makes pixel counts checkable against a rasterization oracle.

export type BrushMode = "paint" | "erase";

const MAX_UNDO = 64;

export class MaskBuffer {
  readonly width: number;
  readonly height: number;
  private data: Uint8Array;
  private undoStack: Uint8Array[] = [];

  constructor(width: number, height: number) {
    if (!Number.isInteger(width) || !Number.isInteger(height) || width < 1 || height < 1) {
      throw new Error(`bad mask dimensions ${width}x${height}`);
    }
    this.width = width;
    this.height = height;
    this.data = new Uint8Array(width * height);
  }

  /** Snapshot the current pixels so the next undo() restores them exactly. */
  beginStroke(): void {
    this.undoStack.push(this.data.slice());
    if (this.undoStack.length > MAX_UNDO) {
      this.undoStack.shift();
    }
  }

  undo(): boolean {
    const prior = this.undoStack.pop();
    if (!prior) return false;
    this.data = prior;
    return true;
  }

  get undoDepth(): number {
    return this.undoStack.length;
  }

  /** Stamp a disk of the given radius centered on a canvas coordinate. */
  disk(cx: number, cy: number, radius: number, mode: BrushMode = "paint"): void {
    this.capsule(cx, cy, cx, cy, radius, mode);
  }

  /**
   * Hard-edged stroke segment: every pixel whose center is within
   * `radius` of the segment (x0,y0)-(x1,y1) is set. Degenerate segments
   * reduce to a disk.
   */
  capsule(
    x0: number, y0: number, x1: number, y1: number,
    radius: number, mode: BrushMode = "paint",
  ): void {
    if (!(radius > 0)) throw new Error(`bad brush radius ${radius}`);
    const value = mode === "paint" ? 1 : 0;
    const r2 = radius * radius;
    const minX = Math.max(0, Math.floor(Math.min(x0, x1) - radius));
    const maxX = Math.min(this.width - 1, Math.ceil(Math.max(x0, x1) + radius));
    const minY = Math.max(0, Math.floor(Math.min(y0, y1) - radius));
    const maxY = Math.min(this.height - 1, Math.ceil(Math.max(y0, y1) + radius));
    const dx = x1 - x0;
    const dy = y1 - y0;
    const lenSq = dx * dx + dy * dy;
    for (let y = minY; y <= maxY; y++) {
      const py = y + 0.5;
      for (let x = minX; x <= maxX; x++) {
        const px = x + 0.5;
        let t = 0;
        if (lenSq > 0) {
          t = ((px - x0) * dx + (py - y0) * dy) / lenSq;
          t = Math.max(0, Math.min(1, t));
        }
        const ex = px - (x0 + t * dx);
        const ey = py - (y0 + t * dy);
        if (ex * ex + ey * ey <= r2) {
          this.data[y * this.width + x] = value;
        }
      }
    }
  }

  clear(): void {
    this.data.fill(0);
  }

  get(x: number, y: number): number {
    return this.data[y * this.width + x] ?? 0;
  }

  paintedCount(): number {
    let n = 0;
    for (let i = 0; i < this.data.length; i++) n += this.data[i]!;
    return n;
  }

  isEmpty(): boolean {
    return this.paintedCount() === 0;
  }

  /** Row-major 0/1 bytes; this exact byte string is what digests hash. */
  exportBinary(): Uint8Array {
    return this.data.slice();
  }

  /** Replace the pixels wholesale (refine copies a submitted mask back). */
  setFrom(binary: Uint8Array): void {
    if (binary.length !== this.data.length) {
      throw new Error(
        `mask payload is ${binary.length} bytes, buffer needs ${this.data.length}`,
      );
    }
    for (let i = 0; i < binary.length; i++) {
      this.data[i] = binary[i]! > 0 ? 1 : 0;
    }
  }

  clone(): MaskBuffer {
    const copy = new MaskBuffer(this.width, this.height);
    copy.setFrom(this.data);
    return copy;
  }
}
