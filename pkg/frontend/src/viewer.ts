/**
 * One shared zoom/pan transform drives both stain panels, so the two images
 * stay locked to the same pixel coordinates by construction.
 */

export interface Transform {
  scale: number;
  offsetX: number;
  offsetY: number;
}

export class SyncedViewer {
  scale = 1;
  offsetX = 0;
  offsetY = 0;

  constructor(
    public minScale = 0.25,
    public maxScale = 16,
  ) {}

  /** Screen pixel -> image pixel under the current transform. */
  screenToImage(px: number, py: number): { x: number; y: number } {
    return {
      x: (px - this.offsetX) / this.scale,
      y: (py - this.offsetY) / this.scale,
    };
  }

  imageToScreen(ix: number, iy: number): { x: number; y: number } {
    return {
      x: ix * this.scale + this.offsetX,
      y: iy * this.scale + this.offsetY,
    };
  }

  /** Zoom by `factor` keeping the screen point (px, py) anchored. */
  zoomAt(px: number, py: number, factor: number): void {
    const next = Math.min(this.maxScale, Math.max(this.minScale, this.scale * factor));
    const anchor = this.screenToImage(px, py);
    this.scale = next;
    this.offsetX = px - anchor.x * this.scale;
    this.offsetY = py - anchor.y * this.scale;
  }

  panBy(dx: number, dy: number): void {
    this.offsetX += dx;
    this.offsetY += dy;
  }

  reset(): void {
    this.scale = 1;
    this.offsetX = 0;
    this.offsetY = 0;
  }

  transform(): Transform {
    return { scale: this.scale, offsetX: this.offsetX, offsetY: this.offsetY };
  }

  /** CSS transform string applied identically to both panels. */
  css(): string {
    return `translate(${this.offsetX}px, ${this.offsetY}px) scale(${this.scale})`;
  }
}
