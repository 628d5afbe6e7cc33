// Drag-and-drop tagging: dragging a tag chip over the drop zone marks (or
// unmarks) the current selection with exactly one apply call; dropping
// anywhere else does nothing.

import { ApiClient, ApiFailure } from "./api.js";

export type DropMode = "mark" | "unmark";

export class TagDragDrop {
  private dragging: string | null = null;

  constructor(
    private readonly api: ApiClient,
    private readonly visibleIds: () => string[],
    private readonly onApplied: (tag: string, affected: number, mode: DropMode) => void = () => {},
    private readonly onError: (message: string) => void = () => {},
  ) {}

  get draggingTag(): string | null {
    return this.dragging;
  }

  beginDrag(tagName: string): void {
    this.dragging = tagName;
  }

  /** Drop over the dedicated zone: fires exactly one apply call. */
  async dropOnZone(mode: DropMode): Promise<number | null> {
    const tag = this.dragging;
    this.dragging = null;
    if (tag === null) return null;
    try {
      const result = await this.api.applyTag(tag, this.visibleIds(), mode === "mark");
      this.onApplied(tag, result.affected, mode);
      return result.affected;
    } catch (err) {
      this.onError(
        err instanceof ApiFailure ? `${err.code}: ${err.message}` : String(err),
      );
      return null;
    }
  }

  /** Drop outside the zone: the drag simply ends, no API call. */
  dropOutside(): void {
    this.dragging = null;
  }
}
