// Image selector state: combinable criteria, the current result grid and the
// saved-selection commands. The displayed count is always the result-set
// length; API errors surface inline with their stable code.

import { ApiClient, ApiFailure, ImageQuery, ImageSummary, SelectionSummary } from "./api.js";

export interface SelectorState {
  criteria: ImageQuery;
  results: ImageSummary[];
  count: number;
  savedSelections: SelectionSummary[];
  currentSelectionName: string | null;
  error: string | null;
}

export class ImageSelector {
  state: SelectorState = {
    criteria: {},
    results: [],
    count: 0,
    savedSelections: [],
    currentSelectionName: null,
    error: null,
  };

  constructor(
    private readonly api: ApiClient,
    private readonly onChange: (state: SelectorState) => void = () => {},
  ) {}

  visibleIds(): string[] {
    return this.state.results.map((r) => r.image_id);
  }

  private emit(): void {
    this.state.count = this.state.results.length;
    this.onChange(this.state);
  }

  private fail(err: unknown): void {
    this.state.error =
      err instanceof ApiFailure ? `${err.code}: ${err.message}` : String(err);
    this.emit();
  }

  async refresh(): Promise<void> {
    this.state.error = null;
    try {
      this.state.results = await this.api.images(this.state.criteria);
    } catch (err) {
      this.fail(err);
      return;
    }
    this.emit();
  }

  /** One criterion edit issues one catalog query. */
  async setCriterion(key: keyof ImageQuery, value: string | undefined): Promise<void> {
    if (value === undefined || value === "") {
      delete this.state.criteria[key];
    } else {
      this.state.criteria[key] = value;
    }
    if (key !== "in_selection") this.state.currentSelectionName = null;
    await this.refresh();
  }

  async clearCriteria(): Promise<void> {
    this.state.criteria = {};
    this.state.currentSelectionName = null;
    await this.refresh();
  }

  async loadSavedSelection(name: string): Promise<void> {
    this.state.criteria = { in_selection: name };
    this.state.currentSelectionName = name;
    await this.refresh();
  }

  async refreshSavedSelections(): Promise<void> {
    try {
      this.state.savedSelections = await this.api.selections();
    } catch (err) {
      this.fail(err);
      return;
    }
    this.emit();
  }

  async saveCurrentAs(name: string): Promise<void> {
    this.state.error = null;
    try {
      await this.api.saveSelection(name, this.visibleIds());
    } catch (err) {
      this.fail(err);
      return;
    }
    await this.refreshSavedSelections();
  }

  async mergeSelections(targetName: string, sourceIds: string[]): Promise<void> {
    this.state.error = null;
    try {
      await this.api.mergeSelections(targetName, sourceIds);
    } catch (err) {
      this.fail(err);
      return;
    }
    await this.refreshSavedSelections();
  }

  async deleteSelection(selectionId: string): Promise<void> {
    this.state.error = null;
    try {
      await this.api.deleteSelection(selectionId);
    } catch (err) {
      this.fail(err);
      return;
    }
    await this.refreshSavedSelections();
  }
}
