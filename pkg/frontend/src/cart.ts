// Client-side processing cart: pending items live in the browser until the
// user saves or submits them, like a shopping cart holding its contents
// until checkout.

import { ApiClient } from "./api.js";

export interface PendingItem {
  pluginId: string;
  configId: string;
  selectionId?: string;
  imageIds?: string[];
  auxPaths?: Record<string, string>;
  policyKind?: "policy" | "static";
  policyId?: string;
}

export class ProcessingCart {
  pending: PendingItem[] = [];

  constructor(private readonly onChange: (cart: ProcessingCart) => void = () => {}) {}

  add(item: PendingItem): void {
    this.pending.push(item);
    this.onChange(this);
  }

  remove(index: number): void {
    this.pending.splice(index, 1);
    this.onChange(this);
  }

  /** Persist every pending item server-side; returns the created item ids. */
  async saveAll(api: ApiClient): Promise<string[]> {
    const created: string[] = [];
    for (const item of this.pending) {
      const body = await api.createCartItem({
        plugin_id: item.pluginId,
        config_id: item.configId,
        selection_id: item.selectionId,
        image_ids: item.imageIds,
        aux_paths: item.auxPaths ?? {},
        policy_kind: item.policyKind,
        policy_id: item.policyId,
      });
      created.push(body.item_id);
    }
    this.pending = [];
    this.onChange(this);
    return created;
  }

  /** Save then submit everything; returns the created job ids. */
  async submitAll(api: ApiClient, policy?: string, staticSel?: string): Promise<number[]> {
    const itemIds = await this.saveAll(api);
    const jobIds: number[] = [];
    for (const itemId of itemIds) {
      const job = await api.submitJob(itemId, policy, staticSel);
      jobIds.push(job.job_id);
    }
    return jobIds;
  }
}
