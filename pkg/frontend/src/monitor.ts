// Active Monitoring model: one row per job with the monitored columns
// (description, remote host, running time, owner, status). Rows update in
// place from the event stream -- never by reloading the page -- and the
// running time ticks locally between events for RUNNING rows.

import { ApiClient, ApiFailure } from "./api.js";
import type { MonitorEvent } from "./sse.js";

export const TERMINAL_STATES = new Set(["COMPLETED", "FAILED", "CANCELLED"]);

export interface MonitorRow {
  jobId: number;
  description: string;
  remoteHost: string;
  runningTime: number;
  owner: string;
  status: string;
}

export class MonitorTable {
  readonly rows = new Map<number, MonitorRow>();
  /** 1 = the initial page load; anything above would mean a reload happened. */
  navigationCount = 1;
  seenSeqs: number[] = [];
  error: string | null = null;

  constructor(
    private readonly api: ApiClient | null = null,
    private readonly onChange: (table: MonitorTable) => void = () => {},
  ) {}

  applyEvent(event: MonitorEvent): void {
    this.seenSeqs.push(event.seq);
    this.rows.set(event.job_id, {
      jobId: event.job_id,
      description: event.description,
      remoteHost: event.remote_host,
      runningTime: event.running_time,
      owner: event.owner,
      status: event.status,
    });
    this.onChange(this);
  }

  /** Local clock tick: RUNNING rows age between stream events. */
  tick(dtSeconds: number): void {
    let changed = false;
    for (const row of this.rows.values()) {
      if (row.status === "RUNNING") {
        row.runningTime = Math.round((row.runningTime + dtSeconds) * 1000) / 1000;
        changed = true;
      }
    }
    if (changed) this.onChange(this);
  }

  allTerminal(): boolean {
    if (this.rows.size === 0) return false;
    for (const row of this.rows.values()) {
      if (!TERMINAL_STATES.has(row.status)) return false;
    }
    return true;
  }

  /** Gap-free check over everything this view has received. */
  seqContinuous(): boolean {
    for (let i = 1; i < this.seenSeqs.length; i++) {
      if (this.seenSeqs[i] !== this.seenSeqs[i - 1] + 1) return false;
    }
    return true;
  }

  async cancel(jobId: number): Promise<void> {
    if (!this.api) return;
    this.error = null;
    try {
      await this.api.cancelJob(jobId);
      // the row flips when the CANCELLED event arrives on the stream
    } catch (err) {
      this.error =
        err instanceof ApiFailure ? `${err.code}: ${err.message}` : String(err);
      this.onChange(this);
    }
  }
}
