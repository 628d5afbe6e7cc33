// Server-sent event stream reader with seamless reconnect.
//
// Uses fetch streaming rather than EventSource so the Authorization header
// can be sent. On disconnect it resubscribes with the last seen sequence
// number, so no event is ever missed or delivered twice.

import type { FetchLike } from "./api.js";

export interface MonitorEvent {
  seq: number;
  job_id: number;
  timestamp: string;
  description: string;
  remote_host: string;
  running_time: number;
  owner: string;
  status: string;
}

export type StreamStatus = "connecting" | "open" | "reconnecting" | "closed";

export interface StreamOptions {
  baseUrl: string;
  token: string;
  onEvent: (event: MonitorEvent) => void;
  onStatus?: (status: StreamStatus) => void;
  fetchFn?: FetchLike;
  reconnectDelayMs?: number;
}

export function parseSseChunk(buffer: string): { frames: string[][]; rest: string } {
  const frames: string[][] = [];
  const parts = buffer.split("\n\n");
  const rest = parts.pop() ?? "";
  for (const part of parts) {
    const lines = part.split("\n").filter((line) => line.length > 0);
    if (lines.length > 0) frames.push(lines);
  }
  return { frames, rest };
}

export function dataFromFrame(lines: string[]): string | null {
  const data = lines
    .filter((line) => line.startsWith("data:"))
    .map((line) => line.slice(5).trim());
  return data.length > 0 ? data.join("\n") : null;
}

export class EventStream {
  lastSeq = 0;
  private stopped = false;
  private controller: AbortController | null = null;
  private readonly fetchFn: FetchLike;
  private readonly reconnectDelayMs: number;

  constructor(private readonly options: StreamOptions) {
    this.fetchFn = options.fetchFn ?? ((...args) => fetch(...args));
    this.reconnectDelayMs = options.reconnectDelayMs ?? 500;
  }

  start(fromSeq = 0): Promise<void> {
    this.lastSeq = fromSeq;
    this.stopped = false;
    return this.loop();
  }

  stop(): void {
    this.stopped = true;
    this.controller?.abort();
    this.options.onStatus?.("closed");
  }

  /** Force-drop the connection (testing aid); the loop reconnects. */
  dropConnection(): void {
    this.controller?.abort();
  }

  private async loop(): Promise<void> {
    let first = true;
    while (!this.stopped) {
      this.options.onStatus?.(first ? "connecting" : "reconnecting");
      first = false;
      try {
        await this.readOnce();
      } catch {
        // connection lost; fall through to the retry delay
      }
      if (this.stopped) return;
      await new Promise((resolve) => setTimeout(resolve, this.reconnectDelayMs));
    }
  }

  private async readOnce(): Promise<void> {
    this.controller = new AbortController();
    const url = `${this.options.baseUrl}/api/events?from_seq=${this.lastSeq}`;
    const resp = await this.fetchFn(url, {
      headers: { Authorization: `Bearer ${this.options.token}` },
      signal: this.controller.signal,
    });
    if (!resp.ok || !resp.body) throw new Error(`stream failed: ${resp.status}`);
    this.options.onStatus?.("open");
    const reader = resp.body.getReader();
    const decoder = new TextDecoder();
    let buffer = "";
    for (;;) {
      const { done, value } = await reader.read();
      if (done) return;
      buffer += decoder.decode(value, { stream: true });
      const { frames, rest } = parseSseChunk(buffer);
      buffer = rest;
      for (const frame of frames) {
        const data = dataFromFrame(frame);
        if (data === null) continue; // keep-alive comment
        const event = JSON.parse(data) as MonitorEvent;
        if (event.seq <= this.lastSeq) continue;
        this.lastSeq = event.seq;
        this.options.onEvent(event);
      }
    }
  }
}
