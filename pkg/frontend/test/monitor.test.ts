import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { MonitorTable } from "../src/monitor.js";
import type { MonitorEvent } from "../src/sse.js";
import { mockFetch } from "./mock.js";

function event(partial: Partial<MonitorEvent> & { seq: number; job_id: number }): MonitorEvent {
  return {
    timestamp: "2026-01-01T00:00:00+00:00",
    description: "swarp on cart item",
    remote_host: "-",
    running_time: 0,
    owner: "admin",
    status: "QUEUED",
    ...partial,
  };
}

describe("monitor table", () => {
  it("updates rows in place as events arrive", () => {
    const table = new MonitorTable();
    table.applyEvent(event({ seq: 1, job_id: 7 }));
    table.applyEvent(event({ seq: 2, job_id: 7, status: "RUNNING", remote_host: "node02" }));
    expect(table.rows.size).toBe(1);
    const row = table.rows.get(7)!;
    expect(row.status).toBe("RUNNING");
    expect(row.remoteHost).toBe("node02");
  });

  it("ticks running rows locally between events", () => {
    const table = new MonitorTable();
    table.applyEvent(event({ seq: 1, job_id: 1, status: "RUNNING", running_time: 2 }));
    table.applyEvent(event({ seq: 2, job_id: 2, status: "QUEUED" }));
    table.tick(1);
    table.tick(1);
    expect(table.rows.get(1)!.runningTime).toBe(4);
    expect(table.rows.get(2)!.runningTime).toBe(0); // queued rows do not age
  });

  it("a stream event resynchronizes the locally ticked time", () => {
    const table = new MonitorTable();
    table.applyEvent(event({ seq: 1, job_id: 1, status: "RUNNING", running_time: 0 }));
    table.tick(5);
    table.applyEvent(event({ seq: 2, job_id: 1, status: "RUNNING", running_time: 3.2 }));
    expect(table.rows.get(1)!.runningTime).toBe(3.2);
  });

  it("reports all-terminal only when every row is terminal", () => {
    const table = new MonitorTable();
    expect(table.allTerminal()).toBe(false); // empty table: nothing finished yet
    table.applyEvent(event({ seq: 1, job_id: 1, status: "COMPLETED" }));
    table.applyEvent(event({ seq: 2, job_id: 2, status: "RUNNING" }));
    expect(table.allTerminal()).toBe(false);
    table.applyEvent(event({ seq: 3, job_id: 2, status: "FAILED" }));
    expect(table.allTerminal()).toBe(true);
  });

  it("detects sequence gaps", () => {
    const table = new MonitorTable();
    table.applyEvent(event({ seq: 1, job_id: 1 }));
    table.applyEvent(event({ seq: 2, job_id: 1, status: "RUNNING" }));
    expect(table.seqContinuous()).toBe(true);
    table.applyEvent(event({ seq: 4, job_id: 1, status: "COMPLETED" }));
    expect(table.seqContinuous()).toBe(false);
  });

  it("never navigates: the page-load count stays at 1 through a full lifecycle", () => {
    const table = new MonitorTable();
    for (const [seq, status] of [[1, "QUEUED"], [2, "RUNNING"], [3, "COMPLETED"]] as const) {
      table.applyEvent(event({ seq, job_id: 1, status }));
    }
    expect(table.navigationCount).toBe(1);
    expect(table.allTerminal()).toBe(true);
  });

  it("cancel posts to the API and the row flips on the arriving event", async () => {
    const { fetchFn, calls } = mockFetch({
      "POST /api/jobs/5/cancel": () => ({ job_id: 5, state: "CANCELLED" }),
    });
    const api = new ApiClient("http://test", "tok", fetchFn);
    const table = new MonitorTable(api);
    table.applyEvent(event({ seq: 1, job_id: 5, status: "QUEUED" }));
    await table.cancel(5);
    expect(calls.length).toBe(1);
    expect(table.rows.get(5)!.status).toBe("QUEUED"); // not yet: waits for the stream
    table.applyEvent(event({ seq: 2, job_id: 5, status: "CANCELLED" }));
    expect(table.rows.get(5)!.status).toBe("CANCELLED");
  });
});
