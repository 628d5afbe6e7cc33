// fetch doubles for the unit tests.

import type { FetchLike } from "../src/api.js";

export interface RecordedCall {
  url: string;
  method: string;
  body: unknown;
}

export function jsonResponse(payload: unknown, status = 200): Response {
  return new Response(JSON.stringify(payload), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

/** Routes requests to handlers by "METHOD path" and records every call. */
export function mockFetch(
  routes: Record<string, (call: RecordedCall) => Response | unknown>,
): { fetchFn: FetchLike; calls: RecordedCall[] } {
  const calls: RecordedCall[] = [];
  const fetchFn: FetchLike = async (url, init) => {
    const method = init?.method ?? "GET";
    const parsed = new URL(url, "http://test");
    const call: RecordedCall = {
      url,
      method,
      body: init?.body ? JSON.parse(init.body as string) : undefined,
    };
    calls.push(call);
    const key = `${method} ${parsed.pathname}`;
    const handler = routes[key];
    if (!handler) {
      return jsonResponse({ code: "UNKNOWN_ROUTE", message: `no route ${key}` }, 404);
    }
    const result = handler(call);
    return result instanceof Response ? result : jsonResponse(result);
  };
  return { fetchFn, calls };
}

export function makeImages(count: number): unknown[] {
  const images = [];
  for (let i = 0; i < count; i++) {
    images.push({
      image_id: `img-${i}`,
      filename: `w3-${String(i).padStart(5, "0")}.fits`,
      run_id: "08BW3",
      filter: "i.MP9702",
      grade: null,
      instrument: "MEGACAM",
      tags: [],
    });
  }
  return images;
}
