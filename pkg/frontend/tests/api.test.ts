import { describe, expect, it } from "vitest";

import { ApiClient, ApiError } from "../src/api.js";

interface Seen {
  url: string;
  init?: RequestInit;
}

function json(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

function clientWith(handler: (url: string, init?: RequestInit) => Response, seen?: Seen[]): ApiClient {
  return new ApiClient("http://svc:8000/", async (url, init) => {
    seen?.push({ url, init });
    return handler(url, init);
  });
}

describe("ApiClient", () => {
  it("strips trailing slashes from the base URL", async () => {
    const seen: Seen[] = [];
    const client = clientWith(() => json({ status: "ok", backend: "toy", workers: 2 }), seen);
    await client.health();
    expect(seen[0]!.url).toBe("http://svc:8000/health");
  });

  it("uploads through a multipart form with a 'file' field", async () => {
    const seen: Seen[] = [];
    const client = clientWith(() => json({ sha256: "ab", bytes: 3 }), seen);
    const receipt = await client.upload(Uint8Array.of(1, 2, 3), "mask.png");
    expect(receipt).toEqual({ sha256: "ab", bytes: 3 });
    const body = seen[0]!.init?.body;
    expect(body).toBeInstanceOf(FormData);
    const file = (body as FormData).get("file");
    expect(file).toBeInstanceOf(Blob);
    expect((file as File).name).toBe("mask.png");
  });

  it("posts jobs as JSON and parses the created record", async () => {
    const seen: Seen[] = [];
    const record = {
      id: "j1",
      kind: "transfer",
      state: "queued",
      error: null,
      progress: { phase: "queued", step: 0, total: 6, preview: 0 },
      results: [],
      created_at: 0,
      updated_at: 0,
    };
    const client = clientWith(() => json(record, 201), seen);
    const created = await client.createJob({
      kind: "transfer",
      init: "i",
      material: "m",
      mask: "k",
      y_src: "a",
      y_trg: "b",
    });
    expect(created.id).toBe("j1");
    const init = seen[0]!.init!;
    expect(init.method).toBe("POST");
    expect((init.headers as Record<string, string>)["content-type"]).toBe("application/json");
    expect(JSON.parse(init.body as string)).toMatchObject({ init: "i", mask: "k", y_trg: "b" });
  });

  it("maps error bodies onto ApiError with the service's detail", async () => {
    const client = clientWith(() => json({ detail: "mask empty" }, 400));
    const err = await client.getJob("nope").catch((e) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect(err.status).toBe(400);
    expect(err.detail).toBe("mask empty");
  });

  it("falls back to the status text for non-JSON error bodies", async () => {
    const client = clientWith(() => new Response("boom", { status: 502, statusText: "Bad Gateway" }));
    const err = await client.health().catch((e) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect(err.detail).toBe("Bad Gateway");
  });

  it("unwraps the gallery envelope", async () => {
    const client = clientWith(() =>
      json({ id: "j1", results: [{ lam: 0.5, url: "/jobs/j1/result?index=0" }] }),
    );
    expect(await client.gallery("j1")).toEqual([{ lam: 0.5, url: "/jobs/j1/result?index=0" }]);
  });

  it("builds result and preview URLs on the service base", () => {
    const client = clientWith(() => json({}));
    expect(client.resultUrl("j1", 2)).toBe("http://svc:8000/jobs/j1/result?index=2");
    expect(client.previewUrl("j1")).toBe("http://svc:8000/jobs/j1/preview");
  });

  it("fetchImage accepts both absolute and service-relative URLs", async () => {
    const seen: Seen[] = [];
    const client = clientWith(() => new Response(Uint8Array.of(9, 9).buffer), seen);
    await client.fetchImage("http://svc:8000/jobs/j1/preview");
    await client.fetchImage("/jobs/j1/result?index=0");
    expect(seen.map((s) => s.url)).toEqual([
      "http://svc:8000/jobs/j1/preview",
      "http://svc:8000/jobs/j1/result?index=0",
    ]);
  });
});
