/**
 * Typed client for the transfer service REST API.
 *
 * The browser owns no state the server does not: every mutation goes through
 * these documented endpoints and everything else is a read.
 */

export type JobState = "queued" | "inverting" | "sampling" | "done" | "failed" | "cancelled";

export const TERMINAL_STATES: readonly JobState[] = ["done", "failed", "cancelled"];

export interface JobProgress {
  phase: string;
  step: number;
  total: number;
  /** Monotone counter; a strictly larger value means a fresh preview image exists. */
  preview: number;
}

export interface JobResultEntry {
  lam: number;
  image: string;
}

export interface JobRecord {
  id: string;
  kind: "transfer" | "sweep";
  state: JobState;
  error: string | null;
  progress: JobProgress;
  results: JobResultEntry[];
  created_at: number;
  updated_at: number;
}

export interface GalleryEntry {
  lam: number;
  url: string;
}

export interface UploadReceipt {
  sha256: string;
  bytes: number;
}

export interface JobRequest {
  kind: "transfer" | "sweep";
  init: string;
  material: string;
  mask: string;
  y_src: string;
  y_trg: string;
  config?: Record<string, number | string>;
  lams?: number[];
}

export class ApiError extends Error {
  readonly status: number;
  readonly detail: string;

  constructor(status: number, detail: string) {
    super(`${status}: ${detail}`);
    this.status = status;
    this.detail = detail;
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  readonly baseUrl: string;
  private readonly fetchImpl: FetchLike;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
  }

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const body = (await response.json()) as { detail?: unknown };
        if (typeof body.detail === "string") detail = body.detail;
      } catch {
        // Non-JSON error body; keep the status text.
      }
      throw new ApiError(response.status, detail);
    }
    return response;
  }

  async health(): Promise<{ status: string; backend: string; workers: number }> {
    const response = await this.request("/health");
    return (await response.json()) as { status: string; backend: string; workers: number };
  }

  /** Upload an image; the returned sha256 is the handle jobs refer to. */
  async upload(data: Uint8Array, filename: string): Promise<UploadReceipt> {
    const form = new FormData();
    form.append("file", new Blob([data as BlobPart], { type: "image/png" }), filename);
    const response = await this.request("/uploads", { method: "POST", body: form });
    return (await response.json()) as UploadReceipt;
  }

  async createJob(request: JobRequest): Promise<JobRecord> {
    const response = await this.request("/jobs", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(request),
    });
    return (await response.json()) as JobRecord;
  }

  async getJob(jobId: string): Promise<JobRecord> {
    const response = await this.request(`/jobs/${jobId}`);
    return (await response.json()) as JobRecord;
  }

  async listJobs(): Promise<JobRecord[]> {
    const response = await this.request("/jobs");
    const body = (await response.json()) as { jobs: JobRecord[] };
    return body.jobs;
  }

  async cancelJob(jobId: string): Promise<JobRecord> {
    const response = await this.request(`/jobs/${jobId}/cancel`, { method: "POST" });
    return (await response.json()) as JobRecord;
  }

  async gallery(jobId: string): Promise<GalleryEntry[]> {
    const response = await this.request(`/jobs/${jobId}/gallery`);
    const body = (await response.json()) as { results: GalleryEntry[] };
    return body.results;
  }

  resultUrl(jobId: string, index = 0): string {
    return `${this.baseUrl}/jobs/${jobId}/result?index=${index}`;
  }

  previewUrl(jobId: string): string {
    return `${this.baseUrl}/jobs/${jobId}/preview`;
  }

  /** Fetch image bytes from a result/preview URL (absolute or service-relative). */
  async fetchImage(url: string): Promise<Uint8Array> {
    const path = url.startsWith(this.baseUrl) ? url.slice(this.baseUrl.length) : url;
    const response = await this.request(path.startsWith("/") ? path : `/${path}`);
    return new Uint8Array(await response.arrayBuffer());
  }
}
