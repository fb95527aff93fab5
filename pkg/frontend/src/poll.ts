/**
 * Job polling loop.
 *
 * Status is cheap, images are not: the preview image is fetched only when the
 * status record's preview counter moves, so a slow sampler is polled at 1 Hz
 * without re-downloading the same frame.
 */

import { ApiClient, ApiError, JobRecord, TERMINAL_STATES } from "./api.js";

export interface PollHandlers {
  onUpdate?: (record: JobRecord) => void;
  /** Called with fresh preview bytes; index is the counter value that triggered the fetch. */
  onPreview?: (bytes: Uint8Array, index: number) => void;
}

export interface PollOptions {
  intervalMs?: number;
  /** Injectable for tests; defaults to a real timer. */
  sleep?: (ms: number) => Promise<void>;
}

const realSleep = (ms: number) => new Promise<void>((resolve) => setTimeout(resolve, ms));

/** Poll until the job reaches a terminal state; resolves with the final record. */
export async function pollJob(
  client: ApiClient,
  jobId: string,
  handlers: PollHandlers = {},
  options: PollOptions = {},
): Promise<JobRecord> {
  const intervalMs = options.intervalMs ?? 1000;
  const sleep = options.sleep ?? realSleep;
  let seenPreview = 0;
  for (;;) {
    const record = await client.getJob(jobId);
    handlers.onUpdate?.(record);
    const previewIndex = record.progress.preview ?? 0;
    if (previewIndex > seenPreview) {
      // Several previews may have landed since the last poll; only the
      // newest file exists, so one fetch covers them all.
      seenPreview = previewIndex;
      if (handlers.onPreview) {
        try {
          const bytes = await client.fetchImage(client.previewUrl(jobId));
          handlers.onPreview(bytes, previewIndex);
        } catch (err) {
          if (!(err instanceof ApiError && err.status === 404)) throw err;
        }
      }
    }
    if (TERMINAL_STATES.includes(record.state)) {
      return record;
    }
    await sleep(intervalMs);
  }
}
