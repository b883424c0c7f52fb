// Thin client over the removal service API. The browser side never
// interprets the image beyond showing it; all scoring and embedding
// work stays on the server.

export class ApiError extends Error {
  readonly status: number;
  readonly code: string;
  readonly detail: string;

  constructor(status: number, code: string, detail: string) {
    super(`${code}: ${detail}`);
    this.name = "ApiError";
    this.status = status;
    this.code = code;
    this.detail = detail;
  }
}

export interface JobView {
  id: string;
  state: "QUEUED" | "RUNNING" | "DONE" | "FAILED";
  error: string | null;
  request: Record<string, unknown>;
  created_at: number;
  started_at: number | null;
  finished_at: number | null;
  provenance?: Record<string, unknown>;
}

export interface PollOptions {
  initialDelayMs?: number;
  maxDelayMs?: number;
  factor?: number;
  timeoutMs?: number;
  onPoll?: (job: JobView) => void;
}

type FetchLike = typeof fetch;

const sleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

async function throwApiError(response: Response): Promise<never> {
  let code = `http_${response.status}`;
  let detail = response.statusText;
  try {
    const body = (await response.json()) as { error?: string; detail?: string };
    if (body.error) code = body.error;
    if (body.detail) detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(response.status, code, detail);
}

export class RemovalClient {
  readonly baseUrl: string;
  private readonly fetchImpl: FetchLike;
  private inFlight = false;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    this.fetchImpl = fetchImpl ?? fetch.bind(globalThis);
  }

  get busy(): boolean {
    return this.inFlight;
  }

  async health(): Promise<Record<string, unknown>> {
    const response = await this.fetchImpl(`${this.baseUrl}/api/v1/health`);
    if (!response.ok) await throwApiError(response);
    return (await response.json()) as Record<string, unknown>;
  }

  async submit(
    imagePng: Uint8Array,
    maskPng: Uint8Array,
    overrides?: Record<string, unknown>,
  ): Promise<string> {
    const form = new FormData();
    form.append("image", new Blob([imagePng.slice().buffer], { type: "image/png" }), "image.png");
    form.append("mask", new Blob([maskPng.slice().buffer], { type: "image/png" }), "mask.png");
    if (overrides && Object.keys(overrides).length > 0) {
      form.append("overrides", JSON.stringify(overrides));
    }
    const response = await this.fetchImpl(`${this.baseUrl}/api/v1/remove`, {
      method: "POST",
      body: form,
    });
    if (!response.ok) await throwApiError(response);
    const body = (await response.json()) as { job_id: string };
    return body.job_id;
  }

  async getJob(jobId: string): Promise<JobView> {
    const response = await this.fetchImpl(`${this.baseUrl}/api/v1/jobs/${jobId}`);
    if (!response.ok) await throwApiError(response);
    return (await response.json()) as JobView;
  }

  /** Poll with multiplicative backoff until the job is DONE or FAILED. */
  async waitForJob(jobId: string, options: PollOptions = {}): Promise<JobView> {
    const initial = options.initialDelayMs ?? 50;
    const max = options.maxDelayMs ?? 1000;
    const factor = options.factor ?? 1.7;
    const timeout = options.timeoutMs ?? 60_000;
    const deadline = Date.now() + timeout;
    let delay = initial;
    for (;;) {
      const job = await this.getJob(jobId);
      options.onPoll?.(job);
      if (job.state === "DONE" || job.state === "FAILED") return job;
      if (Date.now() + delay > deadline) {
        throw new ApiError(0, "poll_timeout", `job ${jobId} still ${job.state}`);
      }
      await sleep(delay);
      delay = Math.min(max, delay * factor);
    }
  }

  async fetchResult(jobId: string): Promise<Uint8Array> {
    const response = await this.fetchImpl(`${this.baseUrl}/api/v1/results/${jobId}`);
    if (!response.ok) await throwApiError(response);
    return new Uint8Array(await response.arrayBuffer());
  }

  async fetchDiagnostics(jobId: string): Promise<Record<string, unknown>> {
    const response = await this.fetchImpl(
      `${this.baseUrl}/api/v1/results/${jobId}/diagnostics`,
    );
    if (!response.ok) await throwApiError(response);
    return (await response.json()) as Record<string, unknown>;
  }

  /**
   * submit + wait + fetch as one operation, holding the tab's single
   * in-flight slot for its whole duration.
   */
  async runRemoval(
    imagePng: Uint8Array,
    maskPng: Uint8Array,
    overrides?: Record<string, unknown>,
    poll?: PollOptions,
  ): Promise<{ jobId: string; job: JobView; resultPng: Uint8Array | null }> {
    if (this.inFlight) {
      throw new ApiError(0, "busy", "a removal job is already in flight in this tab");
    }
    this.inFlight = true;
    try {
      const jobId = await this.submit(imagePng, maskPng, overrides);
      const job = await this.waitForJob(jobId, poll);
      const resultPng = job.state === "DONE" ? await this.fetchResult(jobId) : null;
      return { jobId, job, resultPng };
    } finally {
      this.inFlight = false;
    }
  }
}
