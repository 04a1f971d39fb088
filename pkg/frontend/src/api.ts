// Typed client for the session service. Every pixel shown in the UI comes
// from these endpoints; the frontend never computes matting math itself.

export interface SessionState {
  id: string;
  iteration: number;
  revision: number;
  height: number;
  width: number;
  config: { iterations: number; sigma: number; gradient_variant: string };
  edits: number;
  state_hash: string;
  previews: Record<string, string>;
}

export interface EditPayload {
  target: "foreground" | "background" | "alpha";
  mask: string; // base64 PNG, nonzero = edited
  values: string; // base64 PNG with replacement values
  zero_hidden?: boolean;
}

export interface ApiErrorBody {
  code: string;
  message: string;
  detail?: string;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public body: ApiErrorBody,
  ) {
    super(body.message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

async function parseError(r: Response): Promise<never> {
  let body: ApiErrorBody;
  try {
    body = (await r.json()) as ApiErrorBody;
  } catch {
    body = { code: "http_error", message: `HTTP ${r.status}` };
  }
  throw new ApiError(r.status, body);
}

export class ApiClient {
  constructor(
    private base: string = "",
    private fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const r = await this.fetchImpl(this.base + path, {
      headers: { "content-type": "application/json" },
      ...init,
    });
    if (!r.ok) await parseError(r);
    return (await r.json()) as T;
  }

  createSession(body: {
    image: string;
    alpha: string;
    trimap?: string;
    iterations?: number;
  }): Promise<SessionState> {
    return this.json("/sessions", { method: "POST", body: JSON.stringify(body) });
  }

  getState(id: string): Promise<SessionState> {
    return this.json(`/sessions/${id}`);
  }

  step(id: string, n: number): Promise<SessionState> {
    return this.json(`/sessions/${id}/step`, {
      method: "POST",
      body: JSON.stringify({ n }),
    });
  }

  edit(
    id: string,
    payload: EditPayload,
  ): Promise<{ edited_pixels: number; state: SessionState }> {
    return this.json(`/sessions/${id}/edit`, {
      method: "POST",
      body: JSON.stringify(payload),
    });
  }

  reset(id: string): Promise<SessionState> {
    return this.json(`/sessions/${id}/reset`, { method: "POST" });
  }

  exportUrl(id: string, what: string, bg?: string, bits = 8): string {
    const params = new URLSearchParams({ what, bits: String(bits) });
    if (bg) params.set("bg", bg);
    return `${this.base}/sessions/${id}/export?${params.toString()}`;
  }

  async fetchExport(id: string, what: string, bg?: string, bits = 8): Promise<ArrayBuffer> {
    const r = await this.fetchImpl(this.exportUrl(id, what, bg, bits));
    if (!r.ok) await parseError(r);
    return r.arrayBuffer();
  }

  previewUrl(state: SessionState, layer: string): string {
    // revision-stamped so the browser refetches after each mutation
    return `${this.base}${state.previews[layer]}?rev=${state.revision}`;
  }
}
