// HTTP client for the pipeline service. Every UI read and write goes through
// here; there are no hidden channels to the backend.

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export interface ImageSummary {
  image_id: string;
  filename: string;
  run_id: string | null;
  filter: string | null;
  grade: string | null;
  instrument: string;
  tags: string[];
}

export interface SelectionSummary {
  selection_id: string;
  name: string;
  image_ids: string[];
  count: number;
}

export interface JobInfo {
  job_id: number;
  kind: string;
  description: string;
  state: string;
  assigned_node: string | null;
  owner: string;
  requirements_expr: string;
}

export interface NodeInfo {
  name: string;
  slots: number;
  running: number;
  attributes: Record<string, string>;
}

export interface PluginInfo {
  plugin_id: string;
  display_name: string;
  enabled: boolean;
}

export interface ConfigInfo {
  config_id: string;
  name: string;
  plugin_id: string;
}

export interface PolicyInfo {
  kind: "dynamic" | "static";
  policy_id: string;
  label: string;
  criteria?: { attribute: string; op: string; pattern: string }[];
  node_names?: string[];
}

export class ApiFailure extends Error {
  constructor(
    public code: string,
    message: string,
    public status: number,
  ) {
    super(message);
  }
}

export interface ImageQuery {
  run_id?: string;
  filter?: string;
  instrument?: string;
  grade?: string;
  tag?: string;
  in_selection?: string;
  filename_glob?: string;
}

export class ApiClient {
  constructor(
    private baseUrl: string,
    private token: string | null = null,
    private fetchFn: FetchLike = (...args) => fetch(...args),
  ) {}

  setToken(token: string): void {
    this.token = token;
  }

  getToken(): string | null {
    return this.token;
  }

  url(path: string, params?: Record<string, string>): string {
    const query = params ? new URLSearchParams(params).toString() : "";
    return this.baseUrl + path + (query ? `?${query}` : "");
  }

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
    params?: Record<string, string>,
  ): Promise<T> {
    const headers: Record<string, string> = {};
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    if (body !== undefined) headers["Content-Type"] = "application/json";
    const resp = await this.fetchFn(this.url(path, params), {
      method,
      headers,
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    if (!resp.ok) {
      let code = `HTTP_${resp.status}`;
      let message = resp.statusText;
      try {
        const payload = (await resp.json()) as { code?: string; message?: string };
        if (payload.code) code = payload.code;
        if (payload.message) message = payload.message;
      } catch {
        // non-JSON error body; keep the HTTP fallback
      }
      throw new ApiFailure(code, message, resp.status);
    }
    return (await resp.json()) as T;
  }

  async login(login: string, password: string): Promise<string> {
    const body = await this.request<{ token: string }>("POST", "/api/auth", {
      login,
      password,
    });
    this.token = body.token;
    return body.token;
  }

  images(query: ImageQuery): Promise<ImageSummary[]> {
    const params: Record<string, string> = {};
    for (const [key, value] of Object.entries(query)) {
      if (value !== undefined && value !== "") params[key] = value;
    }
    return this.request("GET", "/api/images", undefined, params);
  }

  selections(): Promise<SelectionSummary[]> {
    return this.request("GET", "/api/selections");
  }

  saveSelection(name: string, imageIds: string[]): Promise<SelectionSummary> {
    return this.request("POST", "/api/selections", { name, image_ids: imageIds });
  }

  mergeSelections(targetName: string, sourceIds: string[]): Promise<SelectionSummary> {
    return this.request("POST", "/api/selections/merge", {
      target_name: targetName,
      source_ids: sourceIds,
    });
  }

  deleteSelection(selectionId: string): Promise<{ deleted: string }> {
    return this.request("DELETE", `/api/selections/${selectionId}`);
  }

  applyTag(tag: string, imageIds: string[], mark: boolean): Promise<{ affected: number }> {
    return this.request("POST", "/api/tags/apply", {
      tag,
      image_ids: imageIds,
      mark,
    });
  }

  tags(): Promise<{ name: string; style: string | null }[]> {
    return this.request("GET", "/api/tags");
  }

  jobs(): Promise<JobInfo[]> {
    return this.request("GET", "/api/jobs");
  }

  cancelJob(jobId: number): Promise<JobInfo> {
    return this.request("POST", `/api/jobs/${jobId}/cancel`);
  }

  nodes(): Promise<NodeInfo[]> {
    return this.request("GET", "/api/nodes");
  }

  plugins(): Promise<PluginInfo[]> {
    return this.request("GET", "/api/plugins", undefined, { enabled_only: "true" });
  }

  configs(pluginId: string): Promise<ConfigInfo[]> {
    return this.request("GET", "/api/configs", undefined, { plugin_id: pluginId });
  }

  policies(): Promise<PolicyInfo[]> {
    return this.request("GET", "/api/policies");
  }

  createDynamicPolicy(
    label: string,
    criteria: { attribute: string; op: string; pattern: string }[],
  ): Promise<PolicyInfo> {
    return this.request("POST", "/api/policies", { kind: "dynamic", label, criteria });
  }

  createStaticSelection(label: string, nodeNames: string[]): Promise<PolicyInfo> {
    return this.request("POST", "/api/policies", {
      kind: "static",
      label,
      node_names: nodeNames,
    });
  }

  createCartItem(body: {
    plugin_id: string;
    config_id: string;
    selection_id?: string;
    image_ids?: string[];
    aux_paths?: Record<string, string>;
    policy_kind?: string;
    policy_id?: string;
  }): Promise<{ item_id: string }> {
    return this.request("POST", "/api/cart", body);
  }

  submitJob(cartItemId: string, policy?: string, staticSel?: string): Promise<JobInfo> {
    const body: Record<string, unknown> = { cart_item_id: cartItemId };
    if (policy) body["policy"] = policy;
    if (staticSel) body["static"] = staticSel;
    return this.request("POST", "/api/jobs", body);
  }
}
