/**
 * Typed client for the curation service HTTP API. No framework, just fetch.
 */

export type TileStatus = "pending" | "kept" | "dropped";
export type Decision = "kept" | "dropped" | "pending";

export interface TileSummary {
  tile_id: string;
  case_id: string;
  her2_score: string;
  split: string;
  status: string;
  artifact_tag: string;
}

export interface TilePage {
  items: TileSummary[];
  total: number;
  limit: number;
  offset: number;
}

export interface Progress {
  total: number;
  pending: number;
  kept: number;
  dropped: number;
}

export interface DecisionResponse {
  tile_id: string;
  status: string;
  artifact_tag: string;
  counts: Progress;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function asJson<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = await resp.json();
      if (body && typeof body.detail === "string") detail = body.detail;
    } catch {
      /* non-JSON error body */
    }
    throw new ApiError(resp.status, detail);
  }
  return (await resp.json()) as T;
}

export class CurationApi {
  constructor(
    private baseUrl: string = "",
    private fetchFn: typeof fetch = fetch,
  ) {}

  listTiles(status: TileStatus | "all" = "pending", limit = 1, offset = 0): Promise<TilePage> {
    const query = `status=${status}&limit=${limit}&offset=${offset}`;
    return this.fetchFn(`${this.baseUrl}/api/tiles?${query}`).then((r) => asJson<TilePage>(r));
  }

  getTile(tileId: string): Promise<TileSummary> {
    return this.fetchFn(`${this.baseUrl}/api/tiles/${tileId}`).then((r) => asJson<TileSummary>(r));
  }

  imageUrl(tileId: string, stain: "source" | "target"): string {
    return `${this.baseUrl}/api/tiles/${tileId}/image?stain=${stain}`;
  }

  postDecision(tileId: string, decision: Decision, artifactTag?: string): Promise<DecisionResponse> {
    const body: Record<string, string> = { decision };
    if (artifactTag) body.artifact_tag = artifactTag;
    return this.fetchFn(`${this.baseUrl}/api/tiles/${tileId}/decision`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    }).then((r) => asJson<DecisionResponse>(r));
  }

  progress(): Promise<Progress> {
    return this.fetchFn(`${this.baseUrl}/api/progress`).then((r) => asJson<Progress>(r));
  }
}
