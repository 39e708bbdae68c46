// Thin typed client for the curation HTTP API (see docs/curation-api.md in
// the main repository). Every call carries the annotator name in the
// X-Annotator header; the server fills decision metadata from it.

export type Status = 'Queued' | 'InReview' | 'Accepted' | 'Rejected';

export interface CandidateInfo {
  qa_id: string;
  pair_id: string;
  category: string;
  source_view: string;
  question: string;
  a_init: string;
  a_ego: string;
  a_exo: string;
  a_both: string;
  a_text: string;
  option_sets: Record<string, string[]>;
  flags: string[];
}

export interface ItemPayload {
  qa_id: string;
  status: Status;
  assigned_to: string | null;
  candidate: CandidateInfo;
  decision: Record<string, unknown> | null;
  reject_reason: string | null;
  take_id?: string;
  images?: { ego: string; exo: string };
}

export interface ProgressPayload {
  total: number;
  queued: number;
  in_review: number;
  accepted: number;
  rejected: number;
  per_annotator: Record<string, Record<string, number>>;
  per_category: Record<string, Record<string, number>>;
}

export interface DecisionPayload {
  final_question: string;
  final_options: string[];
  answer_index: number;
  option_provenance: string[];
  decided_at: string;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
    public errors: Record<string, string> | null = null,
  ) {
    super(message);
  }
}

export class CurationApi {
  constructor(
    private annotator: string,
    private base: string = '',
  ) {}

  private async request(path: string, init: RequestInit = {}): Promise<any> {
    const headers: Record<string, string> = { 'X-Annotator': this.annotator };
    if (init.body !== undefined) {
      headers['Content-Type'] = 'application/json';
    }
    const response = await fetch(this.base + path, { ...init, headers });
    let body: any = null;
    try {
      body = await response.json();
    } catch {
      // non-JSON error pages fall through with a null body
    }
    if (!response.ok) {
      if (response.status === 422 && body && body.errors) {
        throw new ApiError(422, 'decision rejected by validation', body.errors);
      }
      const detail = body && body.detail ? String(body.detail) : `HTTP ${response.status}`;
      throw new ApiError(response.status, detail);
    }
    return body;
  }

  async nextItem(category?: string): Promise<ItemPayload | null> {
    const query = category ? `?category=${encodeURIComponent(category)}` : '';
    const body = await this.request(`/api/items/next${query}`);
    return body.item;
  }

  async item(qaId: string): Promise<ItemPayload> {
    const body = await this.request(`/api/items/${encodeURIComponent(qaId)}`);
    return body.item;
  }

  async submitDecision(qaId: string, payload: DecisionPayload): Promise<ItemPayload> {
    const body = await this.request(`/api/items/${encodeURIComponent(qaId)}/decision`, {
      method: 'POST',
      body: JSON.stringify(payload),
    });
    return body.item;
  }

  async reject(qaId: string, reason: string): Promise<ItemPayload> {
    const body = await this.request(`/api/items/${encodeURIComponent(qaId)}/reject`, {
      method: 'POST',
      body: JSON.stringify({ reason }),
    });
    return body.item;
  }

  async reopen(qaId: string): Promise<ItemPayload> {
    const body = await this.request(`/api/items/${encodeURIComponent(qaId)}/reopen`, {
      method: 'POST',
      body: JSON.stringify({}),
    });
    return body.item;
  }

  progress(): Promise<ProgressPayload> {
    return this.request('/api/progress');
  }

  imageUrl(token: string): string {
    return `${this.base}/api/images/${token}`;
  }

  exportUrl(): string {
    return `${this.base}/api/export`;
  }
}
