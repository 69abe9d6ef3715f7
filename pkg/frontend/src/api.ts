/** Wire types and fetch helpers for the completion service. */

export interface ApiSuggestion {
  query: string;
  grounded: boolean;
  cached_rank: number | null;
}

export interface CompleteResponse {
  suggestions: ApiSuggestion[];
  cache_hit: boolean;
  degraded: boolean;
  latency_us: number;
  snapshot_version: number;
}

export interface HealthResponse {
  status: string;
  snapshot_version: number;
  cache_entries: number;
}

/** Transport contract the controller depends on; tests inject fakes. */
export type Transport = (prefix: string, limit: number) => Promise<CompleteResponse>;

export function makeTransport(baseUrl: string, fetchFn: typeof fetch = fetch): Transport {
  return async (prefix: string, limit: number): Promise<CompleteResponse> => {
    const url = `${baseUrl}/v1/complete?prefix=${encodeURIComponent(prefix)}&limit=${limit}`;
    const response = await fetchFn(url);
    if (!response.ok) {
      throw new Error(`completion request failed: HTTP ${response.status}`);
    }
    return (await response.json()) as CompleteResponse;
  };
}

export async function fetchHealth(
  baseUrl: string,
  fetchFn: typeof fetch = fetch,
): Promise<HealthResponse> {
  const response = await fetchFn(`${baseUrl}/v1/health`);
  if (!response.ok) {
    throw new Error(`health request failed: HTTP ${response.status}`);
  }
  return (await response.json()) as HealthResponse;
}
