/** Debounced typeahead state machine, decoupled from the DOM.
 *
 * One trailing debounce timer coalesces keystrokes into at most one request
 * per quiet window. Every request carries a monotonically increasing id;
 * a response renders only if it is newer than the last rendered one and its
 * prefix is still the active prefix, so stale or out-of-order responses can
 * never surface. Badges are pure projections of API fields.
 */

import type { ApiSuggestion, CompleteResponse, Transport } from "./api.js";

export interface SuggestionView {
  query: string;
  grounded: boolean;
  cached: boolean;
  cachedRank: number | null;
  rank: number;
}

export type PanelStatus = "idle" | "pending" | "ready" | "error";

export interface ViewState {
  prefix: string;
  status: PanelStatus;
  suggestions: SuggestionView[];
  cacheHit: boolean | null;
  degraded: boolean;
  latencyUs: number | null;
  snapshotVersion: number | null;
  error: string | null;
}

export interface TypeaheadOptions {
  minChars?: number;
  debounceMs?: number;
  limit?: number;
  onRender?: (state: ViewState) => void;
  onRequest?: (id: number, prefix: string) => void;
  onResponse?: (id: number, prefix: string, response: CompleteResponse, stale: boolean) => void;
  setTimer?: (callback: () => void, ms: number) => unknown;
  clearTimer?: (handle: unknown) => void;
}

export const DEFAULT_MIN_CHARS = 2;
export const DEFAULT_DEBOUNCE_MS = 120;
export const DEFAULT_LIMIT = 8;

function toViews(suggestions: ApiSuggestion[]): SuggestionView[] {
  return suggestions.map((s, index) => ({
    query: s.query,
    grounded: s.grounded,
    cached: s.cached_rank !== null,
    cachedRank: s.cached_rank,
    rank: index + 1,
  }));
}

export class TypeaheadController {
  readonly minChars: number;
  readonly debounceMs: number;
  readonly limit: number;

  private readonly transport: Transport;
  private readonly onRender: (state: ViewState) => void;
  private readonly onRequest?: (id: number, prefix: string) => void;
  private readonly onResponse?: TypeaheadOptions["onResponse"];
  private readonly setTimer: (callback: () => void, ms: number) => unknown;
  private readonly clearTimer: (handle: unknown) => void;

  private timer: unknown = null;
  private nextRequestId = 1;
  private lastRenderedId = 0;
  private inFlight = 0;
  requestsIssued = 0;

  state: ViewState = {
    prefix: "",
    status: "idle",
    suggestions: [],
    cacheHit: null,
    degraded: false,
    latencyUs: null,
    snapshotVersion: null,
    error: null,
  };

  constructor(transport: Transport, options: TypeaheadOptions = {}) {
    this.transport = transport;
    this.minChars = options.minChars ?? DEFAULT_MIN_CHARS;
    this.debounceMs = options.debounceMs ?? DEFAULT_DEBOUNCE_MS;
    this.limit = options.limit ?? DEFAULT_LIMIT;
    this.onRender = options.onRender ?? (() => {});
    this.onRequest = options.onRequest;
    this.onResponse = options.onResponse;
    this.setTimer = options.setTimer ?? ((cb, ms) => setTimeout(cb, ms));
    this.clearTimer = options.clearTimer ?? ((handle) => clearTimeout(handle as number));
  }

  /** Feed the current input-box contents; schedules at most one request per window. */
  onInput(prefix: string): void {
    this.state = { ...this.state, prefix };
    if (this.timer !== null) {
      this.clearTimer(this.timer);
      this.timer = null;
    }
    if (prefix.length < this.minChars) {
      // short prefixes render an empty panel immediately and issue nothing
      this.state = {
        ...this.state,
        status: "idle",
        suggestions: [],
        cacheHit: null,
        degraded: false,
        latencyUs: null,
        error: null,
      };
      this.render();
      return;
    }
    this.state = { ...this.state, status: "pending" };
    this.render();
    this.timer = this.setTimer(() => {
      this.timer = null;
      void this.issue(this.state.prefix);
    }, this.debounceMs);
  }

  /** True while a response may still arrive (timer armed or request in flight). */
  get busy(): boolean {
    return this.timer !== null || this.inFlight > 0;
  }

  private async issue(prefix: string): Promise<void> {
    const id = this.nextRequestId++;
    this.requestsIssued += 1;
    this.inFlight += 1;
    this.onRequest?.(id, prefix);
    let response: CompleteResponse;
    try {
      response = await this.transport(prefix, this.limit);
    } catch (error) {
      this.inFlight -= 1;
      if (prefix === this.state.prefix && id > this.lastRenderedId) {
        // non-blocking error strip; the panel empties but typing continues
        this.lastRenderedId = id;
        this.state = {
          ...this.state,
          status: "error",
          suggestions: [],
          cacheHit: null,
          degraded: false,
          latencyUs: null,
          error: error instanceof Error ? error.message : String(error),
        };
        this.render();
      }
      return;
    }
    this.inFlight -= 1;
    const stale = id <= this.lastRenderedId || prefix !== this.state.prefix;
    this.onResponse?.(id, prefix, response, stale);
    if (stale) {
      return;
    }
    this.lastRenderedId = id;
    this.state = {
      ...this.state,
      status: "ready",
      suggestions: toViews(response.suggestions),
      cacheHit: response.cache_hit,
      degraded: response.degraded,
      latencyUs: response.latency_us,
      snapshotVersion: response.snapshot_version,
      error: null,
    };
    this.render();
  }

  private render(): void {
    this.onRender(this.state);
  }
}
