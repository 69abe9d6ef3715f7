/** Session log: keystrokes, request/response timings, and the selection.
 *
 * The log mirrors the two quantities a typeahead exists to move: characters
 * typed before selection and whether a suggestion was taken at all. It makes
 * no statistical claims; it exists so a human can compare configurations.
 */

export interface KeystrokeEvent {
  t: number;
  prefix: string;
}

export interface RequestEvent {
  id: number;
  prefix: string;
  sentAt: number;
  receivedAt: number | null;
  ok: boolean | null;
  latencyUs: number | null;
  cacheHit: boolean | null;
  stale: boolean | null;
}

export interface SelectionEvent {
  query: string | null;
  rank: number | null;
  charactersTyped: number;
  suggestionTaken: boolean;
  t: number;
}

export interface SessionLog {
  startedAt: number;
  keystrokes: KeystrokeEvent[];
  requests: RequestEvent[];
  selection: SelectionEvent | null;
}

export class SessionRecorder {
  private readonly clock: () => number;
  private readonly log: SessionLog;
  private currentPrefix = "";

  constructor(clock: () => number = () => Date.now()) {
    this.clock = clock;
    this.log = {
      startedAt: this.clock(),
      keystrokes: [],
      requests: [],
      selection: null,
    };
  }

  keystroke(prefix: string): void {
    this.currentPrefix = prefix;
    this.log.keystrokes.push({ t: this.clock(), prefix });
  }

  requestSent(id: number, prefix: string): void {
    this.log.requests.push({
      id,
      prefix,
      sentAt: this.clock(),
      receivedAt: null,
      ok: null,
      latencyUs: null,
      cacheHit: null,
      stale: null,
    });
  }

  responseReceived(
    id: number,
    ok: boolean,
    options: { latencyUs?: number; cacheHit?: boolean; stale?: boolean } = {},
  ): void {
    const entry = this.log.requests.find((r) => r.id === id);
    if (!entry) {
      return;
    }
    entry.receivedAt = this.clock();
    entry.ok = ok;
    entry.latencyUs = options.latencyUs ?? null;
    entry.cacheHit = options.cacheHit ?? null;
    entry.stale = options.stale ?? null;
  }

  /** A suggestion was clicked or accepted; characters typed = prefix length now. */
  select(query: string, rank: number): SelectionEvent {
    const event: SelectionEvent = {
      query,
      rank,
      charactersTyped: this.currentPrefix.length,
      suggestionTaken: true,
      t: this.clock(),
    };
    this.log.selection = event;
    return event;
  }

  /** The user submitted the raw prefix without taking any suggestion. */
  submitWithoutSelection(): SelectionEvent {
    const event: SelectionEvent = {
      query: null,
      rank: null,
      charactersTyped: this.currentPrefix.length,
      suggestionTaken: false,
      t: this.clock(),
    };
    this.log.selection = event;
    return event;
  }

  snapshot(): SessionLog {
    return JSON.parse(JSON.stringify(this.log)) as SessionLog;
  }

  /** Pretty JSON for download. */
  export(): string {
    return JSON.stringify(this.log, null, 2);
  }
}
