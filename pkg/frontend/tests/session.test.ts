import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import type { Transport } from "../src/api.js";
import { SessionRecorder } from "../src/session.js";
import { DEFAULT_DEBOUNCE_MS, TypeaheadController } from "../src/typeahead.js";

function fakeClock(start = 0): { now: () => number; tick: (ms: number) => void } {
  let t = start;
  return { now: () => t, tick: (ms) => (t += ms) };
}

describe("session recorder", () => {
  it("records characters typed at selection time", () => {
    const clock = fakeClock();
    const recorder = new SessionRecorder(clock.now);
    for (const prefix of ["w", "wo", "wor", "work", "worko"]) {
      clock.tick(100);
      recorder.keystroke(prefix);
    }
    const selection = recorder.select("workout apps", 1);
    expect(selection.charactersTyped).toBe(5);
    expect(selection.suggestionTaken).toBe(true);
    expect(selection.rank).toBe(1);
    const log = recorder.snapshot();
    expect(log.keystrokes.length).toBe(5);
    expect(log.selection?.charactersTyped).toBe(5);
  });

  it("enter without selection records suggestion_taken=false", () => {
    const recorder = new SessionRecorder(() => 0);
    recorder.keystroke("wor");
    const selection = recorder.submitWithoutSelection();
    expect(selection.suggestionTaken).toBe(false);
    expect(selection.query).toBeNull();
    expect(selection.charactersTyped).toBe(3);
  });

  it("pairs request/response timings by id", () => {
    const clock = fakeClock(1000);
    const recorder = new SessionRecorder(clock.now);
    recorder.requestSent(1, "wo");
    clock.tick(40);
    recorder.responseReceived(1, true, { latencyUs: 900, cacheHit: true, stale: false });
    const log = recorder.snapshot();
    expect(log.requests[0].sentAt).toBe(1000);
    expect(log.requests[0].receivedAt).toBe(1040);
    expect(log.requests[0].cacheHit).toBe(true);
    expect(log.requests[0].stale).toBe(false);
  });

  it("exports valid JSON", () => {
    const recorder = new SessionRecorder(() => 7);
    recorder.keystroke("mo");
    recorder.select("moon vr", 2);
    const parsed = JSON.parse(recorder.export());
    expect(parsed.selection.query).toBe("moon vr");
  });
});

describe("scripted end-to-end session", () => {
  beforeEach(() => vi.useFakeTimers());
  afterEach(() => vi.useRealTimers());

  it("replay of a scripted 5-keystroke selection matches expectation", async () => {
    const transport: Transport = async (prefix) => ({
      suggestions: [
        { query: `${prefix}kout apps`, grounded: true, cached_rank: 1 },
        { query: `${prefix}d game`, grounded: true, cached_rank: null },
      ],
      cache_hit: true,
      degraded: false,
      latency_us: 150,
      snapshot_version: 1,
    });
    const recorder = new SessionRecorder(() => Date.now());
    const controller = new TypeaheadController(transport, {
      onRequest: (id, prefix) => recorder.requestSent(id, prefix),
      onResponse: (id, _prefix, response, stale) =>
        recorder.responseReceived(id, true, {
          latencyUs: response.latency_us,
          cacheHit: response.cache_hit,
          stale,
        }),
    });

    // the user types five characters, pausing between windows
    for (const prefix of ["w", "wo", "wor", "work", "worko"]) {
      recorder.keystroke(prefix);
      controller.onInput(prefix);
      await vi.advanceTimersByTimeAsync(DEFAULT_DEBOUNCE_MS + 10);
    }
    expect(controller.state.suggestions[0]?.query).toBe("workokout apps");

    // then clicks the first suggestion
    const shown = controller.state.suggestions[0];
    const selection = recorder.select(shown.query, shown.rank);
    expect(selection.charactersTyped).toBe(5);
    expect(selection.suggestionTaken).toBe(true);

    const log = recorder.snapshot();
    // "w" is below min_chars: four requests, all answered, none stale
    expect(log.requests.length).toBe(4);
    expect(log.requests.every((r) => r.ok === true && r.stale === false)).toBe(true);
    expect(log.keystrokes.map((k) => k.prefix)).toEqual(["w", "wo", "wor", "work", "worko"]);
  });
});
