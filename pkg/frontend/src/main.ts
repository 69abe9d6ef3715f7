/** DOM wiring for the typeahead demo page. */

import { fetchHealth, makeTransport } from "./api.js";
import { SessionRecorder } from "./session.js";
import { TypeaheadController, type ViewState } from "./typeahead.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function setup(): void {
  const params = new URLSearchParams(window.location.search);
  const baseUrl =
    params.get("api") ?? (window as { QAC_API_BASE?: string }).QAC_API_BASE ?? "http://127.0.0.1:8080";

  const input = el<HTMLInputElement>("prefix-input");
  const panel = el<HTMLUListElement>("suggestions");
  const statusStrip = el<HTMLDivElement>("status-strip");
  const errorStrip = el<HTMLDivElement>("error-strip");
  const healthLine = el<HTMLDivElement>("health-line");
  const exportButton = el<HTMLButtonElement>("export-log");
  const selectionLine = el<HTMLDivElement>("selection-line");

  const recorder = new SessionRecorder();

  const render = (state: ViewState): void => {
    errorStrip.textContent = state.error ? `service error: ${state.error} (typing still works)` : "";
    errorStrip.hidden = !state.error;
    if (state.status === "ready") {
      const source = state.cacheHit ? "cache" : state.degraded ? "degraded" : "online";
      const ms = state.latencyUs === null ? "?" : (state.latencyUs / 1000).toFixed(1);
      statusStrip.textContent = `${state.suggestions.length} suggestions · ${source} · ${ms} ms`;
    } else if (state.status === "pending") {
      statusStrip.textContent = "…";
    } else {
      statusStrip.textContent = "";
    }
    panel.replaceChildren(
      ...state.suggestions.map((s) => {
        const item = document.createElement("li");
        const text = document.createElement("span");
        text.textContent = s.query;
        text.className = "query";
        item.appendChild(text);
        if (s.grounded) {
          const badge = document.createElement("span");
          badge.className = "badge grounded";
          badge.textContent = "grounded";
          item.appendChild(badge);
        }
        if (s.cached) {
          const badge = document.createElement("span");
          badge.className = "badge cached";
          badge.textContent = `cached #${s.cachedRank}`;
          item.appendChild(badge);
        }
        item.addEventListener("click", () => {
          const event = recorder.select(s.query, s.rank);
          input.value = s.query;
          selectionLine.textContent =
            `selected "${event.query}" at rank ${event.rank} after ` +
            `${event.charactersTyped} characters`;
        });
        return item;
      }),
    );
  };

  const controller = new TypeaheadController(makeTransport(baseUrl), {
    onRender: render,
    onRequest: (id, prefix) => recorder.requestSent(id, prefix),
    onResponse: (id, _prefix, response, stale) =>
      recorder.responseReceived(id, true, {
        latencyUs: response.latency_us,
        cacheHit: response.cache_hit,
        stale,
      }),
  });

  input.addEventListener("input", () => {
    recorder.keystroke(input.value);
    controller.onInput(input.value);
  });
  input.addEventListener("keydown", (event) => {
    if (event.key === "Enter") {
      const selection = recorder.submitWithoutSelection();
      selectionLine.textContent =
        `submitted raw prefix after ${selection.charactersTyped} characters ` +
        "(no suggestion taken)";
    }
  });

  exportButton.addEventListener("click", () => {
    const blob = new Blob([recorder.export()], { type: "application/json" });
    const link = document.createElement("a");
    link.href = URL.createObjectURL(blob);
    link.download = "qac-session.json";
    link.click();
    URL.revokeObjectURL(link.href);
  });

  fetchHealth(baseUrl)
    .then((health) => {
      healthLine.textContent =
        `service ok · snapshot v${health.snapshot_version} · ` +
        `${health.cache_entries} cached prefixes`;
    })
    .catch(() => {
      healthLine.textContent = `cannot reach ${baseUrl} — start the engine with: qac serve`;
    });
}

document.addEventListener("DOMContentLoaded", setup);
