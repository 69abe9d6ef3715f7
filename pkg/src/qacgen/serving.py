"""Hybrid two-tier serving: offline prefix cache first, online fallback second.

Cache hits are pure lookups: no retrieval, no prompt rendering, no generation.
Misses run the full generate-and-gate pipeline under a deadline and degrade to
raw query-index candidates if the budget is blown. Snapshots swap atomically:
one attribute assignment publishes version and entries together, so every
request sees exactly one snapshot.
"""

from __future__ import annotations

import json
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

from . import QacError
from .context import ContextConfig, Prefix, RetrievedContext, build_context, render_prompt
from .generator import (
    AnswerFormatError,
    Generator,
    GeneratorProfile,
    SuggestionList,
    parse_answer_block,
    render_answer_block,
)
from .retrieval import CatalogItem, QueryIndex, lookup_prefix, normalize_prefix
from .reward import RewardWeights, VerifierSuite, score_list

SNAPSHOT_FORMAT_VERSION = 1
DEFAULT_REWARD_FLOOR = 0.3
DEFAULT_DEADLINE = 0.150
DEFAULT_LIMIT = 10


class CorruptSnapshot(QacError):
    """A snapshot file failed validation; the previous snapshot stays active."""

    def __init__(self, version: object, reason: str):
        super().__init__(f"snapshot (format_version={version}): {reason}")
        self.version = version
        self.reason = reason


@dataclass(frozen=True)
class CacheEntry:
    """One pre-generated suggestion list with its build-time verdicts."""

    queries: tuple[str, ...]
    raw_text: str
    safe: tuple[bool, ...]
    grounded: tuple[bool, ...]
    profile: str
    timestamp: float
    reward: float


@dataclass(frozen=True)
class CacheSnapshot:
    """Immutable map from normalized prefix to its cached entry."""

    entries: Mapping[str, CacheEntry]

    def __len__(self) -> int:
        return len(self.entries)


def serving_gate(
    queries: Sequence[str], safe: Sequence[bool], grounded: Sequence[bool]
) -> tuple[tuple[str, ...], tuple[int, ...]]:
    """Drop unsafe or catalog-ungrounded queries, preserving order.

    Returns the kept queries and their original 0-based positions.
    """
    if not len(queries) == len(safe) == len(grounded):
        raise ValueError("flags must align with queries")
    kept = [
        (query, i)
        for i, query in enumerate(queries)
        if safe[i] and grounded[i]
    ]
    return tuple(q for q, _ in kept), tuple(i for _, i in kept)


@dataclass(frozen=True)
class ServeResult:
    """What one completion request returned and how it was produced."""

    suggestions: SuggestionList
    grounded: tuple[bool, ...]
    cached_rank: tuple[int | None, ...]
    cache_hit: bool
    degraded: bool
    latency_us: int
    filtered_count: int
    snapshot_version: int


@dataclass
class EngineCounters:
    """Instrumentation for the purity checks on the cache-hit path."""

    generator_calls: int = 0
    context_builds: int = 0
    index_lookups: int = 0

    def total_retrieval(self) -> int:
        return self.context_builds + self.index_lookups


@dataclass(frozen=True)
class _ActiveSnapshot:
    version: int
    snapshot: CacheSnapshot


class ServingEngine:
    """Holds the retrieval stack, verifier suite, generators, and live snapshot."""

    def __init__(
        self,
        index: QueryIndex,
        catalog: Sequence[CatalogItem],
        suite: VerifierSuite,
        weights: RewardWeights,
        generators: Mapping[str, tuple[GeneratorProfile, Generator]],
        context_config: ContextConfig = ContextConfig(),
        template: str | None = None,
        compact_profile: str = "compact",
        deadline: float = DEFAULT_DEADLINE,
        reward_floor: float = DEFAULT_REWARD_FLOOR,
        default_limit: int = DEFAULT_LIMIT,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.index = index
        self.catalog = list(catalog)
        self.suite = suite
        self.weights = weights
        self.generators = dict(generators)
        self.context_config = context_config
        self.template = template
        self.compact_profile = compact_profile
        self.deadline = deadline
        self.reward_floor = reward_floor
        self.default_limit = default_limit
        self.clock = clock
        self.counters = EngineCounters()
        self._active = _ActiveSnapshot(version=0, snapshot=CacheSnapshot(entries={}))
        self._swap_lock = threading.Lock()
        # profiles may declare a max-parallelism bound; honor it per profile
        self._gen_slots = {
            name: threading.BoundedSemaphore(profile.max_parallelism)
            for name, (profile, _) in self.generators.items()
            if profile.max_parallelism is not None
        }

    # -- snapshot management ------------------------------------------------

    @property
    def snapshot_version(self) -> int:
        return self._active.version

    @property
    def cache_entries(self) -> int:
        return len(self._active.snapshot)

    def swap_snapshot(self, snapshot: CacheSnapshot) -> int:
        """Publish a new snapshot; returns its version.

        The version bump and the entries land in one attribute assignment, so
        concurrent readers observe entirely the old or entirely the new state.
        """
        with self._swap_lock:
            version = self._active.version + 1
            self._active = _ActiveSnapshot(version=version, snapshot=snapshot)
            return version

    # -- context and generation ---------------------------------------------

    def build_context(self, prefix: Prefix) -> RetrievedContext:
        self.counters.context_builds += 1
        return build_context(prefix, self.index, self.catalog, self.context_config)

    def render(self, context: RetrievedContext):
        if self.template is not None:
            return render_prompt(context, self.template)
        return render_prompt(context)

    def generate(self, profile_name: str, prompt: str, seed: int | None = None) -> str:
        profile, generator = self.generators[profile_name]
        self.counters.generator_calls += 1
        effective = profile.seed if seed is None else seed
        slot = self._gen_slots.get(profile_name)
        if slot is None:
            return generator.generate(prompt, seed=effective)
        with slot:
            return generator.generate(prompt, seed=effective)

    def score_raw(self, prefix: Prefix, raw: str, context: RetrievedContext):
        return score_list(prefix.text, raw, context, self.suite, self.weights)

    # -- request path ---------------------------------------------------------

    def _degraded(
        self, key: str, limit: int, active: _ActiveSnapshot, started: float
    ) -> ServeResult:
        """Candidates-only answer for deadline breaches and pipeline errors."""
        queries: tuple[str, ...] = ()
        if key:
            self.counters.index_lookups += 1
            candidates = lookup_prefix(self.index, key, limit)
            picked = []
            for query, _ in candidates:
                if self.suite.safety_classifier(query):
                    picked.append(query)
            queries = tuple(picked)
        filtered = (len(candidates) if key else 0) - len(queries)
        return ServeResult(
            suggestions=SuggestionList(queries=queries),
            grounded=(False,) * len(queries),
            cached_rank=(None,) * len(queries),
            cache_hit=False,
            degraded=True,
            latency_us=int((self.clock() - started) * 1e6),
            filtered_count=filtered,
            snapshot_version=active.version,
        )

    def serve_complete(
        self, prefix: str, limit: int | None = None, deadline: float | None = None
    ) -> ServeResult:
        """Resolve one typed prefix: cache first, online fallback, degrade last."""
        started = self.clock()
        budget = self.deadline if deadline is None else deadline
        limit = self.default_limit if limit is None else limit
        active = self._active
        key = normalize_prefix(prefix)
        entry = active.snapshot.entries.get(key)
        if entry is not None:
            return self._serve_cached(entry, limit, active, started)
        if not key:
            return ServeResult(
                suggestions=SuggestionList(queries=()),
                grounded=(),
                cached_rank=(),
                cache_hit=False,
                degraded=False,
                latency_us=int((self.clock() - started) * 1e6),
                filtered_count=0,
                snapshot_version=active.version,
            )
        return self._serve_online(key, limit, budget, active, started)

    def _serve_cached(
        self, entry: CacheEntry, limit: int, active: _ActiveSnapshot, started: float
    ) -> ServeResult:
        # Safety is re-checked live (pure lexicon, no retrieval); catalog
        # groundedness reuses the flags frozen at build time.
        safe_now = tuple(self.suite.safety_classifier(q) for q in entry.queries)
        safe = tuple(a and b for a, b in zip(entry.safe, safe_now))
        queries, positions = serving_gate(entry.queries, safe, entry.grounded)
        gate_removed = len(entry.queries) - len(queries)
        queries, positions = queries[:limit], positions[:limit]
        return ServeResult(
            suggestions=SuggestionList(queries=queries, raw_text=entry.raw_text),
            grounded=tuple(entry.grounded[i] for i in positions),
            cached_rank=tuple(i + 1 for i in positions),
            cache_hit=True,
            degraded=False,
            latency_us=int((self.clock() - started) * 1e6),
            filtered_count=gate_removed,
            snapshot_version=active.version,
        )

    def _serve_online(
        self, key: str, limit: int, budget: float, active: _ActiveSnapshot, started: float
    ) -> ServeResult:
        def over_budget() -> bool:
            return self.clock() - started > budget

        try:
            context = self.build_context(Prefix(text=key))
            if over_budget():
                return self._degraded(key, limit, active, started)
            prompt = self.render(context)
            raw = self.generate(self.compact_profile, prompt.rendered)
            if over_budget():
                return self._degraded(key, limit, active, started)
            parsed = parse_answer_block(raw)
            scored = self.score_raw(Prefix(text=key), raw, context)
            if over_budget():
                return self._degraded(key, limit, active, started)
        except QacError:
            return self._degraded(key, limit, active, started)
        flags = scored.scores.per_query_flags
        queries, positions = serving_gate(parsed.queries, flags.safe, flags.grounded)
        gate_removed = len(parsed.queries) - len(queries)
        queries = queries[:limit]
        return ServeResult(
            suggestions=SuggestionList(queries=queries, raw_text=raw),
            grounded=(True,) * len(queries),
            cached_rank=(None,) * len(queries),
            cache_hit=False,
            degraded=False,
            latency_us=int((self.clock() - started) * 1e6),
            filtered_count=gate_removed,
            snapshot_version=active.version,
        )


@dataclass
class PregenerateReport:
    """Outcome of an offline cache build."""

    built: int = 0
    skipped: list[tuple[str, str]] = field(default_factory=list)


def pregenerate_cache(
    engine: ServingEngine,
    prefixes: Sequence[Prefix],
    profile_name: str = "large",
    timestamp: float = 0.0,
) -> tuple[CacheSnapshot, PregenerateReport]:
    """Generate, score, and cache suggestions for high-traffic prefixes.

    Only format-valid lists with reward at or above the engine's floor are
    admitted; every rejection is recorded and the build continues. The
    timestamp is caller-supplied so artifact bytes stay reproducible.
    """
    entries: dict[str, CacheEntry] = {}
    report = PregenerateReport()
    for prefix in prefixes:
        key = normalize_prefix(prefix.text)
        if not key:
            report.skipped.append((prefix.text, "empty after normalization"))
            continue
        try:
            context = engine.build_context(Prefix(text=key, traffic_weight=prefix.traffic_weight))
            prompt = engine.render(context)
            raw = engine.generate(profile_name, prompt.rendered)
            scored = engine.score_raw(Prefix(text=key), raw, context)
        except QacError as exc:
            report.skipped.append((key, f"pipeline: {exc}"))
            continue
        if scored.parsed is None:
            kind = scored.format_error.kind.value if scored.format_error else "unparseable"
            report.skipped.append((key, f"format: {kind}"))
            continue
        if scored.reward < engine.reward_floor:
            report.skipped.append(
                (key, f"reward {scored.reward:.4f} below floor {engine.reward_floor}")
            )
            continue
        flags = scored.scores.per_query_flags
        entries[key] = CacheEntry(
            queries=scored.parsed.queries,
            raw_text=raw,
            safe=flags.safe,
            grounded=flags.grounded,
            profile=profile_name,
            timestamp=timestamp,
            reward=scored.reward,
        )
        report.built += 1
    return CacheSnapshot(entries=entries), report


def save_snapshot(snapshot: CacheSnapshot, path: str) -> None:
    """Write a snapshot as JSONL: a header record, then entries sorted by prefix."""
    with open(path, "w", encoding="utf-8") as handle:
        header = {
            "format_version": SNAPSHOT_FORMAT_VERSION,
            "entry_count": len(snapshot.entries),
        }
        handle.write(json.dumps(header, sort_keys=True) + "\n")
        for prefix in sorted(snapshot.entries):
            entry = snapshot.entries[prefix]
            record = {
                "prefix": prefix,
                "queries": list(entry.queries),
                "raw_text": entry.raw_text,
                "safe": list(entry.safe),
                "grounded": list(entry.grounded),
                "profile": entry.profile,
                "timestamp": entry.timestamp,
                "reward": entry.reward,
            }
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def load_snapshot(path: str) -> CacheSnapshot:
    """Read and validate a snapshot file; raises CorruptSnapshot on any defect."""
    try:
        with open(path, encoding="utf-8") as handle:
            lines = [line for line in handle.read().splitlines() if line.strip()]
    except OSError as exc:
        raise CorruptSnapshot(None, f"unreadable: {exc}") from exc
    if not lines:
        raise CorruptSnapshot(None, "empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorruptSnapshot(None, f"bad header: {exc}") from exc
    version = header.get("format_version")
    if version != SNAPSHOT_FORMAT_VERSION:
        raise CorruptSnapshot(version, "unsupported format_version")
    expected = header.get("entry_count")
    entries: dict[str, CacheEntry] = {}
    for line in lines[1:]:
        try:
            obj = json.loads(line)
            queries = tuple(str(q) for q in obj["queries"])
            entry = CacheEntry(
                queries=queries,
                raw_text=str(obj["raw_text"]),
                safe=tuple(bool(b) for b in obj["safe"]),
                grounded=tuple(bool(b) for b in obj["grounded"]),
                profile=str(obj["profile"]),
                timestamp=float(obj["timestamp"]),
                reward=float(obj["reward"]),
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise CorruptSnapshot(version, f"bad entry: {exc}") from exc
        if len(entry.safe) != len(queries) or len(entry.grounded) != len(queries):
            raise CorruptSnapshot(version, "flag lengths do not match queries")
        try:
            parse_answer_block(render_answer_block(queries))
        except AnswerFormatError as exc:
            raise CorruptSnapshot(version, f"invalid cached list: {exc}") from exc
        entries[str(obj["prefix"])] = entry
    if expected != len(entries):
        raise CorruptSnapshot(version, f"entry_count {expected} != {len(entries)}")
    return CacheSnapshot(entries=entries)
