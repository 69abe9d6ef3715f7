"""Candidate sources: a prefix index over query logs and lexical catalog retrieval.

Both sources are immutable after construction and safe for concurrent readers.
"""

from __future__ import annotations

import bisect
import json
import unicodedata
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from functools import lru_cache

from . import QacError

# Blend weight between lexical overlap and the pluggable embedding hook.
DEFAULT_LEXICAL_WEIGHT = 0.7

EmbeddingHook = Callable[[str, "CatalogItem"], float]


class EmptyAfterNormalization(QacError):
    """Raised when a query normalizes to the empty string."""


class MalformedRecord(QacError):
    """Raised for an unparseable input record; carries the 1-based line number."""

    def __init__(self, line_number: int, reason: str):
        super().__init__(f"line {line_number}: {reason}")
        self.line_number = line_number
        self.reason = reason


def normalize_prefix(raw: str) -> str:
    """Normalize user-typed text: NFC, lowercased, whitespace collapsed.

    Control characters are treated as whitespace. Unlike query normalization
    the result may be empty, so mid-word prefixes and blank input are fine.
    """
    text = unicodedata.normalize("NFC", raw).lower()
    text = unicodedata.normalize("NFC", text)
    text = "".join(" " if unicodedata.category(ch) == "Cc" else ch for ch in text)
    return " ".join(text.split())


def normalize_query(raw: str) -> str:
    """Normalize a query string; rejects input that normalizes to nothing."""
    text = normalize_prefix(raw)
    if not text:
        raise EmptyAfterNormalization(f"query normalizes to empty: {raw!r}")
    return text


@lru_cache(maxsize=65536)
def tokenize(text: str) -> tuple[str, ...]:
    """Split normalized text into whitespace tokens."""
    return tuple(normalize_prefix(text).split())


def token_overlap(needle_tokens: Sequence[str], hay_tokens: Sequence[str]) -> float:
    """Fraction of needle tokens matched in the haystack.

    A needle token matches when it equals a haystack token or is a prefix of
    one, so partially typed words still count.
    """
    if not needle_tokens:
        return 0.0
    matched = 0
    for tok in needle_tokens:
        if any(hay == tok or hay.startswith(tok) for hay in hay_tokens):
            matched += 1
    return matched / len(needle_tokens)


@dataclass(frozen=True)
class QueryStats:
    """Engagement statistics for one historical query."""

    frequency: int
    conversion_rate: float = 0.0
    click_through_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.frequency < 0:
            raise ValueError("frequency must be >= 0")
        for name in ("conversion_rate", "click_through_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


@dataclass(frozen=True)
class CatalogItem:
    """One searchable catalog entry."""

    item_id: str
    title: str
    category: str = ""
    description: str = ""
    rating: float = 0.0
    popularity: float = 0.0

    def __post_init__(self) -> None:
        if not self.title:
            raise ValueError("title must be non-empty")
        if not 0.0 <= self.rating <= 5.0:
            raise ValueError(f"rating must be in [0, 5], got {self.rating}")
        if self.popularity < 0:
            raise ValueError("popularity must be >= 0")


class QueryIndex:
    """Prefix-ordered map from normalized query text to stats.

    Keys are kept in sorted order so a prefix lookup is a bisect plus a
    bounded scan over the contiguous key range sharing that prefix.
    """

    def __init__(self, entries: dict[str, QueryStats]):
        self._stats = dict(entries)
        self._keys = sorted(self._stats)

    def __len__(self) -> int:
        return len(self._stats)

    def __contains__(self, query: str) -> bool:
        return query in self._stats

    def get(self, query: str) -> QueryStats | None:
        return self._stats.get(query)

    def items(self) -> Iterable[tuple[str, QueryStats]]:
        for key in self._keys:
            yield key, self._stats[key]

    def scan_prefix(self, prefix: str) -> list[tuple[str, QueryStats]]:
        """All entries whose text starts with the (already normalized) prefix."""
        start = bisect.bisect_left(self._keys, prefix)
        out = []
        for key in self._keys[start:]:
            if not key.startswith(prefix):
                break
            out.append((key, self._stats[key]))
        return out


def build_query_index(records: Iterable[tuple[str, QueryStats]]) -> QueryIndex:
    """Build the index, merging duplicate normalized queries.

    Frequencies sum; rates merge as frequency-weighted averages so expected
    conversion counts are preserved. Records whose frequencies are all zero
    fall back to a plain mean.
    """
    sums: dict[str, list[float]] = {}
    for position, (raw, stats) in enumerate(records, start=1):
        try:
            text = normalize_query(raw)
        except EmptyAfterNormalization as exc:
            raise MalformedRecord(position, str(exc)) from exc
        acc = sums.setdefault(text, [0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        acc[0] += stats.frequency
        acc[1] += stats.frequency * stats.conversion_rate
        acc[2] += stats.frequency * stats.click_through_rate
        acc[3] += 1
        acc[4] += stats.conversion_rate
        acc[5] += stats.click_through_rate
    entries = {}
    for text, (freq, w_conv, w_ctr, count, s_conv, s_ctr) in sums.items():
        if freq > 0:
            conv, ctr = w_conv / freq, w_ctr / freq
        else:
            conv, ctr = s_conv / count, s_ctr / count
        entries[text] = QueryStats(int(freq), conv, ctr)
    return QueryIndex(entries)


def lookup_prefix(
    index: QueryIndex, prefix: str, limit: int
) -> list[tuple[str, QueryStats]]:
    """Top completions for a prefix, by frequency descending then text."""
    if limit < 1:
        raise ValueError("limit must be >= 1")
    matches = index.scan_prefix(normalize_prefix(prefix))
    matches.sort(key=lambda kv: (-kv[1].frequency, kv[0]))
    return matches[:limit]


@lru_cache(maxsize=4096)
def _item_tokens(title: str, description: str) -> tuple[str, ...]:
    return tokenize(f"{title} {description}")


def score_item(
    prefix_tokens: Sequence[str],
    item: CatalogItem,
    prefix_text: str,
    *,
    lexical_weight: float = DEFAULT_LEXICAL_WEIGHT,
    embedding_hook: EmbeddingHook | None = None,
) -> tuple[float, float]:
    """Blended and lexical scores for one item against a prefix.

    Lexical score is the token overlap of the prefix against title plus
    description. The embedding hook is a pluggable similarity in [0, 1];
    without one the blend degrades to pure lexical.
    """
    lexical = token_overlap(prefix_tokens, _item_tokens(item.title, item.description))
    embedding = embedding_hook(prefix_text, item) if embedding_hook else 0.0
    return lexical_weight * lexical + (1.0 - lexical_weight) * embedding, lexical


def retrieve_items(
    catalog: Sequence[CatalogItem],
    prefix: str,
    limit: int,
    *,
    lexical_weight: float = DEFAULT_LEXICAL_WEIGHT,
    embedding_hook: EmbeddingHook | None = None,
) -> list[tuple[CatalogItem, float]]:
    """Rank catalog items for a prefix by blended lexical/embedding score.

    Ties break by popularity descending, then item_id, so the ordering is
    total and reproducible.
    """
    if limit < 1:
        raise ValueError("limit must be >= 1")
    prefix_text = normalize_prefix(prefix)
    prefix_tokens = tuple(prefix_text.split())
    scored = []
    for item in catalog:
        blended, _ = score_item(
            prefix_tokens,
            item,
            prefix_text,
            lexical_weight=lexical_weight,
            embedding_hook=embedding_hook,
        )
        scored.append((item, blended))
    scored.sort(key=lambda pair: (-pair[1], -pair[0].popularity, pair[0].item_id))
    return scored[:limit]


def load_query_log(path: str) -> list[tuple[str, QueryStats]]:
    """Read a JSONL query log: {query, frequency, conversion_rate, click_through_rate}."""
    records = []
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                stats = QueryStats(
                    frequency=int(obj["frequency"]),
                    conversion_rate=float(obj.get("conversion_rate", 0.0)),
                    click_through_rate=float(obj.get("click_through_rate", 0.0)),
                )
                records.append((str(obj["query"]), stats))
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedRecord(line_number, str(exc)) from exc
    return records


def load_catalog(path: str) -> list[CatalogItem]:
    """Read a JSONL catalog: {item_id, title, category, description, rating, popularity}."""
    items = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                item = CatalogItem(
                    item_id=str(obj["item_id"]),
                    title=str(obj["title"]),
                    category=str(obj.get("category", "")),
                    description=str(obj.get("description", "")),
                    rating=float(obj.get("rating", 0.0)),
                    popularity=float(obj.get("popularity", 0.0)),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedRecord(line_number, str(exc)) from exc
            if item.item_id in seen:
                raise MalformedRecord(line_number, f"duplicate item_id {item.item_id}")
            seen.add(item.item_id)
            items.append(item)
    return items


def save_index(index: QueryIndex, path: str) -> int:
    """Write the merged index as sorted JSONL; returns the entry count."""
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for text, stats in index.items():
            record = {
                "query": text,
                "frequency": stats.frequency,
                "conversion_rate": stats.conversion_rate,
                "click_through_rate": stats.click_through_rate,
            }
            handle.write(json.dumps(record, sort_keys=True) + "\n")
            count += 1
    return count


def load_index(path: str) -> QueryIndex:
    """Read an index previously written by save_index."""
    return build_query_index(load_query_log(path))
