"""The seven scorers for a (prefix, suggestion list) pair.

Format and safety are binary; relevance, engagement, catalog groundedness,
context groundedness, and diversity are continuous in [0, 1]. All scorers are
pure given their inputs and a read-only search backend, so independent lists
can be scored concurrently.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol

from . import QacError
from .context import RetrievedContext
from .generator import parse_answer_block, AnswerFormatError
from .retrieval import (
    CatalogItem,
    QueryIndex,
    normalize_prefix,
    score_item,
    token_overlap,
    tokenize,
)

DEFAULT_ALPHA = 0.5          # blend between conditional and global conversion
DEFAULT_TAU = 1              # min lexically-matching results to count as grounded
DEFAULT_JUDGES = 3           # context-groundedness voters; must stay odd
DEFAULT_PAGE_DEPTH = 10

# Function words the rule judge ignores when tracing a query back to context.
STOPWORDS = frozenset("a an the and or of for to in on with my me you apps app".split())


class BackendUnavailable(QacError):
    """The search backend cannot serve result pages right now."""


@dataclass(frozen=True)
class SearchHit:
    """One result-page entry: the item and how lexically well it matched."""

    item_id: str
    lexical_score: float


class SearchBackend(Protocol):
    """Deterministic, read-only search over a fixed catalog."""

    def search(self, query: str) -> list[SearchHit]: ...


class CatalogSearchBackend:
    """Desk-scale backend: lexical retrieval over an in-memory catalog.

    The catalog is immutable, so result pages are memoized per query text;
    ``calls`` counts requests, cached or not.
    """

    def __init__(
        self,
        catalog: Sequence[CatalogItem],
        page_depth: int = DEFAULT_PAGE_DEPTH,
        lexical_weight: float = 0.7,
    ):
        self.catalog = list(catalog)
        self.page_depth = page_depth
        self.lexical_weight = lexical_weight
        self.calls = 0
        self._pages: dict[str, list[SearchHit]] = {}

    def search(self, query: str) -> list[SearchHit]:
        self.calls += 1
        text = normalize_prefix(query)
        cached = self._pages.get(text)
        if cached is not None:
            return cached
        tokens = tuple(text.split())
        scored = []
        for item in self.catalog:
            blended, lexical = score_item(
                tokens, item, text, lexical_weight=self.lexical_weight
            )
            scored.append((item, blended, lexical))
        scored.sort(key=lambda row: (-row[1], -row[0].popularity, row[0].item_id))
        page = [
            SearchHit(item.item_id, lexical)
            for item, _, lexical in scored[: self.page_depth]
        ]
        self._pages[text] = page
        return page


@dataclass(frozen=True)
class QueryFlags:
    """Per-suggestion verdicts kept for serving-time filtering."""

    safe: tuple[bool, ...] = ()
    grounded: tuple[bool, ...] = ()


@dataclass(frozen=True)
class VerifierScores:
    """All seven verdicts for one suggestion list."""

    format_ok: int = 0
    relevance: float = 0.0
    engagement: float = 0.0
    safety: int = 1
    catalog_grounded: float = 0.0
    context_grounded: float = 0.0
    diversity: float = 0.0
    per_query_flags: QueryFlags = QueryFlags()


@dataclass(frozen=True)
class ResultShare:
    """One distinct result across the lists' pages, with its entropy weight."""

    result_id: str
    occurrences: int
    page_count: int
    weight: float


@dataclass(frozen=True)
class DiversityBreakdown:
    """Intermediate quantities behind the adjusted-entropy diversity score."""

    distinct_results: int
    suggestion_count: int
    shares: tuple[ResultShare, ...] = ()
    entropy: float = 0.0
    redundancy_penalty: float = 0.0
    adjusted: float = 0.0


def verify_format(raw: str) -> int:
    """1 iff the raw text parses as a valid answer block."""
    try:
        parse_answer_block(raw)
    except AnswerFormatError:
        return 0
    return 1


def _discounted_mean(values: Sequence[float]) -> float:
    """Position-discounted mean: earlier entries weigh more, ideal list scores 1."""
    if not values:
        return 0.0
    num = sum(v / math.log2(i + 2) for i, v in enumerate(values))
    den = sum(1.0 / math.log2(i + 2) for i in range(len(values)))
    return num / den


ItemScorer = Callable[[str, str], float]


def default_relevance_scorer(prefix: str, query: str) -> float:
    """Deterministic per-query relevance: completion indicator plus token overlap."""
    prefix_text = normalize_prefix(prefix)
    query_tokens = tokenize(query)
    completes = 1.0 if query.startswith(prefix_text) and prefix_text else 0.0
    overlap = token_overlap(tuple(prefix_text.split()), query_tokens)
    return 0.5 * completes + 0.5 * overlap


def score_relevance(
    prefix: str, queries: Sequence[str], item_scorer: ItemScorer = default_relevance_scorer
) -> float:
    """Position-discounted relevance of the list to the prefix; empty list is 0."""
    return _discounted_mean([item_scorer(prefix, q) for q in queries])


class StatsSource(Protocol):
    """Engagement signals for a query, conditioned on the prefix or global."""

    def conditional_conversion(self, prefix: str, query: str) -> float: ...

    def global_conversion(self, query: str) -> float: ...


class IndexStatsSource:
    """Stats from the query index: exact-match conversion rates, else zero."""

    def __init__(self, index: QueryIndex):
        self._index = index

    def conditional_conversion(self, prefix: str, query: str) -> float:
        stats = self._index.get(query)
        if stats is None or not query.startswith(normalize_prefix(prefix)):
            return 0.0
        return stats.conversion_rate

    def global_conversion(self, query: str) -> float:
        stats = self._index.get(query)
        return stats.conversion_rate if stats else 0.0


def score_engagement(
    prefix: str,
    queries: Sequence[str],
    stats_source: StatsSource,
    alpha: float = DEFAULT_ALPHA,
) -> float:
    """Position-discounted expected engagement; empty list is 0."""
    values = [
        alpha * stats_source.conditional_conversion(prefix, q)
        + (1.0 - alpha) * stats_source.global_conversion(q)
        for q in queries
    ]
    return _discounted_mean(values)


SafetyClassifier = Callable[[str], bool]


class BlocklistClassifier:
    """Lexicon-based safety check with an exact-catalog-title exemption.

    A query is unsafe when any blocklist term occurs as a contiguous token
    phrase, unless the whole query exactly equals a catalog title.
    """

    def __init__(self, terms: Iterable[str], exempt_titles: Iterable[str] = ()):
        self._terms = [tokenize(t) for t in terms if t.strip()]
        self._exempt = {normalize_prefix(t) for t in exempt_titles}

    def __call__(self, query: str) -> bool:
        if query in self._exempt:
            return True
        tokens = tokenize(query)
        for term in self._terms:
            width = len(term)
            if width == 0:
                continue
            for start in range(len(tokens) - width + 1):
                if tuple(tokens[start : start + width]) == term:
                    return False
        return True


def load_blocklist(path: str) -> list[str]:
    """Read a blocklist lexicon: one term per line, '#' starts a comment."""
    terms = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.split("#", 1)[0].strip()
            if line:
                terms.append(line)
    return terms


def score_safety(
    queries: Sequence[str], classifier: SafetyClassifier
) -> tuple[int, tuple[bool, ...]]:
    """List-level safety (0 if any query is unsafe) plus per-query verdicts."""
    flags = tuple(classifier(q) for q in queries)
    return (1 if all(flags) else 0), flags


def score_catalog_groundedness(
    queries: Sequence[str], backend: SearchBackend, tau: int = DEFAULT_TAU
) -> tuple[float, tuple[bool, ...]]:
    """Fraction of queries whose result page has >= tau lexically matching hits.

    A query that would lead to an empty or purely popularity-padded result
    page counts as ungrounded. Empty list scores 0.
    """
    flags = []
    for query in queries:
        hits = backend.search(query)
        matching = sum(1 for hit in hits if hit.lexical_score > 0)
        flags.append(matching >= tau)
    score = (sum(flags) / len(flags)) if flags else 0.0
    return score, tuple(flags)


ContextJudge = Callable[[str, RetrievedContext], bool]


@lru_cache(maxsize=4096)
def _grounding_vocabulary(grounding_texts: tuple[str, ...]) -> frozenset[str]:
    vocab: set[str] = set()
    for text in grounding_texts:
        vocab.update(tokenize(text))
    return frozenset(vocab)


class RuleContextJudge:
    """Grounded iff every content token of the query appears in the context.

    Content tokens are the query tokens minus a small stopword list; they must
    occur in some candidate query or item title/description.
    """

    def __init__(self, stopwords: frozenset[str] = STOPWORDS):
        self.stopwords = stopwords

    def vocabulary(self, grounding_texts: Iterable[str]) -> frozenset[str]:
        return _grounding_vocabulary(tuple(grounding_texts))

    def grounded_in(self, query: str, grounding_texts: Iterable[str]) -> bool:
        vocab = self.vocabulary(grounding_texts)
        content = [t for t in tokenize(query) if t not in self.stopwords]
        return all(t in vocab for t in content)

    def __call__(self, query: str, context: RetrievedContext) -> bool:
        return self.grounded_in(query, context.grounding_texts())


def score_context_groundedness(
    prefix: str,
    queries: Sequence[str],
    context: RetrievedContext,
    judges: Sequence[ContextJudge] | None = None,
) -> tuple[float, tuple[bool, ...]]:
    """Majority vote of the judges per query; fraction grounded overall."""
    if judges is None:
        judges = (RuleContextJudge(),) * DEFAULT_JUDGES
    if len(judges) % 2 == 0:
        raise ValueError("judge count must be odd")
    flags = []
    for query in queries:
        votes = sum(1 for judge in judges if judge(query, context))
        flags.append(votes * 2 > len(judges))
    score = (sum(flags) / len(flags)) if flags else 0.0
    return score, tuple(flags)


def score_diversity(
    queries: Sequence[str], backend: SearchBackend
) -> tuple[float, DiversityBreakdown]:
    """Adjusted entropy over the distinct results of all suggestions' pages.

    Distinct results are indexed by first appearance (earliest suggestion,
    then earliest in-page rank) and weighted by a position-discounted
    probability; standard entropy is then reduced by a redundancy penalty for
    results shared across suggestions, normalized by the maximum achievable
    entropy, and clamped to [0, 1]. Fewer than two distinct results means no
    diversity to measure, so the score is 0.
    """
    pages = [backend.search(q) for q in queries]
    total = len(pages)
    order: list[str] = []
    occurrences: dict[str, int] = {}
    page_counts: dict[str, int] = {}
    for page in pages:
        seen_here: set[str] = set()
        for hit in page:
            rid = hit.item_id
            if rid not in occurrences:
                order.append(rid)
                occurrences[rid] = 0
                page_counts[rid] = 0
            occurrences[rid] += 1
            if rid not in seen_here:
                page_counts[rid] += 1
                seen_here.add(rid)
    n = len(order)
    if total == 0 or n <= 1:
        return 0.0, DiversityBreakdown(distinct_results=n, suggestion_count=total)
    raw_weights = [occurrences[rid] / math.log2(i + 2) for i, rid in enumerate(order)]
    weight_sum = sum(raw_weights)
    weights = [w / weight_sum for w in raw_weights]
    entropy = -sum(w * math.log2(w) for w in weights if w > 0)
    penalty = sum(
        w * math.log2(1.0 / w) * (page_counts[rid] / total)
        for rid, w in zip(order, weights)
        if page_counts[rid] > 1 and w > 0
    )
    adjusted = (entropy - penalty) / math.log2(n)
    adjusted = min(1.0, max(0.0, adjusted))
    shares = tuple(
        ResultShare(rid, occurrences[rid], page_counts[rid], w)
        for rid, w in zip(order, weights)
    )
    breakdown = DiversityBreakdown(
        distinct_results=n,
        suggestion_count=total,
        shares=shares,
        entropy=entropy,
        redundancy_penalty=penalty,
        adjusted=adjusted,
    )
    return adjusted, breakdown
