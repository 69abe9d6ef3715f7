"""Format-gated composite reward and margin-filtered preference-pair mining."""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass

from .context import RetrievedContext
from .generator import AnswerFormatError, SuggestionList, parse_answer_block, salvage_parse
from .verifiers import (
    ContextJudge,
    DEFAULT_ALPHA,
    DEFAULT_JUDGES,
    DEFAULT_TAU,
    ItemScorer,
    QueryFlags,
    RuleContextJudge,
    SafetyClassifier,
    SearchBackend,
    StatsSource,
    VerifierScores,
    default_relevance_scorer,
    score_catalog_groundedness,
    score_context_groundedness,
    score_diversity,
    score_engagement,
    score_relevance,
    score_safety,
)

DEFAULT_DELTA = 0.08
DEFAULT_TOP_K = 4


@dataclass(frozen=True)
class RewardWeights:
    """Non-negative weights over the six continuous objectives.

    The default is uniform: each objective contributes equally and a perfect
    list scores exactly 1.
    """

    relevance: float = 1.0 / 6.0
    engagement: float = 1.0 / 6.0
    safety: float = 1.0 / 6.0
    catalog_grounded: float = 1.0 / 6.0
    context_grounded: float = 1.0 / 6.0
    diversity: float = 1.0 / 6.0

    def __post_init__(self) -> None:
        for name, value in self.as_dict().items():
            if value < 0:
                raise ValueError(f"weight {name} must be >= 0, got {value}")

    def as_dict(self) -> dict[str, float]:
        return {
            "relevance": self.relevance,
            "engagement": self.engagement,
            "safety": self.safety,
            "catalog_grounded": self.catalog_grounded,
            "context_grounded": self.context_grounded,
            "diversity": self.diversity,
        }

    def normalized(self) -> RewardWeights:
        """Copy scaled to sum to 1, for reporting."""
        total = sum(self.as_dict().values())
        if total <= 0:
            raise ValueError("cannot normalize all-zero weights")
        return RewardWeights(**{k: v / total for k, v in self.as_dict().items()})


def composite_reward(scores: VerifierScores, weights: RewardWeights) -> float:
    """Weighted sum of the six objectives, multiplied by the format gate."""
    base = (
        weights.relevance * scores.relevance
        + weights.engagement * scores.engagement
        + weights.safety * scores.safety
        + weights.catalog_grounded * scores.catalog_grounded
        + weights.context_grounded * scores.context_grounded
        + weights.diversity * scores.diversity
    )
    return scores.format_ok * base


@dataclass
class VerifierSuite:
    """Everything needed to score a list: backend, scorers, judges, knobs."""

    backend: SearchBackend
    stats_source: StatsSource
    safety_classifier: SafetyClassifier
    relevance_scorer: ItemScorer = default_relevance_scorer
    judges: Sequence[ContextJudge] | None = None
    alpha: float = DEFAULT_ALPHA
    tau: int = DEFAULT_TAU

    def __post_init__(self) -> None:
        if self.judges is None:
            self.judges = (RuleContextJudge(),) * DEFAULT_JUDGES

    def score(
        self, prefix: str, queries: Sequence[str], context: RetrievedContext, format_ok: int
    ) -> VerifierScores:
        relevance = score_relevance(prefix, queries, self.relevance_scorer)
        engagement = score_engagement(prefix, queries, self.stats_source, self.alpha)
        safety, safe_flags = score_safety(queries, self.safety_classifier)
        srg, grounded_flags = score_catalog_groundedness(queries, self.backend, self.tau)
        cg, _ = score_context_groundedness(prefix, queries, context, self.judges)
        div, _ = score_diversity(queries, self.backend)
        return VerifierScores(
            format_ok=format_ok,
            relevance=relevance,
            engagement=engagement,
            safety=safety,
            catalog_grounded=srg,
            context_grounded=cg,
            diversity=div,
            per_query_flags=QueryFlags(safe=safe_flags, grounded=grounded_flags),
        )


@dataclass(frozen=True)
class ScoredList:
    """One generation with its verdicts and gated reward."""

    raw_text: str
    parsed: SuggestionList | None
    format_error: AnswerFormatError | None
    scores: VerifierScores
    reward: float

    @property
    def queries(self) -> tuple[str, ...]:
        return self.parsed.queries if self.parsed else ()


def score_list(
    prefix: str,
    raw_text: str,
    context: RetrievedContext,
    suite: VerifierSuite,
    weights: RewardWeights,
) -> ScoredList:
    """Run all seven verifiers on raw generator output.

    Misformatted output still gets best-effort objective scores (from a
    salvage parse) for diagnostics, but its reward is exactly zero.
    """
    try:
        parsed: SuggestionList | None = parse_answer_block(raw_text)
        error: AnswerFormatError | None = None
        queries: Sequence[str] = parsed.queries
        format_ok = 1
    except AnswerFormatError as exc:
        parsed, error, format_ok = None, exc, 0
        queries = salvage_parse(raw_text).queries
    scores = suite.score(prefix, queries, context, format_ok)
    return ScoredList(
        raw_text=raw_text,
        parsed=parsed,
        format_error=error,
        scores=scores,
        reward=composite_reward(scores, weights),
    )


@dataclass(frozen=True)
class PreferencePair:
    """A chosen/rejected pair whose reward margin clears the threshold."""

    prompt: str
    chosen: ScoredList
    rejected: ScoredList

    @property
    def margin(self) -> float:
        return self.chosen.reward - self.rejected.reward


def build_preference_pairs(
    prompt: str,
    scored: Sequence[ScoredList],
    delta: float = DEFAULT_DELTA,
    top_k: int = DEFAULT_TOP_K,
) -> list[PreferencePair]:
    """All ordered pairs with margin >= delta, ranked by margin, top-k kept.

    Ties rank by the chosen list's reward descending, then by stable input
    order, so the mined set is identical across runs.
    """
    if delta <= 0:
        raise ValueError("delta must be > 0")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    pairs = [
        PreferencePair(prompt=prompt, chosen=a, rejected=b)
        for a in scored
        for b in scored
        if a.reward - b.reward >= delta
    ]
    pairs.sort(key=lambda p: (-p.margin, -p.chosen.reward))
    return pairs[:top_k]


def write_pref_dataset(pairs: Sequence[PreferencePair], path: str) -> int:
    """Write preference pairs as JSONL; returns the record count."""
    with open(path, "w", encoding="utf-8") as handle:
        for pair in pairs:
            record = {
                "prompt": pair.prompt,
                "chosen_raw": pair.chosen.raw_text,
                "rejected_raw": pair.rejected.raw_text,
                "chosen_reward": pair.chosen.reward,
                "rejected_reward": pair.rejected.reward,
                "margin": pair.margin,
            }
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    return len(pairs)


def read_pref_dataset(path: str) -> list[dict]:
    """Read records written by write_pref_dataset."""
    records = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
