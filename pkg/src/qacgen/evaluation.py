"""Traffic-weighted offline evaluation over a prefix set.

Each prefix contributes one per-metric value, weighted by its share of
traffic, so the report reflects the request distribution rather than a flat
average over prefixes. Stratum tags (for example head/torso/tail) yield
per-stratum sub-reports alongside the overall one.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field

from . import QacError
from .context import RetrievedContext
from .verifiers import (
    score_catalog_groundedness,
    score_context_groundedness,
    score_diversity,
    score_engagement,
    score_relevance,
)
from .reward import VerifierSuite

METRIC_COLUMNS = (
    "coverage",
    "relevance",
    "unsafe_rate",
    "eng_win_rate",
    "catalog_ungrounded_rate",
    "context_ungrounded_rate",
    "diversity",
)


class ZeroTotalWeight(QacError):
    """All traffic weights were zero; the weighted mean is undefined."""


def traffic_weighted_mean(values: Iterable[tuple[float, float]]) -> float:
    """Weighted mean of (value, weight) pairs; weights must not sum to zero."""
    num = 0.0
    den = 0.0
    for value, weight in values:
        num += weight * value
        den += weight
    if den <= 0:
        raise ZeroTotalWeight("total traffic weight must be > 0")
    return num / den


@dataclass(frozen=True)
class EvalPrefix:
    """One evaluation prefix with its traffic weight and stratum tag."""

    text: str
    weight: float = 1.0
    stratum: str = "all"

    def __post_init__(self) -> None:
        if self.weight < 0:
            raise ValueError("weight must be >= 0")


@dataclass(frozen=True)
class MetricValue:
    value: float
    prefix_count: int


@dataclass(frozen=True)
class MetricReport:
    """Traffic-weighted metrics for one system, with per-stratum sub-reports."""

    system: str
    coverage: MetricValue
    relevance: MetricValue
    unsafe_rate: MetricValue
    eng_win_rate: MetricValue | None
    eng_win_signed: MetricValue | None
    catalog_ungrounded_rate: MetricValue
    context_ungrounded_rate: MetricValue
    diversity: MetricValue
    strata: Mapping[str, "MetricReport"] = field(default_factory=dict)
    errors: int = 0

    def as_dict(self) -> dict:
        body = {
            "system": self.system,
            "coverage": self.coverage.value,
            "relevance": self.relevance.value,
            "unsafe_rate": self.unsafe_rate.value,
            "eng_win_rate": None if self.eng_win_rate is None else self.eng_win_rate.value,
            "eng_win_signed": None
            if self.eng_win_signed is None
            else self.eng_win_signed.value,
            "catalog_ungrounded_rate": self.catalog_ungrounded_rate.value,
            "context_ungrounded_rate": self.context_ungrounded_rate.value,
            "diversity": self.diversity.value,
            "diversity_x100": self.diversity.value * 100.0,
            "prefix_count": self.coverage.prefix_count,
            "errors": self.errors,
        }
        if self.strata:
            body["strata"] = {name: sub.as_dict() for name, sub in self.strata.items()}
        return body


@dataclass
class _PrefixOutcome:
    prefix: EvalPrefix
    coverage: float
    relevance: float
    unsafe: float
    eng_score: float
    eng_win: float | None
    eng_signed: float | None
    catalog_ungrounded: float
    context_ungrounded: float
    diversity: float


ServeFn = Callable[[str], Sequence[str]]
ContextFn = Callable[[str], RetrievedContext]


def _evaluate_prefix(
    prefix: EvalPrefix,
    queries: Sequence[str],
    context: RetrievedContext,
    suite: VerifierSuite,
    baseline: Mapping[str, float] | None,
) -> _PrefixOutcome:
    coverage = 1.0 if queries else 0.0
    relevance = score_relevance(prefix.text, queries, suite.relevance_scorer)
    safe_flags = [suite.safety_classifier(q) for q in queries]
    unsafe = 1.0 if any(not ok for ok in safe_flags) else 0.0
    eng_score = score_engagement(prefix.text, queries, suite.stats_source, suite.alpha)
    eng_win = eng_signed = None
    if baseline is not None and prefix.text in baseline:
        base = baseline[prefix.text]
        eng_win = 1.0 if eng_score > base else 0.0
        eng_signed = 1.0 if eng_score > base else (-1.0 if eng_score < base else 0.0)
    _, grounded_flags = score_catalog_groundedness(queries, suite.backend, suite.tau)
    catalog_ungrounded = 1.0 if any(not ok for ok in grounded_flags) else 0.0
    _, ctx_flags = score_context_groundedness(prefix.text, queries, context, suite.judges)
    context_ungrounded = 1.0 if any(not ok for ok in ctx_flags) else 0.0
    diversity, _ = score_diversity(queries, suite.backend)
    return _PrefixOutcome(
        prefix=prefix,
        coverage=coverage,
        relevance=relevance,
        unsafe=unsafe,
        eng_score=eng_score,
        eng_win=eng_win,
        eng_signed=eng_signed,
        catalog_ungrounded=catalog_ungrounded,
        context_ungrounded=context_ungrounded,
        diversity=diversity,
    )


def _aggregate(system: str, outcomes: Sequence[_PrefixOutcome], errors: int) -> MetricReport:
    def weighted(pick: Callable[[_PrefixOutcome], float | None]) -> MetricValue | None:
        pairs = [
            (picked, o.prefix.weight)
            for o in outcomes
            if (picked := pick(o)) is not None
        ]
        if not pairs:
            return None
        return MetricValue(value=traffic_weighted_mean(pairs), prefix_count=len(pairs))

    def required(pick: Callable[[_PrefixOutcome], float]) -> MetricValue:
        return weighted(pick) or MetricValue(value=0.0, prefix_count=0)

    return MetricReport(
        system=system,
        coverage=required(lambda o: o.coverage),
        relevance=required(lambda o: o.relevance),
        unsafe_rate=required(lambda o: o.unsafe),
        eng_win_rate=weighted(lambda o: o.eng_win),
        eng_win_signed=weighted(lambda o: o.eng_signed),
        catalog_ungrounded_rate=required(lambda o: o.catalog_ungrounded),
        context_ungrounded_rate=required(lambda o: o.context_ungrounded),
        diversity=required(lambda o: o.diversity),
        errors=errors,
    )


def evaluate_system(
    prefixes: Sequence[EvalPrefix],
    serve: ServeFn,
    context_for: ContextFn,
    suite: VerifierSuite,
    baseline: Mapping[str, float] | None = None,
    system: str = "system",
) -> MetricReport:
    """Score every prefix through the serve function and traffic-weight the results.

    The engagement win indicator compares against the baseline score where one
    exists; prefixes without a baseline entry are excluded from that metric
    only. Per-prefix backend failures are counted and excluded from all means.
    """
    outcomes: list[_PrefixOutcome] = []
    errors = 0
    for prefix in prefixes:
        try:
            queries = tuple(serve(prefix.text))
            context = context_for(prefix.text)
            outcomes.append(_evaluate_prefix(prefix, queries, context, suite, baseline))
        except QacError:
            errors += 1
    overall = _aggregate(system, outcomes, errors)
    strata: dict[str, MetricReport] = {}
    for name in sorted({o.prefix.stratum for o in outcomes}):
        members = [o for o in outcomes if o.prefix.stratum == name]
        strata[name] = _aggregate(f"{system}[{name}]", members, 0)
    return MetricReport(
        system=overall.system,
        coverage=overall.coverage,
        relevance=overall.relevance,
        unsafe_rate=overall.unsafe_rate,
        eng_win_rate=overall.eng_win_rate,
        eng_win_signed=overall.eng_win_signed,
        catalog_ungrounded_rate=overall.catalog_ungrounded_rate,
        context_ungrounded_rate=overall.context_ungrounded_rate,
        diversity=overall.diversity,
        strata=strata,
        errors=errors,
    )


def _format_cell(metric: MetricValue | None, *, as_diversity: bool = False) -> str:
    if metric is None:
        return "-"
    if as_diversity:
        return f"{metric.value:.4f} ({metric.value * 100.0:.2f})"
    return f"{metric.value:.4f}"


def render_markdown(reports: Sequence[MetricReport]) -> str:
    """Markdown table, one row per system, diversity shown with its x100 display."""
    header = (
        "| System | Coverage | Relevance | UnsafeRate | EngWinRate "
        "| CatalogUngrdRate | CtxUngrdRate | Diversity |"
    )
    rule = "|" + "---|" * 8
    lines = [header, rule]
    for report in reports:
        lines.append(
            "| "
            + " | ".join(
                [
                    report.system,
                    _format_cell(report.coverage),
                    _format_cell(report.relevance),
                    _format_cell(report.unsafe_rate),
                    _format_cell(report.eng_win_rate),
                    _format_cell(report.catalog_ungrounded_rate),
                    _format_cell(report.context_ungrounded_rate),
                    _format_cell(report.diversity, as_diversity=True),
                ]
            )
            + " |"
        )
    return "\n".join(lines) + "\n"


def write_report(
    reports: Sequence[MetricReport], path: str, fmt: str = "markdown-table"
) -> None:
    """Write one or more system reports as JSON or a markdown table."""
    if fmt == "json":
        payload = {"systems": [r.as_dict() for r in reports]}
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, sort_keys=True, indent=2)
            handle.write("\n")
    elif fmt == "markdown-table":
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(render_markdown(reports))
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_eval_set(path: str) -> list[EvalPrefix]:
    """Read a JSONL eval set: {prefix, weight, stratum}."""
    prefixes = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            prefixes.append(
                EvalPrefix(
                    text=str(obj["prefix"]),
                    weight=float(obj.get("weight", 1.0)),
                    stratum=str(obj.get("stratum", "all")),
                )
            )
    return prefixes


def read_baseline(path: str) -> dict[str, float]:
    """Read baseline engagement scores: {prefix, engagement_score}."""
    scores = {}
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            scores[str(obj["prefix"])] = float(obj["engagement_score"])
    return scores
