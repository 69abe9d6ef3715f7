"""Context assembly and prompt rendering for a typed prefix.

The rendered prompt uses a fixed line grammar for its candidate and item
blocks so downstream consumers (mock generators, the rule critic) can recover
the candidate texts and item metadata from the prompt alone.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

from . import QacError
from .retrieval import (
    CatalogItem,
    QueryIndex,
    QueryStats,
    lookup_prefix,
    retrieve_items,
)

PLACEHOLDERS = (
    "{prefix}",
    "{query_candidate_count}",
    "{relevant_app_count}",
    "{candidates_block}",
    "{items_block}",
)

EMPTY_BLOCK = "(none)"

DEFAULT_TEMPLATE = """\
[SYSTEM]
You are an expert app store query suggestion assistant. Given a partial user
query and structured data about historical queries and apps, generate up to 10
diverse, accurate, and helpful query completions that help users discover
relevant apps quickly.

[INPUT]
1. User Prefix:
{prefix}

2. Query Candidates ({query_candidate_count}):
{candidates_block}

3. Apps Metadata ({relevant_app_count}):
{items_block}

[GUIDELINES]
- Ground every suggestion ONLY in the provided query candidates and app metadata.
- Suggestions must complete or closely match the user prefix and reflect plausible intents.
- Avoid unsafe, harmful, or policy-violating queries (unless they are exact app titles).
- Avoid near-duplicate suggestions that would lead to almost identical result pages.
- Prefer fewer high-quality suggestions over many weak or ungrounded ones.

[OUTPUT FORMAT]
Return only a list of queries between <answer> and </answer>, one per line:

<answer>
query1
query2
...
</answer>
"""


class MissingPlaceholder(QacError):
    """Raised when a template lacks one of the required placeholders."""

    def __init__(self, name: str):
        super().__init__(f"template is missing placeholder {name}")
        self.name = name


@dataclass(frozen=True)
class Prefix:
    """A user-typed prefix with its traffic weight."""

    text: str
    traffic_weight: float = 1.0

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("prefix text must be non-empty")
        if self.traffic_weight < 0:
            raise ValueError("traffic_weight must be >= 0")


@dataclass(frozen=True)
class ContextCandidate:
    """A historical query completing the prefix, with sample result titles."""

    query: str
    stats: QueryStats
    sample_titles: tuple[str, ...] = ()


@dataclass(frozen=True)
class ContextConfig:
    """Budgets for context assembly; defaults keep prompts compact."""

    max_candidates: int = 15
    max_items: int = 10
    sample_titles: int = 3
    lexical_weight: float = 0.7


@dataclass(frozen=True)
class RetrievedContext:
    """Everything retrieved for one prefix: query candidates and catalog items."""

    prefix: Prefix
    candidates: tuple[ContextCandidate, ...] = ()
    items: tuple[CatalogItem, ...] = ()

    def candidate_texts(self) -> tuple[str, ...]:
        return tuple(c.query for c in self.candidates)

    def item_titles(self) -> tuple[str, ...]:
        return tuple(item.title for item in self.items)

    def grounding_texts(self) -> tuple[str, ...]:
        """Texts a suggestion may be grounded in: candidates plus item metadata."""
        texts = [c.query for c in self.candidates]
        texts.extend(f"{item.title} {item.description}" for item in self.items)
        return tuple(texts)


@dataclass(frozen=True)
class PromptText:
    """A rendered prompt plus the section counts it advertises."""

    rendered: str
    candidate_count: int
    item_count: int


def build_context(
    prefix: Prefix,
    index: QueryIndex,
    catalog: Sequence[CatalogItem],
    config: ContextConfig = ContextConfig(),
) -> RetrievedContext:
    """Assemble the retrieved context for a prefix.

    Candidates come from the query index; each is decorated with up to
    ``config.sample_titles`` titles of lexically matching catalog items to
    show what the candidate actually surfaces. Items come from catalog
    retrieval on the prefix itself, which is the only populated section for
    long-tail prefixes absent from the logs.
    """
    candidates = []
    for query, stats in lookup_prefix(index, prefix.text, config.max_candidates):
        hits = retrieve_items(
            catalog, query, config.sample_titles, lexical_weight=config.lexical_weight
        )
        titles = tuple(item.title for item, score in hits if score > 0)
        candidates.append(ContextCandidate(query, stats, titles))
    items = tuple(
        item
        for item, _ in retrieve_items(
            catalog, prefix.text, config.max_items, lexical_weight=config.lexical_weight
        )
    )
    return RetrievedContext(prefix=prefix, candidates=tuple(candidates), items=items)


def format_candidate_line(candidate: ContextCandidate) -> str:
    titles = "; ".join(candidate.sample_titles) if candidate.sample_titles else EMPTY_BLOCK
    stats = candidate.stats
    return (
        f"{candidate.query} | {stats.frequency} | "
        f"{stats.conversion_rate:.4f} | {stats.click_through_rate:.4f} | "
        f"results: {titles}"
    )


def format_item_line(item: CatalogItem) -> str:
    return f"{item.title} | {item.category} | {item.description}"


def render_prompt(context: RetrievedContext, template: str = DEFAULT_TEMPLATE) -> PromptText:
    """Substitute the context into a template with the five named placeholders."""
    for name in PLACEHOLDERS:
        if name not in template:
            raise MissingPlaceholder(name)
    candidates_block = (
        "\n".join(format_candidate_line(c) for c in context.candidates) or EMPTY_BLOCK
    )
    items_block = (
        "\n".join(format_item_line(item) for item in context.items) or EMPTY_BLOCK
    )
    rendered = (
        template.replace("{prefix}", context.prefix.text)
        .replace("{query_candidate_count}", str(len(context.candidates)))
        .replace("{relevant_app_count}", str(len(context.items)))
        .replace("{candidates_block}", candidates_block)
        .replace("{items_block}", items_block)
    )
    return PromptText(
        rendered=rendered,
        candidate_count=len(context.candidates),
        item_count=len(context.items),
    )


@dataclass(frozen=True)
class PromptView:
    """Context recovered by re-parsing a rendered prompt.

    This is what prompt-only consumers (mock generators, the rule critic) see:
    candidate texts and item metadata, without the original stats objects.
    """

    prefix: str = ""
    candidates: tuple[str, ...] = ()
    item_titles: tuple[str, ...] = ()
    item_texts: tuple[str, ...] = ()

    def grounding_texts(self) -> tuple[str, ...]:
        return self.candidates + self.item_texts


def _block_lines(lines: list[str], start: int) -> tuple[list[str], int]:
    """Collect block lines from ``start`` until the next section header."""
    collected = []
    i = start
    while i < len(lines):
        line = lines[i].strip()
        if line.startswith("[") or _is_section_header(line):
            break
        if line and line != EMPTY_BLOCK:
            collected.append(line)
        i += 1
    return collected, i


def _is_section_header(line: str) -> bool:
    return (
        line.startswith("1. User Prefix")
        or line.startswith("2. Query Candidates")
        or line.startswith("3. Apps Metadata")
    )


def parse_prompt(rendered: str) -> PromptView:
    """Recover prefix, candidate texts, and item metadata from a rendered prompt.

    Understands the default template's block grammar. Unknown layouts yield an
    empty view rather than an error, so prompt-only consumers degrade to
    producing nothing instead of guessing.
    """
    lines = rendered.splitlines()
    prefix = ""
    candidates: list[str] = []
    item_titles: list[str] = []
    item_texts: list[str] = []
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        if line.startswith("1. User Prefix"):
            j = i + 1
            while j < len(lines) and not lines[j].strip():
                j += 1
            if j < len(lines) and not _is_section_header(lines[j].strip()):
                prefix = lines[j].strip()
                i = j
        elif line.startswith("2. Query Candidates"):
            block, i = _block_lines(lines, i + 1)
            for entry in block:
                candidates.append(entry.split(" | ")[0])
            continue
        elif line.startswith("3. Apps Metadata"):
            block, i = _block_lines(lines, i + 1)
            for entry in block:
                parts = entry.split(" | ")
                item_titles.append(parts[0])
                description = parts[2] if len(parts) > 2 else ""
                item_texts.append(f"{parts[0]} {description}".strip())
            continue
        i += 1
    return PromptView(
        prefix=prefix,
        candidates=tuple(candidates),
        item_titles=tuple(item_titles),
        item_texts=tuple(item_texts),
    )


def load_template(path: str) -> str:
    with open(path, encoding="utf-8") as handle:
        return handle.read()
