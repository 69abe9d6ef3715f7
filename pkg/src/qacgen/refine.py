"""Generator -> Critic -> Reviser refinement loop for synthetic data.

Rule-based critic and reviser are the defaults: they reuse the verifier
components and recover their context by re-parsing the generation prompt, so
the loop runs without any model. Profile-backed critics and revisers plug in
through the same callables.
"""

from __future__ import annotations

import json
import re
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Callable

from .context import PromptText, RetrievedContext, parse_prompt, render_prompt
from .generator import (
    AnswerFormatError,
    CLOSE_TAG,
    Generator,
    GeneratorUnavailable,
    GenerationTimeout,
    K_MAX,
    OPEN_TAG,
    SuggestionList,
    parse_answer_block,
    render_answer_block,
    salvage_parse,
)
from .retrieval import tokenize
from .verifiers import RuleContextJudge, SafetyClassifier

DEFAULT_MAX_ROUNDS = 3

STOP_CRITIC_APPROVED = "critic_approved"
STOP_CONVERGED = "converged"
STOP_MAX_ROUNDS = "max_rounds"
STOP_GENERATOR_ERROR = "generator_error"


@dataclass(frozen=True)
class CritiqueAssessment:
    """Per-query issues plus the critic's final revise decision."""

    notes: tuple[tuple[str, str], ...]
    revise: bool

    def flagged_queries(self) -> frozenset[str]:
        return frozenset(query for query, _ in self.notes if query)


Critic = Callable[[str, str], CritiqueAssessment]
Reviser = Callable[[str, str, CritiqueAssessment], str]


class RuleCritic:
    """Deterministic critic: format, safety, groundedness, duplicate intents.

    Groundedness and backfill context come from re-parsing the generation
    prompt, which the prompt grammar guarantees is lossless for candidate
    texts and item metadata.
    """

    def __init__(self, classifier: SafetyClassifier, judge: RuleContextJudge | None = None):
        self.classifier = classifier
        self.judge = judge or RuleContextJudge()

    def __call__(self, prompt: str, response_raw: str) -> CritiqueAssessment:
        view = parse_prompt(prompt)
        notes: list[tuple[str, str]] = []
        try:
            parsed = parse_answer_block(response_raw)
            queries = parsed.queries
        except AnswerFormatError as exc:
            notes.append(("", f"format: {exc.kind.value}"))
            queries = salvage_parse(response_raw).queries
        grounding = view.grounding_texts()
        seen_intents: set[tuple[str, ...]] = set()
        for query in queries:
            if not self.classifier(query):
                notes.append((query, "safety: blocklisted term"))
            if not self.judge.grounded_in(query, grounding):
                notes.append((query, "groundedness: not traceable to context"))
            intent = tuple(sorted(tokenize(query)))
            if intent in seen_intents:
                notes.append((query, "duplication: same intent as an earlier suggestion"))
            seen_intents.add(intent)
        return CritiqueAssessment(notes=tuple(notes), revise=bool(notes))


class RuleReviser:
    """Deterministic reviser: drop flagged queries, backfill clean candidates.

    Unflagged queries keep their order. Backfill comes from prompt candidates
    not already used, filtered through the same safety and duplicate checks,
    and restores at most the original list length.
    """

    def __init__(self, classifier: SafetyClassifier, judge: RuleContextJudge | None = None):
        self.classifier = classifier
        self.judge = judge or RuleContextJudge()

    def __call__(self, prompt: str, response_raw: str, assessment: CritiqueAssessment) -> str:
        if not assessment.revise:
            return response_raw
        view = parse_prompt(prompt)
        original = salvage_parse(response_raw).queries
        flagged = assessment.flagged_queries()
        kept: list[str] = []
        intents: set[tuple[str, ...]] = set()
        for query in original:
            if query in flagged:
                continue
            kept.append(query)
            intents.add(tuple(sorted(tokenize(query))))
        target = min(len(original), K_MAX)
        for candidate in view.candidates:
            if len(kept) >= target:
                break
            intent = tuple(sorted(tokenize(candidate)))
            if candidate in kept or candidate in flagged or intent in intents:
                continue
            if not self.classifier(candidate):
                continue
            kept.append(candidate)
            intents.add(intent)
        return render_answer_block(kept)


CRITIC_TEMPLATE = """\
[SYSTEM]
You are an expert reviewer for query suggestions in a mobile app store. Given
the generation prompt and the model's response, assess each suggested query
and provide detailed feedback on how to improve the list.

[INPUT]
1. Prompt:
{prompt}

2. Response:
{response}

[EVALUATION DIMENSIONS]
For each suggested query, comment on relevance, prefix matching, fluency,
app-store focus, safety, groundedness in the provided candidates and app
metadata, duplication of intent with earlier suggestions, and overall list
coverage.

[OUTPUT]
- For each query with issues, write one line: - <query>: <issue>
- Do not output a revised list; only recommend changes.
- End with exactly one decision line:

Final decision to revise: YES   (or NO)
"""

REVISER_TEMPLATE = """\
[SYSTEM]
You are a query suggestion improver for a mobile app store. Using the original
prompt, the initial suggestions, and a detailed critic review, produce a
revised list of high-quality, grounded, and diverse query completions.

[INPUT]
1. Prompt:
{prompt}

2. Initial Response:
{response}

3. Assessment:
{assessment}

[REVISION GUIDELINES]
- Respect all constraints from the original generation prompt (safety,
  groundedness, output format, diversity).
- Fix unsafe or ungrounded queries, poor prefix matching, and near-duplicates.
- Preserve suggestions the review deems high-quality; do not change them
  unnecessarily.
- If the review's final decision is that no revision is needed, you may return
  the initial list unchanged.

[OUTPUT]
Output the final suggestion list in the same format as the original response:

<answer>
query1
query2
...
</answer>
"""


class DecisionLineCritic:
    """Adapts a profile-backed generator into a critic.

    The generator receives the original prompt and response wrapped in the
    review template and must end its output with a decision line such as
    ``Final decision to revise: YES``. Issue lines of the form
    ``- <query>: <issue>`` become notes.
    """

    DECISION = re.compile(r"final decision to revise:\s*(yes|no)\b", re.IGNORECASE)
    NOTE = re.compile(r"^-\s*(.+?):\s*(.+)$")

    def __init__(self, generator: Generator, seed: int = 0):
        self.generator = generator
        self.seed = seed

    def __call__(self, prompt: str, response_raw: str) -> CritiqueAssessment:
        review_request = CRITIC_TEMPLATE.format(prompt=prompt, response=response_raw)
        raw = self.generator.generate(review_request, seed=self.seed)
        decision = self.DECISION.search(raw)
        if decision is None:
            raise GeneratorUnavailable("critic output lacks a decision line")
        notes = []
        for line in raw.splitlines():
            match = self.NOTE.match(line.strip())
            if match:
                notes.append((match.group(1).strip(), match.group(2).strip()))
        return CritiqueAssessment(
            notes=tuple(notes), revise=decision.group(1).lower() == "yes"
        )


class GeneratorReviser:
    """Adapts a profile-backed generator into a reviser.

    The generator sees the original prompt, the initial response, and the
    critic's notes, and must emit a new answer block; the block is extracted
    from whatever surrounds it so chatty models still work.
    """

    def __init__(self, generator: Generator, seed: int = 0):
        self.generator = generator
        self.seed = seed

    def __call__(self, prompt: str, response_raw: str, assessment: CritiqueAssessment) -> str:
        if not assessment.revise:
            return response_raw
        notes = "\n".join(f"- {query}: {issue}" for query, issue in assessment.notes)
        request = REVISER_TEMPLATE.format(
            prompt=prompt, response=response_raw, assessment=notes or "(no issues listed)"
        )
        raw = self.generator.generate(request, seed=self.seed)
        lines = [line.strip() for line in raw.splitlines()]
        if OPEN_TAG in lines and CLOSE_TAG in lines:
            start = lines.index(OPEN_TAG)
            end = len(lines) - 1 - lines[::-1].index(CLOSE_TAG)
            if start < end:
                return "\n".join(lines[start : end + 1])
        return raw


@dataclass(frozen=True)
class RefinementRound:
    raw: str
    assessment: CritiqueAssessment


@dataclass(frozen=True)
class RefinementTrace:
    """Every round of one refinement run plus how and why it stopped."""

    prompt: str
    rounds: tuple[RefinementRound, ...]
    final: SuggestionList | None
    stop_reason: str
    failed: bool = False


def refine_loop(
    context: RetrievedContext,
    generator: Generator,
    critic: Critic,
    reviser: Reviser,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
    template: str | None = None,
    seed: int = 0,
    prompt: PromptText | None = None,
) -> RefinementTrace:
    """Generate once, then alternate critique and revision.

    Stops when the critic approves, when a revision no longer changes the
    parsed list, or at ``max_rounds``. Generator failures yield a trace marked
    failed instead of raising.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    if prompt is None:
        prompt = render_prompt(context, template) if template else render_prompt(context)
    rounds: list[RefinementRound] = []
    prev_raw: str | None = None
    prev_parsed: tuple[str, ...] | None = None
    try:
        raw = generator.generate(prompt.rendered, seed=seed)
    except (GeneratorUnavailable, GenerationTimeout):
        return RefinementTrace(
            prompt=prompt.rendered,
            rounds=(),
            final=None,
            stop_reason=STOP_GENERATOR_ERROR,
            failed=True,
        )
    stop_reason = STOP_MAX_ROUNDS
    for round_number in range(1, max_rounds + 1):
        try:
            assessment = critic(prompt.rendered, raw)
        except (GeneratorUnavailable, GenerationTimeout):
            return RefinementTrace(
                prompt=prompt.rendered,
                rounds=tuple(rounds),
                final=None,
                stop_reason=STOP_GENERATOR_ERROR,
                failed=True,
            )
        rounds.append(RefinementRound(raw=raw, assessment=assessment))
        try:
            parsed: tuple[str, ...] | None = parse_answer_block(raw).queries
        except AnswerFormatError:
            parsed = None
        if not assessment.revise:
            stop_reason = STOP_CRITIC_APPROVED
            break
        if prev_raw is not None and (
            raw == prev_raw or (parsed is not None and parsed == prev_parsed)
        ):
            stop_reason = STOP_CONVERGED
            break
        if round_number == max_rounds:
            stop_reason = STOP_MAX_ROUNDS
            break
        prev_raw, prev_parsed = raw, parsed
        try:
            raw = reviser(prompt.rendered, raw, assessment)
        except (GeneratorUnavailable, GenerationTimeout):
            return RefinementTrace(
                prompt=prompt.rendered,
                rounds=tuple(rounds),
                final=None,
                stop_reason=STOP_GENERATOR_ERROR,
                failed=True,
            )
    final_raw = rounds[-1].raw
    try:
        final: SuggestionList | None = parse_answer_block(final_raw)
        failed = False
    except AnswerFormatError:
        final, failed = None, True
    return RefinementTrace(
        prompt=prompt.rendered,
        rounds=tuple(rounds),
        final=final,
        stop_reason=stop_reason,
        failed=failed,
    )


def write_sft_corpus(traces: Sequence[RefinementTrace], path: str) -> int:
    """Write refinement outcomes as JSONL; failed traces are skipped."""
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for trace in traces:
            if trace.failed or trace.final is None:
                continue
            record = {
                "prompt": trace.prompt,
                "final_answer_block": render_answer_block(trace.final.queries),
                "stop_reason": trace.stop_reason,
                "rounds": len(trace.rounds),
            }
            handle.write(json.dumps(record, sort_keys=True) + "\n")
            count += 1
    return count


def read_sft_corpus(path: str) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
