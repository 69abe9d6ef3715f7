"""Generator contract, answer-block wire format, and deterministic mocks.

The wire format is strict: first line ``<answer>``, one query per line, last
line ``</answer>``. Trailing whitespace and blank interior lines are
tolerated; anything else fails parsing, and the format gate zeroes the reward
of whatever fails here.
"""

from __future__ import annotations

import enum
import hashlib
import os
import random
import select
import struct
import subprocess
import threading
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Protocol

from . import QacError
from .context import PromptView, RetrievedContext, parse_prompt
from .retrieval import EmptyAfterNormalization, normalize_query

OPEN_TAG = "<answer>"
CLOSE_TAG = "</answer>"
K_MAX = 10

ROLES = frozenset({"large", "compact", "teacher", "critic", "reviser"})


class FormatErrorKind(enum.Enum):
    MISSING_OPEN_TAG = "missing_open_tag"
    MISSING_CLOSE_TAG = "missing_close_tag"
    EXTRANEOUS_TEXT = "extraneous_text"
    DUPLICATE_QUERY = "duplicate_query"
    TOO_MANY_QUERIES = "too_many_queries"


class AnswerFormatError(QacError):
    """Raised when raw generator output is not a valid answer block."""

    def __init__(self, kind: FormatErrorKind, detail: str = ""):
        super().__init__(f"{kind.value}{': ' + detail if detail else ''}")
        self.kind = kind


class GeneratorUnavailable(QacError):
    """The generator backing a profile cannot be reached."""


class GenerationTimeout(QacError):
    """Generation exceeded the profile's latency budget."""

    def __init__(self, budget: float):
        super().__init__(f"generation exceeded {budget:.3f}s budget")
        self.budget = budget


@dataclass(frozen=True)
class SuggestionList:
    """An ordered list of suggested queries plus the raw text it came from."""

    queries: tuple[str, ...]
    raw_text: str = ""

    def __post_init__(self) -> None:
        if len(self.queries) > K_MAX:
            raise ValueError(f"at most {K_MAX} queries allowed")
        if len(set(self.queries)) != len(self.queries):
            raise ValueError("queries must be pairwise distinct")

    def __len__(self) -> int:
        return len(self.queries)


@dataclass(frozen=True)
class GeneratorProfile:
    """Identity and sampling settings for one registered generator."""

    name: str
    role: str
    temperature: float = 0.0
    top_p: float = 1.0
    seed: int = 0
    timeout: float | None = None
    max_parallelism: int | None = None

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}; expected one of {sorted(ROLES)}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


class Generator(Protocol):
    """Text-in/text-out generation; ``seed`` fixes all randomness for the call."""

    def generate(self, prompt: str, *, seed: int = 0) -> str: ...


def derive_seed(base: int, *parts: object) -> int:
    """Stable sub-seed derivation, identical across platforms and runs."""
    payload = "|".join([str(base), *[str(p) for p in parts]]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


def render_answer_block(queries: Sequence[str]) -> str:
    lines = [OPEN_TAG, *queries, CLOSE_TAG]
    return "\n".join(lines)


def parse_answer_block(raw: str) -> SuggestionList:
    """Parse an answer block into a suggestion list, or raise AnswerFormatError.

    An empty body is a valid (empty) list: emptiness is a quality problem for
    the fraction-style verifiers, not a syntax problem for the gate.
    """
    lines = [line.strip() for line in raw.strip().splitlines()]
    if not lines or lines[0] != OPEN_TAG:
        if OPEN_TAG in lines:
            raise AnswerFormatError(FormatErrorKind.EXTRANEOUS_TEXT, "text before open tag")
        raise AnswerFormatError(FormatErrorKind.MISSING_OPEN_TAG)
    if len(lines) < 2 or lines[-1] != CLOSE_TAG:
        if CLOSE_TAG in lines[1:]:
            raise AnswerFormatError(FormatErrorKind.EXTRANEOUS_TEXT, "text after close tag")
        raise AnswerFormatError(FormatErrorKind.MISSING_CLOSE_TAG)
    queries: list[str] = []
    seen: set[str] = set()
    for line in lines[1:-1]:
        if not line:
            continue
        if line in (OPEN_TAG, CLOSE_TAG):
            raise AnswerFormatError(FormatErrorKind.EXTRANEOUS_TEXT, "tag inside body")
        try:
            query = normalize_query(line)
        except EmptyAfterNormalization:
            continue
        if query in seen:
            raise AnswerFormatError(FormatErrorKind.DUPLICATE_QUERY, query)
        seen.add(query)
        queries.append(query)
    if len(queries) > K_MAX:
        raise AnswerFormatError(
            FormatErrorKind.TOO_MANY_QUERIES, f"{len(queries)} > {K_MAX}"
        )
    return SuggestionList(queries=tuple(queries), raw_text=raw)


def salvage_parse(raw: str) -> SuggestionList:
    """Best-effort parse for diagnostics: never raises.

    Strips tags and prose heuristically, silently deduplicates, and truncates
    to the list cap. Used only where a hard parse failure still needs scores.
    """
    lines = [line.strip() for line in raw.strip().splitlines()]
    if OPEN_TAG in lines:
        lines = lines[lines.index(OPEN_TAG) + 1 :]
    if CLOSE_TAG in lines:
        lines = lines[: len(lines) - 1 - lines[::-1].index(CLOSE_TAG)]
    queries: list[str] = []
    seen: set[str] = set()
    for line in lines:
        if not line or line in (OPEN_TAG, CLOSE_TAG):
            continue
        try:
            query = normalize_query(line)
        except EmptyAfterNormalization:
            continue
        if query not in seen:
            seen.add(query)
            queries.append(query)
        if len(queries) == K_MAX:
            break
    return SuggestionList(queries=tuple(queries), raw_text=raw)


def _mock_queries(view: PromptView | RetrievedContext) -> list[str]:
    """Clean mock output: top candidates first, then item-title queries."""
    if isinstance(view, RetrievedContext):
        candidates = view.candidate_texts()
        titles = view.item_titles()
    else:
        candidates = view.candidates
        titles = view.item_titles
    queries: list[str] = []
    seen: set[str] = set()
    for candidate in candidates[: K_MAX // 2]:
        if candidate not in seen:
            seen.add(candidate)
            queries.append(candidate)
    for title in titles:
        if len(queries) >= K_MAX:
            break
        try:
            query = normalize_query(title)
        except EmptyAfterNormalization:
            continue
        if query not in seen:
            seen.add(query)
            queries.append(query)
    return queries


_NONSENSE_WORDS = (
    "quorvax", "blenth", "drivvle", "morkwa", "zephyrine", "glimber", "traxo", "vulpin",
)


def _hallucinated_query(rng: random.Random, taken: set[str]) -> str:
    for _ in range(20):
        query = f"{rng.choice(_NONSENSE_WORDS)} {rng.choice(_NONSENSE_WORDS)}"
        if query not in taken:
            return query
    return f"{rng.choice(_NONSENSE_WORDS)} {rng.randrange(1000)}"


def template_mock_generate(
    context: RetrievedContext | PromptView, noise_seed: int = 0
) -> str:
    """Deterministic stand-in for a tuned model.

    With ``noise_seed`` 0 the output is a clean answer block whose every query
    is traceable to the context. Nonzero seeds apply seeded perturbations:
    drops, reorders, and hallucinated replacements vary list quality while
    staying parseable; duplicated lines and corrupted tags break the format
    outright. Together these give preference mining a reward spread to work
    with.
    """
    queries = _mock_queries(context)
    if noise_seed == 0:
        return render_answer_block(queries)
    rng = random.Random(noise_seed)
    if queries and rng.random() < 0.5:
        queries = [q for q in queries if rng.random() >= 0.3]
    if len(queries) > 1 and rng.random() < 0.4:
        rng.shuffle(queries)
    if queries and rng.random() < 0.4:
        taken = set(queries)
        for _ in range(rng.randint(1, min(3, len(queries)))):
            idx = rng.randrange(len(queries))
            replacement = _hallucinated_query(rng, taken)
            taken.add(replacement)
            queries[idx] = replacement
    duplicate = queries and rng.random() < 0.08
    if duplicate:
        queries.insert(rng.randrange(len(queries) + 1), rng.choice(queries))
    block = render_answer_block(queries)
    if rng.random() < 0.08:
        corruption = rng.choice(("drop_close", "leading_prose", "trailing_prose", "shout_tag"))
        if corruption == "drop_close":
            block = "\n".join(block.splitlines()[:-1])
        elif corruption == "leading_prose":
            block = "Here are the suggestions:\n" + block
        elif corruption == "trailing_prose":
            block = block + "\nHope these help!"
        else:
            block = block.replace(OPEN_TAG, OPEN_TAG.upper(), 1)
    return block


class TemplateMockGenerator:
    """Generator that reconstructs context from the rendered prompt blocks.

    Temperature 0 always emits the clean deterministic list; any higher
    temperature turns the call seed into the perturbation seed.
    """

    def __init__(self, profile: GeneratorProfile):
        self.profile = profile
        self.calls = 0

    def generate(self, prompt: str, *, seed: int | None = None) -> str:
        self.calls += 1
        if self.profile.temperature == 0:
            noise = 0
        else:
            noise = self.profile.seed if seed is None else seed
        return template_mock_generate(parse_prompt(prompt), noise_seed=noise)


class StaticGenerator:
    """Returns a fixed raw string; handy for wiring tests."""

    def __init__(self, raw: str):
        self.raw = raw
        self.calls = 0

    def generate(self, prompt: str, *, seed: int = 0) -> str:
        self.calls += 1
        return self.raw


def write_frame(stream, payload: str) -> None:
    data = payload.encode("utf-8")
    stream.write(struct.pack(">I", len(data)) + data)
    stream.flush()


def read_frame(stream, deadline: float | None = None) -> str:
    """Read one length-prefixed UTF-8 frame, honoring an absolute deadline.

    Reads the raw descriptor directly so select() never lies about readiness
    because of Python-level buffering.
    """
    fd = stream.fileno()

    def read_exact(n: int) -> bytes:
        chunks = b""
        while len(chunks) < n:
            if deadline is not None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError
                ready, _, _ = select.select([fd], [], [], remaining)
                if not ready:
                    raise TimeoutError
            chunk = os.read(fd, n - len(chunks))
            if not chunk:
                raise EOFError("stream closed mid-frame")
            chunks += chunk
        return chunks

    (length,) = struct.unpack(">I", read_exact(4))
    return read_exact(length).decode("utf-8")


class ExternalProcessGenerator:
    """Bridges to any model via length-prefixed UTF-8 frames over stdio.

    The child reads one prompt frame from stdin and writes one completion
    frame to stdout per request; the process stays alive across calls. One
    stdio pipe means one request at a time, so calls serialize on a lock
    regardless of the engine-level parallelism bound.
    """

    def __init__(self, command: Sequence[str], profile: GeneratorProfile):
        self.command = list(command)
        self.profile = profile
        self._proc: subprocess.Popen | None = None
        self._lock = threading.Lock()

    def _ensure_process(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    self.command,
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                )
            except OSError as exc:
                raise GeneratorUnavailable(f"cannot spawn {self.command}: {exc}") from exc
        return self._proc

    def generate(self, prompt: str, *, seed: int = 0) -> str:
        budget = self.profile.timeout
        deadline = time.monotonic() + budget if budget is not None else None
        with self._lock:
            proc = self._ensure_process()
            try:
                write_frame(proc.stdin, prompt)
                return read_frame(proc.stdout, deadline)
            except TimeoutError:
                self._close_locked()
                raise GenerationTimeout(budget) from None
            except (BrokenPipeError, EOFError, OSError) as exc:
                self._close_locked()
                raise GeneratorUnavailable(str(exc)) from exc

    def _close_locked(self) -> None:
        if self._proc is not None:
            self._proc.kill()
            self._proc.wait()
            self._proc = None

    def close(self) -> None:
        with self._lock:
            self._close_locked()


@dataclass
class SampleBatch:
    """Raw outputs from a sampling sweep, with per-sample failures kept aside."""

    outputs: list[str] = field(default_factory=list)
    failures: list[tuple[int, Exception]] = field(default_factory=list)


def sample_candidate_lists(
    generator: Generator, profile: GeneratorProfile, prompt: str, n: int
) -> SampleBatch:
    """Draw ``n`` generations with distinct derived seeds.

    Deterministic given (profile.seed, n); per-sample errors are recorded and
    the remaining samples still run.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    batch = SampleBatch()
    for i in range(n):
        try:
            batch.outputs.append(
                generator.generate(prompt, seed=derive_seed(profile.seed, "sample", i))
            )
        except QacError as exc:
            batch.failures.append((i, exc))
    return batch
