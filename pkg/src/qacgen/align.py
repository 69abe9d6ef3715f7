"""Sequence-likelihood training math on tabular toy policies.

A toy policy keeps one logit per (context window, token) and produces
next-token distributions by softmax over a fixed vocabulary. That is enough
substrate to exercise the supervised and preference losses exactly, with
analytic gradients checked against central finite differences. All
log-probabilities use natural log.
"""

from __future__ import annotations

import csv
import math
import random
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

from . import QacError

DEFAULT_BETA = 0.1
DEFAULT_WINDOW = 8

ParamKey = tuple[tuple[str, ...], str]


class UnknownToken(QacError):
    """A token outside the policy's vocabulary."""


class EmptyDataset(QacError):
    """A loss was requested over zero examples."""


def log_sigmoid(x: float) -> float:
    """Numerically stable log of the logistic function."""
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class TokenizedExample:
    """A prompt token sequence and a non-empty target token sequence."""

    x: tuple[str, ...]
    y: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.y:
            raise ValueError("target sequence must be non-empty")


@dataclass(frozen=True)
class PreferenceExample:
    """Tokenized chosen/rejected continuations sharing one prompt."""

    x: tuple[str, ...]
    y_chosen: tuple[str, ...]
    y_rejected: tuple[str, ...]


class ToyPolicy:
    """Tabular softmax policy over a fixed vocabulary.

    Parameters are sparse: a missing logit reads as 0, so the untouched
    policy is uniform. The conditioning context is the last ``window`` tokens
    of prompt plus generated prefix, which keeps the table finite.
    """

    def __init__(self, vocabulary: Sequence[str], window: int = DEFAULT_WINDOW):
        if len(set(vocabulary)) != len(vocabulary):
            raise ValueError("vocabulary tokens must be distinct")
        self.vocab = tuple(vocabulary)
        self._vocab_set = frozenset(vocabulary)
        self.window = window
        self.params: dict[ParamKey, float] = {}

    def clone(self) -> ToyPolicy:
        copy = ToyPolicy(self.vocab, self.window)
        copy.params = dict(self.params)
        return copy

    def context_key(self, x: Sequence[str], y_prefix: Sequence[str]) -> tuple[str, ...]:
        history = tuple(x) + tuple(y_prefix)
        return history[-self.window :] if self.window else ()

    def _check_tokens(self, tokens: Iterable[str]) -> None:
        for tok in tokens:
            if tok not in self._vocab_set:
                raise UnknownToken(tok)

    def step_logprobs(self, key: tuple[str, ...]) -> dict[str, float]:
        """Log-softmax over the vocabulary at one context."""
        logits = [self.params.get((key, tok), 0.0) for tok in self.vocab]
        peak = max(logits)
        exps = [math.exp(l - peak) for l in logits]
        log_z = peak + math.log(sum(exps))
        return {tok: logit - log_z for tok, logit in zip(self.vocab, logits)}


def init_policy(
    vocabulary: Sequence[str],
    seed: int = 0,
    jitter: float = 0.01,
    window: int = DEFAULT_WINDOW,
) -> ToyPolicy:
    """Fresh policy: uniform for seed 0, small seeded logit jitter otherwise.

    Jitter breaks the exact-uniform symmetry so seeded runs explore distinct
    but reproducible trajectories.
    """
    policy = ToyPolicy(vocabulary, window)
    if seed:
        rng = random.Random(seed)
        for tok in policy.vocab:
            policy.params[((), tok)] = rng.gauss(0.0, jitter)
    return policy


def seq_logprob(policy: ToyPolicy, x: Sequence[str], y: Sequence[str]) -> float:
    """Log-probability of generating ``y`` after prompt ``x``, step by step."""
    policy._check_tokens(x)
    policy._check_tokens(y)
    total = 0.0
    for t in range(len(y)):
        key = policy.context_key(x, y[:t])
        total += policy.step_logprobs(key)[y[t]]
    return total


def grad_seq_logprob(
    policy: ToyPolicy, x: Sequence[str], y: Sequence[str]
) -> dict[ParamKey, float]:
    """Gradient of seq_logprob w.r.t. every logit at the visited contexts.

    At each step the gradient is the one-hot target minus the softmax
    probabilities, accumulated over steps.
    """
    grad: dict[ParamKey, float] = {}
    for t in range(len(y)):
        key = policy.context_key(x, y[:t])
        logprobs = policy.step_logprobs(key)
        for tok in policy.vocab:
            p = math.exp(logprobs[tok])
            grad[(key, tok)] = grad.get((key, tok), 0.0) + (1.0 if tok == y[t] else 0.0) - p
    return grad


def sft_loss(policy: ToyPolicy, dataset: Sequence[TokenizedExample]) -> float:
    """Mean per-token negative log-likelihood over the dataset.

    Each example is normalized by its own target length before averaging, so
    long targets do not dominate.
    """
    if not dataset:
        raise EmptyDataset("sft_loss needs at least one example")
    total = 0.0
    for example in dataset:
        total += -seq_logprob(policy, example.x, example.y) / len(example.y)
    return total / len(dataset)


def grad_sft_loss(
    policy: ToyPolicy, dataset: Sequence[TokenizedExample]
) -> dict[ParamKey, float]:
    if not dataset:
        raise EmptyDataset("sft_loss needs at least one example")
    grad: dict[ParamKey, float] = {}
    scale = 1.0 / len(dataset)
    for example in dataset:
        g = grad_seq_logprob(policy, example.x, example.y)
        for key, value in g.items():
            grad[key] = grad.get(key, 0.0) - scale * value / len(example.y)
    return grad


def _pair_logit(
    policy: ToyPolicy, reference: ToyPolicy, pair: PreferenceExample, beta: float
) -> float:
    chosen_ratio = seq_logprob(policy, pair.x, pair.y_chosen) - seq_logprob(
        reference, pair.x, pair.y_chosen
    )
    rejected_ratio = seq_logprob(policy, pair.x, pair.y_rejected) - seq_logprob(
        reference, pair.x, pair.y_rejected
    )
    return beta * (chosen_ratio - rejected_ratio)


def dpo_loss(
    policy: ToyPolicy,
    reference: ToyPolicy,
    pairs: Sequence[PreferenceExample],
    beta: float = DEFAULT_BETA,
) -> float:
    """Preference loss: push the policy's chosen-over-rejected likelihood
    ratio above the frozen reference's, with ``beta`` scaling the margin.

    Sequence log-probabilities enter as raw sums (no length normalization).
    Identical policy and reference give exactly ln 2, as does beta = 0.
    """
    if not pairs:
        raise EmptyDataset("dpo_loss needs at least one pair")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    total = 0.0
    for pair in pairs:
        total += -log_sigmoid(_pair_logit(policy, reference, pair, beta))
    return total / len(pairs)


def dpo_grad(
    policy: ToyPolicy,
    reference: ToyPolicy,
    pairs: Sequence[PreferenceExample],
    beta: float = DEFAULT_BETA,
) -> dict[ParamKey, float]:
    """Analytic gradient of dpo_loss w.r.t. the policy's logits."""
    if not pairs:
        raise EmptyDataset("dpo_loss needs at least one pair")
    grad: dict[ParamKey, float] = {}
    scale = 1.0 / len(pairs)
    for pair in pairs:
        logit = _pair_logit(policy, reference, pair, beta)
        coeff = -beta * sigmoid(-logit) * scale
        chosen_grad = grad_seq_logprob(policy, pair.x, pair.y_chosen)
        rejected_grad = grad_seq_logprob(policy, pair.x, pair.y_rejected)
        for key, value in chosen_grad.items():
            grad[key] = grad.get(key, 0.0) + coeff * value
        for key, value in rejected_grad.items():
            grad[key] = grad.get(key, 0.0) - coeff * value
    return grad


def dpo_grad_check(
    policy: ToyPolicy,
    reference: ToyPolicy,
    pairs: Sequence[PreferenceExample],
    beta: float = DEFAULT_BETA,
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    if h <= 0:
        raise ValueError("h must be > 0")
    analytic = dpo_grad(policy, reference, pairs, beta)
    worst = 0.0
    for key, a in analytic.items():
        original = policy.params.get(key, 0.0)
        policy.params[key] = original + h
        up = dpo_loss(policy, reference, pairs, beta)
        policy.params[key] = original - h
        down = dpo_loss(policy, reference, pairs, beta)
        if original == 0.0:
            policy.params.pop(key, None)
        else:
            policy.params[key] = original
        numeric = (up - down) / (2.0 * h)
        denom = max(abs(a), abs(numeric))
        if denom < 1e-10:
            continue
        worst = max(worst, abs(a - numeric) / denom)
    return worst


@dataclass(frozen=True)
class TrainStep:
    step: int
    loss: float


def train_dpo(
    policy: ToyPolicy,
    reference: ToyPolicy,
    pairs: Sequence[PreferenceExample],
    beta: float = DEFAULT_BETA,
    step_size: float = 0.5,
    steps: int = 50,
) -> list[TrainStep]:
    """Plain gradient descent on the preference loss; mutates ``policy``.

    Returns the loss after each step, preceded by the starting loss at step 0.
    """
    history = [TrainStep(0, dpo_loss(policy, reference, pairs, beta))]
    for step in range(1, steps + 1):
        grad = dpo_grad(policy, reference, pairs, beta)
        for key, g in grad.items():
            policy.params[key] = policy.params.get(key, 0.0) - step_size * g
        history.append(TrainStep(step, dpo_loss(policy, reference, pairs, beta)))
    return history


def train_sft(
    policy: ToyPolicy,
    dataset: Sequence[TokenizedExample],
    step_size: float = 0.5,
    steps: int = 50,
) -> list[TrainStep]:
    """Gradient descent on the supervised loss; mutates ``policy``."""
    history = [TrainStep(0, sft_loss(policy, dataset))]
    for step in range(1, steps + 1):
        grad = grad_sft_loss(policy, dataset)
        for key, g in grad.items():
            policy.params[key] = policy.params.get(key, 0.0) - step_size * g
        history.append(TrainStep(step, sft_loss(policy, dataset)))
    return history


LINE_BREAK_TOKEN = "<nl>"


def tokenize_block(raw: str) -> tuple[str, ...]:
    """Whitespace-level tokens of a raw answer block, lines joined by a marker."""
    tokens: list[str] = []
    for line in raw.strip().splitlines():
        parts = line.split()
        if not parts:
            continue
        if tokens:
            tokens.append(LINE_BREAK_TOKEN)
        tokens.extend(parts)
    return tuple(tokens)


def pairs_from_records(records: Sequence[dict]) -> tuple[list[PreferenceExample], list[str]]:
    """Tokenize preference JSONL records; returns the pairs and the vocabulary."""
    pairs = []
    vocab: dict[str, None] = {}
    for record in records:
        x = tokenize_block(record["prompt"])
        y_w = tokenize_block(record["chosen_raw"])
        y_l = tokenize_block(record["rejected_raw"])
        if not y_w or not y_l:
            continue
        for tok in (*x, *y_w, *y_l):
            vocab.setdefault(tok)
        pairs.append(PreferenceExample(x=x, y_chosen=y_w, y_rejected=y_l))
    return pairs, list(vocab)


def examples_from_corpus(records: Sequence[dict]) -> tuple[list[TokenizedExample], list[str]]:
    """Tokenize refinement-corpus JSONL records for supervised training."""
    examples = []
    vocab: dict[str, None] = {}
    for record in records:
        x = tokenize_block(record["prompt"])
        y = tokenize_block(record["final_answer_block"])
        if not y:
            continue
        for tok in (*x, *y):
            vocab.setdefault(tok)
        examples.append(TokenizedExample(x=x, y=y))
    return examples, list(vocab)


def write_metrics_csv(history: Sequence[TrainStep], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step", "loss"])
        for row in history:
            writer.writerow([row.step, f"{row.loss:.12f}"])
