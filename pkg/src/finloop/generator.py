"""Synthetic QA generation with a rising difficulty curriculum.

Each round renders the data-generation prompt (difficulty slot, history of
past samples, two real exemplars), parses the backend output into a
candidate example, gates it against the answer-magnitude prior, and hands
it to the verifier ensemble. Rejected candidates feed their rejection
reasons back into the next attempt; accepted ones advance the curriculum
by one tier, capped at ``c_max``.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Protocol

from .corpus import (
    Example,
    LabelPrior,
    bucket_index,
    bucket_label,
    extract_tables,
    format_number,
    normalize_number,
    smoothed_distribution,
)
from .errors import AnswerNotNumeric, ParseError, RegenerationExhausted
from .presets import generation_template
from .provider import ChatRequest, Provider, build_request

DEFAULT_C_MAX = 15
# Past samples are shown in full until the history outgrows the context
# comfort zone, then as one-line summaries.
FULL_HISTORY_MAX = 5

REGIME_POOLS = {
    "Short": ("SimpShort", "CompShort"),
    "Long": ("SimpLong", "CompLong"),
}

_SECTION_LABELS = ("Generated Paragraphs:", "Generated Question:", "Generated Answer:")
_FIRST_QUOTED = re.compile(r"['`‘“]([^'`’”]+)['`’”]")

EmitFn = Callable[[str, dict], None]


@dataclass
class HistoryEntry:
    difficulty: int
    summary: str
    example: Example


@dataclass
class GeneratorState:
    exemplars: tuple[Example, Example]
    prior: LabelPrior
    current_difficulty: int = 1
    c_max: int = DEFAULT_C_MAX
    regime: str = "Short"
    kl_threshold: float = 1.0
    lambda_weight: float = 0.0
    history: list[HistoryEntry] = field(default_factory=list)
    pending_feedback: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.exemplars) != 2:
            raise ValueError("exactly two exemplars required")
        if self.regime not in REGIME_POOLS:
            raise ValueError(f"unknown regime {self.regime!r}")
        if not 1 <= self.current_difficulty <= self.c_max:
            raise ValueError("current difficulty outside [1, c_max]")
        if self.kl_threshold <= 0:
            raise ValueError("kl_threshold must be positive")
        if self.lambda_weight < 0:
            raise ValueError("lambda_weight must be non-negative")
        difficulties = [h.difficulty for h in self.history]
        if difficulties != sorted(difficulties):
            raise ValueError("history difficulties must be non-decreasing")


@dataclass(frozen=True)
class CandidateExample:
    example: Example
    raw_response: str
    parse_diagnostics: tuple[str, ...] = ()


class VerifierHandle(Protocol):
    def __call__(self, candidate: CandidateExample) -> "_ConsensusLike": ...


class _ConsensusLike(Protocol):
    @property
    def accepted(self) -> bool: ...
    def rejection_reasons(self) -> list[str]: ...


def render_sample(example: Example) -> str:
    """One sample in the three-section output format the template demands."""
    return (
        f"Generated Paragraphs:\n{example.passage}\n\n"
        f"Generated Question:\n{example.question}\n\n"
        f"Generated Answer: {format_number(example.gold_answer)}"
    )


def _render_history(history: list[HistoryEntry]) -> str:
    if not history:
        return "(none)"
    if len(history) <= FULL_HISTORY_MAX:
        blocks = [f"[difficulty {h.difficulty}]\n{render_sample(h.example)}" for h in history]
        return "\n\n".join(blocks)
    return "\n".join(f"- [difficulty {h.difficulty}] {h.summary}" for h in history)


def build_generation_prompt(state: GeneratorState) -> ChatRequest:
    """Render the generation template for the current curriculum tier."""
    system, user_template = generation_template()
    exemplars = "\n\n".join(render_sample(ex) for ex in state.exemplars)
    user = user_template.format(
        c=state.current_difficulty,
        c_max=state.c_max,
        history=_render_history(state.history),
        exemplars=exemplars,
    )
    if state.pending_feedback:
        feedback = "\n".join(f"- {reason}" for reason in state.pending_feedback)
        user += (
            "\n\nThe previous attempt was rejected for these reasons:\n"
            f"{feedback}\nGenerate a new sample that avoids these problems."
        )
    return build_request("generator", system, user)


def _candidate_id(passage: str, question: str, answer: float, difficulty: int) -> str:
    digest = hashlib.sha1(
        f"{passage}\x1f{question}\x1f{answer!r}".encode("utf-8")
    ).hexdigest()[:10]
    return f"syn-c{difficulty:02d}-{digest}"


def parse_candidate(raw: str, difficulty: int) -> CandidateExample:
    """Split a generator response into passage, question, and numeric answer."""
    if not raw.strip():
        raise ParseError("empty generator response")
    spans: list[tuple[int, int]] = []
    for label in _SECTION_LABELS:
        m = re.search(r"\*{0,2}%s\*{0,2}" % re.escape(label), raw)
        if m is None:
            raise ParseError(label.rstrip(":"))
        spans.append((m.start(), m.end()))
    if not (spans[0][1] <= spans[1][0] and spans[1][1] <= spans[2][0]):
        raise ParseError("sections appear out of order")

    diagnostics: list[str] = []
    passage = raw[spans[0][1]:spans[1][0]].strip()
    question = raw[spans[1][1]:spans[2][0]].strip()
    answer_section = raw[spans[2][1]:].strip()
    if not passage:
        raise ParseError("Generated Paragraphs")
    if not question:
        raise ParseError("Generated Question")
    answer_line = answer_section.splitlines()[0].strip() if answer_section else ""
    answer = normalize_number(answer_line)
    if answer is None:
        raise AnswerNotNumeric(f"answer section is not a bare number: {answer_line!r}")
    if not extract_tables(passage):
        diagnostics.append("no well-formed table found in the passage")
    example = Example(
        id=_candidate_id(passage, question, answer, difficulty),
        passage=passage,
        question=question,
        gold_answer=answer,
        difficulty=difficulty,
        origin="synthetic",
    )
    return CandidateExample(example=example, raw_response=raw,
                            parse_diagnostics=tuple(diagnostics))


@dataclass(frozen=True)
class GateResult:
    accepted: bool
    kl_value: float
    threshold: float


def kl_gate(candidate_history_answers: list[float], prior: LabelPrior,
            threshold: float) -> GateResult:
    """Accept when the synthetic answer distribution stays near the prior.

    Both distributions are add-one smoothed over the shared buckets, so the
    divergence is always finite and zero exactly when they coincide.
    """
    if not candidate_history_answers:
        raise ValueError("kl_gate needs at least one answer")
    q = smoothed_distribution(candidate_history_answers)
    kl = sum(qi * math.log(qi / pi) for qi, pi in zip(q, prior.probabilities))
    kl = max(kl, 0.0)  # guard against -0.0 from rounding
    return GateResult(accepted=kl <= threshold, kl_value=kl, threshold=threshold)


def _operation_phrase(question: str, table_count: int) -> str:
    ql = question.lower()
    change_words = ("increase", "decrease", "change", "difference", "growth")
    if "combined" in ql and any(w in ql for w in change_words):
        op = "combined difference"
    elif "ratio" in ql:
        op = "ratio"
    elif "sum" in ql or "total" in ql:
        op = "sum"
    elif any(w in ql for w in change_words):
        op = "difference"
    else:
        op = "look-up"
    if table_count == 2:
        return f"two-table {op}"
    if table_count > 2:
        return f"{table_count}-table {op}"
    return op


_SUMMARY_INSTRUCTION = (
    "Summarize the financial QA sample below in one sentence: name the topic, "
    "the kind of computation the question needs, and the rough magnitude of "
    "the answer. Respond with the sentence only."
)


def summarize_previous(example: Example, *, mode: str = "local",
                       provider: Provider | None = None) -> str:
    """Bounded one-line cue distilled from an accepted synthetic sample."""
    if example.origin != "synthetic":
        raise ValueError("only synthetic examples are summarized")
    if mode == "llm":
        if provider is None:
            raise ValueError("llm summary mode needs a provider")
        response = provider.complete(
            build_request("analyzer", _SUMMARY_INSTRUCTION, render_sample(example)))
        return " ".join(response.text.split())[:240]
    quoted = _FIRST_QUOTED.search(example.question)
    topic = f"'{quoted.group(1).strip()}'" if quoted else " ".join(example.question.split()[:6])
    op = _operation_phrase(example.question, len(extract_tables(example.passage)))
    bucket = bucket_label(bucket_index(example.gold_answer))
    return f"asks about {topic}; {op}; answer in {bucket}"


def next_difficulty(state: GeneratorState, last_outcome: str) -> int:
    """Advance one tier on acceptance, retry the same tier on rejection."""
    if last_outcome == "accepted":
        return min(state.current_difficulty + 1, state.c_max)
    if last_outcome == "rejected":
        return state.current_difficulty
    raise ValueError(f"unknown outcome {last_outcome!r}")


def _duplicate_reason(example: Example, history: list[HistoryEntry]) -> str | None:
    for entry in history:
        if (entry.example.passage == example.passage
                and entry.example.question == example.question):
            return f"byte-identical to earlier sample {entry.example.id}"
    return None


def generate_accepted(
    state: GeneratorState,
    provider: Provider,
    verifier_handle: VerifierHandle,
    max_regenerations: int,
    *,
    summary_mode: str = "local",
    summary_provider: Provider | None = None,
    emit: EmitFn | None = None,
) -> tuple[Example, GeneratorState]:
    """Loop build -> complete -> parse -> gate -> verify until acceptance.

    Raises ``RegenerationExhausted`` with every rejection reason once the
    attempt cap is hit. On acceptance the state's history and difficulty
    are advanced in place and the state is also returned.
    """
    if max_regenerations < 1:
        raise ValueError("max_regenerations must be >= 1")

    def note(kind: str, payload: dict) -> None:
        if emit is not None:
            emit(kind, payload)

    reasons: list[str] = []
    for attempt in range(1, max_regenerations + 1):
        request = build_generation_prompt(state)
        response = provider.complete(request)

        rejected: str | None = None
        candidate: CandidateExample | None = None
        try:
            candidate = parse_candidate(response.text, state.current_difficulty)
        except (ParseError, AnswerNotNumeric) as exc:
            rejected = f"unparseable candidate: {exc}"
        if candidate is not None and rejected is None:
            rejected = _duplicate_reason(candidate.example, state.history)
        note("generated", {
            "attempt": attempt,
            "difficulty": state.current_difficulty,
            "raw": response.text,
            "rejected": rejected,
        })
        if rejected is not None or candidate is None:
            reasons.append(rejected or "unparseable candidate")
            state.pending_feedback = [rejected or "unparseable candidate"]
            continue

        answers = [h.example.gold_answer for h in state.history]
        answers.append(candidate.example.gold_answer)
        gate = kl_gate(answers, state.prior, state.kl_threshold)
        note("kl_gate", {
            "attempt": attempt,
            "kl_value": gate.kl_value,
            "threshold": gate.threshold,
            "accepted": gate.accepted,
            "n_answers": len(answers),
        })
        if not gate.accepted:
            reason = (f"answer distribution drifted from the prior "
                      f"(KL {gate.kl_value:.4f} > {gate.threshold:g})")
            reasons.append(reason)
            state.pending_feedback = [reason]
            continue

        result = verifier_handle(candidate)
        if not result.accepted:
            reason = "; ".join(result.rejection_reasons()) or "verifier consensus rejected"
            reasons.append(reason)
            state.pending_feedback = [reason]
            continue

        summary = summarize_previous(candidate.example, mode=summary_mode,
                                     provider=summary_provider or provider)
        state.history.append(HistoryEntry(
            difficulty=state.current_difficulty,
            summary=summary,
            example=candidate.example,
        ))
        state.current_difficulty = next_difficulty(state, "accepted")
        state.pending_feedback = []
        return candidate.example, state

    raise RegenerationExhausted(reasons)
