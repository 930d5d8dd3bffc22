"""Diagnose-and-repair prompt refinement over accumulating synthetic data.

The loop alternates two phases until the example budget or the refinement
budget runs out: grow the synthetic pool by one verified example, then
repair the current prompt against the pool. Repair collects the failing
slice, asks the recommender for a textual patch, has the reviser apply it,
and only accepts the revision after it clears the slice (local
confirmation) without breaking anything previously solved (global
confirmation). A slice that stays broken after ``inner_cap`` revisions is
abandoned: the best revision tried so far is kept as the working prompt
and the run moves on (recorded in the ledger as ``inner_budget_exhausted``
rather than raising ``InnerBudgetExhausted``, preserving liveness). The
final prompt is the argmax over the prompt chain re-scored on the final
pool, ties going to the lowest version.

Everything the loop does is event-sourced: the ledger is the only state
mutator, ``apply_event`` is the only transition function, and replaying
any ledger prefix reconstructs the exact run state at that boundary. That
is what makes crash/resume byte-deterministic under the scripted mock.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Callable

from .corpus import Example, LabelPrior, example_from_record, example_to_record
from .errors import (
    AnswerNotNumeric,
    EmptyRevision,
    EmptySet,
    LedgerError,
    LengthExceeded,
    ParseError,
    RegenerationExhausted,
)
from .evaluator import EvalReport, Prediction, accuracy
from .generator import (
    CandidateExample,
    GeneratorState,
    HistoryEntry,
    build_generation_prompt,
    kl_gate,
    parse_candidate,
    summarize_previous,
)
from .ledger import LedgerEvent, LedgerWriter
from .provider import Provider, build_request
from .verifier import (
    VOTER_IDS,
    Verdict,
    VerifierConfig,
    combine_verdicts,
    vote_numerical,
    vote_robustness,
    vote_structural,
)

logger = logging.getLogger(__name__)

SEED_VERSION = 0


@dataclass
class Prompt:
    """Versioned prompt text with lineage and per-dataset scores."""

    version: int
    text: str
    parent_version: int | None = None
    created_by: str = "seed"  # "seed" | "revision"
    scores: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.created_by not in ("seed", "revision"):
            raise ValueError(f"unknown creator {self.created_by!r}")
        if self.created_by == "revision" and self.parent_version is None:
            raise ValueError("revision prompts must have a parent")
        if not self.text.strip():
            raise ValueError("prompt text must be non-empty")


@dataclass
class ErrorSlice:
    """The examples the current prompt gets wrong at iteration ``t``."""

    iteration: int
    failing: list[tuple[Example, Prediction]]

    def __post_init__(self) -> None:
        if any(pred.correct for _, pred in self.failing):
            raise ValueError("an error slice may only contain failing predictions")

    @property
    def empty(self) -> bool:
        return not self.failing


@dataclass(frozen=True)
class Patch:
    analysis: str
    recommendations: tuple[str, ...]
    source_iteration: int

    def __post_init__(self) -> None:
        if not self.recommendations:
            raise ValueError("a patch needs at least one recommendation")


@dataclass(frozen=True)
class Budgets:
    max_examples: int       # target synthetic pool size
    max_refinements: int    # cap on accepted revisions
    inner_cap: int          # revise attempts per error slice
    max_regenerations: int  # generation attempts per example


# ---------------------------------------------------------------------------
# Standalone operations (the runner composes these)

_RECOMMENDER_INSTRUCTIONS = (
    "You are reviewing the system prompt of a financial question-answering "
    "assistant. The prompt below failed on the listed examples. Diagnose why "
    "the prompt let the model go wrong, then respond with a short analysis "
    "paragraph followed by a numbered list of specific, actionable "
    "recommendations for changing the prompt."
)

_REVISER_INSTRUCTIONS = (
    "You are editing the system prompt of a financial question-answering "
    "assistant. Apply the recommendations below to the current prompt. Keep "
    "what already works, integrate the fixes, and return only the full "
    "revised prompt text with no commentary."
)

_NUMBERED_LINE = re.compile(r"^\s*\d+[.)]\s+(.*\S)\s*$", re.MULTILINE)


def _render_failing(failing: list[tuple[Example, Prediction]]) -> str:
    blocks = []
    for example, prediction in failing:
        blocks.append(
            f"### Example {example.id}\n"
            f"Passage:\n{example.passage}\n"
            f"Question: {example.question}\n"
            f"Expected answer: {example.gold_answer:g}\n"
            f"Model answered: {prediction.raw_output}"
        )
    return "\n\n".join(blocks)


def collect_errors(
    prompt: Prompt,
    examples: list[Example],
    provider: Provider,
    *,
    rel_tol: float,
    abs_tol: float,
    concurrency: int = 4,
    cache: dict | None = None,
) -> ErrorSlice:
    """Step 1: evaluate the pool and keep what the prompt gets wrong."""
    if not examples:
        raise EmptySet("cannot collect errors over an empty pool")
    report = accuracy(prompt, examples, provider, rel_tol=rel_tol, abs_tol=abs_tol,
                      concurrency=concurrency, cache=cache)
    failing = [(ex, pred) for ex, pred in zip(examples, report.predictions)
               if not pred.correct]
    return ErrorSlice(iteration=len(examples), failing=failing)


def recommend(prompt: Prompt, slice_: ErrorSlice, provider: Provider) -> Patch:
    """Step 2: turn the error slice into an analysis plus recommendations."""
    if slice_.empty:
        raise ValueError("recommend needs a non-empty error slice")
    user = (
        f"Current prompt:\n---\n{prompt.text}\n---\n\n"
        f"Failing examples:\n\n{_render_failing(slice_.failing)}"
    )
    response = provider.complete(build_request("recommender", _RECOMMENDER_INSTRUCTIONS, user))
    recommendations = tuple(m.group(1) for m in _NUMBERED_LINE.finditer(response.text))
    if recommendations:
        analysis = response.text[:_NUMBERED_LINE.search(response.text).start()].strip()
    else:
        # Degraded mode: keep the raw text as the single recommendation.
        logger.warning("recommender response had no numbered list; using raw text")
        analysis = ""
        recommendations = (response.text,)
    return Patch(analysis=analysis, recommendations=recommendations,
                 source_iteration=slice_.iteration)


def _strip_fence(text: str) -> str:
    m = re.fullmatch(r"```[a-zA-Z]*\n(.*?)\n?```", text.strip(), re.DOTALL)
    return m.group(1) if m else text


def revise(patch: Patch, prompt: Prompt, slice_: ErrorSlice, provider: Provider,
           *, length_cap: int, next_version: int) -> Prompt:
    """Step 3: have the reviser apply the patch and mint a new version."""
    recommendations = "\n".join(f"{i}. {r}" for i, r in enumerate(patch.recommendations, 1))
    user = (
        f"Analysis of the failures:\n{patch.analysis or '(none)'}\n\n"
        f"Recommendations:\n{recommendations}\n\n"
        f"Current prompt:\n---\n{prompt.text}\n---\n\n"
        f"Failing examples:\n\n{_render_failing(slice_.failing)}"
    )
    response = provider.complete(build_request("reviser", _REVISER_INSTRUCTIONS, user))
    text = _strip_fence(response.text).strip()
    if not text:
        raise EmptyRevision("reviser returned an empty prompt")
    if len(text) > length_cap:
        raise LengthExceeded(f"revised prompt is {len(text)} chars, cap is {length_cap}")
    return Prompt(version=next_version, text=text, parent_version=prompt.version,
                  created_by="revision")


def confirm_local(candidate: Prompt, slice_: ErrorSlice, provider: Provider, *,
                  rel_tol: float, abs_tol: float, concurrency: int = 4,
                  cache: dict | None = None) -> tuple[bool, ErrorSlice]:
    """Re-test on the error slice alone; passed means the slice is clear."""
    examples = [ex for ex, _ in slice_.failing]
    report = accuracy(candidate, examples, provider, rel_tol=rel_tol, abs_tol=abs_tol,
                      concurrency=concurrency, cache=cache)
    still = [(ex, pred) for ex, pred in zip(examples, report.predictions)
             if not pred.correct]
    return not still, ErrorSlice(iteration=slice_.iteration, failing=still)


def confirm_global(candidate: Prompt, examples: list[Example], provider: Provider, *,
                   rel_tol: float, abs_tol: float, concurrency: int = 4,
                   cache: dict | None = None) -> tuple[bool, ErrorSlice]:
    """Re-test on everything accumulated so far; failures become a fresh slice."""
    slice_ = collect_errors(candidate, examples, provider, rel_tol=rel_tol,
                            abs_tol=abs_tol, concurrency=concurrency, cache=cache)
    return slice_.empty, slice_


def select_final(all_prompts: list[Prompt], examples: list[Example],
                 provider: Provider, *, rel_tol: float, abs_tol: float,
                 concurrency: int = 4, cache: dict | None = None) -> Prompt:
    """Re-score every version on the final pool; argmax, ties to the lowest."""
    if not all_prompts:
        raise ValueError("select_final needs at least one prompt")
    ordered = sorted(all_prompts, key=lambda p: p.version)
    if not examples:
        return ordered[0]
    best = None
    best_score = -1.0
    for prompt in ordered:
        report = accuracy(prompt, examples, provider, rel_tol=rel_tol, abs_tol=abs_tol,
                          concurrency=concurrency, cache=cache)
        prompt.scores["final"] = report.overall
        if report.overall > best_score:
            best, best_score = prompt, report.overall
    return best


# ---------------------------------------------------------------------------
# Run state and the event fold


@dataclass
class GenAttempt:
    """Bookkeeping for the generation attempt currently in flight."""

    raw: str
    example: Example | None
    kl_ok: bool = False
    verdicts: dict[str, dict] = field(default_factory=dict)
    consensus_ok: bool = False


@dataclass
class SliceEntry:
    example_id: str
    raw_output: str
    parsed_answer: float | None

    def to_payload(self) -> dict:
        return {"id": self.example_id, "raw": self.raw_output,
                "parsed": self.parsed_answer}

    @classmethod
    def from_payload(cls, payload: dict) -> SliceEntry:
        return cls(example_id=payload["id"], raw_output=payload["raw"],
                   parsed_answer=payload["parsed"])


@dataclass
class RunState:
    """Everything the loop knows, reconstructable from the ledger alone."""

    # pinned at run start
    budgets: Budgets
    c_max: int
    regime: str
    rng_seed: int
    kl_threshold: float
    rel_tol: float
    abs_tol: float
    prompt_length_cap: int
    summary_mode: str
    verifier_perturbations: int
    verifier_reword: str
    verifier_allow_llm: bool
    exemplars: tuple[Example, Example]
    prior: LabelPrior
    # prompt registry
    prompts: dict[int, Prompt] = field(default_factory=dict)
    current_version: int = SEED_VERSION
    next_version: int = SEED_VERSION + 1
    version_chain: list[int] = field(default_factory=list)
    # synthetic pool and curriculum
    t: int = 0
    examples: list[Example] = field(default_factory=list)
    history: list[HistoryEntry] = field(default_factory=list)
    difficulty: int = 1
    # generation in flight
    gen_attempts: int = 0
    gen_feedback: list[str] = field(default_factory=list)
    gen_reasons: list[str] = field(default_factory=list)
    gen_candidate: GenAttempt | None = None
    # repair in flight
    stage: str = "generate"
    slice_entries: list[SliceEntry] = field(default_factory=list)
    eval_predictions: list[dict] | None = None
    last_patch: Patch | None = None
    pending_candidate: int | None = None
    session_scores: list[tuple[int, float]] = field(default_factory=list)
    inner_attempts: int = 0
    refinements_accepted: int = 0
    # selection
    final_scores: dict[int, float] = field(default_factory=dict)
    final_version: int | None = None
    finished: bool = False

    def current_prompt(self) -> Prompt:
        return self.prompts[self.current_version]

    def example_by_id(self, example_id: str) -> Example:
        for example in self.examples:
            if example.id == example_id:
                return example
        raise LedgerError(f"ledger references unknown example {example_id!r}")

    def verifier_config(self) -> VerifierConfig:
        return VerifierConfig(
            rel_tol=self.rel_tol,
            abs_tol=self.abs_tol,
            rng_seed=self.rng_seed,
            perturbation_count=self.verifier_perturbations,
            allow_llm=self.verifier_allow_llm,
            reword=self.verifier_reword,
        )

    def generator_view(self) -> GeneratorState:
        return GeneratorState(
            exemplars=self.exemplars,
            prior=self.prior,
            current_difficulty=self.difficulty,
            c_max=self.c_max,
            regime=self.regime,
            kl_threshold=self.kl_threshold,
            history=self.history,
            pending_feedback=self.gen_feedback,
        )


def run_started_payload(
    *,
    budgets: Budgets,
    c_max: int,
    regime: str,
    rng_seed: int,
    kl_threshold: float,
    rel_tol: float,
    abs_tol: float,
    prompt_length_cap: int,
    summary_mode: str,
    verifier_perturbations: int,
    verifier_reword: str,
    verifier_allow_llm: bool,
    seed_prompt_text: str,
    exemplars: tuple[Example, Example],
    prior: LabelPrior,
) -> dict:
    return {
        "params": {
            "max_examples": budgets.max_examples,
            "max_refinements": budgets.max_refinements,
            "inner_cap": budgets.inner_cap,
            "max_regenerations": budgets.max_regenerations,
            "c_max": c_max,
            "regime": regime,
            "rng_seed": rng_seed,
            "kl_threshold": kl_threshold,
            "rel_tol": rel_tol,
            "abs_tol": abs_tol,
            "prompt_length_cap": prompt_length_cap,
            "summary_mode": summary_mode,
            "verifier_perturbations": verifier_perturbations,
            "verifier_reword": verifier_reword,
            "verifier_allow_llm": verifier_allow_llm,
        },
        "seed_prompt": seed_prompt_text,
        "exemplars": [example_to_record(ex) for ex in exemplars],
        "prior": {
            "probabilities": list(prior.probabilities),
            "sample_count": prior.sample_count,
        },
    }


def _state_from_run_started(payload: dict) -> RunState:
    params = payload["params"]
    budgets = Budgets(
        max_examples=params["max_examples"],
        max_refinements=params["max_refinements"],
        inner_cap=params["inner_cap"],
        max_regenerations=params["max_regenerations"],
    )
    exemplars = tuple(example_from_record(r) for r in payload["exemplars"])
    prior = LabelPrior(probabilities=tuple(payload["prior"]["probabilities"]),
                       sample_count=payload["prior"]["sample_count"])
    state = RunState(
        budgets=budgets,
        c_max=params["c_max"],
        regime=params["regime"],
        rng_seed=params["rng_seed"],
        kl_threshold=params["kl_threshold"],
        rel_tol=params["rel_tol"],
        abs_tol=params["abs_tol"],
        prompt_length_cap=params["prompt_length_cap"],
        summary_mode=params["summary_mode"],
        verifier_perturbations=params["verifier_perturbations"],
        verifier_reword=params["verifier_reword"],
        verifier_allow_llm=params["verifier_allow_llm"],
        exemplars=exemplars,  # type: ignore[arg-type]
        prior=prior,
    )
    state.prompts[SEED_VERSION] = Prompt(version=SEED_VERSION, text=payload["seed_prompt"])
    state.version_chain.append(SEED_VERSION)
    state.stage = "generate" if budgets.max_examples > 0 else "select"
    return state


def _end_iteration(state: RunState) -> None:
    state.slice_entries = []
    state.eval_predictions = None
    state.last_patch = None
    state.pending_candidate = None
    state.session_scores = []
    state.inner_attempts = 0
    done = (state.t >= state.budgets.max_examples
            or state.refinements_accepted >= state.budgets.max_refinements)
    state.stage = "select" if done else "generate"


def _abandon_session(state: RunState) -> None:
    # Keep the best revision tried in this repair session (ties -> latest)
    # as the working prompt, then move on to the next example.
    _, (best_version, _) = max(enumerate(state.session_scores),
                               key=lambda item: (item[1][1], item[0]))
    state.current_version = best_version
    state.version_chain.append(best_version)
    logger.info("inner budget exhausted; keeping v%d as best effort", best_version)
    _end_iteration(state)


def _clear_gen_attempt(state: RunState, reason: str) -> None:
    state.gen_reasons.append(reason)
    state.gen_feedback = [reason]
    state.gen_candidate = None


def apply_event(state: RunState, kind: str, payload: dict) -> None:
    """The single state-transition function; folding the ledger replays a run."""
    if kind == "generated":
        state.gen_attempts = payload["attempt"]
        if payload.get("rejected"):
            _clear_gen_attempt(state, payload["rejected"])
        else:
            state.gen_candidate = GenAttempt(
                raw=payload["raw"],
                example=example_from_record(payload["example"]),
            )
    elif kind == "kl_gate":
        if payload["accepted"]:
            state.gen_candidate.kl_ok = True
        else:
            _clear_gen_attempt(state, (
                f"answer distribution drifted from the prior "
                f"(KL {payload['kl_value']:.4f} > {payload['threshold']:g})"
            ))
    elif kind == "verdict":
        state.gen_candidate.verdicts[payload["voter_id"]] = {
            "decision": payload["decision"],
            "reason": payload["reason"],
            "evidence": payload.get("evidence"),
        }
    elif kind == "consensus":
        if payload["decision"] == "accept":
            state.gen_candidate.consensus_ok = True
        else:
            _clear_gen_attempt(state, "; ".join(payload["reasons"]))
    elif kind == "example_accepted":
        example = example_from_record(payload["example"])
        state.examples.append(example)
        state.t += 1
        state.history.append(HistoryEntry(
            difficulty=payload["difficulty"],
            summary=payload["summary"],
            example=example,
        ))
        state.difficulty = min(payload["difficulty"] + 1, state.c_max)
        state.gen_attempts = 0
        state.gen_feedback = []
        state.gen_reasons = []
        state.gen_candidate = None
        state.stage = "need_eval"
    elif kind == "eval":
        version = payload["prompt_version"]
        state.prompts[version].scores[payload["tag"]] = payload["accuracy"]
        if payload["scope"] == "train":
            state.eval_predictions = payload["predictions"]
            state.stage = "need_slice"
        else:
            state.final_scores[version] = payload["accuracy"]
    elif kind == "error_slice":
        if payload["empty"]:
            _end_iteration(state)
        else:
            state.slice_entries = [SliceEntry.from_payload(e) for e in payload["failing"]]
            state.stage = "need_patch"
    elif kind == "patch":
        state.last_patch = Patch(
            analysis=payload["analysis"],
            recommendations=tuple(payload["recommendations"]),
            source_iteration=payload["iteration"],
        )
        state.stage = "need_revise"
    elif kind == "revision":
        version = payload["version"]
        state.prompts[version] = Prompt(
            version=version,
            text=payload["text"],
            parent_version=payload["parent"],
            created_by="revision",
        )
        state.next_version = version + 1
        state.pending_candidate = version
        state.inner_attempts += 1
        state.stage = "need_local"
    elif kind == "local_confirm":
        version = payload["version"]
        state.session_scores.append((version, payload["score"]))
        if payload["passed"]:
            state.stage = "need_global"
        else:
            state.current_version = version
            state.slice_entries = [SliceEntry.from_payload(e)
                                   for e in payload["still_failing"]]
            state.last_patch = None
            state.pending_candidate = None
            if state.inner_attempts >= state.budgets.inner_cap:
                _abandon_session(state)
            else:
                state.stage = "need_patch"
    elif kind == "global_confirm":
        version = payload["version"]
        if payload["passed"]:
            state.stage = "need_accept"
        else:
            state.current_version = version
            state.slice_entries = [SliceEntry.from_payload(e)
                                   for e in payload["regressions"]]
            state.last_patch = None
            state.pending_candidate = None
            if state.inner_attempts >= state.budgets.inner_cap:
                _abandon_session(state)
            else:
                state.stage = "need_patch"
    elif kind == "prompt_accepted":
        version = payload["version"]
        state.current_version = version
        state.prompts[version].scores[payload["tag"]] = payload["score"]
        state.refinements_accepted += 1
        state.version_chain.append(version)
        state.pending_candidate = None
        _end_iteration(state)
    elif kind == "final_selected":
        state.final_version = payload["version"]
        state.stage = "finishing"
    elif kind == "run_finished":
        state.finished = True
        state.stage = "done"
    else:
        raise LedgerError(f"cannot apply event kind {kind!r}")


def replay_events(events: list[LedgerEvent]) -> RunState:
    """Fold a ledger back into the run state at its last event."""
    if not events or events[0].kind != "run_started":
        raise LedgerError("ledger must start with a run_started event")
    state = _state_from_run_started(events[0].payload)
    for event in events[1:]:
        apply_event(state, event.kind, event.payload)
    return state


# ---------------------------------------------------------------------------
# The runner


def decide(state: RunState) -> tuple[str, int | None]:
    """Next action implied by the state; pure so resume lands in step."""
    if state.finished:
        return "done", None
    if state.stage == "generate":
        candidate = state.gen_candidate
        if candidate is None:
            if state.gen_attempts >= state.budgets.max_regenerations:
                return "regeneration_exhausted", None
            return "generate_candidate", None
        if not candidate.kl_ok:
            return "gate_candidate", None
        for voter in VOTER_IDS:
            if voter not in candidate.verdicts:
                return f"vote_{voter}", None
        if not candidate.consensus_ok:
            return "combine_consensus", None
        return "accept_example", None
    if state.stage == "need_eval":
        return "evaluate_training", None
    if state.stage == "need_slice":
        return "emit_slice", None
    if state.stage == "need_patch":
        return "recommend_patch", None
    if state.stage == "need_revise":
        return "revise_prompt", None
    if state.stage == "need_local":
        return "confirm_local", None
    if state.stage == "need_global":
        return "confirm_global", None
    if state.stage == "need_accept":
        return "accept_prompt", None
    if state.stage == "select":
        if state.examples:
            for version in state.version_chain:
                if version not in state.final_scores:
                    return "score_final", version
        return "select_final", None
    if state.stage == "finishing":
        return "finish", None
    raise LedgerError(f"no action for stage {state.stage!r}")


EmitHook = Callable[[LedgerEvent, RunState], None]


class Runner:
    """Drives the loop: decide from state, act with side effects, emit, fold."""

    def __init__(self, provider: Provider, ledger: LedgerWriter, *,
                 concurrency: int = 4, on_event: EmitHook | None = None):
        self.provider = provider
        self.ledger = ledger
        self.concurrency = concurrency
        self.on_event = on_event
        self.state: RunState | None = None
        self.events: list[LedgerEvent] = []
        self._cache: dict[tuple[int, str], Prediction] = {}

    # -- lifecycle

    def start(self, payload: dict) -> None:
        if self.state is not None:
            raise LedgerError("runner already started")
        self._emit("run_started", payload)

    def resume(self, events: list[LedgerEvent]) -> None:
        if self.state is not None:
            raise LedgerError("runner already started")
        self.state = replay_events(events)
        self.events = list(events)

    def run(self) -> Prompt:
        """Advance until the run finishes; returns the selected prompt."""
        if self.state is None:
            raise LedgerError("runner has no state; call start() or resume()")
        while True:
            action, arg = decide(self.state)
            if action == "done":
                return self.state.prompts[self.state.final_version]
            if action == "regeneration_exhausted":
                raise RegenerationExhausted(self.state.gen_reasons)
            getattr(self, f"_act_{action}")(*((arg,) if arg is not None else ()))

    def _emit(self, kind: str, payload: dict) -> None:
        event = self.ledger.append(kind, payload)
        if self.state is None:
            self.state = _state_from_run_started(payload)
        else:
            apply_event(self.state, kind, payload)
        self.events.append(event)
        if self.on_event is not None:
            self.on_event(event, self.state)

    # -- generation actions

    def _act_generate_candidate(self) -> None:
        state = self.state
        request = build_generation_prompt(state.generator_view())
        response = self.provider.complete(request)
        rejected = None
        record = None
        try:
            candidate = parse_candidate(response.text, state.difficulty)
            record = example_to_record(candidate.example)
        except (ParseError, AnswerNotNumeric) as exc:
            rejected = f"unparseable candidate: {exc}"
        if rejected is None:
            for entry in state.history:
                if (entry.example.passage == candidate.example.passage
                        and entry.example.question == candidate.example.question):
                    rejected = f"byte-identical to earlier sample {entry.example.id}"
                    record = None
                    break
        self._emit("generated", {
            "attempt": state.gen_attempts + 1,
            "difficulty": state.difficulty,
            "raw": response.text,
            "example": record,
            "rejected": rejected,
        })

    def _act_gate_candidate(self) -> None:
        state = self.state
        answers = [h.example.gold_answer for h in state.history]
        answers.append(state.gen_candidate.example.gold_answer)
        gate = kl_gate(answers, state.prior, state.kl_threshold)
        self._emit("kl_gate", {
            "attempt": state.gen_attempts,
            "kl_value": gate.kl_value,
            "threshold": gate.threshold,
            "accepted": gate.accepted,
            "n_answers": len(answers),
        })

    def _candidate(self) -> CandidateExample:
        attempt = self.state.gen_candidate
        return CandidateExample(example=attempt.example, raw_response=attempt.raw)

    def _vote_payload(self, verdict: Verdict) -> dict:
        return {
            "attempt": self.state.gen_attempts,
            "voter_id": verdict.voter_id,
            "decision": verdict.decision,
            "reason": verdict.reason,
            "evidence": verdict.evidence,
        }

    def _act_vote_structural(self) -> None:
        self._emit("verdict", self._vote_payload(vote_structural(self._candidate())))

    def _act_vote_numerical(self) -> None:
        verdict = vote_numerical(self._candidate(), self.provider,
                                 self.state.verifier_config())
        self._emit("verdict", self._vote_payload(verdict))

    def _act_vote_robustness(self) -> None:
        verdict = vote_robustness(self._candidate(), self.provider,
                                  self.state.verifier_config())
        self._emit("verdict", self._vote_payload(verdict))

    def _act_combine_consensus(self) -> None:
        state = self.state
        verdicts = [
            Verdict(voter_id=voter, decision=data["decision"], reason=data["reason"],
                    evidence=data.get("evidence"))
            for voter, data in state.gen_candidate.verdicts.items()
        ]
        result = combine_verdicts(verdicts)
        self._emit("consensus", {
            "attempt": state.gen_attempts,
            "decision": result.decision,
            "reasons": result.rejection_reasons(),
        })

    def _act_accept_example(self) -> None:
        state = self.state
        example = state.gen_candidate.example
        summary = summarize_previous(example, mode=state.summary_mode,
                                     provider=self.provider)
        self._emit("example_accepted", {
            "example": example_to_record(example),
            "summary": summary,
            "difficulty": state.difficulty,
        })

    # -- repair actions

    def _accuracy(self, prompt: Prompt, examples: list[Example]) -> EvalReport:
        return accuracy(prompt, examples, self.provider,
                        rel_tol=self.state.rel_tol, abs_tol=self.state.abs_tol,
                        concurrency=self.concurrency, cache=self._cache)

    def _act_evaluate_training(self) -> None:
        state = self.state
        prompt = state.current_prompt()
        report = self._accuracy(prompt, state.examples)
        predictions = []
        for example, pred in zip(state.examples, report.predictions):
            entry = {"id": example.id, "parsed": pred.parsed_answer,
                     "correct": pred.correct}
            if not pred.correct:
                entry["raw"] = pred.raw_output
            predictions.append(entry)
        self._emit("eval", {
            "prompt_version": prompt.version,
            "scope": "train",
            "tag": f"D_{state.t}",
            "n": len(state.examples),
            "accuracy": report.overall,
            "predictions": predictions,
        })

    def _act_emit_slice(self) -> None:
        state = self.state
        failing = [
            {"id": p["id"], "raw": p.get("raw", ""), "parsed": p["parsed"]}
            for p in state.eval_predictions if not p["correct"]
        ]
        self._emit("error_slice", {
            "iteration": state.t,
            "failing": failing,
            "empty": not failing,
        })

    def _slice(self) -> ErrorSlice:
        state = self.state
        failing = []
        for entry in state.slice_entries:
            example = state.example_by_id(entry.example_id)
            failing.append((example, Prediction(
                example_id=entry.example_id,
                raw_output=entry.raw_output,
                parsed_answer=entry.parsed_answer,
                correct=False,
            )))
        return ErrorSlice(iteration=state.t, failing=failing)

    def _act_recommend_patch(self) -> None:
        state = self.state
        patch = recommend(state.current_prompt(), self._slice(), self.provider)
        self._emit("patch", {
            "analysis": patch.analysis,
            "recommendations": list(patch.recommendations),
            "iteration": patch.source_iteration,
            "degraded": not patch.analysis and len(patch.recommendations) == 1,
        })

    def _act_revise_prompt(self) -> None:
        state = self.state
        current = state.current_prompt()
        candidate = revise(state.last_patch, current, self._slice(), self.provider,
                           length_cap=state.prompt_length_cap,
                           next_version=state.next_version)
        noop = candidate.text == current.text
        if noop:
            logger.warning("no-op revision: v%d matches its parent v%d",
                           candidate.version, current.version)
        self._emit("revision", {
            "version": candidate.version,
            "parent": candidate.parent_version,
            "text": candidate.text,
            "noop": noop,
        })

    def _act_confirm_local(self) -> None:
        state = self.state
        candidate = state.prompts[state.pending_candidate]
        slice_ = self._slice()
        passed, remaining = confirm_local(candidate, slice_, self.provider,
                                          rel_tol=state.rel_tol, abs_tol=state.abs_tol,
                                          concurrency=self.concurrency, cache=self._cache)
        fixed = len(slice_.failing) - len(remaining.failing)
        still = [{"id": ex.id, "raw": pred.raw_output, "parsed": pred.parsed_answer}
                 for ex, pred in remaining.failing]
        self._emit("local_confirm", {
            "version": candidate.version,
            "passed": passed,
            "score": fixed / len(slice_.failing),
            "still_failing": still,
            "abandoned": (not passed
                          and state.inner_attempts >= state.budgets.inner_cap
                          and "inner_budget_exhausted") or None,
        })

    def _act_confirm_global(self) -> None:
        state = self.state
        candidate = state.prompts[state.pending_candidate]
        passed, regressions = confirm_global(candidate, state.examples, self.provider,
                                             rel_tol=state.rel_tol, abs_tol=state.abs_tol,
                                             concurrency=self.concurrency,
                                             cache=self._cache)
        entries = [{"id": ex.id, "raw": pred.raw_output, "parsed": pred.parsed_answer}
                   for ex, pred in regressions.failing]
        self._emit("global_confirm", {
            "version": candidate.version,
            "passed": passed,
            "accuracy": 1.0 - len(entries) / len(state.examples),
            "regressions": entries,
            "abandoned": (not passed
                          and state.inner_attempts >= state.budgets.inner_cap
                          and "inner_budget_exhausted") or None,
        })

    def _act_accept_prompt(self) -> None:
        state = self.state
        self._emit("prompt_accepted", {
            "version": state.pending_candidate,
            "t": state.t,
            "tag": f"D_{state.t}",
            "score": 1.0,
        })

    # -- selection actions

    def _act_score_final(self, version: int) -> None:
        state = self.state
        report = self._accuracy(state.prompts[version], state.examples)
        self._emit("eval", {
            "prompt_version": version,
            "scope": "final",
            "tag": "final",
            "n": len(state.examples),
            "accuracy": report.overall,
        })

    def _act_select_final(self) -> None:
        state = self.state
        best = state.version_chain[0]
        best_score = state.final_scores.get(best, -1.0)
        for version in sorted(set(state.version_chain)):
            score = state.final_scores.get(version, -1.0)
            if score > best_score:
                best, best_score = version, score
        self._emit("final_selected", {
            "version": best,
            "scores": {str(v): s for v, s in sorted(state.final_scores.items())},
        })

    def _act_finish(self) -> None:
        self._emit("run_finished", {"final_version": self.state.final_version})


def run_loop(
    *,
    provider: Provider,
    ledger: LedgerWriter,
    start_payload: dict,
    concurrency: int = 4,
    on_event: EmitHook | None = None,
) -> tuple[Prompt, list[LedgerEvent]]:
    """Execute a full run from scratch; returns the final prompt and events."""
    runner = Runner(provider, ledger, concurrency=concurrency, on_event=on_event)
    runner.start(start_payload)
    final = runner.run()
    return final, runner.events
