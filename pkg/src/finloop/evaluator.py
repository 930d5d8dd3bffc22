"""Run a prompt against examples and score the numeric answers.

The solver backend gets the prompt as the system message and the passage
plus question (separated by a blank line) as the user message. The final
numeric token of the response is taken as the answer; a prediction is
correct when ``|pred - gold| <= max(abs_tol, rel_tol * |gold|)``.
"""

from __future__ import annotations

import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, MutableMapping

from .corpus import Example, normalize_number
from .errors import EmptySet
from .provider import Provider, build_request

if TYPE_CHECKING:
    from .optimizer import Prompt

__all__ = [
    "Prediction", "SubsetScore", "EvalReport", "normalize_number",
    "extract_final_number", "compare", "solve", "accuracy",
    "format_report", "report_to_dict",
]

DEFAULT_REL_TOL = 0.01
DEFAULT_ABS_TOL = 1e-6

# Canonical column order for reports; unseen tags are appended alphabetically.
_SUBSET_ORDER = ("SimpShort", "CompShort", "SimpLong", "CompLong", "synthetic", "real")

_NUMBER_TOKEN = re.compile(
    r"\(\s*[-+]?[$€£¥]?\s*(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?\s*%?\s*\)"
    r"|[-+]?[$€£¥]?\s?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?%?"
)


def extract_final_number(text: str) -> float | None:
    """The last numeric token of a response, or None when there is none."""
    result = None
    for match in _NUMBER_TOKEN.finditer(text):
        value = normalize_number(match.group(0))
        if value is not None:
            result = value
    return result


def compare(pred: float, gold: float, rel_tol: float = DEFAULT_REL_TOL,
            abs_tol: float = DEFAULT_ABS_TOL) -> bool:
    """Numeric answer equality under a combined relative/absolute tolerance."""
    if rel_tol < 0 or abs_tol < 0:
        raise ValueError("tolerances must be >= 0")
    return abs(pred - gold) <= max(abs_tol, rel_tol * abs(gold))


@dataclass(frozen=True)
class Prediction:
    example_id: str
    raw_output: str
    parsed_answer: float | None
    correct: bool
    latency_ms: int = 0

    def __post_init__(self) -> None:
        if self.correct and self.parsed_answer is None:
            raise ValueError("a correct prediction must carry a parsed answer")
        if self.latency_ms < 0:
            raise ValueError("latency must be non-negative")


@dataclass(frozen=True)
class SubsetScore:
    n: int
    accuracy: float


@dataclass(frozen=True)
class EvalReport:
    prompt_version: str
    per_subset: dict[str, SubsetScore]
    overall: float
    predictions: tuple[Prediction, ...]


def _subset_tag(example: Example) -> str:
    return example.subset or example.origin


def solve(prompt: Prompt, example: Example, provider: Provider, *,
          rel_tol: float = DEFAULT_REL_TOL, abs_tol: float = DEFAULT_ABS_TOL) -> Prediction:
    """Ask the solver backend one question and judge the answer."""
    if not prompt.text.strip():
        raise ValueError("prompt text must be non-empty")
    request = build_request("solver", prompt.text,
                            f"{example.passage}\n\n{example.question}")
    started = time.monotonic()
    response = provider.complete(request)
    latency_ms = int((time.monotonic() - started) * 1000)
    parsed = extract_final_number(response.text)
    correct = parsed is not None and compare(parsed, example.gold_answer, rel_tol, abs_tol)
    return Prediction(example_id=example.id, raw_output=response.text,
                      parsed_answer=parsed, correct=correct, latency_ms=latency_ms)


def accuracy(
    prompt: Prompt,
    examples: list[Example],
    provider: Provider,
    *,
    rel_tol: float = DEFAULT_REL_TOL,
    abs_tol: float = DEFAULT_ABS_TOL,
    concurrency: int = 4,
    cache: MutableMapping[tuple[int, str], Prediction] | None = None,
) -> EvalReport:
    """Evaluate all examples and aggregate per subset and overall.

    Up to ``concurrency`` solver calls run in parallel; the report keeps
    predictions in input order regardless. ``cache`` maps (prompt version,
    example id) to a previous prediction and is updated in place.
    """
    if not examples:
        raise EmptySet("accuracy needs at least one example")

    def cache_key(example: Example) -> tuple[int, str]:
        return (prompt.version, example.id)

    missing = [ex for ex in examples
               if cache is None or cache_key(ex) not in cache]
    if missing:
        def run_one(example: Example) -> Prediction:
            return solve(prompt, example, provider, rel_tol=rel_tol, abs_tol=abs_tol)

        if concurrency > 1 and len(missing) > 1:
            with ThreadPoolExecutor(max_workers=concurrency) as pool:
                fresh = list(pool.map(run_one, missing))
        else:
            fresh = [run_one(ex) for ex in missing]
        if cache is not None:
            for example, prediction in zip(missing, fresh):
                cache[cache_key(example)] = prediction
        fresh_by_id = {p.example_id: p for p in fresh}
    else:
        fresh_by_id = {}

    predictions = []
    for example in examples:
        if cache is not None and cache_key(example) in cache:
            predictions.append(cache[cache_key(example)])
        else:
            predictions.append(fresh_by_id[example.id])

    per_subset: dict[str, SubsetScore] = {}
    for tag in sorted({_subset_tag(ex) for ex in examples}):
        pairs = [(ex, p) for ex, p in zip(examples, predictions) if _subset_tag(ex) == tag]
        correct = sum(1 for _, p in pairs if p.correct)
        per_subset[tag] = SubsetScore(n=len(pairs), accuracy=correct / len(pairs))
    overall = sum(1 for p in predictions if p.correct) / len(predictions)
    return EvalReport(prompt_version=f"v{prompt.version}", per_subset=per_subset,
                      overall=overall, predictions=tuple(predictions))


def _column_order(report: EvalReport) -> list[str]:
    known = [t for t in _SUBSET_ORDER if t in report.per_subset]
    extra = sorted(t for t in report.per_subset if t not in _SUBSET_ORDER)
    return known + extra


def format_report(report: EvalReport) -> str:
    """Aligned one-row accuracy table: per-subset columns plus Avg. Acc."""
    tags = _column_order(report)
    headers = ["Prompt"] + tags + ["Avg. Acc"]
    values = [report.prompt_version]
    values += [f"{report.per_subset[t].accuracy * 100:.2f}" for t in tags]
    values += [f"{report.overall * 100:.2f}"]
    counts = [""] + [f"(n={report.per_subset[t].n})" for t in tags] + [
        f"(n={len(report.predictions)})"]
    widths = [max(len(h), len(v), len(c)) for h, v, c in zip(headers, values, counts)]
    lines = []
    for row in (headers, values, counts):
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)


def report_to_dict(report: EvalReport) -> dict:
    return {
        "prompt_version": report.prompt_version,
        "overall": report.overall,
        "per_subset": {
            tag: {"n": score.n, "accuracy": score.accuracy}
            for tag, score in report.per_subset.items()
        },
        "predictions": [
            {
                "example_id": p.example_id,
                "parsed_answer": p.parsed_answer,
                "correct": p.correct,
                "latency_ms": p.latency_ms,
                "raw_output": p.raw_output,
            }
            for p in report.predictions
        ],
    }


def report_to_json(report: EvalReport) -> str:
    return json.dumps(report_to_dict(report), ensure_ascii=False, indent=2)
