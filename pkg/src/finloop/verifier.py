"""Three independent voters gating every synthetic candidate.

The voters check structural validity, numerical consistency, and
robustness; a candidate enters the synthetic pool only on unanimous
acceptance. Numerical checking tries a deterministic arithmetic oracle
first and only falls back to a backend call (temperature 0) for question
shapes the oracle cannot classify. Robustness re-checks the answer after
answer-invariant perturbations of the passage: rotating table rows the
question does not reference, swapping table order, and optionally
rewording narrative text. With the default configuration the whole
pipeline runs without any backend call.

The oracle classifies questions against a small grammar (look-up, sum,
difference, ratio, combined sum-of-differences, ordinal row look-up) by
matching quoted or verbatim labels and column names against the extracted
tables. It never guesses: any ambiguity or failed resolution yields None.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, replace
from importlib import resources
from typing import TYPE_CHECKING

from .corpus import Table, extract_tables, format_number, render_table, scan_tables
from .errors import ContractError
from .evaluator import DEFAULT_ABS_TOL, DEFAULT_REL_TOL, compare, extract_final_number
from .provider import Provider, build_request

if TYPE_CHECKING:
    from .corpus import Example
    from .generator import CandidateExample

logger = logging.getLogger(__name__)

VOTER_IDS = ("structural", "numerical", "robustness")


@dataclass(frozen=True)
class Verdict:
    voter_id: str
    decision: str  # "accept" | "reject"
    reason: str
    evidence: str | None = None

    def __post_init__(self) -> None:
        if self.voter_id not in VOTER_IDS:
            raise ContractError(f"unknown voter {self.voter_id!r}")
        if self.decision not in ("accept", "reject"):
            raise ContractError(f"unknown decision {self.decision!r}")
        if self.decision == "reject" and not self.reason.strip():
            raise ContractError("a rejection must carry a reason")

    @property
    def accepted(self) -> bool:
        return self.decision == "accept"


@dataclass(frozen=True)
class ConsensusResult:
    verdicts: tuple[Verdict, ...]
    decision: str

    @property
    def accepted(self) -> bool:
        return self.decision == "accept"

    def rejection_reasons(self) -> list[str]:
        return [f"{v.voter_id}: {v.reason}" for v in self.verdicts if not v.accepted]


def combine_verdicts(verdicts: list[Verdict] | tuple[Verdict, ...]) -> ConsensusResult:
    """Strict unanimous consensus: accept only when all three voters accept."""
    if len(verdicts) != len(VOTER_IDS):
        raise ContractError(f"expected {len(VOTER_IDS)} verdicts, got {len(verdicts)}")
    by_voter = {v.voter_id: v for v in verdicts}
    if set(by_voter) != set(VOTER_IDS):
        raise ContractError(f"need one verdict per voter, got {sorted(by_voter)}")
    ordered = tuple(by_voter[v] for v in VOTER_IDS)
    decision = "accept" if all(v.accepted for v in ordered) else "reject"
    return ConsensusResult(verdicts=ordered, decision=decision)


@dataclass(frozen=True)
class VerifierConfig:
    rel_tol: float = DEFAULT_REL_TOL
    abs_tol: float = DEFAULT_ABS_TOL
    rng_seed: int = 0
    perturbation_count: int = 2
    allow_llm: bool = False
    reword: str = "off"  # "off" | "synonyms" | "llm"


# ---------------------------------------------------------------------------
# Arithmetic oracle

_OP_KEYWORDS = ("sum", "total", "difference", "increase", "decrease", "change",
                "growth", "ratio", "combined", "divided", "plus", "minus", "average")

_QUOTES = "'`\"‘’“”"
_QUOTED = re.compile(r"[%s]([^%s]+)[%s]" % (_QUOTES, _QUOTES, _QUOTES))
_COL = r"[^\s,?.;:]+"

_COMBINED_CLAUSE = re.compile(
    r"[%s]([^%s]+)[%s][^%s]*?\bfrom\s+(%s)\s+to\s+(%s)" % (_QUOTES, _QUOTES, _QUOTES, _QUOTES, _COL, _COL),
    re.IGNORECASE,
)
_RANGE_CHANGE = re.compile(
    r"\b(increase|decrease|change|growth)\s+(?:in|of)\s+(.+?)\s+from\s+(%s)\s+to\s+(%s)" % (_COL, _COL),
    re.IGNORECASE,
)
_RATIO_CROSS = re.compile(
    r"\bratio\s+of\s+(.+?)\s+(?:in|for)\s+(%s)\s+to\s+(.+?)\s+(?:in|for)\s+(%s)" % (_COL, _COL),
    re.IGNORECASE,
)
_RATIO_SAME = re.compile(
    r"\bratio\s+of\s+(.+?)\s+to\s+(.+?)\s+(?:in|for)\s+(%s)" % _COL,
    re.IGNORECASE,
)
_DIFF_CROSS = re.compile(
    r"\bdifference\s+between\s+(.+?)\s+(?:in|for)\s+(%s)\s+and\s+(?:(.+?)\s+(?:in|for)\s+)?(%s)" % (_COL, _COL),
    re.IGNORECASE,
)
_DIFF_SAME = re.compile(
    r"\bdifference\s+between\s+(.+?)\s+and\s+(.+?)\s+(?:in|for)\s+(%s)" % _COL,
    re.IGNORECASE,
)
_SUM_ONE_LABEL = re.compile(
    r"\b(?:sum|total)\s+of\s+(.+?)\s+(?:in|for)\s+(?:the\s+years?\s+)?(%s)\s+and\s+(%s)" % (_COL, _COL),
    re.IGNORECASE,
)
_SUM_TWO_LABELS = re.compile(
    r"\b(?:sum|total)\s+of\s+(.+?)\s+and\s+(.+?)\s+(?:in|for)\s+(%s)" % _COL,
    re.IGNORECASE,
)
_LOOKUP = re.compile(
    r"\bwhat\s+(?:is|was|are|were)\s+(?:the\s+)?(.+?)\s+(?:in|for)\s+(%s)\s*\??$" % _COL,
    re.IGNORECASE,
)
_ORDINAL_WORDS = {"first": 0, "second": 1, "third": 2, "fourth": 3, "fifth": 4,
                  "sixth": 5, "seventh": 6, "eighth": 7, "ninth": 8, "tenth": 9}
_ORDINAL_ROW = re.compile(
    r"\b(first|second|third|fourth|fifth|sixth|seventh|eighth|ninth|tenth)\s+(?:data\s+)?row\b"
    r"|\brow\s+(\d{1,2})\b",
    re.IGNORECASE,
)


def _label_text(raw: str) -> str:
    """Pull the row label out of a captured question fragment."""
    quoted = _QUOTED.search(raw)
    if quoted:
        return quoted.group(1).strip()
    text = raw.strip()
    for article in ("the ", "The "):
        if text.startswith(article):
            text = text[len(article):]
    return text.strip()


def _clean_column(token: str) -> str:
    return token.strip().strip("'`\"" + "‘’“”")


def _cell_value(tables: list[Table], label_raw: str, column_raw: str) -> float | None:
    """The unique cell matching (row label, column name), or None."""
    label = _label_text(label_raw)
    column = _clean_column(column_raw)
    if not label or not column:
        return None
    hits: list[float | str] = []
    for table in tables:
        col_idx = table.column_index(column)
        if col_idx is None:
            continue
        row = table.find_row(label)
        if row is not None:
            hits.append(row.cells[col_idx])
    if len(hits) != 1 or not isinstance(hits[0], float):
        return None
    return hits[0]


def _columns_in_question(tables: list[Table], question: str) -> list[str]:
    found = []
    seen = set()
    for table in tables:
        for col in table.header[1:]:
            name = col.strip()
            if not name or name.lower() in seen:
                continue
            if re.search(r"(?<![\w])%s(?![\w])" % re.escape(name), question):
                found.append(name)
                seen.add(name.lower())
    return found


def oracle_answer(tables: list[Table], question: str) -> float | None:
    """Exact answer for mechanically checkable questions, else None."""
    if not tables:
        return None
    q = question.strip()
    ql = q.lower()

    if "combined" in ql:
        clauses = _COMBINED_CLAUSE.findall(q)
        if len(clauses) < 2:
            return None
        sign = -1.0 if "decrease" in ql else 1.0
        total = 0.0
        for label, col_from, col_to in clauses:
            v_from = _cell_value(tables, f"'{label}'", col_from)
            v_to = _cell_value(tables, f"'{label}'", col_to)
            if v_from is None or v_to is None:
                return None
            total += v_to - v_from
        return sign * total

    m = _RANGE_CHANGE.search(q)
    if m:
        kind, label, col_from, col_to = m.groups()
        v_from = _cell_value(tables, label, col_from)
        v_to = _cell_value(tables, label, col_to)
        if v_from is None or v_to is None:
            return None
        return v_from - v_to if kind.lower() == "decrease" else v_to - v_from

    m = _RATIO_CROSS.search(q)
    if m:
        l1, c1, l2, c2 = m.groups()
        num = _cell_value(tables, l1, c1)
        den = _cell_value(tables, l2, c2)
        if num is None or den is None or den == 0:
            return None
        return num / den

    m = _RATIO_SAME.search(q)
    if m:
        l1, l2, col = m.groups()
        num = _cell_value(tables, l1, col)
        den = _cell_value(tables, l2, col)
        if num is None or den is None or den == 0:
            return None
        return num / den

    m = _DIFF_CROSS.search(q)
    if m:
        l1, c1, l2, c2 = m.groups()
        a = _cell_value(tables, l1, c1)
        b = _cell_value(tables, l2 if l2 else l1, c2)
        if a is None or b is None:
            return None
        return a - b

    m = _DIFF_SAME.search(q)
    if m:
        l1, l2, col = m.groups()
        a = _cell_value(tables, l1, col)
        b = _cell_value(tables, l2, col)
        if a is None or b is None:
            return None
        return a - b

    m = _SUM_ONE_LABEL.search(q)
    if m:
        label, c1, c2 = m.groups()
        a = _cell_value(tables, label, c1)
        b = _cell_value(tables, label, c2)
        if a is None or b is None:
            return None
        return a + b

    m = _SUM_TWO_LABELS.search(q)
    if m:
        l1, l2, col = m.groups()
        a = _cell_value(tables, l1, col)
        b = _cell_value(tables, l2, col)
        if a is None or b is None:
            return None
        return a + b

    m = _ORDINAL_ROW.search(q)
    if m:
        if len(tables) != 1:
            return None
        index = _ORDINAL_WORDS[m.group(1).lower()] if m.group(1) else int(m.group(2)) - 1
        table = tables[0]
        columns = _columns_in_question(tables, q)
        if len(columns) != 1 or not 0 <= index < len(table.rows):
            return None
        col_idx = table.column_index(columns[0])
        cell = table.rows[index].cells[col_idx]
        return cell if isinstance(cell, float) else None

    m = _LOOKUP.search(q)
    if m:
        return _cell_value(tables, m.group(1), m.group(2))

    # Bare look-up phrasing: only when no arithmetic keyword is present and
    # exactly one (row, column) pair resolves.
    if not any(k in ql for k in _OP_KEYWORDS):
        columns = _columns_in_question(tables, q)
        if len(columns) == 1:
            rows = []
            for table in tables:
                col_idx = table.column_index(columns[0])
                if col_idx is None:
                    continue
                for row in table.rows:
                    if row.label.strip() and row.label.lower() in ql:
                        rows.append(row.cells[col_idx])
            if len(rows) == 1 and isinstance(rows[0], float):
                return rows[0]
    return None


# ---------------------------------------------------------------------------
# Perturbations


def _load_synonyms() -> dict[str, str]:
    text = resources.files("finloop.assets").joinpath("synonyms.json").read_text("utf-8")
    return json.loads(text)


def _splice(passage: str, replacements: list[tuple[tuple[int, int], str]]) -> str:
    out = passage
    for (start, end), text in sorted(replacements, key=lambda r: r[0][0], reverse=True):
        out = out[:start] + text + out[end:]
    return out


def _rotate_rows(passage: str, tables: list[Table], question: str,
                 rng: random.Random) -> str | None:
    ql = question.lower()
    replacements = []
    for table in tables:
        movable = [i for i, row in enumerate(table.rows)
                   if row.label.strip() and row.label.strip().lower() not in ql]
        if len(movable) < 2:
            continue
        shift = rng.randrange(1, len(movable))
        rotated = movable[shift:] + movable[:shift]
        new_rows = list(table.rows)
        for slot, src in zip(movable, rotated):
            new_rows[slot] = table.rows[src]
        replacements.append((table.source_span, render_table(table.header, new_rows)))
    if not replacements:
        return None
    return _splice(passage, replacements)


def _swap_tables(passage: str, tables: list[Table]) -> str | None:
    if len(tables) < 2:
        return None
    first, second = tables[0], tables[1]
    return _splice(passage, [
        (first.source_span, passage[second.source_span[0]:second.source_span[1]]),
        (second.source_span, passage[first.source_span[0]:first.source_span[1]]),
    ])


def _reword_synonyms(passage: str, tables: list[Table], synonyms: dict[str, str]) -> str | None:
    spans = [t.source_span for t in tables]

    def in_table(pos: int) -> bool:
        return any(start <= pos < end for start, end in spans)

    out = passage
    changed = False
    for word, substitute in synonyms.items():
        for m in reversed(list(re.finditer(r"\b%s\b" % re.escape(word), out, re.IGNORECASE))):
            if in_table(m.start()):
                continue
            out = out[:m.start()] + substitute + out[m.end():]
            changed = True
    return out if changed else None


def build_perturbations(example: Example, config: VerifierConfig,
                        provider: Provider | None = None) -> list[tuple[str, str]]:
    """Answer-invariant passage variants: (perturbation name, new passage)."""
    tables = extract_tables(example.passage)
    if not tables:
        return []
    rng = random.Random(f"{config.rng_seed}:perturb:{example.id}")
    kinds = ["rotate_rows", "swap_tables"]
    if config.reword in ("synonyms", "llm"):
        kinds.append("reword")
    synonyms = _load_synonyms() if config.reword == "synonyms" else {}
    out: list[tuple[str, str]] = []
    for k in range(config.perturbation_count):
        kind = kinds[k % len(kinds)]
        if kind == "rotate_rows":
            passage = _rotate_rows(example.passage, tables, example.question, rng)
        elif kind == "swap_tables":
            passage = _swap_tables(example.passage, tables)
        elif config.reword == "synonyms":
            passage = _reword_synonyms(example.passage, tables, synonyms)
        else:
            passage = _reword_llm(example, tables, provider)
        if passage is not None and passage != example.passage:
            out.append((kind, passage))
    return out


def _reword_llm(example: Example, tables: list[Table], provider: Provider | None) -> str | None:
    if provider is None:
        return None
    instruction = _voter_asset("voter_reword.txt")
    response = provider.complete(build_request("voter", instruction, example.passage))
    reworded = response.text.strip()
    if not reworded or len(extract_tables(reworded)) != len(tables):
        logger.warning("reword perturbation dropped: table structure changed")
        return None
    return reworded


def _voter_asset(name: str) -> str:
    return resources.files("finloop.assets").joinpath(name).read_text("utf-8").strip()


# ---------------------------------------------------------------------------
# Voters


def vote_structural(candidate: CandidateExample) -> Verdict:
    """Well-formed table present, question non-empty, answer numeric."""
    example = candidate.example
    tables, problems = scan_tables(example.passage)
    if problems:
        return Verdict("structural", "reject", f"malformed table: {problems[0]}")
    if not tables:
        return Verdict("structural", "reject", "passage contains no well-formed table")
    if not example.question.strip():
        return Verdict("structural", "reject", "question is empty")
    return Verdict("structural", "accept",
                   f"{len(tables)} well-formed table(s), question and numeric answer present")


def vote_numerical(candidate: CandidateExample, provider: Provider | None,
                   config: VerifierConfig = VerifierConfig()) -> Verdict:
    """Recompute the answer (oracle first, backend fallback) and compare."""
    example = candidate.example
    tables = extract_tables(example.passage)
    value = oracle_answer(tables, example.question)
    if value is not None:
        evidence = f"oracle={format_number(value)}"
        if compare(value, example.gold_answer, config.rel_tol, config.abs_tol):
            return Verdict("numerical", "accept", "oracle recomputation matches the answer",
                           evidence=evidence)
        return Verdict("numerical", "reject",
                       f"oracle recomputation disagrees with answer "
                       f"{format_number(example.gold_answer)}", evidence=evidence)
    if not config.allow_llm or provider is None:
        return Verdict("numerical", "reject",
                       "question is not mechanically checkable and no backend voter is allowed")
    instruction = _voter_asset("voter_numerical.txt")
    response = provider.complete(build_request(
        "voter", instruction, f"{example.passage}\n\n{example.question}"))
    recomputed = extract_final_number(response.text)
    if recomputed is None:
        return Verdict("numerical", "reject", "backend voter returned no numeric answer")
    evidence = f"voter={format_number(recomputed)}"
    if compare(recomputed, example.gold_answer, config.rel_tol, config.abs_tol):
        return Verdict("numerical", "accept", "backend recomputation matches the answer",
                       evidence=evidence)
    return Verdict("numerical", "reject",
                   f"backend recomputation disagrees with answer "
                   f"{format_number(example.gold_answer)}", evidence=evidence)


def vote_robustness(candidate: CandidateExample, provider: Provider | None,
                    config: VerifierConfig = VerifierConfig()) -> Verdict:
    """The answer must be stable under every configured perturbation."""
    perturbations = build_perturbations(candidate.example, config, provider)
    if not perturbations:
        return Verdict("robustness", "accept", "no applicable perturbations")
    for name, passage in perturbations:
        perturbed = replace(candidate.example, passage=passage)
        shadow = replace(candidate, example=perturbed)
        verdict = vote_numerical(shadow, provider, config)
        if not verdict.accepted:
            return Verdict("robustness", "reject",
                           f"answer unstable under {name} perturbation: {verdict.reason}",
                           evidence=verdict.evidence)
    return Verdict("robustness", "accept",
                   f"answer stable under {len(perturbations)} perturbation(s)")


def consensus(candidate: CandidateExample, provider: Provider | None,
              config: VerifierConfig = VerifierConfig()) -> ConsensusResult:
    """Run all three voters (never short-circuits) and combine them."""
    verdicts = [
        vote_structural(candidate),
        vote_numerical(candidate, provider, config),
        vote_robustness(candidate, provider, config),
    ]
    return combine_verdicts(verdicts)
