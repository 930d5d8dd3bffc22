"""Dataset records, pipe-table extraction, and answer-magnitude priors.

Datasets are UTF-8 line-delimited JSON with fields ``{id?, paragraphs,
question, ground_truth, subset?, difficulty?, origin?}``; ``paragraphs``
may be a single string or a list of strings joined with newlines at load.

Passages embed zero or more pipe-delimited tables. A table is a maximal
run of consecutive lines that start with ``|``; dash-only separator rows
are consumed, never emitted as data. Cells are trimmed and numeric cells
are normalized (currency symbols, thousands separators, trailing percent
signs stripped) before parsing. Runs that do not form a rectangular table
degrade to plain text instead of failing the load; the problem is reported
so callers that care (the structural voter) can reject.

The answer-magnitude prior buckets gold answers by sign and decade:
(-inf,0), [0,1), [1,10), [10,100), [100,1000), [1000,1e6), [1e6,inf).
Bucket probabilities use add-one smoothing so no bucket is ever zero.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import EmptyCorpus, SchemaError

logger = logging.getLogger(__name__)

SUBSETS = ("SimpShort", "CompShort", "SimpLong", "CompLong")
ORIGINS = ("real", "synthetic")

_CURRENCY = "$€£¥"
# Digits with optional strict thousands grouping and optional decimals.
_PLAIN_NUMBER = re.compile(r"(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?|\.\d+")
_DECORATED_NUMBER = re.compile(
    r"(?P<sign1>[-+])?\s*[%s]?\s*(?P<sign2>[-+])?\s*(?P<num>%s)\s*%%?"
    % (re.escape(_CURRENCY), _PLAIN_NUMBER.pattern)
)


def normalize_number(raw: str) -> float | None:
    """Parse one decorated numeric literal, or return None.

    Strips currency symbols, thousands separators, surrounding whitespace
    and a trailing percent sign (the face value is kept, no division by
    100). Parenthesized values follow the accounting convention and come
    back negative. Strings that are not a single bare number ("", "abc",
    "approximately 60") return None. No rounding is applied.
    """
    s = raw.strip()
    if not s:
        return None
    if s[0] == "(" and s[-1] == ")":
        inner = normalize_number(s[1:-1])
        return None if inner is None else -inner
    m = _DECORATED_NUMBER.fullmatch(s)
    if m is None:
        return None
    sign = -1.0 if (m.group("sign1") == "-") != (m.group("sign2") == "-") else 1.0
    value = sign * float(m.group("num").replace(",", ""))
    return value if math.isfinite(value) else None


def format_number(value: float) -> str:
    """Render a float the way gold answers are written (no trailing .0)."""
    if math.isfinite(value) and value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


@dataclass(frozen=True)
class Example:
    """One QA instance: a passage with embedded tables, a question, and a
    numeric gold answer."""

    id: str
    passage: str
    question: str
    gold_answer: float
    difficulty: int | None = None
    origin: str = "real"
    subset: str | None = None

    def __post_init__(self) -> None:
        if not self.passage.strip():
            raise ValueError("passage must be non-empty")
        if not self.question.strip():
            raise ValueError("question must be non-empty")
        if not math.isfinite(self.gold_answer):
            raise ValueError("gold answer must be finite")
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.origin == "synthetic" and self.difficulty is None:
            raise ValueError("synthetic examples must carry a difficulty")
        if self.difficulty is not None and self.difficulty < 1:
            raise ValueError(f"difficulty must be >= 1, got {self.difficulty}")
        if self.subset is not None and self.subset not in SUBSETS:
            raise ValueError(f"unknown subset {self.subset!r}")


def example_to_record(example: Example) -> dict:
    record: dict = {
        "id": example.id,
        "paragraphs": example.passage,
        "question": example.question,
        "ground_truth": example.gold_answer,
    }
    if example.subset is not None:
        record["subset"] = example.subset
    if example.difficulty is not None:
        record["difficulty"] = example.difficulty
    if example.origin != "real":
        record["origin"] = example.origin
    return record


def example_from_record(record: dict, *, fallback_id: str = "") -> Example:
    paragraphs = record["paragraphs"]
    if isinstance(paragraphs, list):
        passage = "\n".join(str(p) for p in paragraphs)
    else:
        passage = str(paragraphs)
    gold = record["ground_truth"]
    if isinstance(gold, str):
        parsed = normalize_number(gold)
        if parsed is None:
            raise ValueError(f"non-numeric gold answer {gold!r}")
        gold = parsed
    elif isinstance(gold, bool) or not isinstance(gold, (int, float)):
        raise ValueError(f"non-numeric gold answer {gold!r}")
    difficulty = record.get("difficulty")
    return Example(
        id=str(record.get("id") or fallback_id),
        passage=passage,
        question=str(record["question"]),
        gold_answer=float(gold),
        difficulty=int(difficulty) if difficulty is not None else None,
        origin=record.get("origin", "real"),
        subset=record.get("subset"),
    )


def load_dataset(path: str | Path, subset_filter: str | None = None, *,
                 strict: bool = True) -> list[Example]:
    """Load and validate a line-delimited dataset file.

    Records that fail validation raise ``SchemaError`` naming the line in
    strict mode; with ``strict=False`` they are logged and skipped.
    """
    path = Path(path)
    examples: list[Example] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                example = example_from_record(record, fallback_id=f"{path.stem}:{line_no}")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                message = f"{path}:{line_no}: {exc}"
                if strict:
                    raise SchemaError(message) from exc
                logger.warning("skipping bad record %s", message)
                continue
            if subset_filter is None or example.subset == subset_filter:
                examples.append(example)
    return examples


def save_dataset(examples: list[Example], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for example in examples:
            fh.write(json.dumps(example_to_record(example), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Pipe tables


@dataclass(frozen=True)
class TableRow:
    label: str
    cells: tuple[float | str, ...]


@dataclass(frozen=True)
class Table:
    header: tuple[str, ...]
    rows: tuple[TableRow, ...]
    source_span: tuple[int, int]  # character offsets into the passage

    def column_index(self, name: str) -> int | None:
        wanted = name.strip().lower()
        for i, col in enumerate(self.header[1:]):
            if col.strip().lower() == wanted:
                return i
        return None

    def find_row(self, label: str) -> TableRow | None:
        wanted = label.strip().lower()
        exact = [r for r in self.rows if r.label.strip().lower() == wanted]
        if len(exact) == 1:
            return exact[0]
        if exact:
            return None
        partial = [r for r in self.rows if r.label.strip().lower() and
                   r.label.strip().lower() in wanted]
        return partial[0] if len(partial) == 1 else None


_SEPARATOR_CELL = re.compile(r":?-{2,}:?|-")


def _split_cells(line: str) -> list[str]:
    body = line.strip().strip("|")
    return [cell.strip() for cell in body.split("|")]


def _is_separator(cells: list[str]) -> bool:
    return all(_SEPARATOR_CELL.fullmatch(c) for c in cells if c) and any(cells)


def _parse_cell(text: str) -> float | str:
    value = normalize_number(text)
    return value if value is not None else text


def _parse_run(lines: list[str], span: tuple[int, int]) -> tuple[Table | None, str | None]:
    header: list[str] | None = None
    rows: list[TableRow] = []
    for raw in lines:
        cells = _split_cells(raw)
        if _is_separator(cells):
            continue
        if header is None:
            header = cells
            continue
        if len(cells) != len(header):
            return None, (
                f"row {len(rows) + 1} ({cells[0]!r}) has {len(cells)} cells, "
                f"expected {len(header)}"
            )
        rows.append(TableRow(label=cells[0], cells=tuple(_parse_cell(c) for c in cells[1:])))
    if header is None:
        return None, "table run has no header row"
    if not rows:
        return None, "table run has no data rows"
    return Table(header=tuple(header), rows=tuple(rows), source_span=span), None


def scan_tables(passage: str) -> tuple[list[Table], list[str]]:
    """Extract tables and report the runs that could not be parsed."""
    tables: list[Table] = []
    problems: list[str] = []
    run: list[str] = []
    run_start = 0
    offset = 0

    def flush(end: int) -> None:
        if not run:
            return
        table, problem = _parse_run(run, (run_start, end))
        if table is not None:
            tables.append(table)
        else:
            problems.append(problem or "unparseable table run")
        run.clear()

    for line in passage.splitlines(keepends=True):
        stripped = line.strip()
        if stripped.startswith("|"):
            if not run:
                run_start = offset
            run.append(line.rstrip("\n"))
            offset += len(line)
        else:
            flush(offset)
            offset += len(line)
    flush(offset)
    return tables, problems


def extract_tables(passage: str) -> list[Table]:
    """Every well-formed pipe table in the passage, in order of appearance."""
    tables, problems = scan_tables(passage)
    for problem in problems:
        logger.debug("dropping table run: %s", problem)
    return tables


def render_table(header: tuple[str, ...], rows: tuple[TableRow, ...] | list[TableRow]) -> str:
    """Render a table back to pipe-delimited text (header, separator, rows)."""

    def cell_text(value: float | str) -> str:
        return format_number(value) if isinstance(value, float) else value

    lines = ["|" + "|".join(header) + "|"]
    lines.append("|" + "|".join("---" for _ in header) + "|")
    for row in rows:
        lines.append("|" + "|".join([row.label] + [cell_text(c) for c in row.cells]) + "|")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Label prior

NEG_INF = float("-inf")
POS_INF = float("inf")

BUCKETS: tuple[tuple[float, float], ...] = (
    (NEG_INF, 0.0),
    (0.0, 1.0),
    (1.0, 10.0),
    (10.0, 100.0),
    (100.0, 1000.0),
    (1000.0, 1e6),
    (1e6, POS_INF),
)


def bucket_index(value: float) -> int:
    for i, (lo, hi) in enumerate(BUCKETS):
        if lo <= value < hi:
            return i
    return len(BUCKETS) - 1


def bucket_label(index: int) -> str:
    lo, hi = BUCKETS[index]
    left = "(-inf" if lo == NEG_INF else f"[{format_number(lo)}"
    right = "inf)" if hi == POS_INF else f"{format_number(hi)})"
    return f"{left},{right}"


def smoothed_distribution(values: list[float]) -> tuple[float, ...]:
    """Bucket distribution of the values with add-one smoothing."""
    counts = [0] * len(BUCKETS)
    for v in values:
        counts[bucket_index(v)] += 1
    total = len(values) + len(BUCKETS)
    return tuple((c + 1) / total for c in counts)


@dataclass(frozen=True)
class LabelPrior:
    """Smoothed empirical distribution over gold-answer buckets."""

    probabilities: tuple[float, ...]
    sample_count: int
    buckets: tuple[tuple[float, float], ...] = BUCKETS

    def __post_init__(self) -> None:
        if self.sample_count <= 0:
            raise ValueError("sample_count must be positive")
        if len(self.probabilities) != len(self.buckets):
            raise ValueError("one probability per bucket required")
        if any(p < 0 for p in self.probabilities):
            raise ValueError("probabilities must be non-negative")
        if abs(sum(self.probabilities) - 1.0) > 1e-9:
            raise ValueError("probabilities must sum to 1")


def estimate_label_prior(examples: list[Example]) -> LabelPrior:
    if not examples:
        raise EmptyCorpus("cannot estimate a label prior from zero examples")
    answers = [ex.gold_answer for ex in examples]
    return LabelPrior(probabilities=smoothed_distribution(answers),
                      sample_count=len(answers))
