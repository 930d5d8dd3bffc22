"""Append-only JSONL run ledger.

One event per line, gapless sequence numbers from 0, flushed on every
append so a crash loses at most the line being written. A torn final line
is detected and dropped on read; corruption anywhere else is an error.

Deterministic runs (all backends mocked) use a logical clock derived from
the sequence number so that two identical runs produce byte-identical
ledgers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable

from .errors import LedgerError

logger = logging.getLogger(__name__)

EVENT_KINDS = (
    "run_started", "generated", "kl_gate", "verdict", "consensus",
    "example_accepted", "eval", "error_slice", "patch", "revision",
    "local_confirm", "global_confirm", "prompt_accepted", "final_selected",
    "run_finished",
)

_LOGICAL_EPOCH = datetime(2000, 1, 1, tzinfo=timezone.utc)


def logical_clock(sequence_no: int) -> str:
    """Sequence-derived timestamp; makes deterministic runs byte-identical."""
    return (_LOGICAL_EPOCH + timedelta(seconds=sequence_no)).isoformat()


def wall_clock(sequence_no: int) -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass(frozen=True)
class LedgerEvent:
    sequence_no: int
    timestamp: str
    kind: str
    payload: dict

    def to_line(self) -> str:
        return json.dumps(
            {"sequence_no": self.sequence_no, "timestamp": self.timestamp,
             "kind": self.kind, "payload": self.payload},
            ensure_ascii=False, sort_keys=True,
        )


class LedgerWriter:
    """Single writer appending events to one ledger file."""

    def __init__(self, path: str | Path, *, clock: Callable[[int], str] = wall_clock,
                 next_sequence: int = 0):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._clock = clock
        self._next = next_sequence
        self._fh = open(self.path, "a", encoding="utf-8")

    @property
    def next_sequence(self) -> int:
        return self._next

    def append(self, kind: str, payload: dict) -> LedgerEvent:
        if kind not in EVENT_KINDS:
            raise LedgerError(f"unknown event kind {kind!r}")
        event = LedgerEvent(sequence_no=self._next, timestamp=self._clock(self._next),
                            kind=kind, payload=payload)
        self._fh.write(event.to_line() + "\n")
        self._fh.flush()
        self._next += 1
        return event

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self) -> LedgerWriter:
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def read_ledger(path: str | Path, *, drop_torn_tail: bool = True) -> list[LedgerEvent]:
    """Parse a ledger file, enforcing gapless monotone sequence numbers."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    events: list[LedgerEvent] = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            event = LedgerEvent(
                sequence_no=record["sequence_no"],
                timestamp=record["timestamp"],
                kind=record["kind"],
                payload=record["payload"],
            )
            if event.kind not in EVENT_KINDS:
                raise ValueError(f"unknown kind {event.kind!r}")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            if drop_torn_tail and i == len(lines) - 1:
                logger.warning("dropping torn final ledger line %d of %s: %s",
                               i + 1, path, exc)
                break
            raise LedgerError(
                f"corrupt ledger line {i + 1} (expected sequence {len(events)}): {exc}"
            ) from exc
        if event.sequence_no != len(events):
            raise LedgerError(
                f"ledger sequence gap at line {i + 1}: expected "
                f"{len(events)}, found {event.sequence_no}"
            )
        events.append(event)
    return events
