"""Append-only run store: one NDJSON event log plus materialized views.

Events are immutable once written; every view is rebuilt by folding the log
through the same builder the live path uses, so replay determinism is a
structural property rather than something to maintain by hand.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

from .engine import RunRecord, RunRecordBuilder
from .errors import StoreError

LOG_FILENAME = "events.ndjson"


@dataclass(frozen=True)
class Event:
    seq: int
    at: float
    run_id: str
    type: str
    payload: dict

    def to_json(self) -> str:
        return json.dumps(
            {"seq": self.seq, "at": self.at, "run_id": self.run_id,
             "type": self.type, "payload": self.payload},
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "Event":
        data = json.loads(line)
        return cls(
            seq=int(data["seq"]), at=float(data["at"]), run_id=str(data["run_id"]),
            type=str(data["type"]), payload=data["payload"],
        )


@dataclass(frozen=True)
class CorruptionReport:
    offset: int
    line_number: int
    detail: str


class RunStore:
    """Single-writer event store. `data_dir=None` keeps everything in memory
    (tests); otherwise events append to `<data_dir>/events.ndjson` with one
    fsync-free write per event."""

    def __init__(self, data_dir: Optional[Path] = None, clock=time.time):
        self._lock = threading.Lock()
        self._clock = clock
        self._events: list[Event] = []
        self._builder = RunRecordBuilder()
        self._new_event = threading.Condition(self._lock)
        self._log_path: Optional[Path] = None
        self._log_handle = None
        if data_dir is not None:
            data_dir = Path(data_dir)
            data_dir.mkdir(parents=True, exist_ok=True)
            self._log_path = data_dir / LOG_FILENAME
            self._log_handle = open(self._log_path, "a", encoding="utf-8")

    # -- write path -------------------------------------------------------------

    def emit(self, run_id: str, type_: str, payload: dict) -> Event:
        with self._lock:
            event = Event(
                seq=len(self._events) + 1,
                at=self._clock(),
                run_id=run_id,
                type=type_,
                payload=payload,
            )
            self._events.append(event)
            self._builder.apply(event)
            if self._log_handle is not None:
                self._log_handle.write(event.to_json() + "\n")
                self._log_handle.flush()
            self._new_event.notify_all()
            return event

    def close(self):
        with self._lock:
            if self._log_handle is not None:
                self._log_handle.close()
                self._log_handle = None

    # -- read path ----------------------------------------------------------------

    def events(self, run_id: Optional[str] = None, after: int = 0) -> list[Event]:
        with self._lock:
            return [
                e for e in self._events
                if e.seq > after and (run_id is None or e.run_id == run_id)
            ]

    def run_record(self, run_id: str) -> RunRecord:
        with self._lock:
            record = self._builder.records.get(run_id)
            if record is None:
                raise StoreError(f"unknown run {run_id!r}")
            return record

    def run_ids(self) -> list[str]:
        with self._lock:
            return list(self._builder.records)

    def subscribe(
        self, run_id: str, after: int = 0, poll_timeout: float = 0.5,
        stop: Optional[threading.Event] = None,
    ) -> Iterator[Event]:
        """Yield this run's events in order, exactly once, until the run
        completes or `stop` is set."""
        cursor = after
        while True:
            with self._lock:
                pending = [
                    e for e in self._events
                    if e.seq > cursor and e.run_id == run_id
                ]
                if not pending:
                    self._new_event.wait(timeout=poll_timeout)
                    pending = [
                        e for e in self._events
                        if e.seq > cursor and e.run_id == run_id
                    ]
            for event in pending:
                cursor = event.seq
                yield event
                if event.type == "run_completed":
                    return
            if stop is not None and stop.is_set():
                return

    # -- replay ---------------------------------------------------------------------

    @staticmethod
    def read_log(data_dir: Path) -> tuple[list[Event], Optional[CorruptionReport]]:
        """Read an event log, stopping at the first corrupt record."""
        path = Path(data_dir) / LOG_FILENAME
        if not path.exists():
            raise StoreError(f"no event log at {path}")
        events: list[Event] = []
        corruption: Optional[CorruptionReport] = None
        offset = 0
        with open(path, "r", encoding="utf-8") as handle:
            for line_number, line in enumerate(handle, start=1):
                stripped = line.strip()
                if not stripped:
                    offset += len(line.encode("utf-8"))
                    continue
                try:
                    event = Event.from_json(stripped)
                except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                    corruption = CorruptionReport(
                        offset=offset, line_number=line_number, detail=str(exc)
                    )
                    break
                events.append(event)
                offset += len(line.encode("utf-8"))
        return events, corruption

    @classmethod
    def replay(cls, data_dir: Path) -> tuple["RunStore", Optional[CorruptionReport]]:
        """Rebuild views by folding the persisted log through a fresh builder.
        Corrupt tails are reported, not fatal: views reflect every valid
        record before the corruption point."""
        events, corruption = cls.read_log(data_dir)
        store = cls(data_dir=None)
        with store._lock:
            for event in events:
                store._events.append(event)
                store._builder.apply(event)
        return store, corruption
