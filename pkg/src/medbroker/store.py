"""Durable persistence: entities, notification inbox, and the append-only
request event log from which every request is recoverable.

Backend is a single embedded sqlite file (``broker.db`` inside the data
directory) -- no external server. Layout:

    events         (request_id, seq, kind, payload JSON, at, dedup_key)
                   seq starts at 1 and is strictly increasing per request;
                   (request_id, dedup_key) is unique, which is what makes
                   append idempotent.
    entities       (kind, id, body JSON)
    notifications  (id, user_id, kind, request_id, payload JSON,
                    created_at, read, dedup_key)

The log is the source of truth for requests; in-memory snapshots are a
cache rebuilt by :meth:`EventStore.replay`. Appends validate that the new
event extends a legal state-machine trace by actually folding it, and are
committed (fsynced by sqlite) before being acknowledged.
"""

from __future__ import annotations

import json
import sqlite3
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

from . import engine
from .domain import BrokerError
from .engine import AvailabilityRequest, Event, EventKind

DB_FILENAME = "broker.db"

_SCHEMA = """
CREATE TABLE IF NOT EXISTS events (
    request_id TEXT NOT NULL,
    seq        INTEGER NOT NULL,
    kind       TEXT NOT NULL,
    payload    TEXT NOT NULL,
    at         REAL NOT NULL,
    dedup_key  TEXT NOT NULL,
    PRIMARY KEY (request_id, seq),
    UNIQUE (request_id, dedup_key)
);
CREATE TABLE IF NOT EXISTS entities (
    kind TEXT NOT NULL,
    id   TEXT NOT NULL,
    body TEXT NOT NULL,
    PRIMARY KEY (kind, id)
);
CREATE TABLE IF NOT EXISTS notifications (
    id         TEXT PRIMARY KEY,
    user_id    TEXT NOT NULL,
    kind       TEXT NOT NULL,
    request_id TEXT NOT NULL,
    payload    TEXT NOT NULL,
    created_at REAL NOT NULL,
    read       INTEGER NOT NULL DEFAULT 0,
    dedup_key  TEXT NOT NULL,
    UNIQUE (user_id, dedup_key)
);
"""

ENTITY_KINDS = ("pharmacies", "medicines", "prescriptions", "tokens")


class InvalidTraceError(BrokerError):
    """Appending this event would corrupt the request's transition trace."""


class NotFoundError(BrokerError):
    pass


class UnknownKindError(BrokerError):
    pass


@dataclass(frozen=True)
class StoredEvent:
    request_id: str
    sequence: int
    event: Event


class Store:
    """Single-writer, many-reader persistence over one sqlite file."""

    def __init__(self, path: Union[str, Path] = ":memory:"):
        self.path = str(path)
        self._conn = sqlite3.connect(self.path, check_same_thread=False)
        self._conn.execute("PRAGMA journal_mode=WAL")
        self._conn.execute("PRAGMA synchronous=FULL")
        self._conn.executescript(_SCHEMA)
        self._conn.commit()
        self._write_lock = threading.Lock()
        # Cache of the folded head state per request; log stays the truth.
        self._head_cache: Dict[str, AvailabilityRequest] = {}

    def close(self) -> None:
        self._conn.close()

    # -- event log ----------------------------------------------------------

    def append(self, request_id: str, event: Event) -> int:
        """Durably append one event; returns its per-request sequence.

        Re-appending an event with an already-acknowledged dedup key
        returns the original sequence without writing anything.
        """
        with self._write_lock:
            row = self._conn.execute(
                "SELECT seq FROM events WHERE request_id = ? AND dedup_key = ?",
                (request_id, event.dedup_key),
            ).fetchone()
            if row is not None:
                return int(row[0])

            head = self._head(request_id)
            try:
                new_head = engine.apply_event(head, event)
            except engine.InvalidTransitionError as exc:
                raise InvalidTraceError(
                    f"request {request_id}: event {event.kind.value!r} does not extend "
                    f"a valid trace: {exc}"
                ) from exc

            last = self._conn.execute(
                "SELECT COALESCE(MAX(seq), 0) FROM events WHERE request_id = ?",
                (request_id,),
            ).fetchone()[0]
            seq = int(last) + 1
            self._conn.execute(
                "INSERT INTO events (request_id, seq, kind, payload, at, dedup_key) "
                "VALUES (?, ?, ?, ?, ?, ?)",
                (
                    request_id,
                    seq,
                    event.kind.value,
                    json.dumps(event.payload, sort_keys=True),
                    event.at,
                    event.dedup_key,
                ),
            )
            self._conn.commit()
            self._head_cache[request_id] = new_head
            return seq

    def events(self, request_id: str) -> List[StoredEvent]:
        rows = self._conn.execute(
            "SELECT seq, kind, payload, at, dedup_key FROM events "
            "WHERE request_id = ? ORDER BY seq",
            (request_id,),
        ).fetchall()
        return [
            StoredEvent(
                request_id=request_id,
                sequence=int(seq),
                event=Event(
                    kind=EventKind(kind),
                    payload=json.loads(payload),
                    at=float(at),
                    dedup_key=dedup_key,
                ),
            )
            for seq, kind, payload, at, dedup_key in rows
        ]

    def request_ids(self) -> List[str]:
        rows = self._conn.execute(
            "SELECT DISTINCT request_id FROM events ORDER BY request_id"
        ).fetchall()
        return [r[0] for r in rows]

    def replay(self, request_id: str, upto_seq: Optional[int] = None) -> AvailabilityRequest:
        """Fold the (prefix of the) stored trace back into a request."""
        stored = self.events(request_id)
        if upto_seq is not None:
            stored = [s for s in stored if s.sequence <= upto_seq]
        if not stored:
            raise NotFoundError(f"no events for request {request_id!r}")
        state: Optional[AvailabilityRequest] = None
        for item in stored:
            state = engine.apply_event(state, item.event)
        assert state is not None
        return state

    def _head(self, request_id: str) -> Optional[AvailabilityRequest]:
        cached = self._head_cache.get(request_id)
        if cached is not None:
            return cached
        try:
            head = self.replay(request_id)
        except NotFoundError:
            return None
        self._head_cache[request_id] = head
        return head

    # -- entities -----------------------------------------------------------

    def save_entities(self, kind: str, records: Iterable[Dict[str, object]]) -> int:
        """Upsert JSON records (each must carry an ``id``); returns the count."""
        if kind not in ENTITY_KINDS:
            raise UnknownKindError(f"unknown entity kind {kind!r}")
        count = 0
        with self._write_lock:
            for record in records:
                if "id" not in record:
                    raise BrokerError(f"{kind} record without an id: {record!r}")
                self._conn.execute(
                    "INSERT INTO entities (kind, id, body) VALUES (?, ?, ?) "
                    "ON CONFLICT (kind, id) DO UPDATE SET body = excluded.body",
                    (kind, str(record["id"]), json.dumps(record, sort_keys=True)),
                )
                count += 1
            self._conn.commit()
        return count

    def load_entities(self, kind: str) -> List[Dict[str, object]]:
        if kind not in ENTITY_KINDS:
            raise UnknownKindError(f"unknown entity kind {kind!r}")
        rows = self._conn.execute(
            "SELECT body FROM entities WHERE kind = ? ORDER BY id", (kind,)
        ).fetchall()
        return [json.loads(r[0]) for r in rows]

    # -- notifications ------------------------------------------------------

    def insert_notification(
        self,
        notification_id: str,
        user_id: str,
        kind: str,
        request_id: str,
        payload: Dict[str, object],
        created_at: float,
        dedup_key: str,
    ) -> Optional[str]:
        """Insert unless the (user, dedup_key) pair already exists.

        Returns the stored notification id, or None when deduplicated.
        """
        with self._write_lock:
            row = self._conn.execute(
                "SELECT id FROM notifications WHERE user_id = ? AND dedup_key = ?",
                (user_id, dedup_key),
            ).fetchone()
            if row is not None:
                return None
            self._conn.execute(
                "INSERT INTO notifications "
                "(id, user_id, kind, request_id, payload, created_at, read, dedup_key) "
                "VALUES (?, ?, ?, ?, ?, ?, 0, ?)",
                (
                    notification_id,
                    user_id,
                    kind,
                    request_id,
                    json.dumps(payload, sort_keys=True),
                    created_at,
                    dedup_key,
                ),
            )
            self._conn.commit()
            return notification_id

    def list_notifications(self, user_id: str, unread_only: bool = False) -> List[Dict[str, object]]:
        sql = (
            "SELECT id, user_id, kind, request_id, payload, created_at, read "
            "FROM notifications WHERE user_id = ?"
        )
        if unread_only:
            sql += " AND read = 0"
        sql += " ORDER BY created_at DESC, id ASC"
        rows = self._conn.execute(sql, (user_id,)).fetchall()
        return [
            {
                "id": r[0],
                "user_id": r[1],
                "kind": r[2],
                "request_id": r[3],
                "payload": json.loads(r[4]),
                "created_at": r[5],
                "read": bool(r[6]),
            }
            for r in rows
        ]

    def mark_notifications_read(self, user_id: str, ids: Iterable[str]) -> int:
        ids = list(ids)
        with self._write_lock:
            owned = {
                r[0]
                for r in self._conn.execute(
                    "SELECT id FROM notifications WHERE user_id = ?", (user_id,)
                ).fetchall()
            }
            foreign = [i for i in ids if i not in owned]
            if foreign:
                raise NotFoundError(f"notification(s) not found for user: {sorted(foreign)}")
            updated = 0
            for notification_id in ids:
                cur = self._conn.execute(
                    "UPDATE notifications SET read = 1 WHERE id = ? AND read = 0",
                    (notification_id,),
                )
                updated += cur.rowcount
            self._conn.commit()
            return updated

    def max_counter(self, prefix: str) -> int:
        """Highest numeric suffix used by ids with this prefix, across all
        id-bearing tables; lets a restarted service resume its counters."""
        best = 0
        for sql, params in (
            ("SELECT DISTINCT request_id FROM events", ()),
            ("SELECT id FROM notifications", ()),
            ("SELECT id FROM entities WHERE kind = 'prescriptions'", ()),
        ):
            for (value,) in self._conn.execute(sql, params).fetchall():
                if isinstance(value, str) and value.startswith(prefix):
                    suffix = value[len(prefix):]
                    if suffix.isdigit():
                        best = max(best, int(suffix))
        return best
