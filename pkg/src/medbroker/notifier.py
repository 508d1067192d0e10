"""Per-user notification inbox and live delivery.

Delivery contract is split in two: the persisted inbox is exactly-once
(duplicate events collapse on a dedup key derived from the event's
identity), while live push to open streams is at-least-once and clients
drop repeats by notification id. The inbox is the source of truth; a
stream reconnect replays missed entries from it.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

from .domain import Verdict
from .store import Store

KIND_RESPONSE = "pharmacy_response"
KIND_STATE_CHANGE = "request_state_change"


@dataclass(frozen=True)
class ResponseEvent:
    """A pharmacy answered an availability request."""

    request_id: str
    pharmacy_id: str
    verdict: Verdict
    available_medicine_ids: tuple = ()

    @property
    def dedup_key(self) -> str:
        return f"response:{self.request_id}:{self.pharmacy_id}"

    def payload(self) -> Dict[str, object]:
        return {
            "pharmacy_id": self.pharmacy_id,
            "verdict": self.verdict.value,
            "available_medicine_ids": sorted(self.available_medicine_ids),
        }


@dataclass(frozen=True)
class StateChangeEvent:
    """A request changed state (terminal transitions and round expansions)."""

    request_id: str
    state: str
    round: int
    radius_km: float
    new_pharmacy_ids: tuple = ()

    @property
    def dedup_key(self) -> str:
        return f"state:{self.request_id}:{self.state}:{self.round}"

    def payload(self) -> Dict[str, object]:
        return {
            "state": self.state,
            "round": self.round,
            "radius_km": self.radius_km,
            "new_pharmacy_ids": sorted(self.new_pharmacy_ids),
        }


NotifierEvent = Union[ResponseEvent, StateChangeEvent]


@dataclass
class Subscription:
    user_id: str
    events: "queue.Queue[Dict[str, object]]" = field(default_factory=queue.Queue)


class Notifier:
    def __init__(self, store: Store):
        self._store = store
        self._lock = threading.Lock()
        self._counter = store.max_counter("ntf-")
        self._subscriptions: Dict[str, List[Subscription]] = {}

    def _next_id(self) -> str:
        self._counter += 1
        return f"ntf-{self._counter:06d}"

    def emit(self, event: NotifierEvent, owner_id: str, now: float) -> Optional[Dict[str, object]]:
        """Persist exactly once into the owner's inbox, then push to any
        open streams. Returns the new notification, or None on a duplicate."""
        kind = KIND_RESPONSE if isinstance(event, ResponseEvent) else KIND_STATE_CHANGE
        with self._lock:
            stored_id = self._store.insert_notification(
                notification_id=self._next_id(),
                user_id=owner_id,
                kind=kind,
                request_id=event.request_id,
                payload=event.payload(),
                created_at=now,
                dedup_key=event.dedup_key,
            )
            if stored_id is None:
                self._counter -= 1  # id was never used; keep the sequence dense
                return None
            notification = {
                "id": stored_id,
                "user_id": owner_id,
                "kind": kind,
                "request_id": event.request_id,
                "payload": event.payload(),
                "created_at": now,
                "read": False,
            }
            for sub in self._subscriptions.get(owner_id, []):
                sub.events.put(notification)
            return notification

    def list_notifications(self, user_id: str, unread_only: bool = False) -> List[Dict[str, object]]:
        return self._store.list_notifications(user_id, unread_only=unread_only)

    def mark_read(self, user_id: str, ids: List[str]) -> int:
        return self._store.mark_notifications_read(user_id, ids)

    def subscribe(self, user_id: str) -> Subscription:
        sub = Subscription(user_id=user_id)
        with self._lock:
            self._subscriptions.setdefault(user_id, []).append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            subs = self._subscriptions.get(sub.user_id, [])
            if sub in subs:
                subs.remove(sub)

    def missed_since(self, user_id: str, last_id: Optional[str]) -> List[Dict[str, object]]:
        """Inbox entries newer than ``last_id``, oldest first (for stream
        reconnects). With no ``last_id`` the whole inbox is replayed."""
        inbox = sorted(
            self._store.list_notifications(user_id),
            key=lambda n: (n["created_at"], n["id"]),
        )
        if last_id is None:
            return inbox
        newer = []
        seen_marker = False
        for item in inbox:
            if seen_marker:
                newer.append(item)
            elif item["id"] == last_id:
                seen_marker = True
        return newer if seen_marker else inbox
