from __future__ import annotations

import random

import pytest

from medbroker.domain import Verdict
from medbroker.notifier import (
    KIND_RESPONSE,
    KIND_STATE_CHANGE,
    Notifier,
    ResponseEvent,
    StateChangeEvent,
)
from medbroker.store import NotFoundError, Store

T0 = 1_700_000_000.0


@pytest.fixture
def notifier():
    return Notifier(Store(":memory:"))


def response_event(request_id="req-1", pharmacy_id="P1", verdict=Verdict.FULL):
    return ResponseEvent(request_id=request_id, pharmacy_id=pharmacy_id, verdict=verdict)


class TestEmit:
    def test_single_response_notification(self, notifier):
        created = notifier.emit(response_event(), owner_id="alice", now=T0)
        assert created is not None
        inbox = notifier.list_notifications("alice")
        assert len(inbox) == 1
        assert inbox[0]["kind"] == KIND_RESPONSE
        assert inbox[0]["payload"]["pharmacy_id"] == "P1"

    def test_duplicate_event_collapses(self, notifier):
        assert notifier.emit(response_event(), "alice", T0) is not None
        assert notifier.emit(response_event(), "alice", T0 + 5) is None
        assert len(notifier.list_notifications("alice")) == 1

    def test_state_change_notification(self, notifier):
        event = StateChangeEvent(request_id="req-1", state="exhausted", round=5, radius_km=50.0)
        notifier.emit(event, "alice", T0)
        inbox = notifier.list_notifications("alice")
        assert inbox[0]["kind"] == KIND_STATE_CHANGE
        assert inbox[0]["payload"]["state"] == "exhausted"

    def test_inboxes_are_per_user(self, notifier):
        notifier.emit(response_event(), "alice", T0)
        assert notifier.list_notifications("bob") == []


class TestListing:
    def test_newest_first_ties_by_id(self, notifier):
        notifier.emit(response_event(pharmacy_id="P1"), "alice", T0)
        notifier.emit(response_event(pharmacy_id="P2"), "alice", T0 + 10)
        notifier.emit(response_event(pharmacy_id="P3"), "alice", T0 + 10)
        inbox = notifier.list_notifications("alice")
        assert [n["payload"]["pharmacy_id"] for n in inbox] == ["P2", "P3", "P1"]

    def test_empty_inbox(self, notifier):
        assert notifier.list_notifications("alice") == []

    def test_unread_only(self, notifier):
        notifier.emit(response_event(pharmacy_id="P1"), "alice", T0)
        notifier.emit(response_event(pharmacy_id="P2"), "alice", T0 + 1)
        notifier.emit(response_event(pharmacy_id="P3"), "alice", T0 + 2)
        first_id = notifier.list_notifications("alice")[-1]["id"]
        notifier.mark_read("alice", [first_id])
        unread = notifier.list_notifications("alice", unread_only=True)
        assert len(unread) == 2
        assert all(not n["read"] for n in unread)


class TestMarkRead:
    def test_mark_two(self, notifier):
        notifier.emit(response_event(pharmacy_id="P1"), "alice", T0)
        notifier.emit(response_event(pharmacy_id="P2"), "alice", T0 + 1)
        ids = [n["id"] for n in notifier.list_notifications("alice")]
        assert notifier.mark_read("alice", ids) == 2

    def test_idempotent(self, notifier):
        notifier.emit(response_event(), "alice", T0)
        ids = [n["id"] for n in notifier.list_notifications("alice")]
        assert notifier.mark_read("alice", ids) == 1
        assert notifier.mark_read("alice", ids) == 0

    def test_foreign_id_not_found(self, notifier):
        notifier.emit(response_event(), "alice", T0)
        alice_ids = [n["id"] for n in notifier.list_notifications("alice")]
        notifier.emit(response_event(request_id="req-2"), "bob", T0)
        with pytest.raises(NotFoundError):
            notifier.mark_read("bob", alice_ids)


class TestStreams:
    def test_live_push_to_open_subscription(self, notifier):
        sub = notifier.subscribe("alice")
        notifier.emit(response_event(), "alice", T0)
        delivered = sub.events.get(timeout=1)
        assert delivered["payload"]["pharmacy_id"] == "P1"

    def test_duplicate_emit_not_pushed(self, notifier):
        sub = notifier.subscribe("alice")
        notifier.emit(response_event(), "alice", T0)
        notifier.emit(response_event(), "alice", T0 + 1)
        sub.events.get(timeout=1)
        assert sub.events.empty()

    def test_missed_since_replays_newer_entries(self, notifier):
        for i, pharmacy in enumerate(["P1", "P2", "P3"]):
            notifier.emit(response_event(pharmacy_id=pharmacy), "alice", T0 + i)
        inbox_oldest_first = sorted(
            notifier.list_notifications("alice"), key=lambda n: n["created_at"]
        )
        marker = inbox_oldest_first[0]["id"]
        missed = notifier.missed_since("alice", marker)
        assert [n["payload"]["pharmacy_id"] for n in missed] == ["P2", "P3"]

    def test_missed_since_unknown_marker_replays_all(self, notifier):
        notifier.emit(response_event(), "alice", T0)
        assert len(notifier.missed_since("alice", "ntf-xxxxxx")) == 1

    def test_every_inbox_entry_reaches_open_stream(self, notifier):
        # At-least-once: everything persisted while subscribed shows up.
        sub = notifier.subscribe("alice")
        expected = []
        for i in range(10):
            created = notifier.emit(response_event(pharmacy_id=f"P{i}"), "alice", T0 + i)
            expected.append(created["id"])
        received = [sub.events.get(timeout=1)["id"] for _ in range(10)]
        assert received == expected


class TestIdempotencyAtScale:
    def test_duplicated_streams_match_deduplicated_inbox(self):
        # Inject every event twice (in shuffled order); the inbox must end
        # up the size of the deduplicated stream.
        rng = random.Random(77)
        for round_no in range(20):
            notifier = Notifier(Store(":memory:"))
            events = []
            for i in range(rng.randint(1, 30)):
                if rng.random() < 0.7:
                    events.append(
                        response_event(
                            request_id=f"req-{rng.randint(1, 4)}",
                            pharmacy_id=f"P{rng.randint(1, 6)}",
                            verdict=rng.choice(list(Verdict)),
                        )
                    )
                else:
                    events.append(
                        StateChangeEvent(
                            request_id=f"req-{rng.randint(1, 4)}",
                            state=rng.choice(["fulfilled_full", "exhausted"]),
                            round=rng.randint(1, 5),
                            radius_km=5.0,
                        )
                    )
            doubled = events + list(events)
            rng.shuffle(doubled)
            for i, event in enumerate(doubled):
                notifier.emit(event, "alice", T0 + i)
            unique = {e.dedup_key for e in events}
            assert len(notifier.list_notifications("alice")) == len(unique)
