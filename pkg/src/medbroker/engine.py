"""The availability-request state machine.

A request fans out to every registered pharmacy inside the current search
radius, waits one round timeout for answers, and on silence widens the
radius by a fixed factor -- enquiring only pharmacies not asked before --
until somebody can help, a workable partial answer is settled for, or the
radius cap is reached.

The module is written event-sourced: every operation *decides* a list of
events and the new state is always the fold of those events over the old
state (:func:`apply_event`). The persistence layer replays the exact same
fold, so a replayed request can never diverge from the in-memory one.

All inputs are explicit (registry snapshot, config, ``now``); there is no
hidden clock and no randomness, which makes whole protocol traces
reproducible byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, FrozenSet, List, Mapping, Optional, Tuple

from .domain import (
    BrokerError,
    GeoPoint,
    PharmacyResponse,
    Prescription,
    PrescriptionStatus,
    ValidationError,
    Verdict,
    classify_response,
)
from .georegistry import RegistrySnapshot

_RADIUS_EPS = 1e-9


class UnknownPharmacyError(BrokerError):
    """Response from a pharmacy that was never enquired."""


class DuplicateResponseError(BrokerError):
    """Second response from the same pharmacy; state is unchanged."""


class InvalidTransitionError(BrokerError):
    """Operation not allowed from the request's current state."""


class RequestState(str, Enum):
    OPEN = "open"
    EXPANDING = "expanding"
    FULFILLED_FULL = "fulfilled_full"
    FULFILLED_PARTIAL = "fulfilled_partial"
    EXHAUSTED = "exhausted"
    CANCELLED = "cancelled"


TERMINAL_STATES = frozenset(
    {
        RequestState.FULFILLED_FULL,
        RequestState.FULFILLED_PARTIAL,
        RequestState.EXHAUSTED,
        RequestState.CANCELLED,
    }
)


class EventKind(str, Enum):
    OPENED = "opened"
    DISPATCHED = "dispatched"
    RESPONSE_RECORDED = "response_recorded"
    ROUND_EXPANDED = "round_expanded"
    STATE_CHANGED = "state_changed"
    CANCELLED = "cancelled"


@dataclass(frozen=True)
class RequestConfig:
    """Fanout policy knobs; defaults follow the product's reference setup.

    ``expand_past_partial`` controls what a round close does when only
    partial answers arrived: settle for the partial hit (default) or keep
    widening in search of a full one.
    """

    initial_radius_km: float = 5.0
    expansion_factor: float = 2.0
    max_radius_km: float = 50.0
    round_timeout_s: float = 600.0
    expand_past_partial: bool = False

    def __post_init__(self) -> None:
        if self.initial_radius_km <= 0:
            raise ValidationError("initial_radius_km must be positive")
        if self.max_radius_km < self.initial_radius_km:
            raise ValidationError("max_radius_km must be >= initial_radius_km")
        if self.expansion_factor <= 1.0:
            raise ValidationError("expansion_factor must be > 1")
        if self.round_timeout_s <= 0:
            raise ValidationError("round_timeout must be positive")

    def radius_for_round(self, round_no: int) -> float:
        """Radius after round-1 expansions: initial * factor^(round-1), capped."""
        return min(
            self.initial_radius_km * self.expansion_factor ** (round_no - 1),
            self.max_radius_km,
        )

    def to_dict(self) -> Dict[str, object]:
        return {
            "initial_radius_km": self.initial_radius_km,
            "expansion_factor": self.expansion_factor,
            "max_radius_km": self.max_radius_km,
            "round_timeout_s": self.round_timeout_s,
            "expand_past_partial": self.expand_past_partial,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "RequestConfig":
        return cls(**{k: data[k] for k in cls().to_dict() if k in data})  # type: ignore[arg-type]


@dataclass(frozen=True)
class AvailabilityRequest:
    id: str
    prescription_id: str
    patient_id: str
    origin: GeoPoint
    medicine_ids: FrozenSet[str]
    config: RequestConfig
    round: int = 1
    current_radius_km: float = 0.0
    state: RequestState = RequestState.OPEN
    enquired: FrozenSet[str] = frozenset()
    distances: Mapping[str, float] = field(default_factory=dict)
    responses: Mapping[str, PharmacyResponse] = field(default_factory=dict)
    round_deadline: Optional[float] = None

    @property
    def is_terminal(self) -> bool:
        return self.state in TERMINAL_STATES


@dataclass(frozen=True)
class Event:
    """One state-machine fact. ``dedup_key`` is unique within a request."""

    kind: EventKind
    payload: Dict[str, object]
    at: float
    dedup_key: str


@dataclass(frozen=True)
class Transition:
    """Result of one engine operation: the new state, the emitted events,
    and any pharmacies newly enquired by this transition."""

    request: AvailabilityRequest
    events: Tuple[Event, ...] = ()
    new_dispatches: Tuple[str, ...] = ()
    duplicate: bool = False


# ---------------------------------------------------------------------------
# Event fold


def apply_event(request: Optional[AvailabilityRequest], event: Event) -> AvailabilityRequest:
    """Fold one event into a request. This is the only state constructor;
    decisions live in the operations below, never here."""
    kind = event.kind
    p = event.payload
    if request is None:
        if kind is not EventKind.OPENED:
            raise InvalidTransitionError(f"first event must be 'opened', got {kind.value!r}")
        return AvailabilityRequest(
            id=str(p["request_id"]),
            prescription_id=str(p["prescription_id"]),
            patient_id=str(p["patient_id"]),
            origin=GeoPoint(float(p["origin"]["latitude"]), float(p["origin"]["longitude"])),  # type: ignore[index]
            medicine_ids=frozenset(p["medicine_ids"]),  # type: ignore[arg-type]
            config=RequestConfig.from_dict(p["config"]),  # type: ignore[arg-type]
            round=1,
            current_radius_km=RequestConfig.from_dict(p["config"]).initial_radius_km,  # type: ignore[arg-type]
            state=RequestState.OPEN,
        )

    if kind is EventKind.OPENED:
        raise InvalidTransitionError(f"request {request.id} already opened")

    if kind in (EventKind.DISPATCHED, EventKind.ROUND_EXPANDED):
        if request.is_terminal:
            raise InvalidTransitionError(f"cannot dispatch from terminal state {request.state.value}")
        targets = {str(k): float(v) for k, v in dict(p["targets"]).items()}  # type: ignore[arg-type]
        distances = dict(request.distances)
        distances.update(targets)
        return replace(
            request,
            round=int(p["round"]),  # type: ignore[arg-type]
            current_radius_km=float(p["radius_km"]),  # type: ignore[arg-type]
            enquired=request.enquired | frozenset(targets),
            distances=distances,
            round_deadline=float(p["deadline"]),  # type: ignore[arg-type]
            state=RequestState.OPEN if targets else RequestState.EXPANDING,
        )

    if kind is EventKind.RESPONSE_RECORDED:
        pharmacy_id = str(p["pharmacy_id"])
        if pharmacy_id not in request.enquired:
            raise InvalidTransitionError(
                f"response from {pharmacy_id!r}, which was never enquired"
            )
        if pharmacy_id in request.responses:
            # Duplicates never become events; a trace carrying one is corrupt.
            raise InvalidTransitionError(f"duplicate response event from {pharmacy_id!r}")
        response = PharmacyResponse(
            request_id=request.id,
            pharmacy_id=pharmacy_id,
            verdict=Verdict(str(p["verdict"])),
            available_medicine_ids=frozenset(p["available_medicine_ids"]),  # type: ignore[arg-type]
            responded_at=float(p["at"]),  # type: ignore[arg-type]
        )
        responses = dict(request.responses)
        responses[pharmacy_id] = response
        return replace(request, responses=responses)

    if kind is EventKind.STATE_CHANGED:
        if request.is_terminal:
            raise InvalidTransitionError(
                f"state change after terminal state {request.state.value}"
            )
        return replace(request, state=RequestState(str(p["to"])))

    if kind is EventKind.CANCELLED:
        if request.is_terminal:
            raise InvalidTransitionError(f"cancel after terminal state {request.state.value}")
        return replace(request, state=RequestState.CANCELLED)

    raise InvalidTransitionError(f"unknown event kind {kind!r}")


def _fold(request: Optional[AvailabilityRequest], events: List[Event]) -> AvailabilityRequest:
    for event in events:
        request = apply_event(request, event)
    assert request is not None
    return request


# ---------------------------------------------------------------------------
# Operations


def open_request(
    request_id: str,
    prescription: Prescription,
    origin: GeoPoint,
    config: RequestConfig,
    now: float,
    registry: RegistrySnapshot,
) -> Transition:
    """Open a request and dispatch round 1.

    If nobody is inside the initial radius the expansion rule runs
    immediately (possibly repeatedly) until a dispatch set exists or the
    radius cap proves the search hopeless.
    """
    if prescription.status is not PrescriptionStatus.SUBMITTED:
        raise ValidationError(
            f"prescription {prescription.id!r} is {prescription.status.value}, not submitted"
        )
    if not prescription.lines:
        raise ValidationError(f"prescription {prescription.id!r} has no lines")

    events: List[Event] = [
        Event(
            kind=EventKind.OPENED,
            payload={
                "request_id": request_id,
                "prescription_id": prescription.id,
                "patient_id": prescription.patient_id,
                "origin": {"latitude": origin.latitude, "longitude": origin.longitude},
                "medicine_ids": sorted(prescription.medicine_ids),
                "config": config.to_dict(),
            },
            at=now,
            dedup_key="opened",
        )
    ]
    request = _fold(None, events)

    # Distances are recorded at fixed 6-decimal (millimeter) precision so
    # event payloads survive JSON round-trips bit-identically.
    targets = {
        pharmacy.id: round(dist, 6)
        for pharmacy, dist in registry.within_radius(origin, config.initial_radius_km)
    }
    dispatch = Event(
        kind=EventKind.DISPATCHED,
        payload={
            "round": 1,
            "radius_km": config.initial_radius_km,
            "targets": targets,
            "deadline": now + config.round_timeout_s,
        },
        at=now,
        dedup_key="dispatched:1",
    )
    events.append(dispatch)
    request = apply_event(request, dispatch)
    new_dispatches = list(targets)

    if not targets:
        expansion, request = _expand_until_dispatch(request, now, registry)
        events.extend(expansion)
        for event in expansion:
            if event.kind is EventKind.ROUND_EXPANDED:
                new_dispatches.extend(event.payload["targets"])  # type: ignore[arg-type]

    return Transition(request=request, events=tuple(events), new_dispatches=tuple(new_dispatches))


def record_response(
    request: AvailabilityRequest,
    pharmacy_id: str,
    available: FrozenSet[str],
    now: float,
    registry: RegistrySnapshot,
) -> Transition:
    """Store one pharmacy's verdict and advance the state machine.

    First response per pharmacy wins; duplicates are flagged but change
    nothing. A full verdict terminates the request on the spot. When the
    last outstanding pharmacy answers and the best on record is a partial,
    the round closes early instead of waiting out the deadline. Responses
    landing after a terminal state are kept for audit only.
    """
    if pharmacy_id not in request.enquired:
        raise UnknownPharmacyError(
            f"pharmacy {pharmacy_id!r} was never enquired for request {request.id}"
        )
    if pharmacy_id in request.responses:
        return Transition(request=request, duplicate=True)

    verdict = classify_response(request.medicine_ids, frozenset(available))
    events: List[Event] = [
        Event(
            kind=EventKind.RESPONSE_RECORDED,
            payload={
                "pharmacy_id": pharmacy_id,
                "verdict": verdict.value,
                "available_medicine_ids": sorted(available),
                "at": now,
            },
            at=now,
            dedup_key=f"response:{pharmacy_id}",
        )
    ]
    updated = _fold(request, events)

    if request.is_terminal:
        # Audit-only storage; the terminal state absorbs everything else.
        return Transition(request=updated, events=tuple(events))

    if verdict is Verdict.FULL:
        change = _state_change(updated, RequestState.FULFILLED_FULL, now, reason="full_response")
        events.append(change)
        updated = apply_event(updated, change)
        return Transition(request=updated, events=tuple(events))

    all_answered = updated.enquired <= frozenset(updated.responses)
    any_partial = any(r.verdict is Verdict.PARTIAL for r in updated.responses.values())
    if all_answered and any_partial:
        close_events, updated, dispatches = _close_round(updated, now, registry)
        events.extend(close_events)
        return Transition(
            request=updated, events=tuple(events), new_dispatches=tuple(dispatches)
        )

    return Transition(request=updated, events=tuple(events))


def tick(
    request: AvailabilityRequest, now: float, registry: RegistrySnapshot
) -> Transition:
    """Drive the timeout policy: no-op before the round deadline, close the
    round at or past it. Ticking a terminal request is a no-op."""
    if request.is_terminal:
        return Transition(request=request)
    if request.round_deadline is None or now < request.round_deadline:
        return Transition(request=request)
    events, updated, dispatches = _close_round(request, now, registry)
    return Transition(request=updated, events=tuple(events), new_dispatches=tuple(dispatches))


def cancel(request: AvailabilityRequest, now: float) -> Transition:
    if request.is_terminal:
        raise InvalidTransitionError(
            f"request {request.id} is already {request.state.value}"
        )
    event = Event(
        kind=EventKind.CANCELLED,
        payload={"from": request.state.value},
        at=now,
        dedup_key="cancelled",
    )
    return Transition(request=apply_event(request, event), events=(event,))


@dataclass(frozen=True)
class BestPick:
    pharmacy_id: str
    verdict: Verdict
    distance_km: float
    available_count: int


def best_pharmacy(request: AvailabilityRequest) -> Optional[BestPick]:
    """Rank recorded responses: full beats partial, then more coverage,
    then shorter distance, then id. None if nothing useful arrived."""
    candidates = [r for r in request.responses.values() if r.verdict is not Verdict.NONE]
    if not candidates:
        return None
    verdict_rank = {Verdict.FULL: 0, Verdict.PARTIAL: 1}

    def key(r: PharmacyResponse):
        return (
            verdict_rank[r.verdict],
            -len(r.available_medicine_ids),
            request.distances.get(r.pharmacy_id, float("inf")),
            r.pharmacy_id,
        )

    best = min(candidates, key=key)
    return BestPick(
        pharmacy_id=best.pharmacy_id,
        verdict=best.verdict,
        distance_km=request.distances.get(best.pharmacy_id, float("inf")),
        available_count=len(best.available_medicine_ids),
    )


# ---------------------------------------------------------------------------
# Round-close policy


def _state_change(
    request: AvailabilityRequest, to: RequestState, now: float, reason: str
) -> Event:
    return Event(
        kind=EventKind.STATE_CHANGED,
        payload={"from": request.state.value, "to": to.value, "reason": reason},
        at=now,
        dedup_key=f"state:{to.value}",
    )


def _close_round(
    request: AvailabilityRequest, now: float, registry: RegistrySnapshot
) -> Tuple[List[Event], AvailabilityRequest, List[str]]:
    """Apply the end-of-round policy.

    With a partial in hand and the settle-early policy (default), the
    request becomes fulfilled_partial. Otherwise expand: bump the round,
    widen the radius, enquire only pharmacies not asked before. An empty
    dispatch set with nothing in hand retries the expansion immediately;
    at the cap the request settles for a recorded partial or exhausts.
    """
    partials = any(r.verdict is Verdict.PARTIAL for r in request.responses.values())
    events: List[Event] = []
    dispatches: List[str] = []

    if partials and not request.config.expand_past_partial:
        change = _state_change(request, RequestState.FULFILLED_PARTIAL, now, reason="partial_settled")
        return [change], apply_event(request, change), dispatches

    current = request
    while True:
        if current.current_radius_km >= current.config.max_radius_km - _RADIUS_EPS:
            final = (
                RequestState.FULFILLED_PARTIAL if partials else RequestState.EXHAUSTED
            )
            reason = "cap_reached_with_partial" if partials else "cap_reached"
            change = _state_change(current, final, now, reason=reason)
            events.append(change)
            current = apply_event(current, change)
            break
        new_round = current.round + 1
        new_radius = current.config.radius_for_round(new_round)
        targets = {
            pharmacy.id: round(dist, 6)
            for pharmacy, dist in registry.within_radius(current.origin, new_radius)
            if pharmacy.id not in current.enquired
        }
        expansion = Event(
            kind=EventKind.ROUND_EXPANDED,
            payload={
                "round": new_round,
                "radius_km": new_radius,
                "targets": targets,
                "deadline": now + current.config.round_timeout_s,
            },
            at=now,
            dedup_key=f"round:{new_round}",
        )
        events.append(expansion)
        current = apply_event(current, expansion)
        dispatches.extend(targets)
        if targets:
            break
        if partials:
            # Nobody new to ask this step, but a partial is banked; wait out
            # the fresh deadline rather than burning straight to the cap.
            break

    return events, current, dispatches


def _expand_until_dispatch(
    request: AvailabilityRequest, now: float, registry: RegistrySnapshot
) -> Tuple[List[Event], AvailabilityRequest]:
    """Round-1 came up empty at open time: reuse the round-close expansion
    (there are no responses yet, so it either finds targets or exhausts)."""
    events, updated, _ = _close_round(request, now, registry)
    return events, updated
