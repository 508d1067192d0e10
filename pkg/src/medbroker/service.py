"""Application service: the one place where engine transitions, the event
log, and notifications are tied together.

Every state change of a request follows the same path: take that
request's lock, run the pure engine operation, append the emitted events
to the store (log is truth), swap the in-memory head, then emit
notifications derived from the events. Distinct requests progress
independently; the clock driver and response ingestion serialize per
request through the same locks.

Ids are drawn from dense per-kind counters (``rx-``/``req-``/``ntf-``),
which -- together with the injected clock -- makes whole API traces
deterministic and reproducible.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from . import engine
from .catalog import Catalog
from .clock import VirtualClock, WallClock, render_timestamp
from .domain import (
    BrokerError,
    GeoPoint,
    Prescription,
    PrescriptionLine,
    PrescriptionStatus,
    ValidationError,
    Verdict,
)
from .engine import (
    AvailabilityRequest,
    EventKind,
    RequestConfig,
    RequestState,
    Transition,
)
from .georegistry import PharmacyRegistry
from .notifier import Notifier, ResponseEvent, StateChangeEvent
from .store import NotFoundError, Store


class AuthError(BrokerError):
    pass


class ForbiddenError(BrokerError):
    pass


class ConflictError(BrokerError):
    pass


@dataclass(frozen=True)
class Principal:
    id: str
    role: str  # "patient" | "pharmacist"


def load_token_table(path: Union[str, Path]) -> Dict[str, Principal]:
    """Token table CSV: token,principal,role."""
    table: Dict[str, Principal] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            role = (row.get("role") or "").strip()
            if role not in ("patient", "pharmacist"):
                raise ValidationError(f"{path}:{lineno}: role must be patient or pharmacist")
            table[row["token"].strip()] = Principal(id=row["principal"].strip(), role=role)
    return table


class BrokerService:
    def __init__(
        self,
        registry: PharmacyRegistry,
        catalog: Catalog,
        store: Store,
        clock: Union[VirtualClock, WallClock],
        tokens: Optional[Dict[str, Principal]] = None,
    ):
        self.registry = registry
        self.catalog = catalog
        self.store = store
        self.clock = clock
        self.tokens = dict(tokens or {})
        self.notifier = Notifier(store)

        self._creation_lock = threading.Lock()
        self._request_locks: Dict[str, threading.Lock] = {}
        self._rx_counter = store.max_counter("rx-")
        self._req_counter = store.max_counter("req-")

        self._prescriptions: Dict[str, Prescription] = {}
        for record in store.load_entities("prescriptions"):
            prescription = _prescription_from_record(record)
            self._prescriptions[prescription.id] = prescription

        # The log is the truth: rebuild every request head on startup.
        self._requests: Dict[str, AvailabilityRequest] = {}
        for request_id in store.request_ids():
            self._requests[request_id] = store.replay(request_id)

    # -- auth ---------------------------------------------------------------

    def authenticate(self, token: Optional[str]) -> Principal:
        if not token or token not in self.tokens:
            raise AuthError("invalid or missing bearer token")
        return self.tokens[token]

    # -- prescriptions ------------------------------------------------------

    def submit_prescription(self, patient_id: str, lines: List[Dict[str, object]]) -> Prescription:
        if not lines:
            raise ValidationError("a prescription needs at least one line")
        parsed: List[PrescriptionLine] = []
        for raw in lines:
            medicine_id = str(raw.get("medicine_id", ""))
            if medicine_id not in self.catalog:
                raise ValidationError(f"unknown medicine id {medicine_id!r}")
            try:
                quantity = int(raw.get("quantity", 0))
            except (TypeError, ValueError):
                raise ValidationError(f"line for {medicine_id!r}: quantity must be an integer")
            parsed.append(PrescriptionLine(medicine_id=medicine_id, quantity=quantity))
        with self._creation_lock:
            self._rx_counter += 1
            prescription = Prescription(
                id=f"rx-{self._rx_counter:06d}",
                patient_id=patient_id,
                lines=tuple(parsed),
                status=PrescriptionStatus.SUBMITTED,
            )
            self._prescriptions[prescription.id] = prescription
            self.store.save_entities("prescriptions", [_prescription_to_record(prescription)])
        return prescription

    def get_prescription(self, prescription_id: str) -> Prescription:
        prescription = self._prescriptions.get(prescription_id)
        if prescription is None:
            raise NotFoundError(f"prescription {prescription_id!r} not found")
        return prescription

    # -- availability requests ----------------------------------------------

    def open_availability_request(
        self,
        patient_id: str,
        prescription_id: str,
        origin: GeoPoint,
        overrides: Optional[Dict[str, object]] = None,
    ) -> AvailabilityRequest:
        prescription = self.get_prescription(prescription_id)
        if prescription.patient_id != patient_id:
            raise NotFoundError(f"prescription {prescription_id!r} not found")
        for existing in self._requests.values():
            if existing.prescription_id == prescription_id and not existing.is_terminal:
                raise ConflictError(
                    f"prescription {prescription_id!r} already has open request {existing.id}"
                )
        config = _parse_config_overrides(overrides or {})
        with self._creation_lock:
            self._req_counter += 1
            request_id = f"req-{self._req_counter:06d}"
            self._request_locks[request_id] = threading.Lock()
        with self._request_locks[request_id]:
            transition = engine.open_request(
                request_id=request_id,
                prescription=prescription,
                origin=origin,
                config=config,
                now=self.clock.now(),
                registry=self.registry.snapshot(),
            )
            self._commit(transition)
        return transition.request

    def get_request(self, request_id: str) -> AvailabilityRequest:
        request = self._requests.get(request_id)
        if request is None:
            raise NotFoundError(f"request {request_id!r} not found")
        return request

    def record_response(
        self, pharmacy_id: str, request_id: str, body: Dict[str, object]
    ) -> Tuple[AvailabilityRequest, Verdict]:
        request = self.get_request(request_id)
        if pharmacy_id not in request.enquired:
            # Indistinguishable from an unknown request for this pharmacy.
            raise NotFoundError(f"request {request_id!r} not found for pharmacy {pharmacy_id!r}")
        available = _parse_response_body(body, request)
        with self._lock_for(request_id):
            request = self.get_request(request_id)
            transition = engine.record_response(
                request=request,
                pharmacy_id=pharmacy_id,
                available=available,
                now=self.clock.now(),
                registry=self.registry.snapshot(),
            )
            if transition.duplicate:
                raise ConflictError(
                    f"pharmacy {pharmacy_id!r} already responded to {request_id!r}"
                )
            self._commit(transition)
            verdict = transition.request.responses[pharmacy_id].verdict
        return transition.request, verdict

    def cancel_request(self, patient_id: str, request_id: str) -> AvailabilityRequest:
        request = self.get_request(request_id)
        if request.patient_id != patient_id:
            raise NotFoundError(f"request {request_id!r} not found")
        with self._lock_for(request_id):
            request = self.get_request(request_id)
            if request.is_terminal:
                raise ConflictError(f"request {request_id!r} is already {request.state.value}")
            transition = engine.cancel(request, now=self.clock.now())
            self._commit(transition)
        return transition.request

    def tick_all(self) -> int:
        """Run the timeout policy over every live request; returns how many
        requests transitioned."""
        moved = 0
        now = self.clock.now()
        for request_id in list(self._requests):
            with self._lock_for(request_id):
                request = self._requests[request_id]
                if request.is_terminal:
                    continue
                transition = engine.tick(request, now=now, registry=self.registry.snapshot())
                if transition.events:
                    self._commit(transition)
                    moved += 1
        return moved

    def advance_clock(self, seconds: float) -> float:
        if not isinstance(self.clock, VirtualClock):
            raise ConflictError("virtual clock is not enabled on this server")
        now = self.clock.advance(seconds)
        self.tick_all()
        return now

    # -- read models ----------------------------------------------------------

    def pharmacy_inbox(self, pharmacy_id: str) -> List[AvailabilityRequest]:
        """Open requests this pharmacy was enquired for and has not answered."""
        out = [
            request
            for request in self._requests.values()
            if pharmacy_id in request.enquired
            and pharmacy_id not in request.responses
            and not request.is_terminal
        ]
        out.sort(key=lambda r: r.id)
        return out

    def request_view(self, request: AvailabilityRequest) -> Dict[str, object]:
        registry = self.registry.snapshot()
        enquired = []
        for pharmacy_id in sorted(
            request.enquired, key=lambda pid: (request.distances.get(pid, 0.0), pid)
        ):
            pharmacy = registry.get(pharmacy_id)
            response = request.responses.get(pharmacy_id)
            enquired.append(
                {
                    "pharmacy_id": pharmacy_id,
                    "name": pharmacy.name if pharmacy else pharmacy_id,
                    "distance_km": round(request.distances.get(pharmacy_id, 0.0), 3),
                    "response_status": "responded" if response else "no_response_yet",
                    "verdict": response.verdict.value if response else None,
                    "available_medicine_ids": sorted(response.available_medicine_ids)
                    if response
                    else [],
                }
            )
        best = engine.best_pharmacy(request)
        best_view = None
        if best is not None:
            pharmacy = registry.get(best.pharmacy_id)
            best_view = {
                "pharmacy_id": best.pharmacy_id,
                "name": pharmacy.name if pharmacy else best.pharmacy_id,
                "verdict": best.verdict.value,
                "distance_km": round(best.distance_km, 3),
                "available_count": best.available_count,
            }
        return {
            "request_id": request.id,
            "prescription_id": request.prescription_id,
            "state": request.state.value,
            "round": request.round,
            "radius_km": request.current_radius_km,
            "origin": {"latitude": request.origin.latitude, "longitude": request.origin.longitude},
            "medicine_ids": sorted(request.medicine_ids),
            "round_deadline": render_timestamp(request.round_deadline)
            if request.round_deadline is not None and not request.is_terminal
            else None,
            "enquired": enquired,
            "best_pharmacy": best_view,
        }

    def inbox_view(self, pharmacy_id: str) -> List[Dict[str, object]]:
        out = []
        for request in self.pharmacy_inbox(pharmacy_id):
            prescription = self._prescriptions.get(request.prescription_id)
            lines = []
            if prescription:
                for line in prescription.lines:
                    medicine = self.catalog.get(line.medicine_id)
                    lines.append(
                        {
                            "medicine_id": line.medicine_id,
                            "name": medicine.name if medicine else line.medicine_id,
                            "quantity": line.quantity,
                        }
                    )
            out.append(
                {
                    "request_id": request.id,
                    "round": request.round,
                    "radius_km": request.current_radius_km,
                    "distance_km": round(request.distances.get(pharmacy_id, 0.0), 3),
                    "lines": lines,
                }
            )
        return out

    # -- internals ------------------------------------------------------------

    def _lock_for(self, request_id: str) -> threading.Lock:
        with self._creation_lock:
            lock = self._request_locks.get(request_id)
            if lock is None:
                lock = threading.Lock()
                self._request_locks[request_id] = lock
            return lock

    def _commit(self, transition: Transition) -> None:
        """Append the transition's events, swap the head, emit notifications."""
        request = transition.request
        for event in transition.events:
            self.store.append(request.id, event)
        self._requests[request.id] = request
        self._notify(request, transition)

    def _notify(self, request: AvailabilityRequest, transition: Transition) -> None:
        owner = request.patient_id
        now = self.clock.now()
        for event in transition.events:
            if event.kind is EventKind.RESPONSE_RECORDED:
                self.notifier.emit(
                    ResponseEvent(
                        request_id=request.id,
                        pharmacy_id=str(event.payload["pharmacy_id"]),
                        verdict=Verdict(str(event.payload["verdict"])),
                        available_medicine_ids=tuple(event.payload["available_medicine_ids"]),  # type: ignore[arg-type]
                    ),
                    owner_id=owner,
                    now=now,
                )
            elif event.kind is EventKind.STATE_CHANGED:
                self.notifier.emit(
                    StateChangeEvent(
                        request_id=request.id,
                        state=str(event.payload["to"]),
                        round=request.round,
                        radius_km=request.current_radius_km,
                    ),
                    owner_id=owner,
                    now=now,
                )
            elif event.kind is EventKind.CANCELLED:
                self.notifier.emit(
                    StateChangeEvent(
                        request_id=request.id,
                        state=RequestState.CANCELLED.value,
                        round=request.round,
                        radius_km=request.current_radius_km,
                    ),
                    owner_id=owner,
                    now=now,
                )
            # Round expansions stay silent: the tracker view carries the new
            # round, and an empty world must end with exactly one
            # state-change notification (exhausted).


def _parse_config_overrides(overrides: Dict[str, object]) -> RequestConfig:
    defaults = RequestConfig()
    allowed = defaults.to_dict()
    unknown = set(overrides) - set(allowed)
    if unknown:
        raise ValidationError(f"unknown config override(s): {sorted(unknown)}")
    kwargs: Dict[str, object] = {}
    for key, value in overrides.items():
        try:
            kwargs[key] = bool(value) if key == "expand_past_partial" else float(value)  # type: ignore[arg-type]
        except (TypeError, ValueError):
            raise ValidationError(f"config override {key!r} must be numeric, got {value!r}")
    return RequestConfig(**kwargs)  # type: ignore[arg-type]


def _parse_response_body(body: Dict[str, object], request: AvailabilityRequest) -> frozenset:
    """Translate the three wire forms (full / none / checkbox list) into an
    available-medicines set; classification happens in the engine."""
    verdict = body.get("verdict")
    ids = body.get("available_medicine_ids")
    if verdict is not None and ids is not None:
        raise ValidationError("send either a verdict shortcut or a checkbox list, not both")
    if verdict == "full":
        return frozenset(request.medicine_ids)
    if verdict == "none":
        return frozenset()
    if verdict is not None:
        raise ValidationError(f"verdict shortcut must be 'full' or 'none', got {verdict!r}")
    if ids is None:
        raise ValidationError("body needs 'verdict' or 'available_medicine_ids'")
    if not isinstance(ids, list):
        raise ValidationError("available_medicine_ids must be a list")
    return frozenset(str(i) for i in ids)


def _prescription_to_record(prescription: Prescription) -> Dict[str, object]:
    return {
        "id": prescription.id,
        "patient_id": prescription.patient_id,
        "status": prescription.status.value,
        "lines": [
            {"medicine_id": line.medicine_id, "quantity": line.quantity}
            for line in prescription.lines
        ],
    }


def _prescription_from_record(record: Dict[str, object]) -> Prescription:
    return Prescription(
        id=str(record["id"]),
        patient_id=str(record["patient_id"]),
        status=PrescriptionStatus(str(record["status"])),
        lines=tuple(
            PrescriptionLine(medicine_id=str(line["medicine_id"]), quantity=int(line["quantity"]))  # type: ignore[index]
            for line in record["lines"]  # type: ignore[union-attr]
        ),
    )
