"""HTTP/JSON surface for patients and pharmacists.

Field naming is lower_snake_case throughout; timestamps are RFC 3339 UTC
strings. Auth is a static bearer-token table mapping tokens to a
principal and a role; pharmacist endpoints reject patient tokens and vice
versa. The notification stream is server-sent events with an id per
event, a heartbeat comment while idle, and inbox replay on reconnect
(``last_id`` query parameter or ``Last-Event-ID`` header).
"""

from __future__ import annotations

import json
import queue
from typing import Dict, List, Optional

from fastapi import Body, Depends, FastAPI, Header, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, StreamingResponse

from .clock import render_timestamp
from .domain import GeoPoint, ValidationError
from .service import (
    AuthError,
    BrokerService,
    ConflictError,
    ForbiddenError,
    Principal,
)
from .store import NotFoundError

DEFAULT_NEARBY_RADIUS_KM = 5.0
DEFAULT_AUTOCOMPLETE_LIMIT = 10


def create_app(
    service: BrokerService,
    heartbeat_seconds: float = 15.0,
) -> FastAPI:
    app = FastAPI(title="medbroker", docs_url=None, redoc_url=None)
    app.state.service = service
    app.state.heartbeat_seconds = heartbeat_seconds

    # -- error mapping -----------------------------------------------------

    @app.exception_handler(RequestValidationError)
    async def _unparseable(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": str(exc.errors()[:1])})

    @app.exception_handler(ValidationError)
    async def _invalid(request: Request, exc: ValidationError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(AuthError)
    async def _unauthorized(request: Request, exc: AuthError):
        return JSONResponse(status_code=401, content={"detail": str(exc)})

    @app.exception_handler(ForbiddenError)
    async def _forbidden(request: Request, exc: ForbiddenError):
        return JSONResponse(status_code=403, content={"detail": str(exc)})

    @app.exception_handler(NotFoundError)
    async def _missing(request: Request, exc: NotFoundError):
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.exception_handler(ConflictError)
    async def _conflict(request: Request, exc: ConflictError):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    # -- auth ----------------------------------------------------------------

    def principal(authorization: Optional[str] = Header(None)) -> Principal:
        if not authorization or not authorization.startswith("Bearer "):
            raise AuthError("missing bearer token")
        return service.authenticate(authorization.removeprefix("Bearer ").strip())

    def patient(p: Principal = Depends(principal)) -> Principal:
        if p.role != "patient":
            raise ForbiddenError("patient role required")
        return p

    def pharmacist(p: Principal = Depends(principal)) -> Principal:
        if p.role != "pharmacist":
            raise ForbiddenError("pharmacist role required")
        return p

    # -- patient endpoints -----------------------------------------------------

    @app.post("/prescriptions", status_code=201)
    def submit_prescription(
        payload: Dict = Body(...), p: Principal = Depends(patient)
    ):
        lines = payload.get("lines")
        if not isinstance(lines, list) or not lines:
            raise ValidationError("body must carry a non-empty 'lines' list")
        prescription = service.submit_prescription(p.id, lines)
        return {"id": prescription.id, "status": prescription.status.value}

    @app.post("/prescriptions/{prescription_id}/availability", status_code=202)
    def request_availability(
        prescription_id: str,
        payload: Dict = Body(...),
        p: Principal = Depends(patient),
    ):
        origin = _parse_point(payload.get("lat"), payload.get("lon"))
        overrides = payload.get("config") or {}
        if not isinstance(overrides, dict):
            raise ValidationError("'config' must be an object")
        request = service.open_availability_request(p.id, prescription_id, origin, overrides)
        view = service.request_view(request)
        return {
            "request_id": view["request_id"],
            "state": view["state"],
            "round": view["round"],
            "radius_km": view["radius_km"],
            "enquired": view["enquired"],
        }

    @app.get("/requests/{request_id}")
    def get_request(request_id: str, p: Principal = Depends(patient)):
        request = service.get_request(request_id)
        if request.patient_id != p.id:
            raise ForbiddenError(f"request {request_id!r} belongs to another patient")
        return service.request_view(request)

    @app.post("/requests/{request_id}/cancel")
    def cancel_request(request_id: str, p: Principal = Depends(patient)):
        request = service.cancel_request(p.id, request_id)
        return service.request_view(request)

    @app.get("/pharmacies/nearby")
    def pharmacies_nearby(
        lat: str = Query(...),
        lon: str = Query(...),
        radius_km: Optional[str] = Query(None),
        p: Principal = Depends(principal),
    ):
        origin = _parse_point(lat, lon)
        radius = _parse_float(radius_km, "radius_km") if radius_km is not None else DEFAULT_NEARBY_RADIUS_KM
        if radius <= 0:
            raise ValidationError(f"radius_km must be > 0, got {radius}")
        hits = service.registry.within_radius(origin, radius)
        return [
            {
                "pharmacy": {
                    "id": pharmacy.id,
                    "name": pharmacy.name,
                    "latitude": pharmacy.location.latitude,
                    "longitude": pharmacy.location.longitude,
                    "contact": pharmacy.contact,
                },
                "distance_km": round(distance, 3),
            }
            for pharmacy, distance in hits
        ]

    @app.get("/medicines/autocomplete")
    def autocomplete(
        q: str = Query(""),
        limit: Optional[str] = Query(None),
        p: Principal = Depends(principal),
    ):
        parsed_limit = (
            int(_parse_float(limit, "limit")) if limit is not None else DEFAULT_AUTOCOMPLETE_LIMIT
        )
        if parsed_limit < 1:
            raise ValidationError(f"limit must be >= 1, got {parsed_limit}")
        return [
            {"id": m.id, "name": m.name, "dosage": m.dosage, "package": m.package}
            for m in service.catalog.autocomplete(q, parsed_limit)
        ]

    # -- pharmacist endpoints ---------------------------------------------------

    @app.get("/pharmacy/inbox")
    def pharmacy_inbox(p: Principal = Depends(pharmacist)):
        return service.inbox_view(p.id)

    @app.post("/pharmacy/requests/{request_id}/response")
    def respond(
        request_id: str,
        payload: Dict = Body(...),
        p: Principal = Depends(pharmacist),
    ):
        request, verdict = service.record_response(p.id, request_id, payload)
        return {
            "request_id": request.id,
            "pharmacy_id": p.id,
            "verdict": verdict.value,
            "state": request.state.value,
        }

    # -- notifications -----------------------------------------------------------

    @app.get("/notifications")
    def notifications(
        unread_only: bool = Query(False), p: Principal = Depends(principal)
    ):
        return [
            _notification_view(n)
            for n in service.notifier.list_notifications(p.id, unread_only=unread_only)
        ]

    @app.post("/notifications/mark-read")
    def mark_read(payload: Dict = Body(...), p: Principal = Depends(principal)):
        ids = payload.get("ids")
        if not isinstance(ids, list):
            raise ValidationError("body must carry an 'ids' list")
        return {"updated": service.notifier.mark_read(p.id, [str(i) for i in ids])}

    @app.get("/notifications/stream")
    def notification_stream(
        request: Request,
        last_id: Optional[str] = Query(None),
        last_event_id: Optional[str] = Header(None),
        p: Principal = Depends(principal),
    ):
        resume_from = last_id or last_event_id

        def event_source():
            subscription = service.notifier.subscribe(p.id)
            try:
                seen = set()
                for item in service.notifier.missed_since(p.id, resume_from):
                    seen.add(item["id"])
                    yield _sse_event(item)
                while True:
                    try:
                        item = subscription.events.get(timeout=app.state.heartbeat_seconds)
                    except queue.Empty:
                        yield ": heartbeat\n\n"
                        continue
                    if item["id"] in seen:
                        continue
                    seen.add(item["id"])
                    yield _sse_event(item)
            finally:
                service.notifier.unsubscribe(subscription)

        return StreamingResponse(event_source(), media_type="text/event-stream")

    # -- admin / test facilities ---------------------------------------------------

    @app.post("/admin/advance-clock")
    def advance_clock(payload: Dict = Body(...)):
        seconds = _parse_float(payload.get("seconds"), "seconds")
        if seconds < 0:
            raise ValidationError("seconds must be >= 0")
        now = service.advance_clock(seconds)
        return {"now": render_timestamp(now)}

    @app.get("/admin/requests/{request_id}/events")
    def request_events(request_id: str):
        stored = service.store.events(request_id)
        if not stored:
            raise NotFoundError(f"no events for request {request_id!r}")
        return [
            {
                "sequence": item.sequence,
                "kind": item.event.kind.value,
                "at": render_timestamp(item.event.at),
                "payload": item.event.payload,
            }
            for item in stored
        ]

    @app.get("/admin/requests/{request_id}/replay")
    def request_replay(request_id: str):
        return service.request_view(service.store.replay(request_id))

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "now": render_timestamp(service.clock.now()),
            "pharmacies": len(service.registry.snapshot().pharmacies),
            "medicines": len(service.catalog),
        }

    return app


def _parse_float(value: object, name: str) -> float:
    try:
        return float(value)  # type: ignore[arg-type]
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be a number, got {value!r}")


def _parse_point(lat: object, lon: object) -> GeoPoint:
    return GeoPoint(_parse_float(lat, "lat"), _parse_float(lon, "lon"))


def _notification_view(n: Dict[str, object]) -> Dict[str, object]:
    return {
        "id": n["id"],
        "kind": n["kind"],
        "request_id": n["request_id"],
        "payload": n["payload"],
        "created_at": render_timestamp(float(n["created_at"])),  # type: ignore[arg-type]
        "read": n["read"],
    }


def _sse_event(notification: Dict[str, object]) -> str:
    body = json.dumps(_notification_view(notification), sort_keys=True)
    return f"id: {notification['id']}\nevent: notification\ndata: {body}\n\n"
