"""Shared entity types, geodesic distance, and response classification.

Everything here is an immutable value object or a pure function, so the
types can be shared freely between threads and serialized without
surprises. Coordinate validation happens at construction time; downstream
code never re-checks ranges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import FrozenSet, Tuple

EARTH_RADIUS_KM = 6371.0


class BrokerError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(BrokerError):
    """A value violates a domain invariant."""


class ResponseMismatchError(ValidationError):
    """A pharmacy response references medicines outside the request."""


class Verdict(str, Enum):
    FULL = "full"
    PARTIAL = "partial"
    NONE = "none"


class PrescriptionStatus(str, Enum):
    DRAFT = "draft"
    SUBMITTED = "submitted"
    CANCELLED = "cancelled"


@dataclass(frozen=True)
class GeoPoint:
    """A WGS-ish latitude/longitude pair on the reference sphere."""

    latitude: float
    longitude: float

    def __post_init__(self) -> None:
        if not (-90.0 <= self.latitude <= 90.0):
            raise ValidationError(f"latitude {self.latitude} outside [-90, 90]")
        if not (-180.0 <= self.longitude <= 180.0):
            raise ValidationError(f"longitude {self.longitude} outside [-180, 180]")


@dataclass(frozen=True)
class Medicine:
    id: str
    name: str
    dosage: str = ""
    package: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            raise ValidationError("medicine id must be non-empty")
        if not self.name:
            raise ValidationError(f"medicine {self.id!r}: name must be non-empty")


@dataclass(frozen=True)
class PrescriptionLine:
    medicine_id: str
    quantity: int

    def __post_init__(self) -> None:
        if self.quantity < 1:
            raise ValidationError(
                f"line for {self.medicine_id!r}: quantity must be >= 1, got {self.quantity}"
            )


@dataclass(frozen=True)
class Prescription:
    id: str
    patient_id: str
    lines: Tuple[PrescriptionLine, ...]
    status: PrescriptionStatus = PrescriptionStatus.DRAFT

    def __post_init__(self) -> None:
        object.__setattr__(self, "lines", tuple(self.lines))
        seen = set()
        for line in self.lines:
            if line.medicine_id in seen:
                raise ValidationError(
                    f"prescription {self.id!r}: duplicate medicine {line.medicine_id!r}"
                )
            seen.add(line.medicine_id)
        if self.status is PrescriptionStatus.SUBMITTED and not self.lines:
            raise ValidationError(f"prescription {self.id!r}: submitted with no lines")

    @property
    def medicine_ids(self) -> FrozenSet[str]:
        return frozenset(line.medicine_id for line in self.lines)


@dataclass(frozen=True)
class Pharmacy:
    id: str
    name: str
    location: GeoPoint
    contact: str = ""
    registered: bool = True


@dataclass(frozen=True)
class PharmacyResponse:
    """A pharmacist's verdict for one availability request.

    The verdict is always derived from the available set against the
    request's medicine set (see :func:`classify_response`), so the three
    invariants -- full means everything, none means nothing, partial means
    a proper non-empty subset -- hold by construction.
    """

    request_id: str
    pharmacy_id: str
    verdict: Verdict
    available_medicine_ids: FrozenSet[str] = field(default_factory=frozenset)
    responded_at: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "available_medicine_ids", frozenset(self.available_medicine_ids)
        )


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in kilometers on a sphere of radius 6371 km."""
    lat1 = math.radians(a.latitude)
    lat2 = math.radians(b.latitude)
    dlat = math.radians(b.latitude - a.latitude)
    dlon = math.radians(b.longitude - a.longitude)
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def classify_response(request_medicines: FrozenSet[str], available: FrozenSet[str]) -> Verdict:
    """Classify an availability answer as full / partial / none.

    Raises ResponseMismatchError when ``available`` names a medicine the
    request never asked about (a corrupted or mismatched response).
    """
    request_medicines = frozenset(request_medicines)
    available = frozenset(available)
    stray = available - request_medicines
    if stray:
        raise ResponseMismatchError(
            f"available medicines {sorted(stray)} are not part of the request"
        )
    if available == request_medicines:
        return Verdict.FULL
    if not available:
        return Verdict.NONE
    return Verdict.PARTIAL


def build_response(
    request_id: str,
    pharmacy_id: str,
    request_medicines: FrozenSet[str],
    available: FrozenSet[str],
    responded_at: float,
) -> PharmacyResponse:
    """Construct a response whose verdict matches its available set."""
    verdict = classify_response(frozenset(request_medicines), frozenset(available))
    return PharmacyResponse(
        request_id=request_id,
        pharmacy_id=pharmacy_id,
        verdict=verdict,
        available_medicine_ids=frozenset(available),
        responded_at=responded_at,
    )
