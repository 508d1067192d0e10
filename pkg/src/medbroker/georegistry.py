"""Pharmacy registry with radius and nearest-k queries.

The registry is the dispatch-target source for the request engine and the
data source for the map view. Mutations are serialized behind a lock and
bump a version counter; readers work against immutable snapshots, so a
query never observes a half-applied mutation.

Queries are linear scans. At the intended scale (hundreds of pharmacies)
correctness and determinism are the contract, not speed: results are
ordered by ascending distance with ties broken by pharmacy id.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Tuple, Union

from .domain import BrokerError, GeoPoint, Pharmacy, ValidationError, haversine_distance

# Pharmacy seed file column order (CSV with header).
SEED_FIELDS = ("id", "name", "latitude", "longitude", "contact", "registered")


class RegistrationConflictError(BrokerError):
    """Re-registration of an existing id with different fields."""


@dataclass(frozen=True)
class RegistrySnapshot:
    """An immutable view of the registry at one version."""

    pharmacies: Dict[str, Pharmacy]
    version: int

    def get(self, pharmacy_id: str) -> Pharmacy | None:
        return self.pharmacies.get(pharmacy_id)

    def within_radius(
        self, origin: GeoPoint, radius_km: float
    ) -> List[Tuple[Pharmacy, float]]:
        """Registered pharmacies within ``radius_km`` (inclusive), nearest first."""
        if radius_km <= 0:
            raise ValidationError(f"radius_km must be > 0, got {radius_km}")
        hits = []
        for pharmacy in self.pharmacies.values():
            if not pharmacy.registered:
                continue
            d = haversine_distance(origin, pharmacy.location)
            if d <= radius_km:
                hits.append((pharmacy, d))
        hits.sort(key=lambda pair: (pair[1], pair[0].id))
        return hits

    def nearest(self, origin: GeoPoint, k: int) -> List[Tuple[Pharmacy, float]]:
        """The ``k`` closest registered pharmacies, same ordering rule as within_radius."""
        if k < 1:
            raise ValidationError(f"k must be >= 1, got {k}")
        ranked = sorted(
            (
                (pharmacy, haversine_distance(origin, pharmacy.location))
                for pharmacy in self.pharmacies.values()
                if pharmacy.registered
            ),
            key=lambda pair: (pair[1], pair[0].id),
        )
        return ranked[:k]


class PharmacyRegistry:
    """Mutable registry; many concurrent readers, serialized writers."""

    def __init__(self, pharmacies: Iterable[Pharmacy] = ()) -> None:
        self._lock = threading.Lock()
        self._snapshot = RegistrySnapshot(pharmacies={}, version=0)
        for pharmacy in pharmacies:
            self.register(pharmacy)

    def snapshot(self) -> RegistrySnapshot:
        return self._snapshot

    @property
    def version(self) -> int:
        return self._snapshot.version

    def register(self, pharmacy: Pharmacy) -> RegistrySnapshot:
        """Insert a pharmacy. Identical re-registration is an idempotent no-op."""
        with self._lock:
            current = self._snapshot
            existing = current.pharmacies.get(pharmacy.id)
            if existing is not None:
                if existing == pharmacy:
                    return current
                raise RegistrationConflictError(
                    f"pharmacy {pharmacy.id!r} already registered with different fields"
                )
            pharmacies = dict(current.pharmacies)
            pharmacies[pharmacy.id] = pharmacy
            self._snapshot = RegistrySnapshot(
                pharmacies=pharmacies, version=current.version + 1
            )
            return self._snapshot

    # Convenience pass-throughs that read one consistent snapshot.
    def within_radius(self, origin: GeoPoint, radius_km: float) -> List[Tuple[Pharmacy, float]]:
        return self.snapshot().within_radius(origin, radius_km)

    def nearest(self, origin: GeoPoint, k: int) -> List[Tuple[Pharmacy, float]]:
        return self.snapshot().nearest(origin, k)


def parse_seed_row(row: Dict[str, str], where: str) -> Pharmacy:
    try:
        lat = float(row["latitude"])
        lon = float(row["longitude"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: bad coordinates ({exc})") from exc
    registered_raw = (row.get("registered") or "true").strip().lower()
    if registered_raw not in ("true", "false", "1", "0", "yes", "no"):
        raise ValidationError(f"{where}: registered must be boolean-like, got {registered_raw!r}")
    try:
        return Pharmacy(
            id=row["id"].strip(),
            name=row["name"].strip(),
            location=GeoPoint(lat, lon),
            contact=(row.get("contact") or "").strip(),
            registered=registered_raw in ("true", "1", "yes"),
        )
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def load_pharmacy_seed(path: Union[str, Path]) -> List[Pharmacy]:
    """Load the pharmacy seed file (CSV: id,name,latitude,longitude,contact,registered)."""
    pharmacies: List[Pharmacy] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            pharmacy = parse_seed_row(row, where)
            if pharmacy.id in seen:
                raise ValidationError(f"{where}: duplicate pharmacy id {pharmacy.id!r}")
            seen.add(pharmacy.id)
            pharmacies.append(pharmacy)
    return pharmacies


def write_pharmacy_seed(path: Union[str, Path], pharmacies: Iterable[Pharmacy]) -> int:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SEED_FIELDS)
        count = 0
        for p in pharmacies:
            writer.writerow(
                [p.id, p.name, p.location.latitude, p.location.longitude, p.contact,
                 "true" if p.registered else "false"]
            )
            count += 1
    return count
