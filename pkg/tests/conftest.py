from __future__ import annotations

import contextlib
import threading
import time

import pytest
import uvicorn

from medbroker.catalog import Catalog
from medbroker.clock import VirtualClock
from medbroker.domain import GeoPoint, Medicine, Pharmacy
from medbroker.georegistry import PharmacyRegistry
from medbroker.service import BrokerService, Principal
from medbroker.store import Store

# Flat test geometry: pharmacies straight north of the origin at known
# kilometer marks (1 deg latitude = 111.19492664 km on the 6371 sphere).
ORIGIN = GeoPoint(41.15, -8.61)
KM_PER_DEG = 111.19492664455873


def pharmacy_at(pharmacy_id: str, km_north: float, registered: bool = True) -> Pharmacy:
    return Pharmacy(
        id=pharmacy_id,
        name=f"Pharmacy {pharmacy_id}",
        location=GeoPoint(ORIGIN.latitude + km_north / KM_PER_DEG, ORIGIN.longitude),
        contact=f"+351 220 {pharmacy_id}",
        registered=registered,
    )


MEDICINES = [
    Medicine(id="M1", name="Paracetamol 500mg", dosage="500 mg", package="20 tablets"),
    Medicine(id="M2", name="Ibuprofen 400mg", dosage="400 mg", package="30 tablets"),
    Medicine(id="M3", name="Amoxicillin 875mg", dosage="875 mg", package="14 tablets"),
    Medicine(id="M4", name="Ben-u-ron 1000mg", dosage="1000 mg", package="18 tablets"),
]

TOKENS = {
    "tok-alice": Principal(id="alice", role="patient"),
    "tok-bob": Principal(id="bob", role="patient"),
    "tok-p1": Principal(id="P1", role="pharmacist"),
    "tok-p2": Principal(id="P2", role="pharmacist"),
    "tok-p3": Principal(id="P3", role="pharmacist"),
}


@pytest.fixture
def registry() -> PharmacyRegistry:
    return PharmacyRegistry(
        [
            pharmacy_at("P1", 1.0),
            pharmacy_at("P2", 3.0),
            pharmacy_at("P3", 7.0),
            pharmacy_at("P4", 9.5),
            pharmacy_at("P5", 30.0),
        ]
    )


@pytest.fixture
def catalog() -> Catalog:
    return Catalog(MEDICINES)


@pytest.fixture
def clock() -> VirtualClock:
    return VirtualClock()


@pytest.fixture
def service(registry, catalog, clock) -> BrokerService:
    return BrokerService(
        registry=registry,
        catalog=catalog,
        store=Store(":memory:"),
        clock=clock,
        tokens=dict(TOKENS),
    )


@contextlib.contextmanager
def live_server(app):
    """A real uvicorn server on an ephemeral port; needed for the
    long-lived notification stream, which in-process test transports
    buffer instead of streaming."""
    config = uvicorn.Config(app, host="127.0.0.1", port=0, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 10
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("test server did not start")
        time.sleep(0.01)
    port = server.servers[0].sockets[0].getsockname()[1]
    try:
        yield f"http://127.0.0.1:{port}"
    finally:
        server.should_exit = True
        thread.join(timeout=10)
