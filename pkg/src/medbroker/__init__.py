"""Medicine-availability broker.

Patients submit prescriptions; the system fans availability requests out
to registered pharmacies near the patient, widens the search radius when
a round times out silent, and folds pharmacist verdicts into actionable
notifications. A survey-statistics module (chi-square over 2x2
contingency tables, frequency tabulation) ships alongside with the
aggregated study data it reproduces.
"""

from .catalog import Catalog, load_catalog
from .clock import VirtualClock, WallClock
from .domain import (
    GeoPoint,
    Medicine,
    Pharmacy,
    PharmacyResponse,
    Prescription,
    PrescriptionLine,
    PrescriptionStatus,
    Verdict,
    classify_response,
    haversine_distance,
)
from .engine import (
    AvailabilityRequest,
    RequestConfig,
    RequestState,
    best_pharmacy,
    cancel,
    open_request,
    record_response,
    tick,
)
from .georegistry import PharmacyRegistry, RegistrySnapshot
from .stats import (
    ChiSquareResult,
    ContingencyTable2x2,
    DescriptiveSummary,
    FrequencyTable,
    chi_square_sf,
    describe,
    pearson_chi_square,
    tabulate,
)
from .store import Store

__version__ = "0.1.0"

__all__ = [
    "AvailabilityRequest",
    "Catalog",
    "ChiSquareResult",
    "ContingencyTable2x2",
    "DescriptiveSummary",
    "FrequencyTable",
    "GeoPoint",
    "Medicine",
    "Pharmacy",
    "PharmacyRegistry",
    "PharmacyResponse",
    "Prescription",
    "PrescriptionLine",
    "PrescriptionStatus",
    "RegistrySnapshot",
    "RequestConfig",
    "RequestState",
    "Store",
    "Verdict",
    "VirtualClock",
    "WallClock",
    "best_pharmacy",
    "cancel",
    "chi_square_sf",
    "classify_response",
    "describe",
    "haversine_distance",
    "load_catalog",
    "open_request",
    "pearson_chi_square",
    "record_response",
    "tabulate",
    "tick",
]
