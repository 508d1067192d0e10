"""Scenario harness: seed a world, drive the API with scripted actions
under the virtual clock, and assert on responses and state.

A scenario is a YAML file:

    name: happy-path
    seed:
      medicines:  [{id, name, dosage, package}]
      pharmacies: [{id, name, latitude, longitude, contact, registered}]
      users:      [{id, token, role}]            # role: patient|pharmacist
      stock:      {P1: {M1: 3}}                  # optional, per-pharmacy
    script:
      - at: 0            # offset from scenario start: seconds, "30s", "10m"
        actor: alice
        action: submit_prescription
        params: {lines: [{medicine_id: M1, quantity: 1}]}
        save_as: rx
        expect: {status: 201}

Saved names are referenced as ``$name`` inside later params. Steps run in
file order; the harness advances the server's virtual clock to each
step's offset, so timeout behavior is exercised deterministically. After
every step the harness cross-checks each known request: the live snapshot
must equal the state replayed from the event log.

The transcript records every HTTP exchange and check; it contains only
virtual-clock timestamps, so two runs over fresh data directories produce
identical transcripts.
"""

from __future__ import annotations

import json
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import yaml

from .catalog import Catalog, write_catalog
from .clock import VirtualClock
from .domain import BrokerError, Medicine, ValidationError
from .georegistry import PharmacyRegistry, parse_seed_row, write_pharmacy_seed
from .service import BrokerService, Principal
from .store import Store

KNOWN_ACTIONS = (
    "submit_prescription",
    "request_availability",
    "respond",
    "get_request",
    "cancel_request",
    "get_inbox",
    "get_notifications",
    "mark_read",
    "nearby_pharmacies",
    "autocomplete",
    "advance_clock",
    "get_trace",
)


class ScenarioError(BrokerError):
    pass


class AssertionFailure(BrokerError):
    pass


@dataclass
class Step:
    index: int
    at: float
    actor: Optional[str]
    action: str
    params: Dict[str, object]
    expect: Dict[str, object]
    save_as: Optional[str] = None


@dataclass
class Scenario:
    name: str
    medicines: List[Medicine]
    pharmacies: List
    users: List[Dict[str, str]]
    stock: Dict[str, Dict[str, int]]
    script: List[Step]


def parse_duration(value: object) -> float:
    """Seconds from a number or a short suffix form ("90", "30s", "10m")."""
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        text = value.strip().lower()
        try:
            if text.endswith("m"):
                return float(text[:-1]) * 60.0
            if text.endswith("s"):
                return float(text[:-1])
            return float(text)
        except ValueError:
            pass
    raise ScenarioError(f"bad time offset {value!r} (use seconds, '30s', or '10m')")


def load_scenario(path: Union[str, Path]) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ScenarioError(f"{where}: unparseable scenario ({exc})") from exc
    if not isinstance(raw, dict):
        raise ScenarioError(f"{path}: scenario must be a mapping")

    seed = raw.get("seed") or {}
    medicines = []
    for record in seed.get("medicines", []):
        try:
            medicines.append(
                Medicine(
                    id=str(record["id"]),
                    name=str(record["name"]),
                    dosage=str(record.get("dosage", "")),
                    package=str(record.get("package", "")),
                )
            )
        except (KeyError, ValidationError) as exc:
            raise ScenarioError(f"medicine record {record!r}: {exc}") from exc

    pharmacies = []
    for record in seed.get("pharmacies", []):
        row = {k: str(v) for k, v in dict(record).items()}
        row.setdefault("contact", "")
        row.setdefault("registered", "true")
        try:
            pharmacies.append(parse_seed_row(row, where=f"pharmacy {record.get('id')!r}"))
        except ValidationError as exc:
            raise ScenarioError(str(exc)) from exc

    users = []
    declared = set()
    for record in seed.get("users", []):
        if not all(k in record for k in ("id", "token", "role")):
            raise ScenarioError(f"user record {record!r}: needs id, token, role")
        if record["role"] not in ("patient", "pharmacist"):
            raise ScenarioError(f"user {record['id']!r}: bad role {record['role']!r}")
        users.append({k: str(record[k]) for k in ("id", "token", "role")})
        declared.add(str(record["id"]))

    stock: Dict[str, Dict[str, int]] = {}
    for pharmacy_id, per_medicine in (seed.get("stock") or {}).items():
        stock[str(pharmacy_id)] = {str(m): int(q) for m, q in dict(per_medicine).items()}

    script: List[Step] = []
    last_at = 0.0
    for index, record in enumerate(raw.get("script") or [], start=1):
        if not isinstance(record, dict) or "action" not in record:
            raise ScenarioError(f"step {index}: needs an 'action'")
        action = str(record["action"])
        if action not in KNOWN_ACTIONS:
            raise ScenarioError(f"step {index}: unknown action {action!r}")
        at = parse_duration(record.get("at", last_at))
        if at < last_at:
            raise ScenarioError(
                f"step {index}: offset {at}s goes backwards (previous step at {last_at}s)"
            )
        last_at = at
        actor = record.get("actor")
        if actor is not None and str(actor) not in declared:
            raise ScenarioError(f"step {index}: actor {actor!r} not declared in seed.users")
        if actor is None and action not in ("advance_clock", "get_trace"):
            raise ScenarioError(f"step {index}: action {action!r} needs an actor")
        script.append(
            Step(
                index=index,
                at=at,
                actor=str(actor) if actor is not None else None,
                action=action,
                params=dict(record.get("params") or {}),
                expect=dict(record.get("expect") or {}),
                save_as=str(record["save_as"]) if record.get("save_as") else None,
            )
        )

    return Scenario(
        name=str(raw.get("name", Path(path).stem)),
        medicines=medicines,
        pharmacies=pharmacies,
        users=users,
        stock=stock,
        script=script,
    )


# ---------------------------------------------------------------------------
# Seeding


def seed_data_dir(scenario: Scenario, data_dir: Union[str, Path]) -> Dict[str, int]:
    """Write the scenario's world into a fresh data directory.

    Refuses a non-empty directory: a seeded world is immutable input, not
    something to merge into.
    """
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    existing = [p.name for p in data_dir.iterdir()]
    if existing:
        raise ScenarioError(
            f"data directory {data_dir} is not empty (found {sorted(existing)[:3]}...); "
            "seed into a fresh directory"
        )
    write_catalog(data_dir / "medicines.csv", scenario.medicines)
    write_pharmacy_seed(data_dir / "pharmacies.csv", scenario.pharmacies)
    with open(data_dir / "tokens.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("token,principal,role\n")
        for user in scenario.users:
            fh.write(f"{user['token']},{user['id']},{user['role']}\n")
    return {
        "medicines": len(scenario.medicines),
        "pharmacies": len(scenario.pharmacies),
        "users": len(scenario.users),
    }


def build_service(scenario: Scenario, store: Optional[Store] = None) -> BrokerService:
    tokens = {
        user["token"]: Principal(id=user["id"], role=user["role"]) for user in scenario.users
    }
    return BrokerService(
        registry=PharmacyRegistry(scenario.pharmacies),
        catalog=Catalog(scenario.medicines),
        store=store or Store(":memory:"),
        clock=VirtualClock(),
        tokens=tokens,
    )


# ---------------------------------------------------------------------------
# Running


@dataclass
class RunResult:
    name: str
    passed: bool
    transcript: List[Dict[str, object]] = field(default_factory=list)
    failures: List[str] = field(default_factory=list)

    def transcript_text(self) -> str:
        return json.dumps(self.transcript, indent=2, sort_keys=True) + "\n"


class ScenarioRunner:
    """Executes one scenario against an HTTP client (remote or in-process)."""

    def __init__(self, scenario: Scenario, client):
        self.scenario = scenario
        self.client = client
        self.tokens = {user["id"]: user["token"] for user in scenario.users}
        self.refs: Dict[str, str] = {}
        self.request_owners: Dict[str, str] = {}  # request id -> actor
        self.request_lines: Dict[str, List[Tuple[str, int]]] = {}
        self.prescription_lines: Dict[str, List[Tuple[str, int]]] = {}
        self.offset = 0.0
        self.result = RunResult(name=scenario.name, passed=True)

    # -- plumbing -------------------------------------------------------------

    def _headers(self, actor: Optional[str]) -> Dict[str, str]:
        if actor is None:
            return {}
        return {"Authorization": f"Bearer {self.tokens[actor]}"}

    def _resolve(self, value: object) -> object:
        if isinstance(value, str) and value.startswith("$"):
            name = value[1:]
            if name not in self.refs:
                raise ScenarioError(f"unknown reference {value!r} (saved: {sorted(self.refs)})")
            return self.refs[name]
        if isinstance(value, dict):
            return {k: self._resolve(v) for k, v in value.items()}
        if isinstance(value, list):
            return [self._resolve(v) for v in value]
        return value

    def _exchange(
        self, method: str, path: str, actor: Optional[str], body: Optional[Dict] = None,
        params: Optional[Dict] = None,
    ) -> Tuple[int, object, Dict[str, object]]:
        response = self.client.request(
            method, path, json=body, params=params, headers=self._headers(actor)
        )
        try:
            payload = response.json()
        except ValueError:
            payload = response.text
        record = {
            "method": method,
            "path": path,
            "query": params or {},
            "body": body,
            "status": response.status_code,
            "response": payload,
        }
        return response.status_code, payload, record

    def _advance_to(self, at: float) -> Optional[Dict[str, object]]:
        delta = at - self.offset
        if delta <= 0:
            return None
        self.offset = at
        status, payload, record = self._exchange(
            "POST", "/admin/advance-clock", actor=None, body={"seconds": delta}
        )
        if status != 200:
            raise ScenarioError(f"advance-clock failed with {status}: {payload}")
        return record

    # -- actions -----------------------------------------------------------------

    def _do_action(self, step: Step) -> Tuple[int, object, Dict[str, object], Optional[str]]:
        p = self._resolve(step.params)
        assert isinstance(p, dict)
        a = step.action
        if a == "submit_prescription":
            status, payload, record = self._exchange(
                "POST", "/prescriptions", step.actor, body={"lines": p.get("lines", [])}
            )
            primary = payload.get("id") if isinstance(payload, dict) else None
            if status == 201 and primary:
                self.prescription_lines[primary] = [
                    (str(line["medicine_id"]), int(line.get("quantity", 1)))
                    for line in p.get("lines", [])
                ]
            return status, payload, record, primary
        if a == "request_availability":
            prescription_id = str(p.get("prescription", ""))
            body = {"lat": p.get("lat"), "lon": p.get("lon")}
            if p.get("config"):
                body["config"] = p["config"]
            status, payload, record = self._exchange(
                "POST", f"/prescriptions/{prescription_id}/availability", step.actor, body=body
            )
            primary = payload.get("request_id") if isinstance(payload, dict) else None
            if status == 202 and primary:
                self.request_owners[primary] = step.actor or ""
                self.request_lines[primary] = self.prescription_lines.get(prescription_id, [])
            return status, payload, record, primary
        if a == "respond":
            request_id = str(p.get("request", ""))
            body = self._response_body(step, p, request_id)
            status, payload, record = self._exchange(
                "POST", f"/pharmacy/requests/{request_id}/response", step.actor, body=body
            )
            return status, payload, record, None
        if a == "get_request":
            request_id = str(p.get("request", ""))
            status, payload, record = self._exchange(
                "GET", f"/requests/{request_id}", step.actor
            )
            return status, payload, record, None
        if a == "cancel_request":
            request_id = str(p.get("request", ""))
            status, payload, record = self._exchange(
                "POST", f"/requests/{request_id}/cancel", step.actor
            )
            return status, payload, record, None
        if a == "get_inbox":
            status, payload, record = self._exchange("GET", "/pharmacy/inbox", step.actor)
            return status, payload, record, None
        if a == "get_notifications":
            params = {"unread_only": "true"} if p.get("unread_only") else None
            status, payload, record = self._exchange(
                "GET", "/notifications", step.actor, params=params
            )
            return status, payload, record, None
        if a == "mark_read":
            status, payload, record = self._exchange(
                "POST", "/notifications/mark-read", step.actor, body={"ids": p.get("ids", [])}
            )
            return status, payload, record, None
        if a == "nearby_pharmacies":
            params = {"lat": str(p.get("lat")), "lon": str(p.get("lon"))}
            if p.get("radius_km") is not None:
                params["radius_km"] = str(p["radius_km"])
            status, payload, record = self._exchange(
                "GET", "/pharmacies/nearby", step.actor, params=params
            )
            return status, payload, record, None
        if a == "autocomplete":
            params = {"q": str(p.get("q", ""))}
            if p.get("limit") is not None:
                params["limit"] = str(p["limit"])
            status, payload, record = self._exchange(
                "GET", "/medicines/autocomplete", step.actor, params=params
            )
            return status, payload, record, None
        if a == "advance_clock":
            seconds = parse_duration(p.get("seconds", 0))
            self.offset += seconds
            status, payload, record = self._exchange(
                "POST", "/admin/advance-clock", None, body={"seconds": seconds}
            )
            return status, payload, record, None
        if a == "get_trace":
            request_id = str(p.get("request", ""))
            status, payload, record = self._exchange(
                "GET", f"/admin/requests/{request_id}/events", None
            )
            return status, payload, record, None
        raise ScenarioError(f"step {step.index}: unhandled action {a!r}")

    def _response_body(self, step: Step, p: Dict, request_id: str) -> Dict[str, object]:
        if p.get("from_stock"):
            stock = self.scenario.stock.get(step.actor or "", {})
            lines = self.request_lines.get(request_id, [])
            available = [
                medicine_id for medicine_id, quantity in lines
                if stock.get(medicine_id, 0) >= quantity
            ]
            return {"available_medicine_ids": available}
        if "verdict" in p:
            return {"verdict": p["verdict"]}
        if "available_medicine_ids" in p:
            return {"available_medicine_ids": p["available_medicine_ids"]}
        raise ScenarioError(
            f"step {step.index}: respond needs verdict, available_medicine_ids, or from_stock"
        )

    # -- assertions -----------------------------------------------------------

    def _check(self, step: Step, status: int, payload: object) -> List[str]:
        failures = []
        expect = step.expect
        if "status" in expect and status != expect["status"]:
            failures.append(
                f"step {step.index} ({step.action}): expected status {expect['status']}, "
                f"got {status}: {payload}"
            )
        if "count" in expect:
            actual = len(payload) if isinstance(payload, list) else None
            if actual != expect["count"]:
                failures.append(
                    f"step {step.index} ({step.action}): expected {expect['count']} items, "
                    f"got {actual}"
                )
        if "body" in expect:
            mismatches: List[str] = []
            _match(self._resolve(expect["body"]), payload, "body", mismatches)
            failures.extend(f"step {step.index} ({step.action}): {m}" for m in mismatches)
        return failures

    def _replay_checks(self) -> List[Dict[str, object]]:
        """Snapshot-vs-replay consistency for every request seen so far."""
        checks = []
        for request_id, owner in sorted(self.request_owners.items()):
            status_live, live, _ = self._exchange("GET", f"/requests/{request_id}", owner)
            status_replay, replayed, _ = self._exchange(
                "GET", f"/admin/requests/{request_id}/replay", None
            )
            consistent = status_live == status_replay == 200 and live == replayed
            checks.append({"request_id": request_id, "replay_consistent": consistent})
            if not consistent:
                self.result.failures.append(
                    f"replay mismatch for {request_id}: live={live} replayed={replayed}"
                )
        return checks

    # -- main loop ----------------------------------------------------------------

    def run(self) -> RunResult:
        for step in self.scenario.script:
            advance_record = self._advance_to(step.at)
            status, payload, record, primary = self._do_action(step)
            if step.save_as:
                if primary is None:
                    raise ScenarioError(
                        f"step {step.index}: save_as on an action without a saveable id"
                    )
                self.refs[step.save_as] = primary
            failures = self._check(step, status, payload)
            self.result.failures.extend(failures)
            entry: Dict[str, object] = {
                "step": step.index,
                "at": step.at,
                "actor": step.actor,
                "action": step.action,
                "exchange": record,
                "checks": "pass" if not failures else failures,
                "replay": self._replay_checks(),
            }
            if advance_record is not None:
                entry["clock_advance"] = advance_record
            self.result.transcript.append(entry)
        self.result.passed = not self.result.failures
        return self.result


def _match(expected: object, actual: object, path: str, out: List[str]) -> None:
    if isinstance(expected, dict):
        if not isinstance(actual, dict):
            out.append(f"{path}: expected object, got {type(actual).__name__}")
            return
        for key, value in expected.items():
            if key not in actual:
                out.append(f"{path}.{key}: missing (actual keys: {sorted(actual)})")
                continue
            _match(value, actual[key], f"{path}.{key}", out)
        return
    if isinstance(expected, list):
        if not isinstance(actual, list):
            out.append(f"{path}: expected list, got {type(actual).__name__}")
            return
        if len(expected) != len(actual):
            out.append(f"{path}: expected {len(expected)} items, got {len(actual)}")
            return
        for i, (e, a) in enumerate(zip(expected, actual)):
            _match(e, a, f"{path}[{i}]", out)
        return
    if isinstance(expected, (int, float)) and isinstance(actual, (int, float)):
        if float(expected) != float(actual):
            out.append(f"{path}: expected {expected!r}, got {actual!r}")
        return
    if expected != actual:
        out.append(f"{path}: expected {expected!r}, got {actual!r}")


def run_scenario(
    path: Union[str, Path],
    server_url: Optional[str] = None,
    transcript_path: Optional[Union[str, Path]] = None,
) -> RunResult:
    """Run a scenario against ``server_url``, or embedded in-process when
    no server is given (fresh temp data directory, virtual clock)."""
    scenario = load_scenario(path)
    if server_url:
        import httpx

        with httpx.Client(base_url=server_url, timeout=30.0) as client:
            result = ScenarioRunner(scenario, client).run()
    else:
        from fastapi.testclient import TestClient

        from .api import create_app

        with tempfile.TemporaryDirectory(prefix="medbroker-run-") as tmp:
            service = build_service(scenario, store=Store(Path(tmp) / "broker.db"))
            with TestClient(create_app(service)) as client:
                result = ScenarioRunner(scenario, client).run()
            service.store.close()
    if transcript_path:
        Path(transcript_path).write_text(result.transcript_text(), encoding="utf-8")
    return result
