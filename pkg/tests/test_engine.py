from __future__ import annotations

import math
import random

import pytest

from medbroker.domain import (
    GeoPoint,
    Prescription,
    PrescriptionLine,
    PrescriptionStatus,
    ValidationError,
    Verdict,
)
from medbroker.engine import (
    EventKind,
    InvalidTransitionError,
    RequestConfig,
    RequestState,
    UnknownPharmacyError,
    best_pharmacy,
    cancel,
    open_request,
    record_response,
    tick,
)
from medbroker.georegistry import PharmacyRegistry

from conftest import ORIGIN, pharmacy_at

T0 = 1_700_000_000.0
CFG = RequestConfig()  # 5 km start, x2, 50 km cap, 600 s rounds


def rx(medicines=("M1", "M2", "M3"), status=PrescriptionStatus.SUBMITTED):
    return Prescription(
        id="rx-1",
        patient_id="alice",
        lines=tuple(PrescriptionLine(m, 1) for m in medicines),
        status=status,
    )


def registry_with(*km_marks):
    return PharmacyRegistry(
        [pharmacy_at(f"P{i+1}", km) for i, km in enumerate(km_marks)]
    ).snapshot()


def open_default(registry, config=CFG, now=T0):
    return open_request("req-1", rx(), ORIGIN, config, now, registry)


class TestOpen:
    def test_dispatches_initial_radius(self):
        registry = registry_with(1.0, 3.0, 4.9, 7.0)
        transition = open_default(registry)
        request = transition.request
        assert request.state is RequestState.OPEN
        assert request.round == 1
        assert request.current_radius_km == 5.0
        assert set(transition.new_dispatches) == {"P1", "P2", "P3"}
        assert request.enquired == frozenset({"P1", "P2", "P3"})
        assert request.round_deadline == T0 + 600.0

    def test_empty_initial_radius_opens_expanded(self):
        registry = registry_with(7.0, 9.5)
        transition = open_default(registry)
        request = transition.request
        assert request.state is RequestState.OPEN
        assert request.round == 2
        assert request.current_radius_km == 10.0
        assert set(transition.new_dispatches) == {"P1", "P2"}

    def test_no_pharmacies_anywhere_exhausts_immediately(self):
        registry = registry_with()  # empty world
        transition = open_default(registry)
        request = transition.request
        assert request.state is RequestState.EXHAUSTED
        assert request.round == 5  # 5 -> 10 -> 20 -> 40 -> 50(cap)
        assert request.current_radius_km == 50.0
        assert transition.new_dispatches == ()

    def test_draft_prescription_rejected(self):
        registry = registry_with(1.0)
        with pytest.raises(ValidationError):
            open_request(
                "req-1",
                rx(status=PrescriptionStatus.DRAFT),
                ORIGIN, CFG, T0, registry,
            )

    def test_only_registered_pharmacies_dispatched(self):
        registry = PharmacyRegistry(
            [pharmacy_at("P1", 1.0), pharmacy_at("P2", 2.0, registered=False)]
        ).snapshot()
        transition = open_default(registry)
        assert set(transition.new_dispatches) == {"P1"}


class TestRecordResponse:
    def test_full_terminates(self):
        registry = registry_with(1.0, 3.0)
        request = open_default(registry).request
        transition = record_response(request, "P1", frozenset({"M1", "M2", "M3"}), T0 + 60, registry)
        assert transition.request.state is RequestState.FULFILLED_FULL
        assert transition.request.responses["P1"].verdict is Verdict.FULL
        assert transition.new_dispatches == ()

    def test_duplicate_is_flagged_and_ignored(self):
        registry = registry_with(1.0, 3.0)
        request = open_default(registry).request
        first = record_response(request, "P1", frozenset({"M1"}), T0 + 60, registry)
        again = record_response(first.request, "P1", frozenset(), T0 + 90, registry)
        assert again.duplicate
        assert again.request == first.request
        assert again.events == ()

    def test_unknown_pharmacy_rejected(self):
        registry = registry_with(1.0)
        request = open_default(registry).request
        with pytest.raises(UnknownPharmacyError):
            record_response(request, "P9", frozenset(), T0 + 60, registry)

    def test_late_response_stored_for_audit_only(self):
        registry = registry_with(1.0, 3.0)
        request = open_default(registry).request
        request = record_response(request, "P1", frozenset({"M1", "M2", "M3"}), T0 + 60, registry).request
        assert request.state is RequestState.FULFILLED_FULL
        late = record_response(request, "P2", frozenset({"M1"}), T0 + 90, registry)
        assert late.request.state is RequestState.FULFILLED_FULL
        assert late.request.responses["P2"].verdict is Verdict.PARTIAL

    def test_all_answered_with_partial_closes_early(self):
        registry = registry_with(1.0, 3.0)
        request = open_default(registry).request
        request = record_response(request, "P1", frozenset(), T0 + 10, registry).request
        assert request.state is RequestState.OPEN
        transition = record_response(request, "P2", frozenset({"M1"}), T0 + 20, registry)
        assert transition.request.state is RequestState.FULFILLED_PARTIAL

    def test_all_answered_none_waits_for_deadline(self):
        registry = registry_with(1.0, 3.0)
        request = open_default(registry).request
        request = record_response(request, "P1", frozenset(), T0 + 10, registry).request
        request = record_response(request, "P2", frozenset(), T0 + 20, registry).request
        assert request.state is RequestState.OPEN  # expansion happens on tick

    def test_early_close_with_expansion_policy_expands(self):
        config = RequestConfig(expand_past_partial=True)
        registry = registry_with(1.0, 7.0)
        request = open_request("req-1", rx(), ORIGIN, config, T0, registry).request
        assert request.enquired == frozenset({"P1"})
        transition = record_response(request, "P1", frozenset({"M1"}), T0 + 30, registry)
        request = transition.request
        assert request.state is RequestState.OPEN
        assert request.round == 2
        assert set(transition.new_dispatches) == {"P2"}
        assert request.round_deadline == T0 + 30 + 600.0


class TestTick:
    def test_before_deadline_no_change(self):
        registry = registry_with(1.0, 7.0)
        request = open_default(registry).request
        transition = tick(request, T0 + 599.9, registry)
        assert transition.request == request
        assert transition.events == ()

    def test_at_deadline_expands_to_new_pharmacies_only(self):
        registry = registry_with(1.0, 3.0, 7.0, 9.5)
        request = open_default(registry).request
        transition = tick(request, T0 + 600.0, registry)
        request = transition.request
        assert request.round == 2
        assert request.current_radius_km == 10.0
        assert set(transition.new_dispatches) == {"P3", "P4"}
        assert request.enquired == frozenset({"P1", "P2", "P3", "P4"})
        assert request.round_deadline == T0 + 600.0 + 600.0

    def test_partial_on_deadline_settles(self):
        registry = registry_with(1.0, 3.0, 7.0)
        request = open_default(registry).request
        request = record_response(request, "P1", frozenset({"M1"}), T0 + 60, registry).request
        transition = tick(request, T0 + 600.0, registry)
        assert transition.request.state is RequestState.FULFILLED_PARTIAL
        assert transition.new_dispatches == ()

    def test_cap_with_silence_exhausts(self):
        registry = registry_with(1.0)
        request = open_default(registry).request
        now = T0
        for _ in range(10):
            now += 600.0
            request = tick(request, now, registry).request
            if request.is_terminal:
                break
        assert request.state is RequestState.EXHAUSTED
        assert request.current_radius_km == 50.0

    def test_cap_with_partial_settles_under_expansion_policy(self):
        config = RequestConfig(expand_past_partial=True)
        registry = registry_with(1.0)
        request = open_request("req-1", rx(), ORIGIN, config, T0, registry).request
        request = record_response(request, "P1", frozenset({"M1"}), T0 + 30, registry).request
        now = T0
        for _ in range(10):
            now += 600.0
            request = tick(request, now, registry).request
            if request.is_terminal:
                break
        assert request.state is RequestState.FULFILLED_PARTIAL

    def test_tick_terminal_is_noop(self):
        registry = registry_with(1.0)
        request = open_default(registry).request
        request = cancel(request, T0 + 1).request
        transition = tick(request, T0 + 10_000, registry)
        assert transition.request == request
        assert transition.events == ()


class TestCancel:
    def test_cancel_open(self):
        registry = registry_with(1.0)
        request = open_default(registry).request
        cancelled = cancel(request, T0 + 5).request
        assert cancelled.state is RequestState.CANCELLED

    def test_cancel_terminal_rejected(self):
        registry = registry_with(1.0)
        request = open_default(registry).request
        request = record_response(request, "P1", frozenset({"M1", "M2", "M3"}), T0 + 5, registry).request
        with pytest.raises(InvalidTransitionError):
            cancel(request, T0 + 10)


class TestBestPharmacy:
    def _request_with_responses(self, registry, responses):
        request = open_default(registry).request
        now = T0
        for pharmacy_id, available in responses:
            now += 1
            request = record_response(request, pharmacy_id, frozenset(available), now, registry).request
        return request

    def test_full_dominates_partial(self):
        registry = registry_with(1.0, 4.0)
        request = self._request_with_responses(
            registry, [("P1", {"M1", "M2"}), ("P2", {"M1", "M2", "M3"})]
        )
        pick = best_pharmacy(request)
        assert pick.pharmacy_id == "P2"
        assert pick.verdict is Verdict.FULL

    def test_all_none_is_absent(self):
        registry = registry_with(1.0, 4.0)
        request = self._request_with_responses(registry, [("P1", set()), ("P2", set())])
        assert best_pharmacy(request) is None

    def test_coverage_beats_distance_within_class(self):
        registry = registry_with(2.0, 6.0, 20.0)
        request = open_request(
            "req-1", rx(), ORIGIN, RequestConfig(initial_radius_km=10.0), T0,
            registry,
        ).request
        request = record_response(request, "P1", frozenset({"M1"}), T0 + 1, registry).request
        request = record_response(request, "P2", frozenset({"M1", "M2"}), T0 + 2, registry).request
        pick = best_pharmacy(request)
        assert pick.pharmacy_id == "P2"
        assert pick.available_count == 2

    def test_distance_breaks_coverage_ties(self):
        registry = registry_with(2.0, 4.0)
        request = self._request_with_responses(
            registry, [("P2", {"M1"}), ("P1", {"M1"})]
        )
        assert best_pharmacy(request).pharmacy_id == "P1"


class TestInvariants:
    def _scripted_run(self, seed):
        """Random world + random response script under a stepped clock."""
        rng = random.Random(seed)
        marks = sorted(rng.uniform(0.5, 70.0) for _ in range(rng.randint(0, 12)))
        registry = registry_with(*marks)
        config = RequestConfig(
            initial_radius_km=rng.choice([2.0, 5.0, 8.0]),
            expansion_factor=rng.choice([1.5, 2.0, 3.0]),
            max_radius_km=rng.choice([20.0, 50.0]),
            round_timeout_s=600.0,
            expand_past_partial=rng.random() < 0.3,
        )
        transition = open_request("req-1", rx(), ORIGIN, config, T0, registry)
        trace = list(transition.events)
        dispatch_sets = [set(transition.new_dispatches)]
        request = transition.request
        radii = [request.current_radius_km]
        now = T0
        while not request.is_terminal and len(radii) < 50:
            # Some pharmacies answer before the deadline.
            for pharmacy_id in sorted(request.enquired - set(request.responses)):
                if rng.random() < 0.25:
                    roll = rng.random()
                    if roll < 0.2:
                        available = {"M1", "M2", "M3"}
                    elif roll < 0.6:
                        available = set(rng.sample(["M1", "M2", "M3"], rng.randint(1, 2)))
                    else:
                        available = set()
                    t = record_response(request, pharmacy_id, frozenset(available), now + 1, registry)
                    request = t.request
                    trace.extend(t.events)
                    dispatch_sets.append(set(t.new_dispatches))
                    radii.append(request.current_radius_km)
                    if request.is_terminal:
                        break
            if request.is_terminal:
                break
            now += 600.0
            t = tick(request, now, registry)
            request = t.request
            trace.extend(t.events)
            dispatch_sets.append(set(t.new_dispatches))
            radii.append(request.current_radius_km)
        return request, trace, dispatch_sets, radii, config, registry

    @pytest.mark.parametrize("seed", range(25))
    def test_radius_non_decreasing_and_dispatches_disjoint(self, seed):
        request, trace, dispatch_sets, radii, config, _ = self._scripted_run(seed)
        assert radii == sorted(radii)
        seen = set()
        for dispatched in dispatch_sets:
            assert not (dispatched & seen)
            seen |= dispatched
        # round/radius relation holds at every expansion event
        for event in trace:
            if event.kind in (EventKind.DISPATCHED, EventKind.ROUND_EXPANDED):
                round_no = event.payload["round"]
                expected = min(
                    config.initial_radius_km * config.expansion_factor ** (round_no - 1),
                    config.max_radius_km,
                )
                assert math.isclose(event.payload["radius_km"], expected, rel_tol=1e-9)

    @pytest.mark.parametrize("seed", range(25))
    def test_scripted_runs_reach_terminal(self, seed):
        request, *_ = self._scripted_run(seed)
        assert request.is_terminal

    def test_liveness_bound_all_silent(self):
        # Advancing by round_timeout repeatedly must terminate within
        # ceil(log_f(max/initial)) + 1 rounds even with zero responses.
        for initial, factor, cap in [(5.0, 2.0, 50.0), (2.0, 1.5, 20.0), (5.0, 3.0, 50.0)]:
            config = RequestConfig(
                initial_radius_km=initial, expansion_factor=factor, max_radius_km=cap
            )
            bound = math.ceil(math.log(cap / initial, factor)) + 1
            registry = registry_with(1.0)  # one pharmacy, forever silent
            request = open_request("req-1", rx(), ORIGIN, config, T0, registry).request
            now = T0
            ticks = 0
            while not request.is_terminal:
                now += config.round_timeout_s
                request = tick(request, now, registry).request
                ticks += 1
                assert ticks <= bound + 1
            assert request.round <= bound
            assert request.state is RequestState.EXHAUSTED

    def test_terminal_states_absorb_everything(self):
        registry = registry_with(1.0, 3.0)
        request = open_default(registry).request
        request = record_response(
            request, "P1", frozenset({"M1", "M2", "M3"}), T0 + 1, registry
        ).request
        state = request.state
        request = tick(request, T0 + 10_000, registry).request
        assert request.state is state
        request = record_response(request, "P2", frozenset({"M1"}), T0 + 20, registry).request
        assert request.state is state
        with pytest.raises(InvalidTransitionError):
            cancel(request, T0 + 30)

    @pytest.mark.parametrize("seed", range(10))
    def test_determinism_identical_inputs_identical_traces(self, seed):
        first = self._scripted_run(seed)
        second = self._scripted_run(seed)
        assert first[0] == second[0]
        assert first[1] == second[1]
