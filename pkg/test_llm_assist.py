import json
import math
from pathlib import Path

import numpy as np
import pytest

from conftest import (
    ScriptedSimulator,
    agent_factory,
    lane_factory,
    report_factory,
    scenario_factory,
    straight_trajectory,
    world_factory,
)
from llm.dto import InvocationPolicy
from llm.llm_assist import (
    Planner,
    extract_json_object,
    parse_param_response,
    parse_trajectory_response,
    plan_step,
    serialize_scene,
    should_invoke,
)
from llm.llm_backend import MockBackend
from llm.llm_exceptions import ParseError
from metrics.closed_loop_metrics import compose_report
from planner.dto import PlannerParams, Proposal
from scene.scene_types import LightPhase, TrafficLight

FIXTURES = Path(__file__).parent / "fixtures"

OFFSET_SCORES = {2.0: 0.4, -2.0: 0.35, 2.5: 0.5, -2.5: 0.45}


def _param_reply(offsets, brake=False, **overrides) -> str:
    payload = {
        "lateral_offsets": offsets,
        "speed_limit_fraction": [0.5],
        "fallback_target_velocity": 15.0,
        "min_gap_to_lead_agent": 1.0,
        "headway_time": 1.5,
        "accel_max": 1.5,
        "decel_max": 3.0,
        "invoke_emergency_brake": brake,
        "rationale": f"shift to {offsets}",
    }
    payload.update(overrides)
    return json.dumps(payload)


def _by_offset(proposal: Proposal) -> float:
    return OFFSET_SCORES.get(proposal.source_offset, 0.3)


@pytest.fixture
def golden_world():
    scenario = scenario_factory(
        scenario_id="golden",
        lanes=[lane_factory(end=(20.0, 0.0))],
        polygon=[(-5.0, -2.0), (25.0, -2.0), (25.0, 2.0), (-5.0, 2.0)],
        ego_x=2.0,
        ego_speed=5.0,
        agents=[
            agent_factory("b_car", x=15.0, y=0.5, heading=0.1, speed=3.0, lane_id="main"),
            agent_factory(
                "a_ped", x=12.0, y=-1.5, heading=math.pi / 2, speed=1.2, kind="pedestrian", length=0.5, width=0.5
            ),
        ],
        traffic_lights=[TrafficLight(lane_id="main", stop_arc=18.0, schedule=[LightPhase(start_time=0.0, state="red")])],
    )
    return world_factory(scenario)


class TestShouldInvoke:
    """Invocation gate."""

    def test_good_score(self):
        assert not should_invoke(0.95, InvocationPolicy())

    def test_poor_score(self):
        assert should_invoke(0.3, InvocationPolicy())

    def test_zero_budget(self):
        """A zero query budget never invokes, whatever the score."""
        policy = InvocationPolicy(max_queries_per_step=0)
        assert not should_invoke(0.0, policy)
        assert not should_invoke(0.3, policy)

    def test_metric_gate(self):
        """A gated metric below its gate invokes even with a good aggregate."""
        policy = InvocationPolicy(metric_gates={"ttc": 0.5})
        report = compose_report(1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0)
        assert should_invoke(0.9, policy, report)
        assert not should_invoke(0.9, policy, report_factory(0.9))


class TestSerializeScene:
    """Deterministic scene text."""

    def test_empty_scene(self, empty_world):
        text = serialize_scene(empty_world)
        assert "AGENTS 0\n" in text
        assert "PROPOSALS 0\n" in text
        assert "  id=" not in text.split("LANES")[0]

    def test_agents_in_id_order(self, golden_world):
        lines = [line for line in serialize_scene(golden_world).splitlines() if line.startswith("  id=")]
        assert [line.split()[0] for line in lines[:2]] == ["id=a_ped", "id=b_car"]

    def test_golden_file(self, golden_world):
        """The canonical scene renders byte for byte."""
        scored = Proposal(
            trajectory=straight_trajectory(), source_offset=0.0, source_target_speed=13.9,
            predicted_scores=compose_report(1.0, 0.0, 1.0, 1.0, 0.5, 1.0, 1.0),
        )
        unscored = Proposal(trajectory=straight_trajectory(), source_offset=-1.0, source_target_speed=6.95)
        expected = (FIXTURES / "scene_golden.txt").read_text(encoding="utf-8")
        assert serialize_scene(golden_world, [scored, unscored]) == expected

    def test_repeatable(self, golden_world):
        assert serialize_scene(golden_world) == serialize_scene(golden_world)


class TestParseParamResponse:
    """Parameter replies."""

    def test_well_formed(self):
        response = parse_param_response(_param_reply([-2.0, 2.0]))
        assert response.params.lateral_offsets == [-2.0, 2.0]
        assert response.params.speed_limit_fractions == [0.5]
        assert response.params.decel_max == 3.0
        assert response.invoke_emergency_brake is False
        assert response.warnings == []

    @pytest.mark.parametrize("template", [
        "Sure! Here are the parameters:\n```json\n{reply}\n```\nDrive safely.",
        "```\n{reply}\n```",
        "I would shift left. {reply} That should clear the cones.",
        "Reasoning first... then the answer:\n\n{reply}",
    ])
    def test_prose_and_fences(self, template):
        response = parse_param_response(template.format(reply=_param_reply([2.0])))
        assert response.params.lateral_offsets == [2.0]

    def test_trailing_comma(self):
        text = _param_reply([1.0]).rstrip("}") + ",}"
        assert parse_param_response(text).params.lateral_offsets == [1.0]

    def test_nested_params(self):
        inner = json.loads(_param_reply([1.0]))
        text = json.dumps({"params": inner, "invoke_emergency_brake": True, "rationale": "stop"})
        response = parse_param_response(text)
        assert response.params.lateral_offsets == [1.0]
        assert response.invoke_emergency_brake is True
        assert response.rationale == "stop"

    def test_out_of_range_clamped(self):
        """Negative acceleration is lifted to its minimum with a warning."""
        response = parse_param_response(_param_reply([5.0, 0.0], accel_max=-2.0))
        assert response.params.accel_max == pytest.approx(0.1)
        assert response.params.lateral_offsets == [3.0, 0.0]
        assert len(response.warnings) == 2

    def test_duplicate_offsets_collapse(self):
        response = parse_param_response(_param_reply([1.0, 1.0, 4.0]))
        assert response.params.lateral_offsets == [1.0, 3.0]

    def test_missing_field(self):
        payload = json.loads(_param_reply([1.0]))
        del payload["headway_time"]
        with pytest.raises(ParseError):
            parse_param_response(json.dumps(payload))

    @pytest.mark.parametrize("text", ["", "no json here", "{not json}", '{"lateral_offsets": "left"}'])
    def test_unparseable(self, text):
        with pytest.raises(ParseError):
            parse_param_response(text)

    def test_non_numeric(self):
        with pytest.raises(ParseError):
            parse_param_response(_param_reply([1.0], decel_max="hard"))

    def test_extract_prefers_fenced_object(self):
        text = 'Example {"a": 1} but the answer is\n```json\n{"b": 2}\n```'
        assert extract_json_object(text) == {"b": 2}


class TestParseTrajectoryResponse:
    """Waypoint replies."""

    def test_densified_onto_tick_grid(self, empty_world):
        reply = json.dumps({"waypoints": [[30, 0], [50, 0], [70, 0], [90, 0]], "rationale": "straight"})
        response = parse_trajectory_response(reply, empty_world.ego, 0.1, 13.9)
        trajectory = response.trajectory
        assert len(trajectory) == 81
        assert trajectory.x[-1] == pytest.approx(90.0)
        np.testing.assert_allclose(trajectory.velocity, 10.0, atol=1e-6)
        np.testing.assert_allclose(trajectory.heading, 0.0, atol=1e-9)
        assert response.rationale == "straight"

    def test_object_waypoints(self, empty_world):
        reply = json.dumps({"waypoints": [{"x": 20, "y": 0}, {"x": 30, "y": 0}, {"x": 40, "y": 0}, {"x": 50, "y": 0}]})
        response = parse_trajectory_response(reply, empty_world.ego)
        assert response.waypoints[0] == (20.0, 0.0)

    @pytest.mark.parametrize("waypoints", [
        [[30, 0], [50, 0], [70, 0]],
        [[30, 0], [50, 0], [70, 0], [90, 0], [110, 0]],
        [[30, 0], [50, 0], ["far", 0], [90, 0]],
        [[30, 0], [50, 0], [70], [90, 0]],
    ])
    def test_malformed(self, empty_world, waypoints):
        with pytest.raises(ParseError):
            parse_trajectory_response(json.dumps({"waypoints": waypoints}), empty_world.ego)

    def test_implausible_speed(self, empty_world):
        """Fifty metres every two seconds is far above one and a half times the limit."""
        reply = json.dumps({"waypoints": [[60, 0], [110, 0], [160, 0], [210, 0]]})
        with pytest.raises(ParseError):
            parse_trajectory_response(reply, empty_world.ego, 0.1, 13.9)


class TestPlanStep:
    """Closed-loop planning with scripted scores and canned replies."""

    async def test_base_mode_never_queries(self, empty_world):
        backend = MockBackend([_param_reply([2.0])])
        planner = Planner("base", backend=backend, simulator=ScriptedSimulator(lambda p: 0.1))
        decision = await planner.plan(empty_world)
        assert backend.call_count == 0
        assert decision.provenance == "base"
        assert decision.queries_used == 0

    async def test_good_base_score_skips_llm(self, empty_world):
        backend = MockBackend([_param_reply([2.0])])
        decision = await plan_step(
            empty_world, InvocationPolicy(), backend, simulator=ScriptedSimulator(lambda p: 0.95)
        )
        assert backend.call_count == 0
        assert decision.provenance == "base"
        assert decision.selected_aggregate == 0.95

    async def test_best_of_all_queries(self, empty_world):
        """No reply reaches the threshold: all four are used and the best candidate wins."""
        replies = [_param_reply([o]) for o in (2.0, -2.0, 2.5, -2.5)]
        backend = MockBackend(replies)
        decision = await plan_step(empty_world, InvocationPolicy(), backend, simulator=ScriptedSimulator(_by_offset))
        assert backend.call_count == 4
        assert decision.queries_used == 4
        assert decision.provenance == "llm_par"
        assert decision.predicted_aggregate == 0.3
        assert decision.selected_aggregate == 0.5
        assert decision.candidate_scores == [0.3, 0.4, 0.35, 0.5, 0.45]
        assert decision.rationale == "shift to [2.5]"

    async def test_stops_at_first_good_reply(self, empty_world):
        backend = MockBackend([_param_reply([2.0]), _param_reply([2.5])])
        simulator = ScriptedSimulator(lambda p: 0.9 if p.source_offset == 2.0 else 0.3)
        decision = await plan_step(empty_world, InvocationPolicy(), backend, simulator=simulator)
        assert backend.call_count == 1
        assert decision.provenance == "llm_par"
        assert decision.selected_aggregate == 0.9

    async def test_base_wins_ties(self, empty_world):
        """An LLM candidate scoring the same as the base proposal does not replace it."""
        backend = MockBackend([_param_reply([2.0])])
        decision = await plan_step(
            empty_world, InvocationPolicy(max_queries_per_step=1), backend,
            simulator=ScriptedSimulator(lambda p: 0.3),
        )
        assert decision.provenance == "base"
        assert decision.queries_used == 1

    async def test_unparseable_reply_requeries(self, empty_world):
        backend = MockBackend(["I cannot help with that.", _param_reply([2.0])])
        simulator = ScriptedSimulator(lambda p: 0.9 if p.source_offset == 2.0 else 0.3)
        decision = await plan_step(empty_world, InvocationPolicy(), backend, simulator=simulator)
        assert decision.queries_used == 2
        assert decision.provenance == "llm_par"
        assert "could not be used" in backend.requests[1].user_prompt

    async def test_backend_failure_degrades(self, empty_world):
        """An exhausted backend leaves the base proposal in place."""
        backend = MockBackend([])
        decision = await plan_step(empty_world, InvocationPolicy(), backend, simulator=ScriptedSimulator(lambda p: 0.3))
        assert decision.degraded
        assert decision.provenance == "base"
        assert decision.queries_used == 1

    @pytest.mark.parametrize("allowed, expected", [(True, "emergency"), (False, "llm_par")])
    async def test_llm_emergency_brake(self, empty_world, allowed, expected):
        backend = MockBackend([_param_reply([2.0], brake=True)])
        policy = InvocationPolicy(allow_llm_emergency_brake=allowed)
        simulator = ScriptedSimulator(lambda p: 0.9 if p.source_offset == 2.0 else 0.3)
        decision = await plan_step(empty_world, policy, backend, simulator=simulator)
        assert decision.llm_brake_requested
        assert decision.provenance == expected
        if expected == "emergency":
            assert np.all(np.diff(decision.trajectory.velocity) <= 1e-12)

    async def test_brake_follows_selected_reply(self, empty_world):
        """A brake request on a reply that loses selection leaves the winner untouched."""
        backend = MockBackend([_param_reply([2.5], brake=True), _param_reply([2.0])])
        scores = {2.0: 0.9, 2.5: 0.35}
        simulator = ScriptedSimulator(lambda p: scores.get(p.source_offset, 0.3))
        decision = await plan_step(empty_world, InvocationPolicy(allow_llm_emergency_brake=True), backend, simulator=simulator)
        assert decision.queries_used == 2
        assert decision.provenance == "llm_par"
        assert decision.selected_aggregate == 0.9
        assert decision.rationale == "shift to [2.0]"
        assert not decision.llm_brake_requested

    async def test_zero_budget_matches_base_planner(self, empty_world):
        """With no query budget the assisted planner drives exactly like the base planner."""
        backend = MockBackend([_param_reply([2.0])])
        assisted = await plan_step(empty_world, InvocationPolicy(max_queries_per_step=0), backend)
        base = await Planner("base").plan(empty_world)
        assert backend.call_count == 0
        np.testing.assert_array_equal(assisted.trajectory.xy, base.trajectory.xy)
        np.testing.assert_array_equal(assisted.trajectory.velocity, base.trajectory.velocity)

    async def test_imminent_collision_brakes(self):
        """A stalled vehicle just ahead triggers the emergency brake."""
        world = world_factory(scenario_factory(agents=[agent_factory("stalled", x=16.0)]))
        decision = await Planner("base").plan(world)
        assert decision.provenance == "emergency"
        assert decision.trajectory.velocity[-1] == pytest.approx(0.0)

    async def test_waypoint_assistance(self, empty_world):
        reply = json.dumps({"waypoints": [[30, 0], [50, 0], [70, 0], [90, 0]], "rationale": "keep lane"})
        backend = MockBackend([reply])
        simulator = ScriptedSimulator(lambda p: 0.9 if p.cell is None else 0.3)
        decision = await Planner("assist-unc", backend=backend, simulator=simulator).plan(empty_world)
        assert decision.provenance == "llm_unc"
        assert decision.rationale == "keep lane"
        assert backend.requests[0].response_format == "waypoints"

    async def test_llm_only_queries_every_tick(self, empty_world):
        """Without assistance gating the LLM trajectory is used even when it scores worse."""
        reply = json.dumps({"waypoints": [[30, 0], [50, 0], [70, 0], [90, 0]]})
        backend = MockBackend([reply])
        policy = InvocationPolicy(max_queries_per_step=0)
        simulator = ScriptedSimulator(lambda p: 0.1 if p.cell is None else 0.95)
        decision = await Planner("llm-only", policy=policy, backend=backend, simulator=simulator).plan(empty_world)
        assert backend.call_count == 1
        assert decision.provenance == "llm_unc"
        assert decision.selected_aggregate == 0.1

    async def test_request_carries_scene(self, empty_world):
        backend = MockBackend([_param_reply([2.0])])
        await plan_step(
            empty_world, InvocationPolicy(temperature=0.7), backend,
            simulator=ScriptedSimulator(lambda p: 0.9 if p.source_offset == 2.0 else 0.3),
        )
        request = backend.requests[0]
        assert request.temperature == 0.7
        assert request.scenario_id == "test_scenario"
        assert "query 1 of 4" in request.user_prompt
        assert "SCENARIO test_scenario" in request.user_prompt
        assert "PROPOSALS 15" in request.user_prompt
