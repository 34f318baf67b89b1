import json
import threading
from types import SimpleNamespace

import httpx
import openai
import pytest

from conftest import agent_factory, scenario_factory, world_factory
from llm.dto import BackendConfig, ChatRequest, InvocationPolicy, LlmParamResponse
from llm.llm_assist import build_request, parse_param_response, parse_trajectory_response, serialize_scene
from llm.llm_backend import (
    LiveBackend,
    MockBackend,
    MockScript,
    OracleBackend,
    RecordingBackend,
    ReplayBackend,
    build_backend,
    heuristic_oracle,
    scene_hash,
)
from llm.llm_exceptions import BackendError
from planner.dto import PlannerParams

_REQUEST = httpx.Request("POST", "http://llm.invalid/v1/chat/completions")


def _request(scenario_id="s1", tick=0, query_index=0, scene="scene", **kwargs) -> ChatRequest:
    return ChatRequest(
        system_prompt="system",
        user_prompt=scene,
        scenario_id=scenario_id,
        tick=tick,
        query_index=query_index,
        scene_hash=scene_hash(scene),
        **kwargs,
    )


class _FakeCompletions:
    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = 0
        self.kwargs = None

    async def create(self, **kwargs):
        self.calls += 1
        self.kwargs = kwargs
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return SimpleNamespace(choices=[SimpleNamespace(message=SimpleNamespace(content=outcome))])


class _FakeClient:
    def __init__(self, outcomes):
        self.completions = _FakeCompletions(outcomes)
        self.chat = SimpleNamespace(completions=self.completions)
        self.closed = False

    async def close(self):
        self.closed = True


@pytest.fixture
def live_config(monkeypatch) -> BackendConfig:
    monkeypatch.delenv("PLANNER_LLM_MODEL", raising=False)
    return BackendConfig(kind="live", retry_delay_ms=0, model_name="test-model")


@pytest.fixture
def blocked_world():
    """A stalled car in the ego lane on a road wide enough to pass on either side."""
    scenario = scenario_factory(
        agents=[agent_factory("stalled", x=40.0)],
        polygon=[(-10.0, -5.25), (310.0, -5.25), (310.0, 5.25), (-10.0, 5.25)],
    )
    return world_factory(scenario)


class TestMockBackend:
    """Scripted replies."""

    async def test_replies_in_order(self):
        backend = MockBackend(["first", "second"])
        assert await backend.complete(_request()) == "first"
        assert await backend.complete(_request()) == "second"
        assert backend.call_count == 2

    async def test_exhausted(self):
        backend = MockBackend(["only"])
        await backend.complete(_request())
        with pytest.raises(BackendError):
            await backend.complete(_request())

    async def test_cycle(self):
        backend = MockBackend(MockScript(replies=["a", "b"], cycle=True))
        replies = [await backend.complete(_request()) for _ in range(3)]
        assert replies == ["a", "b", "a"]

    async def test_cursor_per_scenario(self):
        """Each scenario consumes the script from the start."""
        backend = MockBackend(["a", "b"])
        assert await backend.complete(_request("s1")) == "a"
        assert await backend.complete(_request("s2")) == "a"
        assert await backend.complete(_request("s1")) == "b"

    async def test_rules_match_scene_hash(self):
        backend = MockBackend(MockScript(replies=["fallback"], rules={scene_hash("special"): "ruled"}))
        assert await backend.complete(_request(scene="special")) == "ruled"
        assert await backend.complete(_request(scene="other")) == "fallback"

    async def test_deterministic(self):
        """Two backends with the same script answer the same requests identically."""
        script = MockScript(replies=["x", "y", "z"])
        first, second = MockBackend(script), MockBackend(script)
        for tick in range(3):
            assert await first.complete(_request(tick=tick)) == await second.complete(_request(tick=tick))


class TestLiveBackend:
    """Chat-completion client with retries."""

    async def test_success(self, live_config):
        client = _FakeClient(["hello"])
        backend = LiveBackend(live_config, client=client)
        assert await backend.complete(_request(temperature=0.5)) == "hello"
        assert client.completions.kwargs["temperature"] == 0.5
        assert client.completions.kwargs["messages"][0] == {"role": "system", "content": "system"}

    async def test_unreachable_endpoint(self, live_config):
        """Connection failures are retried, then surface as a backend error."""
        client = _FakeClient([openai.APIConnectionError(request=_REQUEST) for _ in range(3)])
        backend = LiveBackend(live_config, client=client)
        with pytest.raises(BackendError):
            await backend.complete(_request())
        assert client.completions.calls == 3

    async def test_recovers_after_transient_failure(self, live_config):
        client = _FakeClient([openai.APIConnectionError(request=_REQUEST), "ok"])
        backend = LiveBackend(live_config, client=client)
        assert await backend.complete(_request()) == "ok"
        assert client.completions.calls == 2

    async def test_rejected_request_not_retried(self, live_config):
        rejected = openai.BadRequestError(
            "bad request", response=httpx.Response(400, request=_REQUEST), body=None
        )
        client = _FakeClient([rejected, "never"])
        backend = LiveBackend(live_config, client=client)
        with pytest.raises(BackendError):
            await backend.complete(_request())
        assert client.completions.calls == 1

    def test_missing_endpoint(self, live_config, monkeypatch):
        monkeypatch.delenv("PLANNER_LLM_BASE_URL", raising=False)
        with pytest.raises(BackendError):
            LiveBackend(live_config)

    def test_model_from_environment(self, live_config, monkeypatch):
        monkeypatch.setenv("PLANNER_LLM_MODEL", "env-model")
        assert LiveBackend(live_config, client=_FakeClient([])).model_name == "env-model"

    async def test_close(self, live_config):
        client = _FakeClient([])
        await LiveBackend(live_config, client=client).aclose()
        assert client.closed


class TestTranscripts:
    """Recording and replaying exchanges."""

    async def test_record_then_replay(self, tmp_path):
        path = tmp_path / "transcript.jsonl"
        recorder = RecordingBackend(MockBackend(["r0", "r1"]), path)
        await recorder.complete(_request(tick=0, query_index=0))
        await recorder.complete(_request(tick=0, query_index=1))

        lines = path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 2
        record = json.loads(lines[0])
        assert record["response"] == "r0"
        assert record["request"]["scenario_id"] == "s1"
        assert "world" not in record["request"]

        replay = ReplayBackend(path)
        assert await replay.complete(_request(tick=0, query_index=1)) == "r1"
        with pytest.raises(BackendError):
            await replay.complete(_request(tick=5))

    async def test_replay_separates_configurations(self, tmp_path):
        """Two planner configurations asking at the same tick get their own recorded answers."""
        path = tmp_path / "transcript.jsonl"
        recorder = RecordingBackend(MockBackend(["par", "unc"]), path)
        await recorder.complete(_request(scene="scene\nquery 1 of 4"))
        await recorder.complete(_request(scene="scene\nquery 1 of 2", response_format="waypoints"))

        replay = ReplayBackend(path)
        assert await replay.complete(_request(scene="scene\nquery 1 of 2", response_format="waypoints")) == "unc"
        assert await replay.complete(_request(scene="scene\nquery 1 of 4")) == "par"
        with pytest.raises(BackendError):
            await replay.complete(_request(scene="scene\nquery 1 of 1"))

    def test_invalid_transcript(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        path.write_text(json.dumps({"request": {"tick": -1}, "response": "x"}) + "\n", encoding="utf-8")
        with pytest.raises(BackendError):
            ReplayBackend(path)


class TestBuildBackend:
    def test_kinds(self, tmp_path):
        assert isinstance(build_backend(BackendConfig(kind="mock", mock_replies=["a"])), MockBackend)
        assert isinstance(build_backend(BackendConfig()), OracleBackend)
        recorded = build_backend(BackendConfig(kind="oracle", transcript_path=tmp_path / "t.jsonl"))
        assert isinstance(recorded, RecordingBackend)
        assert recorded.name == "oracle"

    def test_replay_needs_path(self):
        with pytest.raises(BackendError):
            build_backend(BackendConfig(kind="replay"))


class TestOracle:
    """Grid-searching stand-in for a model."""

    def test_empty_road_keeps_defaults(self, empty_world):
        """Nothing on the lattice beats the defaults on a free road."""
        assert heuristic_oracle(empty_world).params == PlannerParams()

    def test_swerves_around_blocked_lane(self, blocked_world):
        """With the lane blocked the oracle picks an offset wide enough to pass."""
        response = heuristic_oracle(blocked_world)
        assert len(response.params.lateral_offsets) == 1
        assert abs(response.params.lateral_offsets[0]) == 3.0
        assert response.invoke_emergency_brake is False

    async def test_backend_reply_parses(self, blocked_world):
        """Oracle replies go through the same parser as model replies."""
        backend = OracleBackend()
        request = build_request(
            blocked_world, serialize_scene(blocked_world), InvocationPolicy(), backend, "params", 0, 4
        )
        parsed = parse_param_response(await backend.complete(request))
        assert parsed.params == heuristic_oracle(blocked_world).params

    async def test_search_runs_off_the_event_loop(self, blocked_world, monkeypatch):
        """The lattice search leaves the event loop free for other episodes."""
        threads = []

        def search(world, query_index, simulator, defaults):
            threads.append(threading.get_ident())
            return LlmParamResponse(params=defaults)

        monkeypatch.setattr("llm.llm_backend.heuristic_oracle", search)
        backend = OracleBackend()
        request = build_request(
            blocked_world, serialize_scene(blocked_world), InvocationPolicy(), backend, "params", 0, 4
        )
        await backend.complete(request)
        assert threads and threads[0] != threading.get_ident()

    async def test_waypoint_reply_parses(self, blocked_world):
        backend = OracleBackend()
        request = build_request(
            blocked_world, serialize_scene(blocked_world), InvocationPolicy(), backend, "waypoints", 0, 4
        )
        parsed = parse_trajectory_response(await backend.complete(request), blocked_world.ego)
        assert len(parsed.waypoints) == 4

    async def test_needs_world(self):
        with pytest.raises(BackendError):
            await OracleBackend().complete(_request())
