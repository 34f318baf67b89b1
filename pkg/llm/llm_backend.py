import asyncio
import hashlib
import json
import logging
import os
import random
import time
from abc import ABC, abstractmethod
from collections import defaultdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import openai
from openai import AsyncOpenAI
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from custom_types import TranscriptRecord
from llm.dto import BackendConfig, ChatRequest, LlmParamResponse, WAYPOINT_COUNT, WAYPOINT_SPACING
from llm.llm_exceptions import BackendError
from planner.dto import PlannerParams, ProposalSweep
from planner.idm_planner import generate_proposals
from planner.internal_sim import InternalSimulator
from scene.scene_types import WorldState

logger = logging.getLogger(__name__)

ORACLE_OFFSETS = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0]
ORACLE_FRACTIONS = [0.2, 0.4, 0.6, 0.8, 1.0]
IMPROVEMENT_MARGIN = 1e-9


def scene_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def transcript_key(request: ChatRequest) -> tuple[str, int, int, str]:
    """Replay key; the prompt digest separates planner configurations sharing one transcript."""
    prompt = f"{request.response_format}\n{request.temperature}\n{request.system_prompt}\n{request.user_prompt}"
    return request.scenario_id, request.tick, request.query_index, scene_hash(prompt)


class LlmBackend(ABC):
    """Text-completion backend; implementations must tolerate concurrent callers."""
    name: str = "backend"

    def __init__(self, model_name: str = "mock", max_tokens: int = 512):
        self.model_name = model_name
        self.max_tokens = max_tokens
        self.call_count = 0

    @abstractmethod
    async def complete(self, request: ChatRequest) -> str:
        ...

    async def aclose(self):
        pass


class MockScript(BaseModel):
    """
    Canned replies for the mock backend.

    ``rules`` map a scene hash to a fixed reply and win over ``replies``, which are
    consumed in order per scenario id.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    replies: list[str] = Field(default_factory=list)
    rules: dict[str, str] = Field(default_factory=dict)
    cycle: bool = False


class MockBackend(LlmBackend):
    name = "mock"

    def __init__(self, script: MockScript | list[str], model_name: str = "mock", max_tokens: int = 512):
        super().__init__(model_name, max_tokens)
        self.script = script if isinstance(script, MockScript) else MockScript(replies=list(script))
        self.requests: list[ChatRequest] = []
        self._cursors: dict[str, int] = defaultdict(int)
        self._lock = asyncio.Lock()

    async def complete(self, request: ChatRequest) -> str:
        async with self._lock:
            self.call_count += 1
            self.requests.append(request)
            if request.scene_hash and request.scene_hash in self.script.rules:
                return self.script.rules[request.scene_hash]

            replies = self.script.replies
            cursor = self._cursors[request.scenario_id]
            if not replies or (cursor >= len(replies) and not self.script.cycle):
                raise BackendError(f"Mock script exhausted for scenario {request.scenario_id!r}")
            self._cursors[request.scenario_id] = cursor + 1
            return replies[cursor % len(replies)]


def _oracle_lattice(query_index: int, defaults: PlannerParams) -> ProposalSweep:
    """Coarse parameter lattice; later queries search supersets of earlier ones."""
    decel = [defaults.decel_max] if query_index < 1 else [defaults.decel_max, 5.0]
    headway = [defaults.headway_time] if query_index < 2 else [defaults.headway_time, 1.0]
    return ProposalSweep(
        lateral_offsets=ORACLE_OFFSETS,
        speed_limit_fractions=ORACLE_FRACTIONS,
        fallback_target_velocity=[defaults.fallback_target_velocity],
        min_gap_to_lead_agent=[defaults.min_gap_to_lead_agent],
        headway_time=headway,
        accel_max=[defaults.accel_max],
        decel_max=decel,
        idm_exponent=defaults.idm_exponent,
    )


def _oracle_search(
        world: WorldState,
        query_index: int,
        simulator: InternalSimulator,
        defaults: PlannerParams,
):
    forecast = simulator.forecast(world)
    baseline, baseline_score = simulator.select(world, generate_proposals(world, defaults), forecast)
    lattice = generate_proposals(world, _oracle_lattice(query_index, defaults))
    best, best_score = simulator.select(world, lattice, forecast)
    return baseline, baseline_score, best, best_score, len(lattice)


def heuristic_oracle(
        world: WorldState,
        query_index: int = 0,
        simulator: Optional[InternalSimulator] = None,
        defaults: PlannerParams = PlannerParams(),
) -> LlmParamResponse:
    """
    Scripted ideal assistant: grid-search a lattice with the internal simulator.

    Returns the defaults when no lattice cell beats them, otherwise the best cell.
    """
    simulator = simulator or InternalSimulator()
    _, baseline_score, best, best_score, searched = _oracle_search(world, query_index, simulator, defaults)
    if best.cell is None or best_score <= baseline_score + IMPROVEMENT_MARGIN:
        return LlmParamResponse(
            params=defaults,
            rationale=f"No cell of {searched} beats the defaults ({baseline_score:.2f}).",
        )

    cell = best.cell
    params = PlannerParams(
        lateral_offsets=[cell.lateral_offset],
        speed_limit_fractions=[cell.speed_limit_fraction],
        fallback_target_velocity=cell.fallback_target_velocity,
        min_gap_to_lead_agent=cell.min_gap_to_lead_agent,
        headway_time=cell.headway_time,
        accel_max=cell.accel_max,
        decel_max=cell.decel_max,
        idm_exponent=cell.idm_exponent,
    )
    return LlmParamResponse(
        params=params,
        invoke_emergency_brake=False,
        rationale=(
            f"Offset {cell.lateral_offset:+.1f} m at {cell.speed_limit_fraction:.1f} of the limit "
            f"predicts {best_score:.2f} against {baseline_score:.2f}."
        ),
    )


def oracle_waypoints(
        world: WorldState,
        query_index: int = 0,
        simulator: Optional[InternalSimulator] = None,
        defaults: PlannerParams = PlannerParams(),
) -> tuple[list[tuple[float, float]], str]:
    """Four waypoints sampled every two seconds from the best lattice trajectory."""
    simulator = simulator or InternalSimulator()
    baseline, baseline_score, best, best_score, _ = _oracle_search(world, query_index, simulator, defaults)
    chosen = best if best_score > baseline_score + IMPROVEMENT_MARGIN else baseline
    trajectory = chosen.trajectory
    elapsed = trajectory.times - trajectory.times[0]
    waypoints = []
    for k in range(1, WAYPOINT_COUNT + 1):
        index = int(np.argmin(np.abs(elapsed - k * WAYPOINT_SPACING)))
        waypoints.append((round(float(trajectory.x[index]), 2), round(float(trajectory.y[index]), 2)))
    return waypoints, f"Follow the best lattice trajectory ({max(best_score, baseline_score):.2f})."


class OracleBackend(LlmBackend):
    """
    Answers from ``heuristic_oracle`` in either response format; needs ``request.world``.

    The lattice search runs in a worker thread so concurrent episodes keep stepping.
    """
    name = "oracle"

    def __init__(self, simulator: Optional[InternalSimulator] = None, defaults: PlannerParams = PlannerParams()):
        super().__init__(model_name="heuristic-oracle")
        self.simulator = simulator or InternalSimulator()
        self.defaults = defaults

    async def complete(self, request: ChatRequest) -> str:
        if request.world is None:
            raise BackendError("Oracle backend needs the world state on the request")
        self.call_count += 1
        if request.response_format == "waypoints":
            waypoints, rationale = await asyncio.to_thread(
                oracle_waypoints, request.world, request.query_index, self.simulator, self.defaults,
            )
            return json.dumps({"waypoints": waypoints, "rationale": rationale})

        response = await asyncio.to_thread(
            heuristic_oracle, request.world, request.query_index, self.simulator, self.defaults,
        )
        payload = response.params.model_dump(by_alias=True, exclude={"idm_exponent"})
        payload["invoke_emergency_brake"] = bool(response.invoke_emergency_brake)
        payload["rationale"] = response.rationale
        return json.dumps(payload)


class LiveBackend(LlmBackend):
    """
    Chat-completion client for any endpoint speaking the common wire format.

    Transient failures are retried with exponential backoff and jitter, then raised as BackendError.
    """
    name = "live"

    def __init__(self, config: BackendConfig, client: Optional[AsyncOpenAI] = None):
        model_name = os.environ.get(config.model_env) or config.model_name
        super().__init__(model_name=model_name, max_tokens=config.max_tokens)
        self.config = config
        if client is None:
            base_url = os.environ.get(config.base_url_env)
            if not base_url:
                raise BackendError(f"Environment variable {config.base_url_env} is not set")
            client = AsyncOpenAI(
                base_url=base_url,
                api_key=os.environ.get(config.api_key_env, "unused"),
                timeout=config.timeout_s,
                max_retries=0,
            )
        self.client = client

    async def complete(self, request: ChatRequest) -> str:
        self.call_count += 1
        attempts = self.config.max_retries + 1
        for attempt in range(attempts):
            try:
                response = await self.client.chat.completions.create(
                    model=request.model_name or self.model_name,
                    messages=[
                        {"role": "system", "content": request.system_prompt},
                        {"role": "user", "content": request.user_prompt},
                    ],
                    temperature=request.temperature,
                    max_tokens=request.max_tokens,
                )
                return response.choices[0].message.content or ""
            except (openai.APIConnectionError, openai.RateLimitError, openai.InternalServerError) as e:
                if attempt == attempts - 1:
                    raise BackendError(f"Chat completion failed after {attempts} attempts: {e}") from e
                delay = (self.config.retry_delay_ms / 1000.0) * (2 ** attempt) + random.uniform(0, 0.03)
                logger.debug(f"Retry {attempt + 1}/{self.config.max_retries} after {delay:.3f}s: {e}")
                await asyncio.sleep(delay)
            except openai.APIError as e:
                raise BackendError(f"Chat completion rejected: {e}") from e
        raise BackendError("Chat completion failed")

    async def aclose(self):
        await self.client.close()


class RecordingBackend(LlmBackend):
    """Wraps a backend and appends every exchange to a JSONL transcript."""

    def __init__(self, inner: LlmBackend, path: Path):
        super().__init__(inner.model_name, inner.max_tokens)
        self.name = inner.name
        self.inner = inner
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = asyncio.Lock()

    async def complete(self, request: ChatRequest) -> str:
        started = time.perf_counter()
        response = await self.inner.complete(request)
        self.call_count += 1
        record: TranscriptRecord = {
            "request": request.model_dump(mode="json"),
            "response": response,
            "latency_ms": round((time.perf_counter() - started) * 1000.0, 3),
            "timestamp": datetime.now(timezone.utc).replace(microsecond=0).isoformat(),
        }
        async with self._lock:
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(record) + "\n")
        return response

    async def aclose(self):
        await self.inner.aclose()


class ReplayBackend(LlmBackend):
    """Serves recorded responses keyed by ``transcript_key``."""
    name = "replay"

    def __init__(self, path: Path):
        super().__init__(model_name="replay")
        self.responses: dict[tuple[str, int, int, str], str] = {}
        with Path(path).open(encoding="utf-8") as handle:
            for line in handle:
                if not line.strip():
                    continue
                record: TranscriptRecord = json.loads(line)
                try:
                    request = ChatRequest.model_validate(record["request"])
                except ValidationError as e:
                    raise BackendError(f"Invalid transcript record in {path}: {e}") from e
                self.responses[transcript_key(request)] = record["response"]
        logger.info(f"Loaded {len(self.responses)} recorded responses from {path}")

    async def complete(self, request: ChatRequest) -> str:
        key = transcript_key(request)
        if key not in self.responses:
            raise BackendError(f"No recorded response for {key[:3]}")
        self.call_count += 1
        return self.responses[key]


def build_backend(config: BackendConfig, simulator: Optional[InternalSimulator] = None) -> LlmBackend:
    if config.kind == "mock":
        backend: LlmBackend = MockBackend(MockScript(replies=config.mock_replies, cycle=True))
    elif config.kind == "oracle":
        backend = OracleBackend(simulator)
    elif config.kind == "live":
        backend = LiveBackend(config)
    else:
        if config.replay_path is None:
            raise BackendError("Replay backend needs replay_path")
        backend = ReplayBackend(config.replay_path)

    if config.transcript_path is not None:
        backend = RecordingBackend(backend, config.transcript_path)
    logger.info(f"Using {backend.name} backend with model {backend.model_name}")
    return backend
