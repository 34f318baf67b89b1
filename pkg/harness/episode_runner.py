import asyncio
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import pandas as pd

from harness.agent_policies import make_agent_policy
from harness.dto import COLUMN_METRICS, TABLE_COLUMNS, EpisodeLog, SimulationMode, TickRecord
from harness.harness_exceptions import EpisodeFailedError
from llm.llm_assist import Planner
from llm.llm_exceptions import LlmError
from metrics.closed_loop_metrics import ScoringContext, evaluate_episode
from metrics.dto import MetricReport
from planner.planner_exceptions import PlannerError
from scene.scene_exceptions import SceneError
from scene.scene_types import EgoState, Scenario, Trajectory, WorldState

logger = logging.getLogger(__name__)


def advance_ego(ego: EgoState, trajectory: Trajectory, next_time: float) -> EgoState:
    """Perfect tracking of the first planned step."""
    if len(trajectory) < 2:
        return ego.model_copy(update={"velocity": ego.velocity, "acceleration": 0.0, "timestamp": next_time})
    velocity = float(trajectory.velocity[1])
    return ego.model_copy(update={
        "pose": trajectory.pose_at(1),
        "velocity": velocity,
        "acceleration": (velocity - float(trajectory.velocity[0])) / trajectory.dt,
        "timestamp": next_time,
    })


def score_episode(log: EpisodeLog) -> MetricReport:
    """Score the driven ego states against the logged agents with the full metric suite."""
    if not log.ticks:
        raise EpisodeFailedError(f"Episode {log.scenario_id} has no ticks to score")
    ego = log.ticks[0].ego
    return evaluate_episode(
        log.ego_trajectory(),
        log.agent_tracks(),
        ScoringContext.from_scenario(log.scenario),
        ego_length=ego.length,
        ego_width=ego.width,
    )


async def run_episode(
        scenario: Scenario,
        planner: Planner,
        mode: Optional[SimulationMode] = None,
) -> EpisodeLog:
    """
    Drive one scenario closed-loop: plan, execute the first step, advance the agents, repeat.

    A planner exception ends the episode early; the log is then marked failed and unscored.
    """
    if mode is None:
        mode = "reactive" if scenario.agent_policy == "reactive_idm" else "non_reactive"
    policy = make_agent_policy(scenario, mode)
    log = EpisodeLog(scenario=scenario, planner=planner.name, mode=mode)

    dt = scenario.dt
    ego = scenario.ego_init.model_copy(update={"timestamp": 0.0})
    agents = policy.initial()
    for tick in range(scenario.duration_steps):
        world = WorldState(scenario=scenario, tick=tick, ego=ego, agents=agents)
        try:
            decision = await planner.plan(world)
        except (PlannerError, LlmError, SceneError) as e:
            return _failed(log, tick, f"{type(e).__name__}: {e}")
        except Exception as e:
            logger.error(f"Unexpected planner failure in {scenario.id} at tick {tick}: {e}", exc_info=True)
            return _failed(log, tick, f"{type(e).__name__}: {e}")

        log.ticks.append(TickRecord(
            tick=tick,
            ego=ego,
            agents=list(agents),
            provenance=decision.provenance,
            predicted_aggregate=decision.predicted_aggregate,
            selected_aggregate=decision.selected_aggregate,
            queries_used=decision.queries_used,
        ))
        log.decisions.append(dict(decision.to_record(world.time)))

        next_ego = advance_ego(ego, decision.trajectory, (tick + 1) * dt)
        agents = policy.step(tick, agents, ego)
        ego = next_ego

    log.report = score_episode(log)
    logger.info(
        f"Episode {scenario.id} [{planner.name}, {mode}] finished: score={log.report.aggregate:.3f}, "
        f"queries={sum(t.queries_used for t in log.ticks)}"
    )
    return log


def _failed(log: EpisodeLog, tick: int, diagnostic: str) -> EpisodeLog:
    logger.warning(f"Episode {log.scenario_id} failed at tick {tick}: {diagnostic}")
    log.failed = True
    log.diagnostic = f"tick {tick}: {diagnostic}"
    return log


def episode_row(log: EpisodeLog) -> dict[str, float]:
    """One table row, ×100; failed or unscored episodes count as zero."""
    if log.failed or log.report is None:
        return {column: 0.0 for column in TABLE_COLUMNS}
    return {column: 100.0 * getattr(log.report, metric) for column, metric in COLUMN_METRICS.items()}


def benchmark_table(logs: Mapping[str, Sequence[EpisodeLog]]) -> pd.DataFrame:
    """Mean of every metric ×100 per planner configuration, in table column order."""
    rows = []
    for config, episodes in logs.items():
        frame = pd.DataFrame([episode_row(log) for log in episodes], columns=list(TABLE_COLUMNS))
        row = frame.mean() if len(frame) else pd.Series(0.0, index=list(TABLE_COLUMNS))
        rows.append(row.rename(config))
    table = pd.DataFrame(rows, columns=list(TABLE_COLUMNS))
    table.index.name = "planner"
    return table


def write_episode(log: EpisodeLog, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{log.scenario_id}.episode.json"
    path.write_text(log.model_dump_json(indent=1), encoding="utf-8")
    with (directory / f"{log.scenario_id}.decisions.jsonl").open("w", encoding="utf-8") as handle:
        for record in log.decisions:
            handle.write(json.dumps(record) + "\n")
    return path


def load_episode(path: Path) -> EpisodeLog:
    return EpisodeLog.model_validate_json(Path(path).read_text(encoding="utf-8"))


@dataclass
class BenchmarkResult:
    table: pd.DataFrame
    logs: dict[str, list[EpisodeLog]] = field(default_factory=dict)


async def run_benchmark(
        scenarios: Sequence[Scenario],
        planners: Mapping[str, Planner],
        mode: SimulationMode = "non_reactive",
        out_dir: Optional[Path] = None,
        workers: int = 4,
) -> BenchmarkResult:
    """
    Run every planner configuration on every scenario in a bounded worker pool.

    ``workers`` bounds how many episodes are in flight. Episodes interleave at their backend
    awaits; oracle searches and live requests overlap, the per-tick planning itself does not.
    Results are ordered by scenario id regardless of completion order.
    """
    semaphore = asyncio.Semaphore(max(1, workers))
    ordered = sorted(scenarios, key=lambda s: s.id)

    async def worker(planner: Planner, scenario: Scenario) -> EpisodeLog:
        async with semaphore:
            return await run_episode(scenario, planner, mode)

    logs: dict[str, list[EpisodeLog]] = {}
    for config, planner in planners.items():
        logs[config] = list(await asyncio.gather(*(worker(planner, scenario) for scenario in ordered)))
        if out_dir is not None:
            for log in logs[config]:
                write_episode(log, Path(out_dir) / config)

    table = benchmark_table(logs)
    logger.info(f"Benchmark finished: {len(planners)} configurations x {len(ordered)} scenarios")
    return BenchmarkResult(table=table, logs=logs)
