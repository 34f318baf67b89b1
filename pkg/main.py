import asyncio
import json
import logging
from pathlib import Path
from typing import Optional

import typer
from rich.console import Console

from config.config_exceptions import ConfigError
from config.run_config import RunConfig, format_report, load_config
from harness.episode_runner import benchmark_table, load_episode, run_benchmark, score_episode
from harness.harness_exceptions import HarnessError
from harness.roc import roc_analysis
from harness.scenario_library import select_scenarios
from llm.llm_assist import Planner
from llm.llm_backend import build_backend
from llm.llm_exceptions import LlmError
from planner.internal_sim import InternalSimulator
from planner.planner_exceptions import PlannerError
from scene.scene_exceptions import SceneError

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
EXIT_CONFIG_ERROR = 1
EXIT_RUNTIME_ERROR = 2

logger = logging.getLogger(__name__)
app = typer.Typer(help="Closed-loop benchmark for an LLM-assisted rule-based driving planner.", no_args_is_help=True)
console = Console()


def _configure_logging(level: str):
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)


async def _run(config: RunConfig) -> Path:
    scenarios = select_scenarios(config.scenarios, config.seed)
    simulator = InternalSimulator()
    backend = build_backend(config.backend, simulator) if config.planner != "base" else None
    planner = Planner(
        mode=config.planner, policy=config.policy, backend=backend, params=config.params,
        simulator=simulator, name=config.planner,
    )
    try:
        result = await run_benchmark(
            scenarios, {planner.name: planner}, config.simulation_mode, config.out_dir, config.workers,
        )
    finally:
        if backend is not None:
            await backend.aclose()

    csv_text, table = format_report(result.table)
    summary = config.out_dir / "summary.csv"
    summary.parent.mkdir(parents=True, exist_ok=True)
    summary.write_text(csv_text, encoding="utf-8")
    console.print(table)
    failed = [log.scenario_id for logs in result.logs.values() for log in logs if log.failed]
    if failed:
        logger.warning(f"⚠️  {len(failed)} episodes failed: {', '.join(failed)}")
    return summary


@app.command()
def run(
        config_path: Optional[Path] = typer.Option(None, "--config", help="JSON file mirroring RunConfig"),
        scenarios: Optional[str] = typer.Option(None, help="builtin, adversarial, names or a directory"),
        planner: Optional[str] = typer.Option(None, help="base, assist-par, assist-unc or llm-only"),
        mode: Optional[str] = typer.Option(None, help="non_reactive or reactive"),
        queries: Optional[int] = typer.Option(None, help="LLM queries per planning step (0, 1, 2 or 4)"),
        threshold: Optional[float] = typer.Option(None, help="Predicted score below which the LLM is asked"),
        temperature: Optional[float] = typer.Option(None, help="Sampling temperature"),
        backend: Optional[str] = typer.Option(None, help="mock, oracle, live or replay"),
        replay: Optional[Path] = typer.Option(None, help="Transcript to replay"),
        transcript: Optional[Path] = typer.Option(None, help="Record exchanges to this JSONL file"),
        out: Optional[Path] = typer.Option(None, help="Output directory"),
        seed: Optional[int] = typer.Option(None, help="Seed for scenario jitter"),
        workers: Optional[int] = typer.Option(None, help="Concurrent episodes"),
        log_level: str = typer.Option("INFO", help="Logging level"),
):
    """Run the benchmark and write episode logs plus summary.csv."""
    _configure_logging(log_level)
    overrides = {
        "scenarios": scenarios,
        "planner": planner,
        "mode": mode.replace("-", "_") if mode else None,
        "policy.max_queries_per_step": queries,
        "policy.score_threshold": threshold,
        "policy.temperature": temperature,
        "backend.kind": backend,
        "backend.replay_path": str(replay) if replay else None,
        "backend.transcript_path": str(transcript) if transcript else None,
        "out_dir": str(out) if out else None,
        "seed": seed,
        "workers": workers,
    }
    try:
        config = load_config(config_path, overrides)
    except ConfigError as e:
        logger.error(f"❌ {e}")
        raise typer.Exit(code=EXIT_CONFIG_ERROR)

    try:
        summary = asyncio.run(_run(config))
    except (HarnessError, SceneError, PlannerError, LlmError) as e:
        logger.error(f"❌ Run failed: {e}")
        raise typer.Exit(code=EXIT_RUNTIME_ERROR)
    except Exception as e:
        logger.error(f"❌ Unexpected error: {e}", exc_info=True)
        raise typer.Exit(code=EXIT_RUNTIME_ERROR)
    logger.info(f"✓ Summary written to {summary}")


@app.command()
def roc(
        logs: Path = typer.Option(..., help="Directory searched recursively for *.episode.json"),
        gt_threshold: float = typer.Option(..., min=0.0, max=1.0, help="True score below which a scenario is a failure"),
        out: Optional[Path] = typer.Option(None, help="Where to write the ROC points (JSON)"),
        log_level: str = typer.Option("INFO", help="Logging level"),
):
    """ROC of the minimum predicted score against the driven score."""
    _configure_logging(log_level)
    try:
        episodes = [load_episode(path) for path in sorted(logs.rglob("*.episode.json"))]
        result = roc_analysis(episodes, gt_threshold)
    except HarnessError as e:
        logger.error(f"❌ ROC failed: {e}")
        raise typer.Exit(code=EXIT_RUNTIME_ERROR)
    except Exception as e:
        logger.error(f"❌ Unexpected error: {e}", exc_info=True)
        raise typer.Exit(code=EXIT_RUNTIME_ERROR)

    target = out or logs / "roc.json"
    target.write_text(result.model_dump_json(indent=2), encoding="utf-8")
    console.print(f"AUC {result.auc:.3f} over {result.positives} positive / {result.negatives} negative scenarios")
    logger.info(f"✓ ROC points written to {target}")


@app.command()
def score(
        log: Path = typer.Option(..., help="An *.episode.json file"),
        log_level: str = typer.Option("INFO", help="Logging level"),
):
    """Re-score a recorded episode and print its table row."""
    _configure_logging(log_level)
    try:
        episode = load_episode(log)
        episode.report = score_episode(episode)
    except HarnessError as e:
        logger.error(f"❌ Scoring failed: {e}")
        raise typer.Exit(code=EXIT_RUNTIME_ERROR)
    except Exception as e:
        logger.error(f"❌ Unexpected error: {e}", exc_info=True)
        raise typer.Exit(code=EXIT_RUNTIME_ERROR)

    _, table = format_report(benchmark_table({episode.planner: [episode]}))
    console.print(table)
    console.print(json.dumps(episode.report.model_dump(exclude={"violations", "collision_events"}), indent=2))


if __name__ == "__main__":
    app()
