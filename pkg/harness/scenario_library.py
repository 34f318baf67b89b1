import logging
import math
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from pydantic import ValidationError
from shapely.geometry import LineString

from harness.harness_exceptions import ScenarioNotFoundError
from scene.scene_exceptions import ScenarioValidationError
from scene.scene_types import (
    AgentState,
    EgoState,
    Lane,
    LightPhase,
    Pose2D,
    Scenario,
    SpeedKeyframe,
    TrafficLight,
)

logger = logging.getLogger(__name__)

LANE_WIDTH = 3.5
HALF_LANE = LANE_WIDTH / 2.0
URBAN_LIMIT = 13.9
SLOW_LIMIT = 11.1
CONE_INTRUSION = 0.8

ADVERSARIAL_SUITE = ("cone_corridor", "lane_narrowing", "cross_traffic", "sharp_turn")


def straight_lane(
        lane_id: str,
        start: tuple[float, float],
        end: tuple[float, float],
        speed_limit: Optional[float] = URBAN_LIMIT,
        successors: tuple[str, ...] = (),
) -> Lane:
    return Lane(id=lane_id, centerline=[start, end], speed_limit=speed_limit, successors=list(successors))


def box_polygon(x_min: float, x_max: float, y_min: float, y_max: float) -> list[tuple[float, float]]:
    return [(x_min, y_min), (x_max, y_min), (x_max, y_max), (x_min, y_max)]


class _Jitter:
    """Scales agent speeds by up to ±5 %; identity without a seed."""

    def __init__(self, seed: Optional[int]):
        self.rng = np.random.default_rng(seed) if seed is not None else None

    def __call__(self, speed: float) -> float:
        if self.rng is None or speed == 0.0:
            return speed
        return round(speed * (1.0 + self.rng.uniform(-0.05, 0.05)), 3)


def free_road(seed: Optional[int] = None) -> Scenario:
    return Scenario(
        id="free_road",
        description="Straight 500 m lane without agents; the base planner should score close to 1.",
        lanes=[straight_lane("main", (0.0, 0.0), (500.0, 0.0))],
        drivable_polygon=box_polygon(-10.0, 510.0, -HALF_LANE, HALF_LANE),
        ego_init=EgoState(pose=Pose2D(x=10.0, y=0.0), velocity=URBAN_LIMIT),
        expert_progress=URBAN_LIMIT * 15.0,
    )


def lead_follow(seed: Optional[int] = None) -> Scenario:
    jitter = _Jitter(seed)
    return Scenario(
        id="lead_follow",
        description="Slower leader ahead and a follower keeping its distance behind; no expected failure.",
        lanes=[straight_lane("main", (-50.0, 0.0), (400.0, 0.0))],
        drivable_polygon=box_polygon(-60.0, 410.0, -HALF_LANE, HALF_LANE),
        ego_init=EgoState(pose=Pose2D(x=20.0, y=0.0), velocity=10.0),
        agents_init=[
            AgentState(id="follower", pose=Pose2D(x=0.0, y=0.0), speed=jitter(8.0), lane_id="main"),
            AgentState(id="leader", pose=Pose2D(x=45.0, y=0.0), speed=jitter(8.0), lane_id="main"),
        ],
        expert_progress=8.0 * 15.0,
    )


def stopped_leader(seed: Optional[int] = None) -> Scenario:
    return Scenario(
        id="stopped_leader",
        description="Stalled vehicle on a single-lane road; the ego has to stop behind it.",
        lanes=[straight_lane("main", (0.0, 0.0), (300.0, 0.0), SLOW_LIMIT)],
        drivable_polygon=box_polygon(-10.0, 310.0, -HALF_LANE, HALF_LANE),
        ego_init=EgoState(pose=Pose2D(x=10.0, y=0.0), velocity=SLOW_LIMIT),
        agents_init=[AgentState(id="stalled", pose=Pose2D(x=90.0, y=0.0), speed=0.0, lane_id="main")],
        expert_progress=75.0,
    )


def cone_corridor(seed: Optional[int] = None) -> Scenario:
    cones = [
        AgentState(
            id=f"cone_{i:02d}", kind="static_object",
            pose=Pose2D(x=40.0 + 5.0 * i, y=HALF_LANE - CONE_INTRUSION / 2.0),
            length=0.6, width=CONE_INTRUSION, lane_id="main",
        )
        for i in range(7)
    ]
    return Scenario(
        id="cone_corridor",
        description=(
            "Cones reach 0.8 m into the route lane from the left over 30 m; the centred proposals clip "
            "them and stop behind while offsets to the right pass."
        ),
        lanes=[
            straight_lane("main", (0.0, 0.0), (300.0, 0.0), SLOW_LIMIT),
            straight_lane("right", (0.0, -LANE_WIDTH), (300.0, -LANE_WIDTH), SLOW_LIMIT),
        ],
        drivable_polygon=box_polygon(-10.0, 310.0, -LANE_WIDTH - HALF_LANE, HALF_LANE),
        ego_init=EgoState(pose=Pose2D(x=10.0, y=0.0), velocity=SLOW_LIMIT),
        agents_init=cones,
        route=["main"],
        expert_progress=SLOW_LIMIT * 15.0,
    )


def lane_narrowing(seed: Optional[int] = None) -> Scenario:
    return Scenario(
        id="lane_narrowing",
        description=(
            "The mapped route lane is stale: the drivable area tapers from two lanes to the left one "
            "between x=40 and x=80, so the base offsets leave the road."
        ),
        lanes=[
            straight_lane("main", (0.0, 0.0), (300.0, 0.0)),
            straight_lane("left", (0.0, LANE_WIDTH), (300.0, LANE_WIDTH)),
        ],
        drivable_polygon=[
            (-10.0, -HALF_LANE), (40.0, -HALF_LANE), (80.0, HALF_LANE), (310.0, HALF_LANE),
            (310.0, LANE_WIDTH + HALF_LANE), (-10.0, LANE_WIDTH + HALF_LANE),
        ],
        ego_init=EgoState(pose=Pose2D(x=10.0, y=0.0), velocity=URBAN_LIMIT),
        route=["main"],
        expert_progress=URBAN_LIMIT * 15.0,
    )


def cross_traffic(seed: Optional[int] = None) -> Scenario:
    jitter = _Jitter(seed)
    x_cross = 70.0
    return Scenario(
        id="cross_traffic",
        description=(
            "A vehicle waiting on a perpendicular lane starts crossing at 1.5 s; the ego arrives while "
            "the crossing is blocked unless it slows down."
        ),
        lanes=[
            straight_lane("main", (0.0, 0.0), (300.0, 0.0)),
            straight_lane("cross", (x_cross, -40.0), (x_cross, 40.0), 8.3),
        ],
        drivable_polygon=[
            (-10.0, -HALF_LANE), (x_cross - HALF_LANE, -HALF_LANE), (x_cross - HALF_LANE, -40.0),
            (x_cross + HALF_LANE, -40.0), (x_cross + HALF_LANE, -HALF_LANE), (310.0, -HALF_LANE),
            (310.0, HALF_LANE), (x_cross + HALF_LANE, HALF_LANE), (x_cross + HALF_LANE, 40.0),
            (x_cross - HALF_LANE, 40.0), (x_cross - HALF_LANE, HALF_LANE), (-10.0, HALF_LANE),
        ],
        ego_init=EgoState(pose=Pose2D(x=10.0, y=0.0), velocity=URBAN_LIMIT),
        agents_init=[
            AgentState(id="crosser", pose=Pose2D(x=x_cross, y=-9.0, heading=math.pi / 2), speed=0.0, lane_id="cross"),
        ],
        agent_scripts={"crosser": [SpeedKeyframe(time=1.5, speed=jitter(3.0))]},
        route=["main"],
        expert_progress=180.0,
    )


def sharp_turn(seed: Optional[int] = None) -> Scenario:
    jitter = _Jitter(seed)
    radius = 25.0
    angles = np.linspace(-math.pi / 2, 0.0, 21)
    arc = [(50.0 + radius * math.cos(a), radius + radius * math.sin(a)) for a in angles]
    arc[0], arc[-1] = (50.0, 0.0), (75.0, 25.0)
    lanes = [
        straight_lane("approach", (0.0, 0.0), (50.0, 0.0), 15.0, successors=("turn",)),
        Lane(id="turn", centerline=arc, speed_limit=None, is_connector=True, successors=["exit"]),
        straight_lane("exit", (75.0, 25.0), (75.0, 200.0), 15.0),
    ]
    spine = LineString([(0.0, 0.0)] + arc[1:] + [(75.0, 200.0)])
    footprint = spine.buffer(HALF_LANE + 0.75, cap_style="flat", join_style="round")
    polygon = [(round(x, 3), round(y, 3)) for x, y in list(footprint.exterior.coords)[:-1]]
    return Scenario(
        id="sharp_turn",
        description=(
            "Left turn of radius 25 m whose connector inherits the 15 m/s limit; holding the limit "
            "through the turn breaks the comfort bounds while a slower vehicle leaves ahead."
        ),
        lanes=lanes,
        drivable_polygon=polygon,
        ego_init=EgoState(pose=Pose2D(x=10.0, y=0.0), velocity=15.0),
        agents_init=[
            AgentState(id="exiting", pose=Pose2D(x=75.0, y=60.0, heading=math.pi / 2), speed=jitter(6.0), lane_id="exit"),
        ],
        expert_progress=150.0,
    )


def pedestrian_crossing(seed: Optional[int] = None) -> Scenario:
    jitter = _Jitter(seed)
    return Scenario(
        id="pedestrian_crossing",
        description="Pedestrian stepping onto the road at 1.2 m/s so that it meets an unchanged ego.",
        lanes=[straight_lane("main", (0.0, 0.0), (300.0, 0.0))],
        drivable_polygon=box_polygon(-10.0, 310.0, -HALF_LANE, HALF_LANE),
        ego_init=EgoState(pose=Pose2D(x=10.0, y=0.0), velocity=10.0),
        agents_init=[
            AgentState(
                id="pedestrian", kind="pedestrian", pose=Pose2D(x=45.0, y=-5.1, heading=math.pi / 2),
                speed=jitter(1.2), length=0.5, width=0.5,
            ),
        ],
        expert_progress=140.0,
    )


def signal_stop(seed: Optional[int] = None) -> Scenario:
    return Scenario(
        id="signal_stop",
        description="Light turning red at 2 s guards a stop line 60 m ahead; the ego must stop before it.",
        lanes=[straight_lane("main", (0.0, 0.0), (300.0, 0.0), SLOW_LIMIT)],
        drivable_polygon=box_polygon(-10.0, 310.0, -HALF_LANE, HALF_LANE),
        ego_init=EgoState(pose=Pose2D(x=10.0, y=0.0), velocity=SLOW_LIMIT),
        traffic_lights=[TrafficLight(
            lane_id="main", stop_arc=70.0,
            schedule=[LightPhase(start_time=0.0, state="green"), LightPhase(start_time=2.0, state="red")],
        )],
        expert_progress=55.0,
    )


BUILTIN_GENERATORS: dict[str, Callable[[Optional[int]], Scenario]] = {
    "free_road": free_road,
    "lead_follow": lead_follow,
    "stopped_leader": stopped_leader,
    "cone_corridor": cone_corridor,
    "lane_narrowing": lane_narrowing,
    "cross_traffic": cross_traffic,
    "sharp_turn": sharp_turn,
    "pedestrian_crossing": pedestrian_crossing,
    "signal_stop": signal_stop,
}


def builtin_scenarios(seed: Optional[int] = None) -> list[Scenario]:
    return [generator(seed) for generator in BUILTIN_GENERATORS.values()]


def load_scenarios(directory: Path) -> list[Scenario]:
    """Every ``*.json`` scenario document in a directory, sorted by file name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ScenarioNotFoundError(f"Scenario directory {directory} does not exist")
    scenarios = []
    for path in sorted(directory.glob("*.json")):
        try:
            scenarios.append(Scenario.model_validate_json(path.read_text(encoding="utf-8")))
        except ValidationError as e:
            raise ScenarioValidationError(f"Invalid scenario {path.name}: {e}") from e
    logger.info(f"Loaded {len(scenarios)} scenarios from {directory}")
    return scenarios


def select_scenarios(selection: str, seed: Optional[int] = None) -> list[Scenario]:
    """
    Resolve a scenario selection.

    Accepts ``builtin``, ``adversarial``, a comma-separated list of builtin names, or a directory.
    """
    if selection == "builtin":
        return builtin_scenarios(seed)
    if selection == "adversarial":
        return [BUILTIN_GENERATORS[name](seed) for name in ADVERSARIAL_SUITE]
    names = [name.strip() for name in selection.split(",") if name.strip()]
    if names and all(name in BUILTIN_GENERATORS for name in names):
        return [BUILTIN_GENERATORS[name](seed) for name in names]
    path = Path(selection)
    if path.is_dir():
        return load_scenarios(path)
    raise ScenarioNotFoundError(f"Unknown scenario selection {selection!r}")
