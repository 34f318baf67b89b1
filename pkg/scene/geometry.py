import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence, Union

import numpy as np

from scene.scene_exceptions import InvalidLaneError

if TYPE_CHECKING:
    from scene.scene_types import AgentState, EgoState, Lane

OFF_LANE_PENALTY = 1.0e3


def normalize_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped = math.pi
    return wrapped


def resample_polyline(xy: np.ndarray, spacing: float) -> np.ndarray:
    """Insert points so that no segment is longer than ``spacing``."""
    xy = np.asarray(xy, dtype=float)
    pieces = []
    for start, end in zip(xy[:-1], xy[1:]):
        length = float(np.hypot(*(end - start)))
        count = max(1, math.ceil(length / spacing - 1e-9))
        pieces.append(np.linspace(start, end, count + 1)[:-1])
    pieces.append(xy[-1:])
    return np.concatenate(pieces, axis=0)


def polyline_headings(xy: np.ndarray) -> np.ndarray:
    """Heading of the outgoing segment at every vertex; the last vertex reuses the last segment."""
    deltas = np.diff(xy, axis=0)
    headings = np.arctan2(deltas[:, 1], deltas[:, 0])
    return np.append(headings, headings[-1])


def box_corners(
        x: Union[float, np.ndarray],
        y: Union[float, np.ndarray],
        heading: Union[float, np.ndarray],
        length: Union[float, np.ndarray],
        width: Union[float, np.ndarray],
) -> np.ndarray:
    """
    Corners of oriented rectangles, broadcast over all inputs.

    Returns:
        Array of shape (..., 4, 2) ordered front-left, front-right, rear-right, rear-left.
    """
    x, y, heading, length, width = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (x, y, heading, length, width))
    )
    cos_h, sin_h = np.cos(heading), np.sin(heading)
    half_l, half_w = length / 2.0, width / 2.0
    fwd = np.stack([cos_h * half_l, sin_h * half_l], axis=-1)
    left = np.stack([-sin_h * half_w, cos_h * half_w], axis=-1)
    center = np.stack([x, y], axis=-1)
    return np.stack(
        [center + fwd + left, center + fwd - left, center - fwd - left, center - fwd + left],
        axis=-2,
    )


def bounding_box_corners(state: Union["AgentState", "EgoState"]) -> np.ndarray:
    """Four corners of the oriented box of an agent or the ego, shape (4, 2)."""
    pose = state.pose
    return box_corners(pose.x, pose.y, pose.heading, state.length, state.width)


def boxes_overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Separating-axis test between oriented rectangles, broadcast over leading dims.

    Touching boxes count as overlapping.

    Args:
        a: corners of shape (..., 4, 2)
        b: corners of shape (..., 4, 2)

    Returns:
        Boolean array over the broadcast leading dims.
    """
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    axes = np.stack(
        [
            a[..., 1, :] - a[..., 0, :],
            a[..., 3, :] - a[..., 0, :],
            b[..., 1, :] - b[..., 0, :],
            b[..., 3, :] - b[..., 0, :],
        ],
        axis=-2,
    )
    proj_a = np.einsum("...kd,...cd->...kc", axes, a)
    proj_b = np.einsum("...kd,...cd->...kc", axes, b)
    separated = (proj_a.max(axis=-1) < proj_b.min(axis=-1)) | (proj_b.max(axis=-1) < proj_a.min(axis=-1))
    return ~separated.any(axis=-1)


def boxes_intersect(a: np.ndarray, b: np.ndarray) -> bool:
    """True iff the two oriented rectangles overlap."""
    return bool(boxes_overlap(a, b))


@dataclass(frozen=True, eq=False)
class ReferencePath:
    """
    Polyline with arc-length parametrisation used for lanes and the ego route.

    Positions beyond either end extrapolate along the first/last segment.
    """
    points: np.ndarray
    arc: np.ndarray
    segment_headings: np.ndarray
    speed_limits: np.ndarray
    half_widths: np.ndarray
    segment_lanes: np.ndarray
    lane_ids: tuple[str, ...]

    @classmethod
    def from_lanes(
            cls,
            lanes: Sequence["Lane"],
            speed_limits: Optional[Sequence[Optional[float]]] = None
    ) -> "ReferencePath":
        """Concatenate lane centerlines in order; a lane starting where the previous ends is stitched."""
        if not lanes:
            raise InvalidLaneError("Reference path needs at least one lane")
        limits = speed_limits if speed_limits is not None else [lane.speed_limit for lane in lanes]

        chunks, seg_limits, seg_widths, seg_lanes = [], [], [], []
        for index, (lane, limit) in enumerate(zip(lanes, limits)):
            if len(lane.centerline) < 2:
                raise InvalidLaneError(f"Lane {lane.id} has fewer than 2 centerline points")
            xy = np.array([[p.x, p.y] for p in lane.centerline], dtype=float)
            if chunks and np.hypot(*(xy[0] - chunks[-1][-1])) < 1e-6:
                xy = xy[1:]
            if len(xy) == 0:
                continue
            seg_count = len(xy) if chunks else len(xy) - 1
            chunks.append(xy)
            seg_limits.append(np.full(seg_count, np.nan if limit is None else float(limit)))
            seg_widths.append(np.full(seg_count, lane.width / 2.0))
            seg_lanes.append(np.full(seg_count, index, dtype=int))

        points = np.concatenate(chunks, axis=0)
        deltas = np.diff(points, axis=0)
        seg_lengths = np.hypot(deltas[:, 0], deltas[:, 1])
        if np.any(seg_lengths <= 1e-9):
            raise InvalidLaneError("Reference path contains repeated points")
        return cls(
            points=points,
            arc=np.concatenate([[0.0], np.cumsum(seg_lengths)]),
            segment_headings=np.arctan2(deltas[:, 1], deltas[:, 0]),
            speed_limits=np.concatenate(seg_limits),
            half_widths=np.concatenate(seg_widths),
            segment_lanes=np.concatenate(seg_lanes),
            lane_ids=tuple(lane.id for lane in lanes),
        )

    @property
    def length(self) -> float:
        return float(self.arc[-1])

    def _segment(self, s: np.ndarray) -> np.ndarray:
        index = np.searchsorted(self.arc, s, side="right") - 1
        return np.clip(index, 0, len(self.segment_headings) - 1)

    def heading_at(self, s):
        return self.segment_headings[self._segment(np.asarray(s, dtype=float))]

    def speed_limit_at(self, s):
        return self.speed_limits[self._segment(np.asarray(s, dtype=float))]

    def half_width_at(self, s):
        return self.half_widths[self._segment(np.asarray(s, dtype=float))]

    def position_at(self, s, offset=0.0) -> tuple[np.ndarray, np.ndarray]:
        """Point at arc length ``s`` shifted ``offset`` meters to the left."""
        s = np.asarray(s, dtype=float)
        index = self._segment(s)
        heading = self.segment_headings[index]
        along = s - self.arc[index]
        cos_h, sin_h = np.cos(heading), np.sin(heading)
        x = self.points[index, 0] + along * cos_h - offset * sin_h
        y = self.points[index, 1] + along * sin_h + offset * cos_h
        return x, y

    def project(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """
        Nearest-segment projection of points.

        Args:
            xy: points of shape (M, 2) or (2,)

        Returns:
            (arc_length, signed_lateral_offset), offset positive to the left
        """
        xy = np.asarray(xy, dtype=float)
        single = xy.ndim == 1
        pts = np.atleast_2d(xy)

        start = self.points[:-1]
        seg = self.points[1:] - start
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        unit = seg / seg_len[:, None]

        rel = pts[:, None, :] - start[None, :, :]
        t = np.einsum("mkd,kd->mk", rel, unit)
        lower = np.zeros_like(seg_len)
        upper = seg_len.copy()
        lower[0] = -np.inf
        upper[-1] = np.inf
        t_clamped = np.clip(t, lower, upper)
        foot = start[None, :, :] + t_clamped[..., None] * unit[None, :, :]
        dist = np.hypot(pts[:, None, 0] - foot[..., 0], pts[:, None, 1] - foot[..., 1])

        best = np.argmin(dist, axis=1)
        rows = np.arange(len(pts))
        cross = unit[best, 0] * rel[rows, best, 1] - unit[best, 1] * rel[rows, best, 0]
        side = np.where(cross < 0.0, -1.0, 1.0)
        s = self.arc[best] + t_clamped[rows, best]
        d = side * dist[rows, best]
        if single:
            return s[0], d[0]
        return s, d


def project_to_centerline(lane: "Lane", point: Sequence[float]) -> tuple[float, float]:
    """
    Project a 2D point onto a lane centerline.

    Returns:
        (arc_length, signed_lateral_offset) with the offset positive to the left of travel.
    """
    if len(lane.centerline) < 2:
        raise InvalidLaneError(f"Lane {lane.id} has an empty centerline")
    s, d = lane.path().project(np.asarray(point, dtype=float))
    return float(s), float(d)


class LaneMap:
    """Nearest-lane lookup over all lanes of a scenario."""

    def __init__(self, lanes: Sequence["Lane"]):
        if not lanes:
            raise InvalidLaneError("Lane map needs at least one lane")
        self.lanes = list(lanes)
        self.lane_ids = [lane.id for lane in lanes]
        self.paths = [lane.path() for lane in lanes]
        self.effective_limits = np.array(
            [np.nan if limit is None else limit for limit in self._effective_limits()], dtype=float
        )

    def _effective_limits(self) -> list[Optional[float]]:
        by_id = {lane.id: lane for lane in self.lanes}
        predecessors: dict[str, list[str]] = {lane.id: [] for lane in self.lanes}
        for lane in self.lanes:
            for successor in lane.successors:
                if successor in predecessors:
                    predecessors[successor].append(lane.id)

        limits = []
        for lane in self.lanes:
            if not lane.is_connector:
                limits.append(lane.speed_limit)
                continue
            neighbours = [
                by_id[other].speed_limit
                for other in predecessors[lane.id] + [s for s in lane.successors if s in by_id]
                if by_id[other].speed_limit is not None
            ]
            limits.append(max(neighbours) if neighbours else lane.speed_limit)
        return limits

    def locate(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Assign each point to the lane with the smallest lateral offset among lanes covering it.

        Returns:
            (lane_index, arc_length, lateral_offset) arrays of length M
        """
        pts = np.atleast_2d(np.asarray(xy, dtype=float))
        s_all = np.empty((len(self.paths), len(pts)))
        d_all = np.empty_like(s_all)
        cost = np.empty_like(s_all)
        for i, path in enumerate(self.paths):
            s, d = path.project(pts)
            s_all[i], d_all[i] = s, d
            covered = (s >= -1e-6) & (s <= path.length + 1e-6)
            cost[i] = np.abs(d) + np.where(covered, 0.0, OFF_LANE_PENALTY)
        index = np.argmin(cost, axis=0)
        cols = np.arange(len(pts))
        return index, s_all[index, cols], d_all[index, cols]

    def speed_limits(self, xy: np.ndarray) -> np.ndarray:
        """Effective speed limit at each point, NaN where the lane has none."""
        index, _, _ = self.locate(xy)
        return self.effective_limits[index]

    def headings(self, xy: np.ndarray) -> np.ndarray:
        """Travel direction of the located lane at each point."""
        index, s, _ = self.locate(xy)
        out = np.empty(len(index))
        for i in np.unique(index):
            mask = index == i
            out[mask] = self.paths[i].heading_at(s[mask])
        return out
