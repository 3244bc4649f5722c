"""Highway world model.

Owns the road geometry, all vehicle states, environment-traffic behavior
(IDM car following), kinematic integration of velocity commands, local
sensing and collision detection.  World stepping is strictly sequential
and functional: :func:`step_world` returns a new snapshot, so read-only
snapshots can be shared freely with concurrent decision queries.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

from . import formation

ENV_SPEED_MIN = 15.0
ENV_SPEED_MAX = 30.0
VEHICLE_LENGTH = 5.0
VEHICLE_WIDTH = 1.8

# IDM parameters for environment traffic; the max deceleration is an
# emergency bound, distinct from the comfortable one used in the headway term.
IDM_TIME_HEADWAY = 1.5
IDM_MIN_GAP = 2.0
IDM_ACCEL = 1.0
IDM_COMFORT_DECEL = 2.0
IDM_MAX_DECEL = 4.0
IDM_DELTA = 4.0


class Role(str, Enum):
    CONVOY = "convoy"
    ENVIRONMENT = "environment"


class Task(str, Enum):
    NONE = "none"
    AVOID_OBSTACLES = "avoid_obstacles"
    JOIN_CONVOY = "join_convoy"
    LEAVE_CONVOY = "leave_convoy"
    ESCORT_SWITCH = "escort_switch"
    PROTECTED = "protected"


class SpawnCapacityError(RuntimeError):
    """Raised when environment traffic cannot be placed collision-free."""


@dataclass(frozen=True)
class HighwayConfig:
    """Static road geometry and global limits."""

    length: float = 1000.0
    lane_count: int = 3
    lane_width: float = 3.2
    max_speed: float = 30.0
    comm_range: float = 100.0
    spawn_region_end: float = 700.0

    def __post_init__(self) -> None:
        if self.lane_count < 1:
            raise ValueError("lane_count must be >= 1")
        if self.length <= 0:
            raise ValueError("length must be positive")
        if not (0 < self.spawn_region_end <= self.length):
            raise ValueError("spawn_region_end must lie in (0, length]")
        if self.max_speed <= 0:
            raise ValueError("max_speed must be positive")

    @property
    def road_width(self) -> float:
        return self.lane_count * self.lane_width

    def lane_center(self, lane: int) -> float:
        """Lateral centerline of a lane index (0 = rightmost)."""
        return (lane + 0.5) * self.lane_width

    def lane_of(self, y: float) -> int:
        """Lane index containing lateral position y, clamped to the road."""
        lane = int(math.floor(y / self.lane_width))
        return min(max(lane, 0), self.lane_count - 1)


@dataclass
class VehicleState:
    """Full kinematic, role and task state of one vehicle."""

    id: int
    role: Role
    task: Task
    lane: int
    x: float
    y: float
    v: float
    vy: float = 0.0
    length: float = VEHICLE_LENGTH
    width: float = VEHICLE_WIDTH
    v_desired: float = 25.0


class EnvVehicle(NamedTuple):
    """Compact sensed record of an environment vehicle."""

    id: int
    lane: int
    x: float
    v: float


@dataclass(frozen=True)
class Perception:
    """What one ego vehicle can sense: road limits, environment traffic
    within communication range, and its convoy neighbor graph."""

    lane_count: int
    max_speed: float
    comm_range: float
    env_vehicles: Tuple[EnvVehicle, ...]
    neighbors: formation.NeighborSet


@dataclass
class WorldState:
    """One snapshot of the simulated highway."""

    highway: HighwayConfig
    vehicles: List[VehicleState]
    time: float = 0.0
    step_index: int = 0
    rng_seed: int = 0
    collisions: List[Tuple[int, int, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        ids = [veh.id for veh in self.vehicles]
        if len(ids) != len(set(ids)):
            raise ValueError("vehicle ids must be unique")

    def vehicle(self, vehicle_id: int) -> VehicleState:
        for veh in self.vehicles:
            if veh.id == vehicle_id:
                return veh
        raise KeyError(f"unknown vehicle id {vehicle_id}")

    def convoy(self) -> List[VehicleState]:
        return [v for v in self.vehicles if v.role is Role.CONVOY]


def spawn_environment_vehicles(cfg: HighwayConfig, count: int, seed: int,
                               id_start: int = 0) -> List[VehicleState]:
    """Spawn ``count`` environment vehicles, deterministically for a seed.

    Positions are uniform in [0, spawn_region_end], lanes uniform, speeds
    uniform in [15, 30] m/s.  A draw conflicts (and is re-drawn) when it
    lands within two vehicle lengths of a same-lane sibling or when its
    speed could not be braked out of a rear-end on the sibling ahead; after
    1000 re-draws for one vehicle a :class:`SpawnCapacityError` is raised.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = random.Random(seed)
    placed: List[VehicleState] = []
    for i in range(count):
        for attempt in range(1000):
            lane = rng.randrange(cfg.lane_count)
            x = rng.uniform(0.0, cfg.spawn_region_end)
            v = rng.uniform(ENV_SPEED_MIN, ENV_SPEED_MAX)
            if _spawn_conflict(placed, lane, x, v):
                continue
            placed.append(VehicleState(
                id=id_start + i,
                role=Role.ENVIRONMENT,
                task=Task.NONE,
                lane=lane,
                x=x,
                y=cfg.lane_center(lane),
                v=v,
                v_desired=v,
            ))
            break
        else:
            raise SpawnCapacityError(
                f"could not place environment vehicle {i} of {count} "
                f"within 1000 re-draw attempts")
    return placed


def _spawn_conflict(placed: Sequence[VehicleState], lane: int, x: float,
                    v: float) -> bool:
    # A draw conflicts on crowding (< 3 lengths; the contract demands at
    # least 2) or when the rear vehicle of the would-be pair is too fast to
    # brake out of the gap with reserve left for chain reactions ahead.
    for other in placed:
        if other.lane != lane:
            continue
        dx = other.x - x
        if abs(dx) < 3.0 * VEHICLE_LENGTH:
            return True
        if dx > 0:
            rear_v, front_v, gap = v, other.v, dx - VEHICLE_LENGTH
        else:
            rear_v, front_v, gap = other.v, v, -dx - VEHICLE_LENGTH
        closing = rear_v - front_v
        if closing > 0:
            safe_closing = math.sqrt(2.0 * max(0.0, gap - IDM_MIN_GAP))
            if closing > safe_closing:
                return True
    return False


def env_vehicle_accel(ego: VehicleState, leader: Optional[VehicleState]) -> float:
    """IDM acceleration of an environment vehicle toward its own desired speed.

    ``leader`` must be the nearest same-lane vehicle ahead, or None on a
    free road.  The result is bounded to [-IDM_MAX_DECEL, IDM_ACCEL].
    """
    v0 = max(ego.v_desired, 0.1)
    free = 1.0 - (ego.v / v0) ** IDM_DELTA
    if leader is None:
        accel = IDM_ACCEL * free
    else:
        gap = leader.x - ego.x - 0.5 * (leader.length + ego.length)
        gap = max(gap, 1e-3)
        s_star = IDM_MIN_GAP + max(
            0.0,
            ego.v * IDM_TIME_HEADWAY
            + ego.v * (ego.v - leader.v)
            / (2.0 * math.sqrt(IDM_ACCEL * IDM_COMFORT_DECEL)))
        accel = IDM_ACCEL * (free - (s_star / gap) ** 2)
    return min(max(accel, -IDM_MAX_DECEL), IDM_ACCEL)


def detect_collisions(world: WorldState) -> List[Tuple[int, int]]:
    """All vehicle pairs whose footprint rectangles overlap.

    Footprints are axis-aligned ``length x width`` boxes centered at
    (x, y).  Pairs are reported once, ordered (low id, high id).
    """
    ordered = sorted(world.vehicles, key=lambda veh: veh.x)
    hits: List[Tuple[int, int]] = []
    for i, a in enumerate(ordered):
        for b in ordered[i + 1:]:
            dx = b.x - a.x
            if dx >= 0.5 * (a.length + b.length):
                break
            if abs(b.y - a.y) < 0.5 * (a.width + b.width):
                hits.append((min(a.id, b.id), max(a.id, b.id)))
    hits.sort()
    return hits


def sense(world: WorldState, ego_id: int) -> Perception:
    """Local perception of one vehicle, restricted to communication range.

    Environment vehicles are sorted by longitudinal distance ascending; the
    convoy neighbor graph is delegated to :func:`formation.compute_neighbors`
    over all other convoy members.
    """
    cfg = world.highway
    ego = world.vehicle(ego_id)
    env = [
        EnvVehicle(id=veh.id, lane=veh.lane, x=veh.x, v=veh.v)
        for veh in world.vehicles
        if veh.role is Role.ENVIRONMENT and abs(veh.x - ego.x) <= cfg.comm_range
    ]
    env.sort(key=lambda e: (abs(e.x - ego.x), e.id))
    peers = [veh for veh in world.vehicles
             if veh.role is Role.CONVOY and veh.id != ego_id]
    nbrs = formation.compute_neighbors(ego, peers, cfg.comm_range)
    return Perception(
        lane_count=cfg.lane_count,
        max_speed=cfg.max_speed,
        comm_range=cfg.comm_range,
        env_vehicles=tuple(env),
        neighbors=nbrs,
    )


def _env_leaders(vehicles: Sequence[VehicleState]) -> Dict[int, Optional[VehicleState]]:
    # Nearest same-lane vehicle ahead (any role) for every environment vehicle.
    by_lane: Dict[int, List[VehicleState]] = {}
    for veh in vehicles:
        by_lane.setdefault(veh.lane, []).append(veh)
    for lane_list in by_lane.values():
        lane_list.sort(key=lambda veh: (veh.x, veh.id))
    leaders: Dict[int, Optional[VehicleState]] = {}
    for veh in vehicles:
        if veh.role is not Role.ENVIRONMENT:
            continue
        lane_list = by_lane[veh.lane]
        idx = lane_list.index(veh)
        leaders[veh.id] = lane_list[idx + 1] if idx + 1 < len(lane_list) else None
    return leaders


def step_world(world: WorldState, commands: Dict[int, formation.VelocityCommand],
               dt: float) -> WorldState:
    """Advance the world by one step of ``dt`` seconds.

    Convoy vehicles integrate the (already saturated) velocity commands;
    environment vehicles follow IDM behind their same-lane leader and never
    change lanes.  Lane indices are recomputed from lateral position and
    newly overlapping pairs are appended to the collision log.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    cfg = world.highway
    known = {veh.id: veh for veh in world.vehicles}
    for vid in commands:
        if vid not in known:
            raise KeyError(f"unknown vehicle id in commands: {vid}")
        if known[vid].role is not Role.CONVOY:
            raise ValueError(f"vehicle {vid} is not a convoy vehicle")
    for veh in world.vehicles:
        if veh.role is Role.CONVOY and veh.id not in commands:
            raise ValueError(f"convoy vehicle {veh.id} missing a command")

    leaders = _env_leaders(world.vehicles)
    half_w = 0.5 * VEHICLE_WIDTH
    moved: List[VehicleState] = []
    for veh in world.vehicles:
        if veh.role is Role.CONVOY:
            cmd = commands[veh.id]
            v_new = min(max(cmd.vx, 0.0), cfg.max_speed)
            y_new = veh.y + cmd.vy * dt
            y_new = min(max(y_new, half_w), cfg.road_width - half_w)
            moved.append(replace(
                veh, x=veh.x + v_new * dt, y=y_new, v=v_new, vy=cmd.vy,
                lane=cfg.lane_of(y_new)))
        else:
            accel = env_vehicle_accel(veh, leaders[veh.id])
            v_new = min(max(veh.v + accel * dt, 0.0), cfg.max_speed)
            moved.append(replace(veh, x=veh.x + v_new * dt, v=v_new))

    step_index = world.step_index + 1
    new_world = WorldState(
        highway=cfg,
        vehicles=moved,
        time=step_index * dt,
        step_index=step_index,
        rng_seed=world.rng_seed,
        collisions=list(world.collisions),
    )
    seen = {(a, b) for a, b, _ in new_world.collisions}
    for pair in detect_collisions(new_world):
        if pair not in seen:
            new_world.collisions.append((pair[0], pair[1], new_world.time))
    return new_world
