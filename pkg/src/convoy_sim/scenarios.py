"""Scenario harness: builds, runs and scores the four experiment scenarios.

A run wires the pieces together: every decision period each convoy vehicle
senses, retrieves similar experiences, prompts its decision backend and
decodes the answer into targets; every control tick the formation law turns
targets into saturated velocity commands and the world integrates them.
Runs terminate on their scenario's success criterion, on any collision, or
on timeout, and emit a per-step CSV trace plus a summary.

Vehicles that are repositioning (joining, leaving, or moving to an escort
slot) are detached from the formation graph until they dock: they neither
pull established members toward them nor get pulled, which keeps the
remaining formation stable while they maneuver under plain target-speed
control.
"""

from __future__ import annotations

import csv
import json
import math
import random
import time as _time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, IO, List, NamedTuple, Optional, Sequence, Tuple, Union

from . import formation
from .backends import (BackendConfig, BackendError, OracleScene, PeerInfo,
                       SlotGoal, decide)
from .formation import ControlWeights, NeighborSet, VelocityCommand
from .memory import Experience, ExperiencePool
from .reasoning import (ActionTargets, DecisionAction, build_scene_description,
                        decode_action, decode_decision, generate_prompt)
from .world import (HighwayConfig, Role, Task, VehicleState,
                    WorldState, detect_collisions, sense,
                    spawn_environment_vehicles, step_world)

SCENARIO_KINDS = (Task.AVOID_OBSTACLES, Task.JOIN_CONVOY,
                  Task.LEAVE_CONVOY, Task.ESCORT_SWITCH)

#: Default environment-vehicle count per scenario kind.
DEFAULT_DENSITY = {Task.AVOID_OBSTACLES: 20}

#: Longitudinal displacement of the joining vehicle behind the convoy tail.
JOIN_SETBACK = 50.0

#: Gap between the convoy head and the environment spawn region at start,
#: so the first encounter with slow traffic is brakeable at dec = 2 m/s^2.
START_BUFFER = 50.0

#: Docking window: a repositioning vehicle re-attaches to the formation
#: graph once within this longitudinal distance of its slot (in the slot's
#: lane, at near-matched speed).
DOCK_TOLERANCE = 2.5
DOCK_SPEED_TOLERANCE = 1.0

#: Bumper gap below which the safety envelope stops further closing, and
#: the tighter gap below which it actively reopens (current lane only).
#: The convoy value must stay below the formation's own equilibrium bumper
#: gap (d_safe - length) or the envelope would fight convergence.
#: Environment traffic can brake harder than the convoy is allowed to, so
#: it gets an extra speed-scaled headway on top of the base gap.
ENVELOPE_FOLLOW_GAP = 4.5
ENVELOPE_MIN_GAP = 2.0
ENVELOPE_ENV_HEADWAY = 0.35

TRACE_COLUMNS = ("step", "time", "id", "role", "task", "lane",
                 "x", "y", "v", "vy", "decision", "position_error")


class ScenarioError(RuntimeError):
    """Raised when a scenario cannot be set up as configured."""


@dataclass(frozen=True)
class ScenarioConfig:
    """One seeded experiment definition."""

    kind: Task
    seed: int = 0
    env_vehicle_count: Optional[int] = None
    convoy_size: int = 8
    dt: float = 0.1
    decision_period: float = 1.0
    max_sim_time: float = 120.0
    backend: BackendConfig = field(default_factory=BackendConfig)
    highway: HighwayConfig = field(default_factory=HighwayConfig)
    weights: ControlWeights = field(default_factory=ControlWeights)
    pool_path: Optional[str] = None
    shots: int = 3
    initial_jitter: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.convoy_size < 2:
            raise ValueError("convoy_size must be >= 2")
        if self.env_vehicle_count is not None and self.env_vehicle_count < 0:
            raise ValueError("env_vehicle_count must be >= 0")

    @property
    def density(self) -> int:
        if self.env_vehicle_count is not None:
            return self.env_vehicle_count
        return DEFAULT_DENSITY.get(self.kind, 0)


class DecisionRecord(NamedTuple):
    step: int
    vehicle_id: int
    action: DecisionAction
    latency: float


@dataclass
class RunSummary:
    """Outcome and metrics of one scenario run."""

    scenario: Task
    seed: int
    success: bool
    failure_reason: Optional[str]
    avg_convoy_speed: float
    duration: float
    final_pe: float
    pe_series: Dict[int, List[float]]
    speed_series: Dict[int, List[float]]
    decisions: List[DecisionRecord]
    experiences: List[Experience]
    collisions: List[Tuple[int, int, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.value,
            "seed": self.seed,
            "success": self.success,
            "failure_reason": self.failure_reason,
            "avg_speed": round(self.avg_convoy_speed, 4),
            "final_PE": round(self.final_pe, 4),
            "duration": round(self.duration, 4),
        }


# ---------------------------------------------------------------------------
# Scenario construction
# ---------------------------------------------------------------------------

def interlaced_layout(convoy_size: int, lane_count: int,
                      d_safe: float) -> List[Tuple[int, float]]:
    """(lane, x) seats of an interlaced formation, front to back.

    Lanes are filled round-robin into per-lane columns spaced ``d_safe``
    apart; adjacent lanes are staggered by ``d_safe / 2`` so every column
    sits half a gap off its neighbors.  The whole block lies at x <= -d_safe/2,
    behind the environment spawn region.
    """
    per_lane = [convoy_size // lane_count] * lane_count
    for lane in range(convoy_size % lane_count):
        per_lane[lane] += 1
    seats: List[Tuple[int, float]] = []
    for lane in range(lane_count):
        head = -d_safe if lane % 2 == 0 else -d_safe / 2.0
        for k in range(per_lane[lane]):
            seats.append((lane, head - k * d_safe - START_BUFFER))
    seats.sort(key=lambda seat: (-seat[1], seat[0]))
    return seats


def _center_lane(cfg: ScenarioConfig) -> int:
    return cfg.highway.lane_count // 2


def _pick_join_vehicle(convoy: Sequence[VehicleState], cfg: ScenarioConfig) -> int:
    """The rearmost center-lane member leaves the cleanest hole to re-enter."""
    center = _center_lane(cfg)
    members = [v for v in convoy if v.lane == center]
    return min(members, key=lambda v: v.x).id


def _pick_leave_vehicle(convoy: Sequence[VehicleState]) -> int:
    """The convoy's front vehicle: it can exit forward without threading
    the lattice, and its vacated seat turns into absent neighbor slots for
    everyone instead of skewed ones, so the remainder stays at zero error."""
    return max(convoy, key=lambda v: (v.x, -v.id)).id


def _pick_protected_vehicle(convoy: Sequence[VehicleState], cfg: ScenarioConfig) -> int:
    """Center-lane member nearest the convoy centroid anchors the escort box."""
    center = _center_lane(cfg)
    centroid = sum(v.x for v in convoy) / len(convoy)
    members = [v for v in convoy if v.lane == center]
    return min(members, key=lambda v: (abs(v.x - centroid), v.id)).id


def init_scenario(cfg: ScenarioConfig) -> WorldState:
    """Seat the convoy (plus scenario-specific edits) and spawn traffic."""
    hw = cfg.highway
    w = cfg.weights
    seats = interlaced_layout(cfg.convoy_size, hw.lane_count, w.d_safe)
    base_task = Task.AVOID_OBSTACLES if cfg.kind is Task.AVOID_OBSTACLES else Task.NONE
    convoy = [
        VehicleState(
            id=i, role=Role.CONVOY, task=base_task, lane=lane, x=x,
            y=hw.lane_center(lane), v=w.v_desired, v_desired=w.v_desired)
        for i, (lane, x) in enumerate(seats)
    ]

    if cfg.initial_jitter > 0.0:
        rng = random.Random(cfg.seed)
        for veh in convoy:
            veh.x += rng.uniform(-cfg.initial_jitter, cfg.initial_jitter)

    if cfg.kind is Task.JOIN_CONVOY:
        joiner = next(v for v in convoy if v.id == _pick_join_vehicle(convoy, cfg))
        rear = min(v.x for v in convoy if v.id != joiner.id)
        joiner.task = Task.JOIN_CONVOY
        joiner.lane = 0
        joiner.y = hw.lane_center(0)
        joiner.x = rear - JOIN_SETBACK
    elif cfg.kind is Task.LEAVE_CONVOY:
        leaver = next(v for v in convoy if v.id == _pick_leave_vehicle(convoy))
        leaver.task = Task.LEAVE_CONVOY
    elif cfg.kind is Task.ESCORT_SWITCH:
        protected_id = _pick_protected_vehicle(convoy, cfg)
        for veh in convoy:
            veh.task = Task.PROTECTED if veh.id == protected_id else Task.ESCORT_SWITCH

    vehicles = list(convoy)
    if cfg.density > 0:
        vehicles.extend(spawn_environment_vehicles(
            hw, cfg.density, cfg.seed, id_start=cfg.convoy_size))
    vehicles.sort(key=lambda v: v.id)
    state = WorldState(highway=hw, vehicles=vehicles, rng_seed=cfg.seed)
    if detect_collisions(state):
        raise ScenarioError("cannot seat convoy collision-free")
    return state


def assign_escort_slots(protected_id: int, members: Sequence[VehicleState],
                        cfg: ScenarioConfig) -> Dict[int, Tuple[int, float]]:
    """Map each non-protected member to an escort slot (lane, offset).

    The escort box surrounds the protected vehicle in the center lane:
    full-gap slots ahead and behind it, half-gap staggered slots in both
    adjacent lanes.  Assignment greedily picks the (member, slot) pair of
    least displacement, ties broken by vehicle id, which minimizes how far
    anybody has to move.
    """
    if len(members) != 8:
        raise ScenarioError(f"escort assignment expects 8 members, got {len(members)}")
    by_id = {v.id: v for v in members}
    if protected_id not in by_id:
        raise ScenarioError(f"protected id {protected_id} is not a member")
    protected = by_id[protected_id]
    d = cfg.weights.d_safe
    center = protected.lane
    if not (0 < center < cfg.highway.lane_count - 1):
        raise ScenarioError("protected vehicle must sit in an interior lane")
    slots = [
        (center, d), (center, -d),
        (center + 1, d / 2.0), (center + 1, -d / 2.0), (center + 1, -1.5 * d),
        (center - 1, d / 2.0), (center - 1, -d / 2.0),
    ]
    others = [v for v in members if v.id != protected_id]
    pairs = []
    for veh in others:
        for slot_idx, (lane, off) in enumerate(slots):
            dist = (abs(veh.x - (protected.x + off))
                    + cfg.highway.lane_width * abs(veh.lane - lane))
            pairs.append((dist, veh.id, slot_idx))
    pairs.sort()
    assigned: Dict[int, Tuple[int, float]] = {}
    used_slots = set()
    for dist, vid, slot_idx in pairs:
        if vid in assigned or slot_idx in used_slots:
            continue
        assigned[vid] = slots[slot_idx]
        used_slots.add(slot_idx)
    return assigned


# ---------------------------------------------------------------------------
# Per-vehicle agent state owned by the harness
# ---------------------------------------------------------------------------

@dataclass
class _Agent:
    vehicle_id: int
    targets: ActionTargets
    decision: DecisionAction = DecisionAction.IDLE
    docked: bool = True
    slot_lane: Optional[int] = None
    slot_anchor: Optional[int] = None
    slot_offset: float = 0.0

    def slot_goal(self, world: WorldState) -> Optional[SlotGoal]:
        if self.docked or self.slot_anchor is None:
            return None
        anchor = world.vehicle(self.slot_anchor)
        return SlotGoal(lane=self.slot_lane, x=anchor.x + self.slot_offset,
                        v=anchor.v)


def _effective_task(task: Task) -> Task:
    """Task area a vehicle's decisions belong to; untasked members and the
    protected vehicle drive like obstacle avoiders."""
    if task in (Task.NONE, Task.PROTECTED):
        return Task.AVOID_OBSTACLES
    return task


def _attached(agent: _Agent, veh: VehicleState) -> bool:
    """Whether a vehicle is currently part of the formation graph."""
    if veh.task is Task.LEAVE_CONVOY:
        return False
    if veh.task in (Task.JOIN_CONVOY, Task.ESCORT_SWITCH):
        return agent.docked
    return True


# ---------------------------------------------------------------------------
# Scenario runner
# ---------------------------------------------------------------------------

class _TraceWriter:
    def __init__(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh: IO[str] = path.open("w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(TRACE_COLUMNS)

    def row(self, step: int, time: float, veh: VehicleState,
            decision: str, pe: Optional[float]) -> None:
        self._writer.writerow((
            step, f"{time:.3f}", veh.id, veh.role.value, veh.task.value,
            veh.lane, f"{veh.x:.4f}", f"{veh.y:.4f}", f"{veh.v:.4f}",
            f"{veh.vy:.4f}", decision, "" if pe is None else f"{pe:.4f}"))

    def close(self) -> None:
        self._fh.close()


class _Monitor:
    """Tracks the scenario-specific success criterion across steps."""

    def __init__(self, cfg: ScenarioConfig, agents: Dict[int, _Agent]):
        self.cfg = cfg
        self.agents = agents
        self.dwell_needed = int(round(3.0 / cfg.dt))
        self.dwell = 0

    def check(self, world: WorldState, pe_by_id: Dict[int, float]) -> bool:
        cfg = self.cfg
        convoy = world.convoy()
        if cfg.kind is Task.AVOID_OBSTACLES:
            return all(v.x >= cfg.highway.length for v in convoy)
        if cfg.kind is Task.JOIN_CONVOY:
            joiner = next(v for v in convoy if v.task is Task.JOIN_CONVOY)
            agent = self.agents[joiner.id]
            ok = (agent.docked
                  and pe_by_id.get(joiner.id, float("inf")) < 1.0
                  and abs(joiner.v - cfg.weights.v_desired) < 0.5)
            self.dwell = self.dwell + 1 if ok else 0
            return self.dwell >= self.dwell_needed
        if cfg.kind is Task.LEAVE_CONVOY:
            leaver = next(v for v in convoy if v.task is Task.LEAVE_CONVOY)
            rest = [v for v in convoy if v.id != leaver.id]
            gone = all(abs(v.x - leaver.x) > cfg.highway.comm_range for v in rest)
            settled = all(pe_by_id.get(v.id, 0.0) < 0.5 for v in rest)
            return gone and settled
        # Escort: everyone inside their assigned slot at cruise speed.
        protected = next(v for v in convoy if v.task is Task.PROTECTED)
        ok = abs(protected.v - cfg.weights.v_desired) < 0.5
        if ok:
            for veh in convoy:
                if veh.id == protected.id:
                    continue
                agent = self.agents[veh.id]
                slot_x = protected.x + agent.slot_offset
                in_slot = (veh.lane == agent.slot_lane
                           and abs(veh.x - slot_x) <= 0.5
                           and abs(veh.y - cfg.highway.lane_center(agent.slot_lane)) <= 0.5
                           and abs(veh.v - cfg.weights.v_desired) < 0.5)
                if not in_slot:
                    ok = False
                    break
        self.dwell = self.dwell + 1 if ok else 0
        return self.dwell >= self.dwell_needed


def _init_agents(cfg: ScenarioConfig, world: WorldState) -> Dict[int, _Agent]:
    agents: Dict[int, _Agent] = {}
    convoy = world.convoy()
    escort_slots: Dict[int, Tuple[int, float]] = {}
    protected_id: Optional[int] = None
    if cfg.kind is Task.ESCORT_SWITCH:
        protected_id = next(v.id for v in convoy if v.task is Task.PROTECTED)
        escort_slots = assign_escort_slots(protected_id, convoy, cfg)
    for veh in convoy:
        agent = _Agent(
            vehicle_id=veh.id,
            targets=ActionTargets(veh.lane, cfg.weights.v_desired))
        if veh.task is Task.JOIN_CONVOY:
            # The vacated seat: rejoin at the tail of the center-lane column.
            center = _center_lane(cfg)
            column = [v for v in convoy if v.lane == center and v.id != veh.id]
            anchor = min(column, key=lambda v: v.x)
            agent.docked = False
            agent.slot_lane = center
            agent.slot_anchor = anchor.id
            agent.slot_offset = -cfg.weights.d_safe
        elif veh.task is Task.ESCORT_SWITCH:
            lane, offset = escort_slots[veh.id]
            agent.slot_lane = lane
            agent.slot_anchor = protected_id
            agent.slot_offset = offset
            agent.docked = _is_docked(veh, world, agent)
        agents[veh.id] = agent
    return agents


def _is_docked(veh: VehicleState, world: WorldState, agent: _Agent) -> bool:
    if agent.slot_anchor is None:
        return True
    anchor = world.vehicle(agent.slot_anchor)
    return (veh.lane == agent.slot_lane
            and abs(veh.x - (anchor.x + agent.slot_offset)) <= DOCK_TOLERANCE
            and abs(veh.v - anchor.v) <= DOCK_SPEED_TOLERANCE)


def _safety_envelope(cmd: VelocityCommand, ego: VehicleState,
                     targets: ActionTargets, vehicles: Sequence[VehicleState],
                     cfg: ScenarioConfig) -> VelocityCommand:
    """Cap the commanded speed against traffic ahead in the occupied lanes.

    Vehicles ahead whose body sits in (or, by projecting their lateral
    motion ~1.5 s, is entering) the ego's current corridor get the full
    defensive treatment: a constant-deceleration stopping envelope toward
    a comfort gap, speed matching inside it, and active gap reopening when
    dangerously close.  Vehicles that only occupy the lane the ego is
    steering toward merely bound the ego to their speed: the interlaced
    stagger puts a merger at zero bumper gap to its forward diagonal, and
    braking there would squeeze the trailing diagonal instead.  The cap
    binds only when the formation law alone would close too fast, so the
    equilibrium and convergence behavior are untouched.
    """
    w = cfg.weights
    hw = cfg.highway
    target_y = hw.lane_center(targets.target_lane)
    cap = float("inf")
    for other in vehicles:
        if other.id == ego.id:
            continue
        dx = other.x - ego.x
        if dx <= 0 or dx > hw.comm_range:
            continue
        half_w = 0.5 * (ego.width + other.width) + 0.3
        other_ys = (other.y, other.y + other.vy * 1.5)
        in_current = any(abs(oy - ego.y) < half_w for oy in other_ys)
        in_target = any(abs(oy - target_y) < half_w for oy in other_ys)
        if not (in_current or in_target):
            continue
        gap = dx - 0.5 * (ego.length + other.length)
        follow_gap = ENVELOPE_FOLLOW_GAP
        if other.role is Role.ENVIRONMENT:
            follow_gap += ENVELOPE_ENV_HEADWAY * ego.v
        else:
            # A convoy leader below cruise speed is riding a braking wave
            # and may keep shedding speed; budget margin for that.
            follow_gap += 1.2 * max(0.0, w.v_desired - other.v)
        slack = gap - follow_gap
        if slack >= 0.0:
            # Half the braking authority: approach slow enough that full
            # authority stays in reserve for a leader braking hard too.
            allowed = other.v + math.sqrt(w.dec * slack)
            if other.role is Role.CONVOY and other.v < w.v_desired - 0.5:
                # Never enter a braking wave more than gently hot.
                allowed = min(allowed, other.v + 1.5)
        elif in_current:
            allowed = other.v + min(0.0, gap - ENVELOPE_MIN_GAP)
        else:
            allowed = other.v
        cap = min(cap, allowed)
    if cmd.vx <= cap:
        return cmd
    floor = max(0.0, ego.v - w.dec * cfg.dt)
    return replace(cmd, vx=max(cap, floor))


def _command_for(veh: VehicleState, agent: _Agent, world: WorldState,
                 control_peers: Dict[int, List[VehicleState]],
                 cfg: ScenarioConfig) -> Tuple[VelocityCommand, float]:
    """Velocity command plus current position error for one convoy vehicle."""
    w = cfg.weights
    hw = cfg.highway
    if _attached(agent, veh):
        nbrs = formation.compute_neighbors(veh, control_peers[veh.id], hw.comm_range)
    else:
        nbrs = NeighborSet.empty()
    pe = formation.position_error(veh, nbrs, w.d_safe)
    targets = agent.targets
    accel = None
    if (agent.decision is DecisionAction.IDLE and nbrs.n_f is not None):
        accel = formation.speed_coordination_accel(veh, nbrs.n_f, w.w_v)
        bounded = min(max(accel, -w.dec), w.acc)
        targets = ActionTargets(targets.target_lane, veh.v + bounded * cfg.dt)
    raw = formation.formation_velocity_command(veh, nbrs, w, targets, hw)
    raw.accel = accel
    cmd = formation.saturate_command(raw, veh.v, w, hw.max_speed, cfg.dt)
    cmd = _safety_envelope(cmd, veh, agent.targets, world.vehicles, cfg)
    return cmd, pe


def run_scenario(cfg: ScenarioConfig,
                 trace_path: Optional[Union[str, Path]] = None) -> RunSummary:
    """Run one scenario to termination and score it."""
    cfg.backend.validate()
    world = init_scenario(cfg)
    agents = _init_agents(cfg, world)
    monitor = _Monitor(cfg, agents)
    pool = ExperiencePool.load(cfg.pool_path) if cfg.pool_path else ExperiencePool()
    writer = _TraceWriter(trace_path) if trace_path else None

    decision_every = max(1, int(round(cfg.decision_period / cfg.dt)))
    max_steps = int(round(cfg.max_sim_time / cfg.dt))
    pe_series: Dict[int, List[float]] = {v.id: [] for v in world.convoy()}
    speed_series: Dict[int, List[float]] = {v.id: [] for v in world.convoy()}
    decisions: List[DecisionRecord] = []
    pending_experiences: List[Experience] = []
    speed_sum = 0.0
    speed_samples = 0
    success = False
    failure: Optional[str] = None
    pe_by_id: Dict[int, float] = {}

    try:
        for step in range(max_steps):
            convoy = world.convoy()
            if step % decision_every == 0:
                for veh in convoy:
                    _decide_for(veh, agents[veh.id], world, pool, cfg, step,
                                decisions, pending_experiences)

            attached_peers = [v for v in convoy if _attached(agents[v.id], v)]
            control_peers = {
                veh.id: [p for p in attached_peers if p.id != veh.id]
                for veh in convoy
            }
            commands: Dict[int, VelocityCommand] = {}
            pe_by_id = {}
            for veh in convoy:
                cmd, pe = _command_for(veh, agents[veh.id], world,
                                       control_peers, cfg)
                commands[veh.id] = cmd
                pe_by_id[veh.id] = pe

            for veh in world.vehicles:
                if veh.role is Role.CONVOY:
                    pe_series[veh.id].append(pe_by_id[veh.id])
                    speed_series[veh.id].append(veh.v)
                    speed_sum += veh.v
                    speed_samples += 1
                    decision = agents[veh.id].decision.value
                    pe: Optional[float] = pe_by_id[veh.id]
                else:
                    decision, pe = "", None
                if writer:
                    writer.row(step, world.time, veh, decision, pe)

            world = step_world(world, commands, cfg.dt)

            for veh in world.convoy():
                agent = agents[veh.id]
                if not agent.docked and _is_docked(veh, world, agent):
                    agent.docked = True

            if world.collisions:
                failure = "collision"
                break
            if monitor.check(world, pe_by_id):
                success = True
                break
        else:
            failure = "timeout"
    finally:
        if writer:
            writer.close()

    outcome = "success" if success else failure
    experiences = [replace(exp, outcome=outcome) for exp in pending_experiences]
    avg_speed = speed_sum / speed_samples if speed_samples else 0.0
    final_pe = max(pe_by_id.values()) if pe_by_id else 0.0
    return RunSummary(
        scenario=cfg.kind,
        seed=cfg.seed,
        success=success,
        failure_reason=None if success else failure,
        avg_convoy_speed=avg_speed,
        duration=world.time,
        final_pe=final_pe,
        pe_series=pe_series,
        speed_series=speed_series,
        decisions=decisions,
        experiences=experiences,
        collisions=list(world.collisions),
    )


def _decide_for(veh: VehicleState, agent: _Agent, world: WorldState,
                pool: ExperiencePool, cfg: ScenarioConfig, step: int,
                decisions: List[DecisionRecord],
                pending: List[Experience]) -> None:
    perception = sense(world, veh.id)
    task = _effective_task(veh.task)
    scene = build_scene_description(perception, veh, task)
    examples = pool.retrieve(task, scene.features, cfg.shots)
    prompt = generate_prompt(scene, examples, cfg.shots)
    peers = tuple(
        PeerInfo(id=p.id, lane=p.lane, x=p.x, v=p.v)
        for p in world.convoy()
        if p.id != veh.id and abs(p.x - veh.x) <= cfg.highway.comm_range)
    oracle_scene = OracleScene(
        perception=perception, ego=veh, task=veh.task, targets=agent.targets,
        peers=peers, slot=agent.slot_goal(world), weights=cfg.weights,
        highway=cfg.highway)

    started = _time.monotonic()
    action = _query_backend(prompt, cfg.backend, oracle_scene)
    latency = _time.monotonic() - started

    agent.decision = action
    agent.targets = decode_action(action, veh, agent.targets,
                                  cfg.highway, cfg.weights)
    decisions.append(DecisionRecord(step, veh.id, action, latency))
    pending.append(Experience(
        task=task, features=scene.features, scene_text=scene.text,
        decision=action, outcome="success", run_seed=cfg.seed, step=step))


def _query_backend(prompt: str, backend: BackendConfig,
                   scene: OracleScene) -> DecisionAction:
    """One decision query under the decode-failure policy: one retry with a
    format reminder, then IDLE; transport failures also degrade to IDLE."""
    try:
        raw = decide(prompt, backend, scene=scene)
    except BackendError:
        return DecisionAction.IDLE
    action = decode_decision(raw)
    if action is not None:
        return action
    if backend.kind == "llm_http":
        try:
            raw = decide(prompt + "\nRespond with valid JSON only.", backend,
                         scene=scene)
        except BackendError:
            return DecisionAction.IDLE
        action = decode_decision(raw)
        if action is not None:
            return action
    return DecisionAction.IDLE


# ---------------------------------------------------------------------------
# Batch runner
# ---------------------------------------------------------------------------

def write_summary(summary: RunSummary, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        json.dump(summary.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _run_one(args: Tuple[ScenarioConfig, Optional[str]]) -> dict:
    cfg, out_dir = args
    try:
        trace_path = None
        if out_dir is not None:
            run_dir = Path(out_dir) / cfg.kind.value / str(cfg.seed)
            trace_path = run_dir / "trace.csv"
        summary = run_scenario(cfg, trace_path=trace_path)
        if out_dir is not None:
            write_summary(summary, Path(out_dir) / cfg.kind.value
                          / str(cfg.seed) / "summary.json")
        return summary.to_dict()
    except Exception as exc:  # noqa: BLE001 - recorded, batch keeps going
        return {
            "scenario": cfg.kind.value, "seed": cfg.seed, "success": False,
            "failure_reason": "error", "error": str(exc),
            "avg_speed": 0.0, "final_PE": 0.0, "duration": 0.0,
        }


def run_batch(template: ScenarioConfig, seeds: Sequence[int],
              out_dir: Optional[Union[str, Path]] = None,
              workers: int = 1) -> dict:
    """Run one scenario over many seeds and aggregate the outcomes.

    Individual run errors are recorded and do not abort the batch.  Results
    are always assembled in seed order, so the aggregate is deterministic
    regardless of worker scheduling.
    """
    if not seeds:
        raise ValueError("seeds must be non-empty")
    out_str = str(out_dir) if out_dir is not None else None
    jobs = [(replace(template, seed=seed), out_str) for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]
    successes = sum(1 for r in results if r.get("success"))
    speeds = [r["avg_speed"] for r in results]
    aggregate = {
        "scenario": template.kind.value,
        "density": template.density,
        "count": len(results),
        "successes": successes,
        "success_rate": round(successes / len(results), 4),
        "avg_speed_mean": round(sum(speeds) / len(speeds), 4) if speeds else 0.0,
        "runs": results,
    }
    if out_dir is not None:
        agg_path = Path(out_dir) / template.kind.value / "aggregate.json"
        agg_path.parent.mkdir(parents=True, exist_ok=True)
        with agg_path.open("w", encoding="utf-8") as fh:
            json.dump(aggregate, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return aggregate
