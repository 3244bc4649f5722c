"""Pluggable decision providers.

Two backends answer "what should this vehicle do next": a remote LLM
reached over an OpenAI-compatible chat-completions endpoint, and a
deterministic rule oracle that decides from structured scene data so
experiments run offline and reproducibly.  Both return raw text that
:func:`convoy_sim.reasoning.decode_decision` parses.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import requests

from .reasoning import ActionTargets, DecisionAction
from .world import Perception, Task, VehicleState

ENDPOINT_ENV_VAR = "CONVOY_LLM_ENDPOINT"
MODEL_ENV_VAR = "CONVOY_LLM_MODEL"
API_KEY_ENV_VAR = "CONVOY_LLM_API_KEY"

_SYSTEM_MESSAGE = (
    "You are the high-level driving decision module of a connected "
    "autonomous vehicle. Follow the instructions in the user message "
    "exactly and answer with a single JSON object.")


class BackendError(RuntimeError):
    """Base class for decision-backend failures."""


class NetworkError(BackendError):
    """The endpoint could not be reached at all."""


class TimeoutExhausted(BackendError):
    """Every attempt (including retries) timed out."""


class MalformedResponse(BackendError):
    """The endpoint answered, but not in the expected wire format."""


@dataclass(frozen=True)
class BackendConfig:
    """Which backend to use and how to reach it."""

    kind: str = "oracle"
    endpoint: Optional[str] = None
    model: str = "llama-3.3"
    api_key_env: str = API_KEY_ENV_VAR
    timeout: float = 30.0
    max_retries: int = 2
    temperature: float = 0.0
    backoff: float = 0.25

    def validate(self) -> None:
        if self.kind not in ("oracle", "llm_http"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "llm_http":
            if not self.endpoint:
                raise ValueError(
                    f"llm_http backend requires an endpoint "
                    f"(flag --endpoint or env {ENDPOINT_ENV_VAR})")
            if not self.model:
                raise ValueError(
                    f"llm_http backend requires a model name "
                    f"(flag --model or env {MODEL_ENV_VAR})")


class PeerInfo(NamedTuple):
    """Compact record of a nearby convoy member (for the oracle only)."""

    id: int
    lane: int
    x: float
    v: float


class SlotGoal(NamedTuple):
    """An open formation slot a vehicle is steering for: lane, absolute
    longitudinal position and the speed the slot is moving at."""

    lane: int
    x: float
    v: float


@dataclass(frozen=True)
class OracleScene:
    """Structured scene the rule oracle decides from."""

    perception: Perception
    ego: VehicleState
    task: Task
    targets: ActionTargets
    peers: Tuple[PeerInfo, ...]
    slot: Optional[SlotGoal]
    weights: object
    highway: object


def decide(prompt: str, cfg: BackendConfig, *,
           scene: Optional[OracleScene] = None) -> str:
    """Produce raw decision text for a prompt.

    ``llm_http`` posts an OpenAI-compatible chat-completions request and
    returns the first choice's message content, retrying timeouts and 5xx
    responses with exponential backoff.  ``oracle`` ignores the prompt
    text, applies :func:`decide_oracle` to ``scene`` and wraps the action
    in the same JSON shape an instruction-following model would emit.
    """
    cfg.validate()
    if cfg.kind == "oracle":
        if scene is None:
            raise ValueError("oracle backend needs a structured scene")
        action = decide_oracle(scene)
        return json.dumps({"reasoning": "rule oracle", "decision": action.value})
    return _decide_http(prompt, cfg)


def _decide_http(prompt: str, cfg: BackendConfig) -> str:
    payload = {
        "model": cfg.model,
        "messages": [
            {"role": "system", "content": _SYSTEM_MESSAGE},
            {"role": "user", "content": prompt},
        ],
        "temperature": cfg.temperature,
    }
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(cfg.api_key_env, "")
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"

    last_failure: Optional[BackendError] = None
    for attempt in range(cfg.max_retries + 1):
        if attempt > 0:
            time.sleep(cfg.backoff * (2 ** (attempt - 1)))
        try:
            resp = requests.post(cfg.endpoint, json=payload, headers=headers,
                                 timeout=cfg.timeout)
        except requests.exceptions.Timeout:
            last_failure = TimeoutExhausted(
                f"request to {cfg.endpoint} timed out after {cfg.timeout}s "
                f"({attempt + 1} attempts)")
            continue
        except requests.exceptions.ConnectionError as exc:
            raise NetworkError(f"cannot reach {cfg.endpoint}: {exc}") from exc
        if 500 <= resp.status_code < 600:
            last_failure = BackendError(
                f"server error {resp.status_code} from {cfg.endpoint} "
                f"({attempt + 1} attempts)")
            continue
        if resp.status_code != 200:
            raise BackendError(
                f"unexpected status {resp.status_code} from {cfg.endpoint}")
        try:
            body = resp.json()
            content = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(
                f"cannot read choices[0].message.content: {exc}") from exc
        if not isinstance(content, str):
            raise MalformedResponse("message content is not text")
        return content
    assert last_failure is not None
    raise last_failure


# ---------------------------------------------------------------------------
# Rule oracle
#
# Deterministic stand-in for the LLM.  Rules are evaluated in a fixed order:
# an in-flight lane change is carried through first, then the active task
# (join / leave / escort) drives slot seeking, then the generic obstacle rule,
# then cruise-speed restoration, else IDLE.  Threshold constants are tuned
# against the scenario suite; they are conservative driving heuristics, not
# control-law parameters.
# ---------------------------------------------------------------------------

#: Gap (center-to-center, as a multiple of d_safe) required ahead and behind
#: when threading into a lane while seeking a formation slot.
_CROSS_GAP_FACTOR = 0.7

#: Minimum speed target the oracle will voluntarily slow down to.
_MIN_PLANNED_SPEED = 15.0


def _toward_lane(ego_lane: int, target_lane: int) -> DecisionAction:
    return DecisionAction.LANE_LEFT if target_lane > ego_lane else DecisionAction.LANE_RIGHT


def _lane_occupants(scene: OracleScene, lane: int):
    """Peers and environment vehicles currently in a lane, as (x, v) pairs."""
    out = [(p.x, p.v) for p in scene.peers if p.lane == lane]
    out.extend((e.x, e.v) for e in scene.perception.env_vehicles if e.lane == lane)
    return out


def _nearest_front(scene: OracleScene, lane: int, env_only: bool = False):
    """Nearest vehicle ahead of the ego in a lane, or None."""
    best = None
    candidates = [] if env_only else [(p.x, p.v) for p in scene.peers if p.lane == lane]
    candidates.extend(
        (e.x, e.v) for e in scene.perception.env_vehicles if e.lane == lane)
    for x, v in candidates:
        if x >= scene.ego.x and (best is None or x < best[0]):
            best = (x, v)
    return best


def _gaps_in_lane(scene: OracleScene, lane: int):
    """(front gap, rear gap) in a lane at the ego position, inf when open."""
    front = float("inf")
    rear = float("inf")
    for x, _ in _lane_occupants(scene, lane):
        dx = x - scene.ego.x
        if dx >= 0:
            front = min(front, dx)
        else:
            rear = min(rear, -dx)
    return front, rear


def _crossing_safe(scene: OracleScene, lane: int) -> bool:
    need = _CROSS_GAP_FACTOR * scene.weights.d_safe
    front, rear = _gaps_in_lane(scene, lane)
    return front >= need and rear >= need


def _seek_seam(scene: OracleScene, lane: int, aim_x: float) -> DecisionAction:
    """Adjust speed toward the nearest opening of a blocked lane.

    Openings sit just beyond the head and just behind the tail of the
    lane's occupant column; the one closer to ``aim_x`` is chosen.
    """
    occupants = _lane_occupants(scene, lane)
    margin = _CROSS_GAP_FACTOR * scene.weights.d_safe
    head = max(x for x, _ in occupants) + margin
    tail = min(x for x, _ in occupants) - margin
    opening = head if abs(head - aim_x) <= abs(tail - aim_x) else tail
    if opening >= scene.ego.x:
        return DecisionAction.FASTER
    if scene.targets.target_speed > _MIN_PLANNED_SPEED + 0.5:
        return DecisionAction.SLOWER
    return DecisionAction.IDLE


def _seek_slot(scene: OracleScene, slot: SlotGoal) -> DecisionAction:
    """Steer toward an open formation slot: thread lanes, then close in."""
    ego = scene.ego
    d_safe = scene.weights.d_safe
    if ego.lane != slot.lane:
        step_lane = ego.lane + (1 if slot.lane > ego.lane else -1)
        if _crossing_safe(scene, step_lane):
            return _toward_lane(ego.lane, step_lane)
        return _seek_seam(scene, step_lane, slot.x)

    err = slot.x - ego.x
    closing = ego.v - slot.v
    front = _nearest_front(scene, ego.lane)
    if front is not None and front[0] - ego.x < 1.5 * d_safe and ego.v - front[1] > 0.5:
        return DecisionAction.SLOWER
    if err > 2.0 * d_safe:
        return DecisionAction.FASTER
    if err > 2.5:
        return DecisionAction.FASTER if closing < 2.0 else DecisionAction.IDLE
    if err < -2.0 * d_safe:
        return DecisionAction.SLOWER
    if err < -2.5:
        return DecisionAction.SLOWER if closing > -2.0 else DecisionAction.IDLE
    return DecisionAction.IDLE


def _leave_action(scene: OracleScene) -> DecisionAction:
    ego = scene.ego
    leftmost = scene.highway.lane_count - 1
    if ego.lane < leftmost:
        step_lane = ego.lane + 1
        if _crossing_safe(scene, step_lane):
            return DecisionAction.LANE_LEFT
        return _seek_seam(scene, step_lane, ego.x)
    front = _nearest_front(scene, ego.lane)
    if front is None:
        return DecisionAction.FASTER
    # Leftmost lane blocked ahead: open the distance backward instead.
    if scene.targets.target_speed > _MIN_PLANNED_SPEED + 0.5:
        return DecisionAction.SLOWER
    return DecisionAction.IDLE


def _obstacle_action(scene: OracleScene) -> Optional[DecisionAction]:
    """Generic slow-traffic avoidance; None when nothing constrains the ego."""
    ego = scene.ego
    w = scene.weights
    front = _nearest_front(scene, ego.lane, env_only=True)
    if front is None:
        return None
    dx = front[0] - ego.x
    if front[1] >= w.v_desired - 0.5:
        return None
    lookahead = 2.0 * w.d_safe
    if ego.v > front[1]:
        closing = ego.v - front[1]
        # Stopping distance plus room to finish a lane change (~2.6 s of
        # lateral motion) and absorb one decision period of latency before
        # the braking envelope would engage.
        lookahead = max(lookahead,
                        closing ** 2 / (2.0 * w.dec) + w.d_safe + 3.6 * closing)
    if dx > lookahead:
        return None
    candidates = []
    for lane in (ego.lane + 1, ego.lane - 1):
        if not (0 <= lane < scene.highway.lane_count):
            continue
        clear, front_gap = _avoidance_lane_clear(scene, lane)
        if clear:
            candidates.append((front_gap, lane))
    if candidates:
        # Larger front gap wins; on a tie prefer the left (higher) lane.
        candidates.sort(key=lambda item: (-item[0], -item[1]))
        return _toward_lane(ego.lane, candidates[0][1])
    if scene.targets.target_speed > front[1] + 0.5:
        return DecisionAction.SLOWER
    return None


def _avoidance_lane_clear(scene: OracleScene, lane: int):
    """Whether a lane is open for an avoidance lane change, plus its front gap.

    Environment traffic must leave a generous window (two gaps ahead, one
    behind).  Convoy members only need to be off the interlaced stagger
    point: the half-gap offset is exactly the lane-change room the
    formation keeps, and the graph re-forms around the mover.
    """
    w = scene.weights
    ego = scene.ego
    env_front, env_front_v = float("inf"), 0.0
    env_rear, env_rear_v = float("inf"), 0.0
    for e in scene.perception.env_vehicles:
        if e.lane != lane:
            continue
        dx = e.x - ego.x
        if dx >= 0 and dx < env_front:
            env_front, env_front_v = dx, e.v
        elif dx < 0 and -dx < env_rear:
            env_rear, env_rear_v = -dx, e.v
    # Closing speed shrinks an apparent gap for the whole crossing; demand
    # the window that will still be there when the crossing completes.
    front_need = 2.0 * w.d_safe
    if env_front < float("inf"):
        front_need += 2.6 * max(0.0, ego.v - env_front_v)
    rear_need = w.d_safe
    if env_rear < float("inf"):
        rear_need += 1.2 * max(0.0, env_rear_v - ego.v)
    members_ok = True
    member_front = float("inf")
    for p in scene.peers:
        if p.lane != lane:
            continue
        dx = p.x - ego.x
        # Base clearance is just under the interlaced half-gap stagger;
        # project the offset to the moment the bodies could first touch
        # (roughly 2.3 s of lateral motion away).
        closing = (ego.v - p.v) if dx >= 0 else (p.v - ego.v)
        projected = abs(dx) - 2.3 * max(0.0, closing)
        if dx >= 0:
            member_front = min(member_front, dx)
        if projected < 0.46 * w.d_safe:
            members_ok = False
            break
    clear = (env_front >= front_need
             and env_rear >= rear_need
             and members_ok)
    return clear, min(env_front, member_front + 0.5 * w.d_safe)


def _clear_ahead(scene: OracleScene) -> bool:
    front = _nearest_front(scene, scene.ego.lane)
    if front is None:
        return True
    return (front[0] - scene.ego.x > 2.5 * scene.weights.d_safe
            or front[1] >= scene.weights.v_desired - 0.5)


def decide_oracle(scene: OracleScene) -> DecisionAction:
    """Deterministic rule-based decision for one structured scene."""
    ego = scene.ego
    targets = scene.targets

    # Carry an in-flight lane change through before anything else, unless
    # the destination offset is on course to collapse before the bodies
    # meet, in which case bail back into the original lane.
    if targets.target_lane != ego.lane:
        center = scene.highway.lane_center(targets.target_lane)
        t_touch = max(0.0, (abs(center - ego.y) - 1.8) / 0.7)
        occupants = [(p.x, p.v) for p in scene.peers
                     if p.lane == targets.target_lane]
        occupants.extend((e.x, e.v) for e in scene.perception.env_vehicles
                         if e.lane == targets.target_lane)
        for x, v in occupants:
            dx = x - ego.x
            closing = (ego.v - v) if dx >= 0 else (v - ego.v)
            if abs(dx) - max(0.0, closing) * t_touch < 4.85:
                return DecisionAction.IDLE
        if abs(center - ego.y) > 0.2:
            return _toward_lane(ego.lane, targets.target_lane)

    if scene.task is Task.JOIN_CONVOY and scene.slot is not None:
        return _seek_slot(scene, scene.slot)
    if scene.task is Task.LEAVE_CONVOY:
        return _leave_action(scene)
    if scene.task is Task.ESCORT_SWITCH and scene.slot is not None:
        return _seek_slot(scene, scene.slot)

    action = _obstacle_action(scene)
    if action is not None:
        return action
    if targets.target_speed < scene.weights.v_desired - 0.01 and _clear_ahead(scene):
        return DecisionAction.FASTER
    return DecisionAction.IDLE
