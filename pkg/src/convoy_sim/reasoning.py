"""Reasoning chain: scene description, prompt assembly, decision decoding.

The scene builder turns a :class:`~convoy_sim.world.Perception` into a
deterministic structured-text block plus a fixed-length numeric feature
vector used for experience retrieval.  The prompt generator wraps the
scene with a fixed preamble and up to ``k`` retrieved few-shot examples;
the decoders map model output back to one of five high-level actions and
an action into a concrete target lane and target speed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence

from .world import Perception, Task, VehicleState
from .formation import SLOT_LABELS

#: Speed step applied by one FASTER/SLOWER decision, m/s.
SPEED_STEP = 2.5

#: Upper bound on generated prompt length, characters.
PROMPT_CHAR_LIMIT = 20_000

#: Fixed relative-bearing vocabulary, mirroring the six neighbor sectors.
BEARINGS = ("ahead", "behind", "ahead-left", "behind-left",
            "ahead-right", "behind-right")

#: Dimension of the scene feature vector: normalized ego lane and speed,
#: then normalized distance and closing speed of the nearest environment
#: vehicle per bearing (zeros when absent).
FEATURE_DIM = 2 + 2 * len(BEARINGS)


class DecisionAction(str, Enum):
    IDLE = "IDLE"
    LANE_LEFT = "LANE_LEFT"
    LANE_RIGHT = "LANE_RIGHT"
    FASTER = "FASTER"
    SLOWER = "SLOWER"


ACTION_TOKENS = tuple(action.value for action in DecisionAction)

_TASK_OBJECTIVES = {
    Task.AVOID_OBSTACLES: "keep formation while avoiding slower traffic and finish the route safely.",
    Task.JOIN_CONVOY: "catch up with the convoy and merge into the open formation slot.",
    Task.LEAVE_CONVOY: "move to the leftmost lane and pull away until out of communication range of the convoy.",
    Task.ESCORT_SWITCH: "move into your assigned escort slot around the protected vehicle.",
    Task.PROTECTED: "hold your lane and cruise speed while the convoy forms around you.",
    Task.NONE: "hold formation and cruise at the desired speed.",
}


@dataclass(frozen=True)
class ActionTargets:
    """Decoded low-level targets handed to the formation controller."""

    target_lane: int
    target_speed: float


@dataclass(frozen=True)
class SceneDescription:
    """Deterministic textual scene plus its numeric embedding."""

    text: str
    features: tuple
    task: Task


def bearing_of(ego_lane: int, ego_x: float, lane: int, x: float) -> str:
    """Classify another vehicle's relative bearing from the ego vehicle."""
    dlane = lane - ego_lane
    front = x >= ego_x
    if dlane == 0:
        return "ahead" if front else "behind"
    side = "left" if dlane > 0 else "right"
    return f"{'ahead' if front else 'behind'}-{side}"


def scene_features(p: Perception, ego: VehicleState) -> List[float]:
    """Fixed-length numeric embedding of a perceived scene.

    Per bearing the nearest environment vehicle contributes its normalized
    longitudinal distance and closing speed; empty bearings contribute zeros.
    """
    feats = [
        ego.lane / max(p.lane_count, 1),
        ego.v / max(p.max_speed, 1e-9),
    ]
    nearest = {}
    for env in p.env_vehicles:  # already sorted by |dx| ascending
        b = bearing_of(ego.lane, ego.x, env.lane, env.x)
        if b not in nearest:
            nearest[b] = env
    for b in BEARINGS:
        env = nearest.get(b)
        if env is None:
            feats.extend([0.0, 0.0])
        else:
            feats.append((env.x - ego.x) / max(p.comm_range, 1e-9))
            feats.append((env.v - ego.v) / max(p.max_speed, 1e-9))
    return feats


def build_scene_description(p: Perception, ego: VehicleState,
                            task: Task) -> SceneDescription:
    """Render a perception into the structured scene text used for prompting.

    Sections appear in fixed order (road, ego, environment vehicles,
    convoy neighbors, task) and all numbers are rounded to one decimal, so
    identical inputs produce byte-identical text.
    """
    lines = [
        f"Road: {p.lane_count} lanes (lane 0 is rightmost), "
        f"speed limit {p.max_speed:.1f} m/s.",
        f"Ego: lane {ego.lane}, position x={ego.x:.1f} m, "
        f"speed {ego.v:.1f} m/s.",
        "Environment vehicles:",
    ]
    if p.env_vehicles:
        for env in p.env_vehicles:
            lines.append(
                f"- veh{env.id}: lane {env.lane}, "
                f"{bearing_of(ego.lane, ego.x, env.lane, env.x)}, "
                f"dx={env.x - ego.x:+.1f} m, speed {env.v:.1f} m/s")
    else:
        lines.append("- none within communication range")
    lines.append("Convoy neighbors:")
    occupied = list(p.neighbors.occupied())
    if occupied:
        for slot, info in occupied:
            lines.append(
                f"- {SLOT_LABELS[slot]} (veh{info.id}): "
                f"dx={info.x - ego.x:+.1f} m, speed {info.v:.1f} m/s")
    else:
        lines.append("- none")
    lines.append(f"Task: {task.value} - {_TASK_OBJECTIVES[task]}")
    return SceneDescription(
        text="\n".join(lines),
        features=tuple(scene_features(p, ego)),
        task=task,
    )


_PREAMBLE = (
    "You are the decision module of a connected autonomous vehicle driving "
    "in a multi-lane highway convoy.\n"
    "At each decision point you choose exactly one high-level action from: "
    "IDLE, LANE_LEFT, LANE_RIGHT, FASTER, SLOWER.\n"
    "LANE_LEFT moves one lane left (higher lane index), LANE_RIGHT one lane "
    "right (lower lane index), FASTER/SLOWER adjust the target speed, IDLE "
    "keeps the current lane and follows the vehicle ahead.\n"
    "Similar past scenes and the decisions that succeeded in them may be "
    "given as examples.\n"
)

_OUTPUT_INSTRUCTION = (
    "Respond with a single JSON object of the form "
    '{"reasoning": "<short justification>", "decision": "<ACTION>"} where '
    "<ACTION> is one of IDLE, LANE_LEFT, LANE_RIGHT, FASTER, SLOWER."
)


def generate_prompt(scene: SceneDescription, examples: Sequence, k: int = 3) -> str:
    """Assemble the full decision prompt for one scene.

    ``examples`` are previously retrieved experiences (objects with
    ``scene_text`` and ``decision`` attributes); at most ``k`` of them are
    included, in retrieval order.  With an empty list the prompt degrades
    to its zero-shot form.
    """
    parts = [_PREAMBLE]
    for i, ex in enumerate(examples[:k], start=1):
        decision = ex.decision.value if isinstance(ex.decision, DecisionAction) else str(ex.decision)
        parts.append(f"### Example {i}\nScene:\n{ex.scene_text}\nDecision: {decision}\n")
    parts.append(f"### Current scene\n{scene.text}\n")
    parts.append(f"### Instruction\n{_OUTPUT_INSTRUCTION}")
    prompt = "\n".join(parts)
    if len(prompt) > PROMPT_CHAR_LIMIT:
        raise ValueError(
            f"prompt length {len(prompt)} exceeds limit {PROMPT_CHAR_LIMIT}")
    return prompt


def decode_decision(raw: str) -> Optional[DecisionAction]:
    """Parse model output into a decision, or None on decode failure.

    First tries to read ``decision`` from a JSON object; failing that,
    scans for the last occurrence of any action token in the raw text.
    Callers apply the retry-then-IDLE policy on None.
    """
    try:
        obj = json.loads(raw)
        token = str(obj.get("decision", "")).strip().upper()
        if token in ACTION_TOKENS:
            return DecisionAction(token)
    except (json.JSONDecodeError, TypeError, AttributeError):
        pass
    last_pos = -1
    found = None
    for action in DecisionAction:
        pos = raw.rfind(action.value)
        if pos > last_pos:
            last_pos = pos
            found = action
    return found


def decode_action(action: DecisionAction, ego: VehicleState, targets: ActionTargets,
                  highway, weights) -> ActionTargets:
    """Decode a high-level action into the next target lane and speed.

    IDLE re-centers on the current lane and caps the speed target at the
    desired cruise speed; lane changes step one lane and keep the speed
    target; FASTER/SLOWER step the speed target by :data:`SPEED_STEP`
    within [0, max_speed].  A lane change off the road edge degrades to a
    no-op instead of faulting.
    """
    lane = ego.lane
    speed = targets.target_speed
    if action is DecisionAction.IDLE:
        return ActionTargets(lane, min(weights.v_desired, speed))
    if action is DecisionAction.LANE_LEFT:
        if lane + 1 >= highway.lane_count:
            return ActionTargets(lane, speed)
        return ActionTargets(lane + 1, speed)
    if action is DecisionAction.LANE_RIGHT:
        if lane - 1 < 0:
            return ActionTargets(lane, speed)
        return ActionTargets(lane - 1, speed)
    if action is DecisionAction.FASTER:
        return ActionTargets(lane, min(speed + SPEED_STEP, highway.max_speed))
    if action is DecisionAction.SLOWER:
        return ActionTargets(lane, max(speed - SPEED_STEP, 0.0))
    raise ValueError(f"unknown action {action!r}")
