"""Task-oriented experience pool.

Stores (scene, decision, outcome) records in four independent task areas
and serves the top-k most similar successful experiences for few-shot
prompting.  Similarity is cosine similarity over the fixed scene feature
vector; retrieval never crosses task areas.  Pools persist as JSON lines,
one experience per line.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from .reasoning import FEATURE_DIM, DecisionAction
from .world import Task

#: The four task areas of the pool, in canonical order.
TASK_AREAS = (
    Task.AVOID_OBSTACLES,
    Task.JOIN_CONVOY,
    Task.LEAVE_CONVOY,
    Task.ESCORT_SWITCH,
)

OUTCOMES = ("success", "collision", "timeout")


class MalformedExperienceError(ValueError):
    """Raised when a persisted experience line cannot be parsed."""


@dataclass(frozen=True)
class Experience:
    """One stored (scene, decision, outcome) record."""

    task: Task
    features: tuple
    scene_text: str
    decision: DecisionAction
    outcome: str
    run_seed: int
    step: int

    def __post_init__(self) -> None:
        if self.task not in TASK_AREAS:
            raise ValueError(f"task {self.task!r} is not one of the four areas")
        if len(self.features) != FEATURE_DIM:
            raise ValueError(
                f"feature vector has dimension {len(self.features)}, "
                f"expected {FEATURE_DIM}")
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "features": list(self.features),
            "scene_text": self.scene_text,
            "decision": self.decision.value,
            "outcome": self.outcome,
            "run_seed": self.run_seed,
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Experience":
        return cls(
            task=Task(data["task"]),
            features=tuple(float(f) for f in data["features"]),
            scene_text=data["scene_text"],
            decision=DecisionAction(data["decision"]),
            outcome=data["outcome"],
            run_seed=int(data["run_seed"]),
            step=int(data["step"]),
        )


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    """Cosine similarity; zero vectors compare as 0.0 to everything."""
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


@dataclass
class ExperiencePool:
    """Four append-only task areas with snapshot-consistent retrieval."""

    areas: Dict[Task, List[Experience]] = field(
        default_factory=lambda: {task: [] for task in TASK_AREAS})

    def store(self, experience: Experience) -> None:
        """Append an experience to its task's area."""
        self.areas[experience.task].append(experience)

    def size(self, task: Optional[Task] = None) -> int:
        if task is not None:
            return len(self.areas[task])
        return sum(len(area) for area in self.areas.values())

    def retrieve(self, task: Task, query: Sequence[float], k: int) -> List[Experience]:
        """Top-k successful experiences of one task area by cosine similarity.

        Results are ordered by similarity descending with ties broken
        toward more recent insertion; the list is short when fewer than k
        eligible records exist.
        """
        if k < 0:
            raise ValueError("k must be >= 0")
        scored = [
            (cosine_similarity(exp.features, query), idx, exp)
            for idx, exp in enumerate(self.areas[task])
            if exp.outcome == "success"
        ]
        scored.sort(key=lambda item: (-item[0], -item[1]))
        return [exp for _, _, exp in scored[:k]]

    def persist(self, path: Union[str, Path]) -> None:
        """Write the pool as JSON lines, one experience per line."""
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            for task in TASK_AREAS:
                for exp in self.areas[task]:
                    fh.write(json.dumps(exp.to_dict(), sort_keys=True))
                    fh.write("\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperiencePool":
        """Load a pool from a JSON-lines file written by :meth:`persist`."""
        pool = cls()
        path = Path(path)
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    pool.store(Experience.from_dict(json.loads(line)))
                except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                    raise MalformedExperienceError(
                        f"{path}: malformed experience on line {lineno}: {exc}"
                    ) from exc
        return pool


def store_experience(pool: ExperiencePool, experience: Experience) -> None:
    """Append an experience to its task area (function-style alias)."""
    pool.store(experience)


def retrieve_similar(pool: ExperiencePool, task: Task,
                     query: Sequence[float], k: int) -> List[Experience]:
    """Top-k similar successful experiences (function-style alias)."""
    return pool.retrieve(task, query, k)
