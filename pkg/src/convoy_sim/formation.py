"""Interlaced-formation control.

Builds the six-slot dynamic neighbor graph around an ego vehicle and
evaluates the distributed velocity-level control law on it: a weighted
longitudinal consensus term per occupied neighbor slot, a proportional
lateral term toward the target lane centerline, and a same-lane speed
coordination term for followers holding station behind a front neighbor.

Everything in this module is a pure function of its inputs; vehicles are
duck-typed (any object with ``id``, ``lane``, ``x``, ``v`` attributes
works), so one world snapshot can be evaluated concurrently for many egos.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple

#: Neighbor slot keys in canonical order: same-lane front/back, left-lane
#: front/back, right-lane front/back.  Left is the higher lane index.
SLOTS = ("f", "b", "fl", "bl", "fr", "br")

SLOT_LABELS = {
    "f": "front",
    "b": "rear",
    "fl": "front-left",
    "bl": "rear-left",
    "fr": "front-right",
    "br": "rear-right",
}


@dataclass(frozen=True)
class ControlWeights:
    """Gains and limits of the formation controller.

    The per-slot weights multiply the longitudinal offset error of the
    matching neighbor slot; ``w_y`` is the lateral lane-keeping gain and
    ``w_v`` the same-lane speed coordination gain.  ``acc``/``dec`` bound
    the realized longitudinal acceleration, ``vy_max`` the lateral speed.
    """

    w_f: float = 2.0
    w_b: float = 1.0
    w_fl: float = 1.0
    w_bl: float = 0.1
    w_fr: float = 1.0
    w_br: float = 0.1
    w_y: float = 1.8
    w_v: float = 0.5
    d_safe: float = 10.0
    acc: float = 1.0
    dec: float = 2.0
    v_desired: float = 25.0
    vy_max: float = 0.7

    def __post_init__(self) -> None:
        for slot in SLOTS:
            if self.slot_weight(slot) < 0:
                raise ValueError(f"weight for slot {slot!r} must be >= 0")
        if self.d_safe <= 0 or self.acc <= 0 or self.dec <= 0:
            raise ValueError("d_safe, acc and dec must be positive")

    def slot_weight(self, slot: str) -> float:
        return getattr(self, f"w_{slot}")


@dataclass(frozen=True)
class NeighborInfo:
    """One occupied neighbor slot: the nearest qualifying vehicle in its sector."""

    id: int
    x: float
    v: float
    lane: int


@dataclass(frozen=True)
class NeighborSet:
    """The six-slot local graph around an ego vehicle; absent slots are None."""

    n_f: Optional[NeighborInfo] = None
    n_b: Optional[NeighborInfo] = None
    n_fl: Optional[NeighborInfo] = None
    n_bl: Optional[NeighborInfo] = None
    n_fr: Optional[NeighborInfo] = None
    n_br: Optional[NeighborInfo] = None

    def get(self, slot: str) -> Optional[NeighborInfo]:
        return getattr(self, f"n_{slot}")

    def occupied(self) -> Iterator[Tuple[str, NeighborInfo]]:
        """Yield (slot, neighbor) pairs for occupied slots, in SLOTS order."""
        for slot in SLOTS:
            info = self.get(slot)
            if info is not None:
                yield slot, info

    @classmethod
    def empty(cls) -> "NeighborSet":
        return cls()


@dataclass
class VelocityCommand:
    """Velocity-level command: longitudinal speed, lateral speed and, for
    speed-coordinating followers, the acceleration the speed was derived from."""

    vx: float
    vy: float
    accel: Optional[float] = None


def compute_neighbors(ego, convoy: Sequence, comm_range: float) -> NeighborSet:
    """Build the six-slot neighbor set of ``ego`` from convoy peers.

    For each sector (same/left/right lane x forward/backward) the occupied
    slot is the peer minimizing |x - x_ego| among peers within
    ``comm_range`` longitudinally; ties break toward the lower vehicle id.
    Peers more than one lane away never qualify.  Forward means
    ``x >= x_ego``; backward means ``x < x_ego``.
    """
    best: dict[str, NeighborInfo] = {}
    for veh in convoy:
        if veh.id == ego.id:
            continue
        dlane = veh.lane - ego.lane
        if abs(dlane) > 1:
            continue
        dx = veh.x - ego.x
        if abs(dx) > comm_range:
            continue
        if dlane == 0:
            slot = "f" if dx >= 0 else "b"
        elif dlane == 1:
            slot = "fl" if dx >= 0 else "bl"
        else:
            slot = "fr" if dx >= 0 else "br"
        info = NeighborInfo(id=veh.id, x=veh.x, v=veh.v, lane=veh.lane)
        cur = best.get(slot)
        if cur is None or (abs(dx), veh.id) < (abs(cur.x - ego.x), cur.id):
            best[slot] = info
    return NeighborSet(**{f"n_{slot}": info for slot, info in best.items()})


def desired_offset(slot: str, d_safe: float) -> float:
    """Signed desired longitudinal offset of a neighbor slot.

    Same-lane slots sit a full ``d_safe`` ahead/behind; adjacent-lane slots
    half of it (the interlaced stagger).  Forward slots are positive,
    backward slots negative, so the formation equilibrium is reachable from
    both sides of a neighbor.
    """
    if slot == "f":
        return d_safe
    if slot == "b":
        return -d_safe
    if slot in ("fl", "fr"):
        return d_safe / 2.0
    if slot in ("bl", "br"):
        return -d_safe / 2.0
    raise ValueError(f"unknown neighbor slot {slot!r}")


def formation_velocity_command(ego, nbrs: NeighborSet, weights: ControlWeights,
                               targets, highway) -> VelocityCommand:
    """Evaluate the distributed formation law for one ego vehicle.

    Longitudinal: the target speed plus the weighted sum of slot offset
    errors ``(x_n - x_ego) - desired_offset``; absent slots contribute
    zero.  Lateral: proportional pull toward the target lane centerline.
    The result is *not* saturated; see :func:`saturate_command`.
    """
    vx = targets.target_speed
    for slot, info in nbrs.occupied():
        err = (info.x - ego.x) - desired_offset(slot, weights.d_safe)
        vx += weights.slot_weight(slot) * err
    vy = weights.w_y * (highway.lane_center(targets.target_lane) - ego.y)
    return VelocityCommand(vx=vx, vy=vy)


def speed_coordination_accel(ego, n_f: NeighborInfo, w_v: float) -> float:
    """Same-lane speed coordination acceleration for an IDLE follower.

    Proportional to the speed difference to the front neighbor; the caller
    is responsible for saturation and for falling back to the plain
    formation law when no front neighbor exists.
    """
    if n_f is None:
        raise ValueError("speed coordination requires an occupied front slot")
    return w_v * (n_f.v - ego.v)


def saturate_command(raw: VelocityCommand, prev_v: float, weights: ControlWeights,
                     max_speed: float, dt: float) -> VelocityCommand:
    """Clamp a raw command into the physically reachable envelope.

    ``vx`` is limited to [0, max_speed] and to the band reachable from the
    previous speed under the acc/dec bounds within one step; ``vy`` to
    +-vy_max; ``accel`` (when present) to [-dec, +acc].
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    lo = max(0.0, prev_v - weights.dec * dt)
    hi = min(max_speed, prev_v + weights.acc * dt)
    vx = min(max(raw.vx, lo), hi)
    vy = min(max(raw.vy, -weights.vy_max), weights.vy_max)
    accel = raw.accel
    if accel is not None:
        accel = min(max(accel, -weights.dec), weights.acc)
    return VelocityCommand(vx=vx, vy=vy, accel=accel)


def position_error(ego, nbrs: NeighborSet, d_safe: float) -> float:
    """Position error: summed absolute slot-offset deviations, meters.

    Zero exactly when every occupied slot sits at its desired offset (or no
    slot is occupied).
    """
    pe = 0.0
    for slot, info in nbrs.occupied():
        pe += abs((info.x - ego.x) - desired_offset(slot, d_safe))
    return pe
