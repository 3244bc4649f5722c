"""Deterministic multi-lane highway convoy simulator.

Connected vehicles run a knowledge-driven decision loop (LLM over HTTP or
a deterministic rule oracle) on top of an interlaced-formation distributed
control law, across four scripted highway scenarios.
"""

from .backends import BackendConfig, decide, decide_oracle
from .formation import (ControlWeights, NeighborSet, VelocityCommand,
                        compute_neighbors, desired_offset,
                        formation_velocity_command, position_error,
                        saturate_command, speed_coordination_accel)
from .memory import Experience, ExperiencePool
from .reasoning import (ActionTargets, DecisionAction, SceneDescription,
                        build_scene_description, decode_action,
                        decode_decision, generate_prompt)
from .scenarios import (RunSummary, ScenarioConfig, assign_escort_slots,
                        init_scenario, run_batch, run_scenario)
from .world import (HighwayConfig, Perception, Role, Task, VehicleState,
                    WorldState, detect_collisions, env_vehicle_accel, sense,
                    spawn_environment_vehicles, step_world)

__version__ = "0.1.0"
