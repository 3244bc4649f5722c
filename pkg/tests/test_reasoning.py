"""Reasoning chain tests: scenes, prompts, decision and action decoding."""

import json
import random

import pytest

from convoy_sim.formation import NeighborInfo, NeighborSet, ControlWeights
from convoy_sim.memory import Experience
from convoy_sim.reasoning import (ACTION_TOKENS, ActionTargets, BEARINGS,
                                  DecisionAction, FEATURE_DIM,
                                  PROMPT_CHAR_LIMIT, bearing_of,
                                  build_scene_description, decode_action,
                                  decode_decision, generate_prompt)
from convoy_sim.world import (EnvVehicle, HighwayConfig, Perception, Role,
                              Task, VehicleState)

CFG = HighwayConfig()
W = ControlWeights()


def ego_veh(lane=1, x=100.0, v=25.0):
    return VehicleState(id=0, role=Role.CONVOY, task=Task.AVOID_OBSTACLES,
                        lane=lane, x=x, y=CFG.lane_center(lane), v=v)


def perception(env=(), neighbors=None):
    return Perception(lane_count=3, max_speed=30.0, comm_range=100.0,
                      env_vehicles=tuple(env),
                      neighbors=neighbors or NeighborSet.empty())


class TestBearing:
    def test_six_sectors(self):
        assert bearing_of(1, 0.0, 1, 5.0) == "ahead"
        assert bearing_of(1, 0.0, 1, -5.0) == "behind"
        assert bearing_of(1, 0.0, 2, 5.0) == "ahead-left"
        assert bearing_of(1, 0.0, 2, -5.0) == "behind-left"
        assert bearing_of(1, 0.0, 0, 5.0) == "ahead-right"
        assert bearing_of(1, 0.0, 0, -5.0) == "behind-right"
        assert set(BEARINGS) == {
            "ahead", "behind", "ahead-left", "behind-left",
            "ahead-right", "behind-right"}


class TestSceneDescription:
    def test_lone_ego_empty_sections(self):
        scene = build_scene_description(perception(), ego_veh(), Task.NONE)
        assert "- none within communication range" in scene.text
        assert "Convoy neighbors:\n- none" in scene.text
        assert len(scene.features) == FEATURE_DIM

    def test_slow_vehicle_ahead_bearing(self):
        ego = ego_veh(lane=1, x=100.0)
        env = [EnvVehicle(id=7, lane=1, x=120.0, v=18.0)]
        scene = build_scene_description(perception(env), ego, Task.AVOID_OBSTACLES)
        assert "veh7: lane 1, ahead, dx=+20.0 m, speed 18.0 m/s" in scene.text

    def test_deterministic(self):
        ego = ego_veh()
        env = [EnvVehicle(id=3, lane=0, x=80.0, v=22.5)]
        nbrs = NeighborSet(n_f=NeighborInfo(2, 110.0, 25.0, 1))
        a = build_scene_description(perception(env, nbrs), ego, Task.JOIN_CONVOY)
        b = build_scene_description(perception(env, nbrs), ego, Task.JOIN_CONVOY)
        assert a.text == b.text and a.features == b.features

    def test_features_nearest_per_bearing(self):
        ego = ego_veh(lane=1, x=0.0, v=25.0)
        env = [EnvVehicle(id=1, lane=1, x=20.0, v=20.0),
               EnvVehicle(id=2, lane=1, x=50.0, v=30.0)]
        scene = build_scene_description(perception(env), ego, Task.NONE)
        # ahead slot: nearest (id=1): dx/comm = 0.2, dv/max = -5/30
        assert scene.features[2] == pytest.approx(0.2)
        assert scene.features[3] == pytest.approx(-5.0 / 30.0)

    def test_task_line_present(self):
        scene = build_scene_description(perception(), ego_veh(), Task.LEAVE_CONVOY)
        assert scene.text.splitlines()[-1].startswith("Task: leave_convoy")


def make_experience(decision=DecisionAction.IDLE, task=Task.AVOID_OBSTACLES):
    return Experience(task=task, features=tuple([0.1] * FEATURE_DIM),
                      scene_text="Road: 3 lanes...", decision=decision,
                      outcome="success", run_seed=0, step=0)


class TestGeneratePrompt:
    def test_zero_shot_valid(self):
        scene = build_scene_description(perception(), ego_veh(), Task.NONE)
        prompt = generate_prompt(scene, [], k=3)
        assert "### Example" not in prompt
        assert "### Current scene" in prompt

    def test_exactly_three_blocks(self):
        scene = build_scene_description(perception(), ego_veh(), Task.NONE)
        examples = [make_experience(DecisionAction.FASTER) for _ in range(3)]
        prompt = generate_prompt(scene, examples, k=3)
        assert prompt.count("### Example") == 3
        assert "Decision: FASTER" in prompt

    def test_truncates_to_k(self):
        scene = build_scene_description(perception(), ego_veh(), Task.NONE)
        examples = [make_experience() for _ in range(5)]
        assert generate_prompt(scene, examples, k=3).count("### Example") == 3

    def test_all_action_tokens_present(self):
        scene = build_scene_description(perception(), ego_veh(), Task.NONE)
        prompt = generate_prompt(scene, [], k=3)
        for token in ACTION_TOKENS:
            assert token in prompt

    def test_length_bounded_with_forty_env_vehicles(self):
        rng = random.Random(0)
        env = [EnvVehicle(id=i, lane=rng.randrange(3),
                          x=rng.uniform(0, 200), v=rng.uniform(15, 30))
               for i in range(40)]
        scene = build_scene_description(perception(env), ego_veh(), Task.NONE)
        examples = [make_experience() for _ in range(3)]
        assert len(generate_prompt(scene, examples, k=3)) <= PROMPT_CHAR_LIMIT


class TestDecodeDecision:
    def test_well_formed_json(self):
        raw = '{"reasoning": "clear road", "decision": "LANE_LEFT"}'
        assert decode_decision(raw) is DecisionAction.LANE_LEFT

    def test_json_roundtrip_identity_all_actions(self):
        for action in DecisionAction:
            raw = json.dumps({"reasoning": "x", "decision": action.value})
            assert decode_decision(raw) is action

    def test_token_scan_fallback(self):
        assert decode_decision("I will go with FASTER because...") is DecisionAction.FASTER

    def test_last_token_wins(self):
        raw = "maybe SLOWER, no, definitely FASTER"
        assert decode_decision(raw) is DecisionAction.FASTER

    def test_case_insensitive_json_field(self):
        assert decode_decision('{"decision": "slower"}') is DecisionAction.SLOWER

    def test_total_failure(self):
        assert decode_decision("no action word at all") is None
        assert decode_decision("") is None


class TestDecodeAction:
    def test_idle_keeps_lane_caps_speed(self):
        out = decode_action(DecisionAction.IDLE, ego_veh(lane=1),
                            ActionTargets(1, 25.0), CFG, W)
        assert out == ActionTargets(1, 25.0)
        out = decode_action(DecisionAction.IDLE, ego_veh(lane=1),
                            ActionTargets(1, 30.0), CFG, W)
        assert out.target_speed == 25.0

    def test_faster_clamps_at_max(self):
        out = decode_action(DecisionAction.FASTER, ego_veh(lane=1),
                            ActionTargets(1, 28.0), CFG, W)
        assert out == ActionTargets(1, 30.0)

    def test_slower_floors_at_zero(self):
        out = decode_action(DecisionAction.SLOWER, ego_veh(lane=1),
                            ActionTargets(1, 1.0), CFG, W)
        assert out == ActionTargets(1, 0.0)

    def test_lane_changes(self):
        out = decode_action(DecisionAction.LANE_LEFT, ego_veh(lane=0),
                            ActionTargets(0, 25.0), CFG, W)
        assert out.target_lane == 1 and out.target_speed == 25.0
        out = decode_action(DecisionAction.LANE_RIGHT, ego_veh(lane=1),
                            ActionTargets(1, 22.5), CFG, W)
        assert out.target_lane == 0 and out.target_speed == 22.5

    def test_edge_degrades_to_no_op(self):
        leftmost = CFG.lane_count - 1
        out = decode_action(DecisionAction.LANE_LEFT, ego_veh(lane=leftmost),
                            ActionTargets(leftmost, 27.5), CFG, W)
        assert out == ActionTargets(leftmost, 27.5)
        out = decode_action(DecisionAction.LANE_RIGHT, ego_veh(lane=0),
                            ActionTargets(0, 27.5), CFG, W)
        assert out == ActionTargets(0, 27.5)

    def test_never_out_of_range(self):
        for action in DecisionAction:
            for lane in range(CFG.lane_count):
                for speed in (0.0, 2.5, 12.5, 25.0, 27.5, 30.0):
                    out = decode_action(action, ego_veh(lane=lane),
                                        ActionTargets(lane, speed), CFG, W)
                    assert 0 <= out.target_lane < CFG.lane_count
                    assert 0.0 <= out.target_speed <= CFG.max_speed
