import numpy as np
import pytest

from src.testbed import (
    ArmToolWorld,
    CommandLimitError,
    DeflectingBipedWorld,
    TendonArmWorld,
    collect_dataset,
    make_world,
    oracle_error,
)


def test_oracle_error_is_euclidean():
    world = ArmToolWorld()
    assert oracle_error(world, "tool_tip", [1.0, 2.0], [1.0, 2.0]) == 0.0
    assert oracle_error(world, "tool_tip", [0.0, 3.0], [4.0, 0.0]) == pytest.approx(5.0)
    assert oracle_error(TendonArmWorld(), "joint", [[0.0, 3.0], [0.0, 0.0]], [[4.0, 0.0], [0.0, 1.0]]) == pytest.approx(3.0)


def test_oracle_error_checks_the_quantity_against_the_world():
    with pytest.raises(ValueError):
        oracle_error(ArmToolWorld(), "velocity", [0.0, 0.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        oracle_error(ArmToolWorld(), "cog", [0.0, 0.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        oracle_error(TendonArmWorld(), "joint", [0.0, 1.0], [0.0])
    with pytest.raises(ValueError):
        oracle_error(TendonArmWorld(), "tension", [0.0, 1.0], [0.0, 1.0])
    assert oracle_error(DeflectingBipedWorld(), "cog", [3.0, 4.0], [0.0, 0.0]) == pytest.approx(5.0)


def test_tendon_arm_length_noise_uses_the_default_scale():
    world = TendonArmWorld()
    assert world.noise_std("l") == pytest.approx(0.005 * world.group_scales["l"])


def test_world_a_straight_arm_closed_form():
    world = ArmToolWorld(l_tool=500.0, phi_tool=30.0)
    x_tool = world.clean(np.zeros(4))["x_tool"]
    expected = [900.0 + 500.0 * np.cos(np.pi / 6), 500.0 * np.sin(np.pi / 6) - 100.0]
    np.testing.assert_allclose(x_tool, expected, atol=1e-9)


def test_world_a_grid_and_state_ids():
    worlds = ArmToolWorld.grid()
    assert len(worlds) == 9
    assert worlds[1].state_id == "300_30"
    assert ArmToolWorld().with_state(700.0, 60.0).state_id == "700_60"


def test_commands_outside_limits_are_rejected():
    world = ArmToolWorld()
    with pytest.raises(CommandLimitError):
        world.observe([0.7, 0.0, 0.0, 0.0])
    with pytest.raises(CommandLimitError):
        world.observe([0.0, 0.0])


def test_world_b_zero_tension_length_is_rest_minus_moment_arms():
    world = TendonArmWorld()
    theta = np.array([0.3, -0.4])
    np.testing.assert_allclose(world.muscle_length(theta, np.zeros(4)), world.l0 - world.R @ theta)


def test_world_b_any_two_groups_determine_the_third():
    world = TendonArmWorld()
    rng = np.random.default_rng(0)
    for command in world.random_commands(20, rng):
        state = world.clean(command)
        theta, f, l = state["theta"], state["f"], state["l"]
        np.testing.assert_allclose(world.angle_from(f, l), theta, atol=1e-9)
        np.testing.assert_allclose(world.tension_from(theta, l), f, atol=1e-9)
        np.testing.assert_allclose(world.muscle_length(theta, f), l, atol=1e-9)
        np.testing.assert_allclose(world.R.T @ f, world.tau_ext(theta), atol=1e-9)


def test_world_b_settle_recovers_the_posture_of_held_lengths():
    world = TendonArmWorld()
    state = world.clean(np.array([0.4, -0.2, 20.0, 20.0, 20.0, 20.0]))
    settled = world.settle(state["l"])
    np.testing.assert_allclose(settled["theta"], state["theta"], atol=1e-6)
    np.testing.assert_allclose(settled["f"], state["f"], atol=1e-4)


def test_world_b_frozen_muscle_reports_a_constant_length():
    world = TendonArmWorld().with_frozen_muscle(0, 195.0)
    rng = np.random.default_rng(1)
    lengths = [world.clean(c)["l"][0] for c in world.random_commands(5, rng)]
    assert lengths == [195.0] * 5
    with pytest.raises(ValueError):
        TendonArmWorld().with_frozen_muscle(4, 195.0)


def test_world_c_rigid_straight_pose_closed_form():
    world = DeflectingBipedWorld(k_deg_per_nm=0.0)
    state = world.clean(np.zeros(4))

    np.testing.assert_allclose(state["x_tool"], [296.0, 80.0], atol=1e-9)
    # point masses: body 0.5 at x=0, arm segments 0.03 at x=30 and x=90, tool 0.08 at x=208, all at y=30
    np.testing.assert_allclose(state["x_cog"], [20.24 / 0.64, 4.2 / 0.64], atol=1e-9)
    np.testing.assert_allclose(state["s_tool"], [500.0 * 30.0 / 304.0, 500.0 * -20.0 / 304.0], atol=1e-9)


def test_world_c_heavier_tool_sags_lower_and_shifts_the_cog():
    light = DeflectingBipedWorld(tool_mass=0.04).clean(np.zeros(4))
    heavy = DeflectingBipedWorld(tool_mass=0.12).clean(np.zeros(4))

    assert heavy["x_tool"][1] < light["x_tool"][1]
    assert heavy["x_cog"][0] > light["x_cog"][0]


def test_world_c_deflection_is_a_fixed_point():
    world = DeflectingBipedWorld()
    theta = np.array([0.2, -0.1, 0.3, 0.05])
    q = world.deflect(theta)
    np.testing.assert_allclose(q, theta + world.k * world.gravity_torques(q), atol=1e-8)
    assert world.state_id == "80g_176mm"


def test_observe_hides_unavailable_groups():
    sample = ArmToolWorld().observe(np.zeros(4), available=["theta"])
    assert sample.available == (True, False)
    np.testing.assert_array_equal(sample.values[4:], [0.0, 0.0])


def test_rollouts_are_reproducible_by_seed():
    world = TendonArmWorld()
    first = world.random_rollout(10, seed=3)
    second = world.random_rollout(10, seed=3)
    other = world.random_rollout(10, seed=4)

    np.testing.assert_array_equal([s.values for s in first.samples], [s.values for s in second.samples])
    assert not np.allclose([s.values for s in first.samples], [s.values for s in other.samples])
    with pytest.raises(ValueError):
        world.random_rollout(0)


def test_scripted_rollout_follows_the_schedule():
    world = ArmToolWorld()
    commands = [np.zeros(4), np.full(4, 0.2)]
    episode = world.scripted_rollout(commands, seed=2, available=["x_tool"])

    assert len(episode) == 2
    assert all(sample.available == (False, True) for sample in episode.samples)
    assert episode.samples[0].values[4] != episode.samples[1].values[4]
    with pytest.raises(ValueError):
        world.scripted_rollout([])


def test_collect_dataset_has_one_episode_per_world():
    dataset = collect_dataset(ArmToolWorld.grid()[:3], 5, seed=0)
    assert dataset.n_states == 3
    assert len(dataset) == 15
    assert dataset.layout.names == ["theta", "x_tool"]


def test_make_world_converts_lists_and_rejects_unknown_names():
    world = make_world("B", {"rest_lengths": [202.0, 198.0, 201.0, 199.0], "compliance": 0.25})
    assert world.rest_lengths == (202.0, 198.0, 201.0, 199.0)
    with pytest.raises(ValueError):
        make_world("D")
