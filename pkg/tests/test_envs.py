"""Environment dynamics, rewards, experts, and box invariants."""

import numpy as np
import pytest

from trajmask import envs


def test_reset_pointmass_zero_velocity():
    rng = np.random.default_rng(0)
    s = envs.env_reset("pointmass", rng)
    assert s[2] == 0.0 and s[3] == 0.0
    assert np.all(np.abs(s[:2]) <= 0.9)


def test_reset_pendulum_unit_circle():
    for seed in range(20):
        s = envs.env_reset("pendulum", np.random.default_rng(seed))
        assert abs(s[0] ** 2 + s[1] ** 2 - 1.0) < 1e-12
        assert s[2] == 0.0


def test_reset_same_seed_identical():
    for env in ("pointmass", "pendulum"):
        a = envs.env_reset(env, np.random.default_rng(7))
        b = envs.env_reset(env, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)


def test_step_pointmass_arithmetic():
    s = envs.env_step("pointmass", np.zeros(4), np.array([1.0, 0.0]))
    np.testing.assert_allclose(s, [0.0025, 0.0, 0.05, 0.0], atol=1e-15)


def test_step_pointmass_zero_dynamics():
    s0 = np.array([0.3, -0.4, 0.0, 0.0])
    s1 = envs.env_step("pointmass", s0, np.zeros(2))
    np.testing.assert_array_equal(s1, s0)


def test_step_pendulum_upright_equilibrium():
    s0 = np.array([1.0, 0.0, 0.0])
    s1 = envs.env_step("pendulum", s0, np.zeros(1))
    np.testing.assert_allclose(s1, s0, atol=1e-15)


def test_step_dimension_mismatch_rejected():
    with pytest.raises(envs.EnvError):
        envs.env_step("pointmass", np.zeros(3), np.zeros(2))
    with pytest.raises(envs.EnvError):
        envs.env_step("pointmass", np.zeros(4), np.zeros(1))


def test_step_bit_exact_reproducible():
    rng = np.random.default_rng(3)
    s = envs.env_reset("pendulum", rng)
    a = np.array([0.37])
    out = [envs.env_step("pendulum", s, a) for _ in range(3)]
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[1], out[2])


def test_task_reward_definitions():
    assert envs.task_reward("run_east", np.array([0.0, 0.0, 0.5, 0.3]), np.zeros(2)) == 0.5
    assert envs.task_reward("run_west", np.array([0.0, 0.0, 0.5, 0.3]), np.zeros(2)) == -0.5
    assert envs.task_reward("reach_center", np.array([0.0, 0.0, 0.1, 0.1]), np.zeros(2)) == 0.0
    assert envs.task_reward("swingup", np.array([-1.0, 0.0, 0.0]), np.zeros(1)) == -1.0
    assert envs.task_reward("spin", np.array([1.0, 0.0, -4.0]), np.zeros(1)) == 0.5


def test_expert_noise_free_deterministic():
    s = np.array([0.1, -0.2, 0.3, 0.0])
    a1 = envs.expert_action("run_east", s, 0.0)
    a2 = envs.expert_action("run_east", s, 0.0)
    np.testing.assert_array_equal(a1, a2)


def test_expert_noisy_same_seed_identical():
    s = np.array([0.1, -0.2, 0.3, 0.0])
    a1 = envs.expert_action("run_east", s, 0.2, np.random.default_rng(11))
    a2 = envs.expert_action("run_east", s, 0.2, np.random.default_rng(11))
    np.testing.assert_array_equal(a1, a2)


def test_expert_run_east_at_setpoint():
    # vx at target velocity: the controller's x-component is exactly zero.
    a = envs.expert_action("run_east", np.array([0.0, 0.0, 1.0, 0.0]), 0.0)
    assert a[0] == 0.0 and a[1] == 0.0


def test_set_state_identity_and_rejection():
    s = np.array([0.5, -0.5, 0.25, 0.0])
    np.testing.assert_array_equal(envs.set_state("pointmass", s), s)
    with pytest.raises(envs.EnvError):
        envs.set_state("pointmass", np.array([1.5, 0.0, 0.0, 0.0]))
    with pytest.raises(envs.EnvError):
        envs.set_state("pendulum", np.array([1.0, 1.0, 0.0]))


def test_set_state_statelessness_round_trip():
    rng = np.random.default_rng(5)
    s0 = envs.env_reset("pointmass", rng)
    a0, a1 = np.array([0.3, -0.7]), np.array([-0.2, 0.5])
    s1 = envs.env_step("pointmass", s0, a0)
    s2_direct = envs.env_step("pointmass", s1, a1)
    s2_via_set = envs.env_step("pointmass", envs.set_state("pointmass", s1), a1)
    np.testing.assert_array_equal(s2_direct, s2_via_set)


@pytest.mark.parametrize("env", ["pointmass", "pendulum"])
def test_box_invariants_random_actions(env):
    spec = envs.env_spec(env)
    rng = np.random.default_rng(17)
    s = envs.env_reset(env, rng)
    for _ in range(10_000):
        a = rng.uniform(-1.5, 1.5, size=spec.action_dim)
        s = envs.env_step(env, s, a)
        assert np.all(np.isfinite(s))
        if env == "pointmass":
            assert np.all(np.abs(s) <= 1.0)
        else:
            assert abs(s[0] ** 2 + s[1] ** 2 - 1.0) < 1e-9
            assert abs(s[2]) <= envs.PENDULUM_MAX_SPEED


@pytest.mark.parametrize("task", sorted(envs.TASK_ENV))
def test_expert_meets_ceiling(task):
    env = envs.TASK_ENV[task]
    returns = []
    for seed in range(24):
        rng = np.random.default_rng(seed)
        s = envs.env_reset(env, rng)
        total = 0.0
        for _ in range(200):
            a = envs.expert_action(task, s, 0.0, rng)
            s = envs.env_step(env, s, a)
            total += envs.task_reward(task, s, a)
        returns.append(total)
    assert envs.meets_ceiling_fraction(task, float(np.mean(returns)))
