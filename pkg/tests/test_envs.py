import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modules.core import ConfigError, EnvError
from modules.envs import (
    A1,
    A2,
    CartPoleEnv,
    CartPoleState,
    ChainEnv,
    ChainMdpConfig,
    WildfireConfig,
    WildfireEnv,
    WildfireWorld,
    cartpole_step,
    chain_q_values,
    chain_step,
    load_scenario,
    make_env,
    optimal_policy,
    wildfire_observe,
    wildfire_reward,
)


# ---------------------------------------------------------------------------
# Chain MDP
# ---------------------------------------------------------------------------

def test_left_policy_trace_from_third_state():
    env = ChainEnv(ChainMdpConfig(start=3))
    assert env.reset(None)[0] == 3.0
    states, rewards, done = [3.0], [], False
    while not done:
        obs, r, done = env.step(A2)
        rewards.append(r)
        if not done:
            states.append(obs[0])
    assert states == [3.0, 2.0, 1.0]
    assert rewards == [1.0, 1.0, -1.0]


def test_zero_terminal_reward_convention():
    env = ChainEnv(ChainMdpConfig(start=2, terminal_reward="zero"))
    env.reset(None)
    env.step(A2)
    obs, reward, done = env.step(A1)
    assert obs[0] == 1.0
    assert reward == 0.0 and done


def test_random_start_is_one_of_the_reward_states():
    env = ChainEnv(ChainMdpConfig(n=6, i_star=3))
    rng = np.random.default_rng(0)
    starts = {env.reset(rng)[0] for _ in range(50)}
    assert starts == {3.0, 4.0}


def test_step_from_terminal_state_is_an_error():
    with pytest.raises(EnvError):
        chain_step(ChainMdpConfig(), 1, A1)
    env = ChainEnv(ChainMdpConfig(start=2))
    env.reset(None)
    env.step(A2)
    env.step(A2)
    with pytest.raises(EnvError):
        env.step(A2)


def test_slip_spreads_uniformly_over_other_states():
    config = ChainMdpConfig(n=4, p=0.4)
    rng = np.random.default_rng(1)
    counts = np.zeros(5)
    trials = 30000
    for _ in range(trials):
        s_next, _, _ = chain_step(config, 2, A1, rng)
        counts[s_next] += 1
    freq = counts / trials
    assert freq[3] == pytest.approx(0.4, abs=0.02)
    for s in (1, 2, 4):
        assert freq[s] == pytest.approx(0.6 / 3, abs=0.02)


@pytest.mark.parametrize("bad", [dict(n=3), dict(i_star=1), dict(n=5, i_star=4), dict(p=1.5), dict(start=1)])
def test_chain_config_validation(bad):
    with pytest.raises(ConfigError):
        ChainMdpConfig(**bad)


def _policy_values(config, actions):
    """Exact values of a deterministic stationary policy by a linear solve."""
    n = config.n
    size = n + 1
    a = np.eye(size)
    b = np.zeros(size)
    for s in range(1, n + 1):
        if config.is_terminal(s):
            b[s] = config.terminal_value()
            continue
        b[s] = config.state_reward(s)
        nxt = s + 1 if actions[s] == A1 else s - 1
        a[s, nxt] -= config.gamma
    a[0, 0] = 1.0
    return np.linalg.solve(a, b)


@pytest.mark.parametrize("n, i_star", [(4, 2), (5, 2), (6, 3), (7, 4)])
def test_optimal_policy_matches_brute_force(n, i_star):
    config = ChainMdpConfig(n=n, i_star=i_star)
    inner = list(range(2, n))
    best, best_values = None, None
    for choice in itertools.product((A1, A2), repeat=len(inner)):
        actions = dict(zip(inner, choice))
        values = _policy_values(config, actions)
        if best_values is None or np.all(values >= best_values - 1e-12) and np.any(values > best_values + 1e-12):
            best, best_values = actions, values
    policy = optimal_policy(config)
    for s in inner:
        assert int(np.argmax(policy[s])) == best[s]


@pytest.mark.parametrize("n", range(4, 13))
def test_optimal_policy_matches_value_iteration(n):
    for i_star in {2, n // 2}:
        if not 1 < i_star < n - 1:
            continue
        config = ChainMdpConfig(n=n, i_star=i_star)
        q = chain_q_values(config)
        policy = optimal_policy(config)
        for s in range(2, n):
            assert int(np.argmax(q[s])) == int(np.argmax(policy[s]))
        assert np.allclose(policy[1], [0.5, 0.5])


def test_finite_horizon_q_values():
    config = ChainMdpConfig()
    q = chain_q_values(config, horizon=1)
    assert q[2, A2] == pytest.approx(1.0 + 0.95 * -1.0)
    assert q[2, A1] == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# Cart-pole
# ---------------------------------------------------------------------------

def test_cartpole_step_from_rest_pushing_right():
    state, reward, terminal = cartpole_step(CartPoleState(), 1)
    assert state.theta_dot == pytest.approx(-0.2926829, abs=1e-6)
    assert state.x_dot == pytest.approx(0.1951220, abs=1e-6)
    assert state.x == 0.0 and state.theta == 0.0
    assert reward == 1.0 and not terminal


def test_cartpole_terminates_past_angle_limit():
    _, _, terminal = cartpole_step(CartPoleState(theta=0.2, theta_dot=1.0), 0)
    assert terminal


def test_cartpole_episode_is_capped():
    env = CartPoleEnv(max_steps=6)
    env.reset(np.random.default_rng(0))
    done, steps = False, 0
    while not done:
        _, _, done = env.step(steps % 2)
        steps += 1
    assert steps == 6


def test_cartpole_reset_is_small():
    env = CartPoleEnv()
    obs = env.reset(np.random.default_rng(3))
    assert obs.shape == (4,)
    assert np.all(np.abs(obs) <= 0.05)


def test_cartpole_rejects_bad_action():
    env = CartPoleEnv()
    env.reset(np.random.default_rng(0))
    with pytest.raises(EnvError):
        env.step(2)


def _mirror(state):
    return CartPoleState(-state.x, -state.x_dot, -state.theta, -state.theta_dot)


@settings(max_examples=200, deadline=None)
@given(
    x=st.floats(-2.0, 2.0), x_dot=st.floats(-2.0, 2.0),
    theta=st.floats(-0.2, 0.2), theta_dot=st.floats(-2.0, 2.0),
    action=st.integers(0, 1),
)
def test_cartpole_dynamics_are_mirror_symmetric(x, x_dot, theta, theta_dot, action):
    state = CartPoleState(x, x_dot, theta, theta_dot)
    nxt, reward, done = cartpole_step(state, action)
    mirrored, m_reward, m_done = cartpole_step(_mirror(state), 1 - action)
    assert mirrored.as_array() == pytest.approx(_mirror(nxt).as_array(), abs=1e-12)
    assert (m_reward, m_done) == (reward, done)


# ---------------------------------------------------------------------------
# Wildfire
# ---------------------------------------------------------------------------

def test_wildfire_trace_matches_hand_replay():
    config = WildfireConfig()
    env = WildfireEnv(config)
    env.reset(np.random.default_rng(42))

    replay = np.random.default_rng(42)
    drones = replay.uniform(0.0, 500.0, size=(2, 2))
    fires = np.array([[450.0, 50.0], [470.0, 110.0]])
    velocity = np.array([-1.0 / math.sqrt(2.0), 1.0 / math.sqrt(2.0)])
    moves = {0: (0.0, 1.0), 1: (1.0, 0.0), 2: (0.0, -1.0), 3: (-1.0, 0.0), 4: (0.0, 0.0)}
    for actions in ([1, 0], [2, 3], [4, 4]):
        _, reward, done = env.step(actions)
        drones = np.clip(drones + 5.0 * np.array([moves[a] for a in actions]), 0.0, 500.0)
        fires = np.clip(fires + velocity + replay.normal(0.0, 0.25, size=(2, 2)), 0.0, 500.0)
        dists = np.linalg.norm(drones[:, None, :] - fires[None, :, :], axis=2)
        assert reward == pytest.approx(-dists.min(axis=0).sum() / 500.0, abs=1e-12)
        assert np.allclose(env.world.drones, drones)
        assert np.allclose(env.world.fires, fires)
        assert not done


def test_wildfire_episode_ends_at_horizon():
    env = WildfireEnv(WildfireConfig(horizon=3, jitter=0.0))
    env.reset(np.random.default_rng(0))
    dones = [env.step([4, 4])[2] for _ in range(3)]
    assert dones == [False, False, True]


def test_wildfire_observation_layout():
    config = WildfireConfig(obs_scale=1.0)
    world = WildfireWorld(np.array([[100.0, 100.0], [0.0, 0.0]]), np.array([[150.0, 80.0], [400.0, 400.0]]))
    obs = wildfire_observe(world, 0, config)
    assert list(obs) == [-20.0, -50.0, 1.0, 300.0, -300.0, 0.0]
    default = wildfire_observe(world, 0, WildfireConfig())
    assert default[0] == pytest.approx(-20.0 / 500.0)


def test_wildfire_closer_flag_ties_go_to_first_fire():
    world = WildfireWorld(np.array([[0.0, 0.0]]), np.array([[10.0, 0.0], [0.0, 10.0]]))
    obs = wildfire_observe(world, 0, WildfireConfig(n_drones=1))
    assert obs[2] == 1.0 and obs[5] == 0.0


@settings(max_examples=50, deadline=None)
@given(coords=st.lists(st.floats(0, 500, allow_nan=False), min_size=8, max_size=8))
def test_wildfire_reward_is_never_positive(coords):
    drones = np.array(coords[:4]).reshape(2, 2)
    fires = np.array(coords[4:]).reshape(2, 2)
    reward = wildfire_reward(drones, fires, 500.0)
    assert reward <= 0.0
    assert wildfire_reward(fires.copy(), fires, 500.0) == 0.0


@settings(max_examples=100, deadline=None)
@given(
    coords=st.lists(st.floats(0, 500, allow_nan=False), min_size=6, max_size=6),
    near=st.floats(0.0, 1.0), far=st.floats(0.0, 1.0),
)
def test_wildfire_reward_grows_as_drones_close_in(coords, near, far):
    near, far = sorted((near, far))
    fire = np.array([coords[:2]])
    drone = np.array([coords[2:4]])
    closer = fire + near * (drone - fire)
    further = fire + far * (drone - fire)
    assert wildfire_reward(closer, fire, 500.0) >= wildfire_reward(further, fire, 500.0) - 1e-12
    extra = np.vstack([drone, [coords[4:]]])
    assert wildfire_reward(extra, fire, 500.0) >= wildfire_reward(drone, fire, 500.0)


def test_wildfire_invalid_action_count():
    env = WildfireEnv()
    env.reset(np.random.default_rng(0))
    with pytest.raises(EnvError):
        env.step([0])


def test_scenario_file_overrides_fire_starts(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps({"fire_starts": [[100, 100], [200, 200]], "horizon": 50}))
    config = load_scenario(path)
    assert config.fire_starts == ((100.0, 100.0), (200.0, 200.0))
    assert config.horizon == 50


def test_bad_scenario_file(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{")
    with pytest.raises(ConfigError):
        load_scenario(path)


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

def test_make_env_builds_registered_environments():
    assert make_env("chain", {"n": 6, "i_star": 3, "learning_rate": 0.01}).config.n == 6
    assert make_env("cartpole", {"max_steps": 10}).max_steps == 10
    assert make_env("wildfire", {"n_drones": 3}).n_agents == 3


def test_make_env_unknown_name():
    with pytest.raises(ConfigError):
        make_env("lunar_lander")
