"""
envs.py - Self-contained environments: the chain MDP, cart-pole and wildfire tracking.

Every environment object has the same surface:
    reset(rng) -> obs        step(action) -> (obs, reward, done)
    n_features, n_actions, n_agents, feature_names, action_names
Multi-agent environments take and return one entry per agent.
"""

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from modules.core import ConfigError, EnvError, get_logger
from modules.data import (
    CARTPOLE_ACTIONS,
    CARTPOLE_FEATURES,
    CHAIN_ACTIONS,
    CHAIN_FEATURES,
    WILDFIRE_ACTIONS,
    WILDFIRE_FEATURES,
    WILDFIRE_MOVES,
)


log = get_logger("envs")

A1, A2 = 0, 1  # chain: a1 moves right (s+1), a2 moves left (s-1)

TERMINAL_PENALTY = "penalty"
TERMINAL_ZERO = "zero"


# ---------------------------------------------------------------------------
# Chain MDP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainMdpConfig:
    """
    States 1..n, terminals 1 and n. Reward r_plus for being in s_i* or s_i*+1.
    `terminal_reward` picks what the final step in a terminal state pays:
    "penalty" -> r_minus, "zero" -> 0. `start=None` draws from {i*, i*+1}.
    """

    n: int = 4
    i_star: int = 2
    p: float = 1.0
    gamma: float = 0.95
    r_plus: float = 1.0
    r_minus: float = -1.0
    start: int = None
    terminal_reward: str = TERMINAL_PENALTY

    def __post_init__(self):
        if self.n < 4:
            raise ConfigError(f"chain: n must be >= 4, got {self.n}")
        if not 1 < self.i_star < self.n - 1:
            raise ConfigError(f"chain: need 1 < i* < n-1, got i*={self.i_star}, n={self.n}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"chain: p must be in [0, 1], got {self.p}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"chain: gamma must be in [0, 1], got {self.gamma}")
        if self.start is not None and not 1 < self.start < self.n:
            raise ConfigError(f"chain: start state {self.start} is terminal or out of range")
        if self.terminal_reward not in (TERMINAL_PENALTY, TERMINAL_ZERO):
            raise ConfigError(f"chain: terminal_reward must be '{TERMINAL_PENALTY}' or '{TERMINAL_ZERO}'")

    @classmethod
    def from_dict(cls, section):
        known = {k: v for k, v in section.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def is_terminal(self, s):
        return s == 1 or s == self.n

    def state_reward(self, s):
        return self.r_plus if s in (self.i_star, self.i_star + 1) else 0.0

    def terminal_value(self):
        return self.r_minus if self.terminal_reward == TERMINAL_PENALTY else 0.0


def chain_step(config, s, a, rng=None):
    """One transition from a non-terminal state. Returns (s', r, terminal)."""
    if s <= 1 or s >= config.n:
        raise EnvError(f"chain: step from terminal state s{s}")
    if a not in (A1, A2):
        raise EnvError(f"chain: invalid action {a}")
    intended = s + 1 if a == A1 else s - 1
    if config.p >= 1.0 or rng.random() < config.p:
        s_next = intended
    else:
        others = [k for k in range(1, config.n + 1) if k != intended]
        s_next = others[int(rng.integers(len(others)))]
    return s_next, config.state_reward(s), config.is_terminal(s_next)


def optimal_policy(config):
    """
    Action distribution per state for p = 1: a1 up to s_i*, a2 beyond it,
    uniform in the terminal states.
    """
    if config.p != 1.0:
        raise ConfigError("optimal_policy assumes deterministic transitions (p = 1)")
    policy = {}
    for s in range(1, config.n + 1):
        if config.is_terminal(s):
            policy[s] = np.array([0.5, 0.5])
        elif s <= config.i_star:
            policy[s] = np.array([1.0, 0.0])
        else:
            policy[s] = np.array([0.0, 1.0])
    return policy


def chain_q_values(config, horizon=None, tol=1e-12, max_iter=100000):
    """
    Q-values by value iteration. Terminal states are worth their terminal
    reward. `horizon=None` iterates to convergence, otherwise exactly
    `horizon` backups. Returns an (n+1, 2) array indexed by state (row 0 unused).
    """
    n = config.n
    trans = np.zeros((n + 1, 2, n + 1))
    for s in range(2, n):
        for a in (A1, A2):
            intended = s + 1 if a == A1 else s - 1
            trans[s, a, 1:] = (1.0 - config.p) / (n - 1)
            trans[s, a, intended] = config.p
    rewards = np.array([config.state_reward(s) for s in range(n + 1)])
    q = np.zeros((n + 1, 2))
    q[1, :] = q[n, :] = config.terminal_value()
    steps = max_iter if horizon is None else horizon
    for _ in range(steps):
        v = q.max(axis=1)
        new = q.copy()
        for s in range(2, n):
            new[s] = rewards[s] + config.gamma * trans[s] @ v
        delta = np.max(np.abs(new - q))
        q = new
        if horizon is None and delta < tol:
            break
    return q


class ChainEnv:
    """
    Episodic chain MDP. Entering s_1 or s_n does not end the episode: the agent
    takes one more step in the terminal state, is paid the terminal reward, and
    the episode ends there.
    """

    name = "chain"
    n_agents = 1
    n_features = 1
    n_actions = 2
    feature_names = CHAIN_FEATURES
    action_names = CHAIN_ACTIONS

    def __init__(self, config=None):
        self.config = config or ChainMdpConfig()
        self.state = None
        self._rng = None

    def reset(self, rng):
        self._rng = rng
        cfg = self.config
        if cfg.start is not None:
            self.state = cfg.start
        else:
            self.state = cfg.i_star + int(rng.integers(2))
        return self.observation()

    def observation(self):
        if self.state is None:
            raise EnvError("chain: no current state (reset first)")
        return np.array([float(self.state)])

    def step(self, action):
        if self.state is None:
            raise EnvError("chain: step before reset")
        if self.config.is_terminal(self.state):
            if action not in (A1, A2):
                raise EnvError(f"chain: invalid action {action}")
            reward = self.config.terminal_value()
            obs = np.array([float(self.state)])
            self.state = None
            return obs, reward, True
        s_next, reward, _ = chain_step(self.config, self.state, action, self._rng)
        self.state = s_next
        return np.array([float(s_next)]), reward, False


# ---------------------------------------------------------------------------
# Cart-pole
# ---------------------------------------------------------------------------

GRAVITY = 9.8
CART_MASS = 1.0
POLE_MASS = 0.1
TOTAL_MASS = CART_MASS + POLE_MASS
HALF_LENGTH = 0.5
POLE_MASS_LENGTH = POLE_MASS * HALF_LENGTH
FORCE_MAG = 10.0
TAU = 0.02
X_LIMIT = 2.4
THETA_LIMIT = 12 * 2 * math.pi / 360
CARTPOLE_MAX_STEPS = 500


@dataclass(frozen=True)
class CartPoleState:
    x: float = 0.0
    x_dot: float = 0.0
    theta: float = 0.0
    theta_dot: float = 0.0

    def as_array(self):
        return np.array([self.x, self.x_dot, self.theta, self.theta_dot])

    def is_terminal(self):
        return abs(self.x) > X_LIMIT or abs(self.theta) > THETA_LIMIT


def cartpole_step(state, action):
    """Euler step of the classic cart-pole equations. action 0 pushes left, 1 right."""
    if state.is_terminal():
        raise EnvError("cartpole: step from terminal state")
    if action not in (0, 1):
        raise EnvError(f"cartpole: invalid action {action}")
    force = FORCE_MAG if action == 1 else -FORCE_MAG
    cos_t = math.cos(state.theta)
    sin_t = math.sin(state.theta)
    temp = (force + POLE_MASS_LENGTH * state.theta_dot ** 2 * sin_t) / TOTAL_MASS
    theta_acc = (GRAVITY * sin_t - cos_t * temp) / (
        HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos_t ** 2 / TOTAL_MASS)
    )
    x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos_t / TOTAL_MASS
    nxt = CartPoleState(
        x=state.x + TAU * state.x_dot,
        x_dot=state.x_dot + TAU * x_acc,
        theta=state.theta + TAU * state.theta_dot,
        theta_dot=state.theta_dot + TAU * theta_acc,
    )
    return nxt, 1.0, nxt.is_terminal()


class CartPoleEnv:
    name = "cartpole"
    n_agents = 1
    n_features = 4
    n_actions = 2
    feature_names = CARTPOLE_FEATURES
    action_names = CARTPOLE_ACTIONS

    def __init__(self, max_steps=CARTPOLE_MAX_STEPS):
        self.max_steps = max_steps
        self.state = None
        self.steps = 0

    def reset(self, rng):
        self.state = CartPoleState(*rng.uniform(-0.05, 0.05, 4))
        self.steps = 0
        return self.observation()

    def observation(self):
        if self.state is None:
            raise EnvError("cartpole: no current state (reset first)")
        return self.state.as_array()

    def step(self, action):
        if self.state is None:
            raise EnvError("cartpole: step before reset")
        self.state, reward, terminal = cartpole_step(self.state, action)
        self.steps += 1
        return self.state.as_array(), reward, terminal or self.steps >= self.max_steps


# ---------------------------------------------------------------------------
# Wildfire tracking
# ---------------------------------------------------------------------------

_DIAGONAL_NW = (-1.0 / math.sqrt(2.0), 1.0 / math.sqrt(2.0))


@dataclass(frozen=True)
class WildfireConfig:
    """
    Positions are (east, north) map units on a square map. Fires start in the
    south-east and drift north-west. `drone_starts=None` scatters drones
    uniformly at reset. `obs_scale=None` scales observations by 1/map_size.
    """

    map_size: float = 500.0
    n_drones: int = 2
    drone_speed: float = 5.0
    fire_speed: float = 1.0
    jitter: float = 0.25
    horizon: int = 300
    obs_scale: float = None
    fire_starts: tuple = ((450.0, 50.0), (470.0, 110.0))
    fire_velocities: tuple = None
    drone_starts: tuple = None

    def __post_init__(self):
        if self.map_size <= 0 or self.horizon < 1 or self.n_drones < 1:
            raise ConfigError("wildfire: map_size, horizon and n_drones must be positive")
        if len(self.fire_starts) != 2:
            raise ConfigError(f"wildfire: exactly two fires, got {len(self.fire_starts)}")
        if self.fire_velocities is not None and len(self.fire_velocities) != 2:
            raise ConfigError("wildfire: one velocity per fire")
        if self.drone_starts is not None and len(self.drone_starts) != self.n_drones:
            raise ConfigError("wildfire: one start per drone")
        if self.jitter < 0:
            raise ConfigError("wildfire: jitter must be >= 0")

    @classmethod
    def from_dict(cls, section):
        known = {k: v for k, v in section.items() if k in cls.__dataclass_fields__}
        for key in ("fire_starts", "fire_velocities", "drone_starts"):
            if known.get(key) is not None:
                known[key] = tuple(tuple(float(c) for c in row) for row in known[key])
        return cls(**known)

    def velocities(self):
        if self.fire_velocities is not None:
            return np.array(self.fire_velocities, dtype=float)
        return np.tile(np.array(_DIAGONAL_NW) * self.fire_speed, (2, 1))

    def scale(self):
        return 1.0 / self.map_size if self.obs_scale is None else self.obs_scale


def load_scenario(path, base=None):
    """Overlay a JSON scenario (fire_starts, fire_velocities, horizon, ...) on a config."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"wildfire scenario {path}: {e}") from e
    merged = {k: getattr(base or WildfireConfig(), k) for k in WildfireConfig.__dataclass_fields__}
    merged.update(doc)
    log.info(f"Scenario loaded from {path}")
    return WildfireConfig.from_dict(merged)


@dataclass(frozen=True, eq=False)
class WildfireWorld:
    drones: np.ndarray
    fires: np.ndarray
    t: int = 0
    velocities: np.ndarray = field(default=None, repr=False)


def wildfire_reward(drones, fires, map_size):
    """Negative sum over fires of the nearest drone distance, divided by the map size."""
    dists = np.linalg.norm(drones[:, None, :] - fires[None, :, :], axis=2)
    return -float(dists.min(axis=0).sum()) / map_size


def wildfire_observe(world, drone, config):
    """[f1 dN, f1 dW, closer-to-f1, f2 dN, f2 dW, closer-to-f2] for one drone."""
    pos = world.drones[drone]
    dists = np.linalg.norm(world.fires - pos, axis=1)
    closer_first = 1.0 if dists[0] <= dists[1] else 0.0
    scale = config.scale()
    obs = []
    for k, flag in ((0, closer_first), (1, 1.0 - closer_first)):
        d_north = world.fires[k, 1] - pos[1]
        d_west = pos[0] - world.fires[k, 0]
        obs.extend([d_north * scale, d_west * scale, flag])
    return np.array(obs)


def wildfire_step(world, actions, config, rng):
    """Move drones, advance fires, return (world', r, terminal)."""
    if len(actions) != len(world.drones):
        raise EnvError(f"wildfire: {len(actions)} actions for {len(world.drones)} drones")
    moves = []
    for a in actions:
        if a not in WILDFIRE_MOVES:
            raise EnvError(f"wildfire: invalid action {a}")
        moves.append(WILDFIRE_MOVES[a])
    drones = np.clip(world.drones + config.drone_speed * np.array(moves), 0.0, config.map_size)
    noise = rng.normal(0.0, config.jitter, size=world.fires.shape) if config.jitter > 0 else 0.0
    velocities = world.velocities if world.velocities is not None else config.velocities()
    fires = np.clip(world.fires + velocities + noise, 0.0, config.map_size)
    nxt = replace(world, drones=drones, fires=fires, t=world.t + 1)
    reward = wildfire_reward(drones, fires, config.map_size)
    return nxt, reward, nxt.t >= config.horizon


class WildfireEnv:
    name = "wildfire"
    n_features = 6
    n_actions = 5
    feature_names = WILDFIRE_FEATURES
    action_names = WILDFIRE_ACTIONS

    def __init__(self, config=None):
        self.config = config or WildfireConfig()
        self.n_agents = self.config.n_drones
        self.world = None
        self._rng = None

    def reset(self, rng):
        cfg = self.config
        self._rng = rng
        if cfg.drone_starts is None:
            drones = rng.uniform(0.0, cfg.map_size, size=(cfg.n_drones, 2))
        else:
            drones = np.array(cfg.drone_starts, dtype=float)
        self.world = WildfireWorld(drones, np.array(cfg.fire_starts, dtype=float), 0, cfg.velocities())
        return self.observation()

    def observation(self):
        if self.world is None:
            raise EnvError("wildfire: no current state (reset first)")
        return [wildfire_observe(self.world, i, self.config) for i in range(self.n_agents)]

    def step(self, actions):
        if self.world is None:
            raise EnvError("wildfire: step before reset")
        self.world, reward, terminal = wildfire_step(self.world, actions, self.config, self._rng)
        return self.observation(), reward, terminal


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

def _make_chain(section):
    return ChainEnv(ChainMdpConfig.from_dict(section or {}))


def _make_cartpole(section):
    return CartPoleEnv(int((section or {}).get("max_steps", CARTPOLE_MAX_STEPS)))


def _make_wildfire(section):
    section = dict(section or {})
    scenario = section.pop("scenario", None)
    config = WildfireConfig.from_dict(section)
    if scenario:
        config = load_scenario(scenario, config)
    return WildfireEnv(config)


ENV_REGISTRY = {
    "chain": _make_chain,
    "cartpole": _make_cartpole,
    "wildfire": _make_wildfire,
}


def make_env(name, section=None):
    """Build a registered environment from its config section."""
    if name not in ENV_REGISTRY:
        raise ConfigError(f"unknown environment '{name}' (known: {', '.join(ENV_REGISTRY)})")
    return ENV_REGISTRY[name](section)
