"""
train.py - Online RL for tree and MLP policies.

Rollouts, returns, policy-gradient / PPO-clip / Q-learning updates and the
RMSProp optimizer. Models are immutable: every step returns a new policy.
All randomness comes in through explicit generators.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from modules.baselines import (
    CartDataset,
    MlpPolicy,
    RandomPolicy,
    mlp_backward,
    mlp_forward,
    mlp_params,
    mlp_with_params,
)
from modules.core import (
    ConfigError,
    DivergenceError,
    EnvError,
    InvalidInterpretationError,
    KeyMismatchError,
    check_finite,
    get_logger,
    make_rng,
)
from modules.crisp import CrispTree, eval_crisp
from modules.ddt import (
    POLICY,
    GradientBuffer,
    SoftTree,
    backward,
    eval_soft,
    get_params,
    param_kind,
    with_params,
)


log = get_logger("train")

CONVENTIONAL = "conventional"
VERBATIM = "verbatim"
ALGOS = ("ppo", "pg", "q")
PARAM_KINDS = ("alpha", "beta", "phi", "leaf")


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    learning_rate: float = 1e-2
    episodes: int = 1000
    max_steps: int = 500
    clip_eps: float = 0.2
    ppo_epochs: int = 4
    entropy_coef: float = 0.01
    seed: int = 0
    arch: str = "tree:2"
    algo: str = "ppo"
    returns: str = CONVENTIONAL
    baseline: bool = True
    episodes_per_update: int = 1
    freeze: tuple = ()
    rho: float = 0.99
    eps: float = 1e-8
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    beta_l1: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if not self.learning_rate > 0.0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError(f"clip epsilon must be in (0, 1), got {self.clip_eps}")
        if self.episodes < 0 or self.max_steps < 0 or self.ppo_epochs < 1 or self.episodes_per_update < 1:
            raise ConfigError("episodes/max_steps must be >= 0, ppo_epochs/episodes_per_update >= 1")
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algorithm '{self.algo}' (known: {', '.join(ALGOS)})")
        if self.returns not in (CONVENTIONAL, VERBATIM):
            raise ConfigError(f"returns must be '{CONVENTIONAL}' or '{VERBATIM}'")
        if not self.beta_l1 >= 0.0:
            raise ConfigError(f"beta_l1 must be >= 0, got {self.beta_l1}")
        unknown = set(self.freeze) - set(PARAM_KINDS)
        if unknown:
            raise ConfigError(f"cannot freeze {sorted(unknown)} (known: {', '.join(PARAM_KINDS)})")

    @classmethod
    def from_dict(cls, section):
        known = {k: v for k, v in section.items() if k in cls.__dataclass_fields__}
        if "freeze" in known:
            known["freeze"] = tuple(known["freeze"])
        return cls(**known)

    def to_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["freeze"] = list(self.freeze)
        return out


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    returns: np.ndarray = None

    def __len__(self):
        return len(self.rewards)

    @property
    def total_reward(self):
        return float(sum(self.rewards))


@dataclass
class RmsProp:
    """Per-parameter squared-gradient average `v`; `ascent` picks the update sign."""

    lr: float
    rho: float = 0.99
    eps: float = 1e-8
    ascent: bool = True
    v: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    policy: object
    rows: list
    episodes: int


# ---------------------------------------------------------------------------
# Model dispatch
# ---------------------------------------------------------------------------

def distribution(policy, x):
    """Action distribution of any supported policy at x."""
    if isinstance(policy, SoftTree):
        if policy.interpretation != POLICY:
            raise InvalidInterpretationError("sampling needs a POLICY tree")
        return eval_soft(policy, x)
    if isinstance(policy, MlpPolicy):
        return mlp_forward(policy, x)
    if isinstance(policy, CrispTree):
        probs = np.zeros(policy.n_actions)
        probs[eval_crisp(policy, x)] = 1.0
        return probs
    if isinstance(policy, RandomPolicy):
        return policy.distribution()
    raise TypeError(f"unsupported policy type {type(policy).__name__}")


def vjp(policy, x, upstream):
    if isinstance(policy, SoftTree):
        return backward(policy, x, upstream)
    if isinstance(policy, MlpPolicy):
        return mlp_backward(policy, x, upstream)
    raise TypeError(f"{type(policy).__name__} is not differentiable")


def params_of(policy):
    return mlp_params(policy) if isinstance(policy, MlpPolicy) else get_params(policy)


def rebuild(policy, params):
    return mlp_with_params(policy, params) if isinstance(policy, MlpPolicy) else with_params(policy, params)


def _zeros(policy):
    return GradientBuffer({k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in params_of(policy).items()})


def sample_action(probs, rng):
    """Inverse-CDF draw; exact zeros are never sampled."""
    cdf = np.cumsum(probs)
    a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(a, len(probs) - 1)


def act(policy, x, rng, greedy=False):
    probs = distribution(policy, x)
    a = int(np.argmax(probs)) if greedy else sample_action(probs, rng)
    return a, probs


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

def rollout(policy, env, max_steps, rng, greedy=False):
    """
    One episode from the environment's current (reset) state. Stops at a
    terminal step or after `max_steps` steps.
    """
    traj = Trajectory()
    obs = env.observation()
    for t in range(max_steps):
        a, probs = act(policy, obs, rng, greedy)
        traj.states.append(np.array(obs, dtype=float))
        traj.actions.append(a)
        traj.log_probs.append(math.log(probs[a]) if probs[a] > 0 else -math.inf)
        try:
            obs, reward, done = env.step(a)
        except EnvError as e:
            raise EnvError(str(e), step=t) from e
        traj.rewards.append(float(reward))
        if done:
            break
    return traj


def rollout_team(policy, env, max_steps, rng, greedy=False):
    """Shared-policy multi-agent episode: one trajectory per agent, team reward for each."""
    trajs = [Trajectory() for _ in range(env.n_agents)]
    obs = env.observation()
    for t in range(max_steps):
        actions = []
        for i, traj in enumerate(trajs):
            a, probs = act(policy, obs[i], rng, greedy)
            traj.states.append(np.array(obs[i], dtype=float))
            traj.actions.append(a)
            traj.log_probs.append(math.log(probs[a]) if probs[a] > 0 else -math.inf)
            actions.append(a)
        try:
            obs, reward, done = env.step(actions)
        except EnvError as e:
            raise EnvError(str(e), step=t) from e
        for traj in trajs:
            traj.rewards.append(float(reward))
        if done:
            break
    return trajs


def run_episode(policy, env, max_steps, rng, greedy=False):
    """Dispatch on agent count; always returns a list of trajectories."""
    if env.n_agents > 1:
        return rollout_team(policy, env, max_steps, rng, greedy)
    return [rollout(policy, env, max_steps, rng, greedy)]


def evaluate(policy, env, episodes, seed, max_steps=500, greedy=False):
    """Episode rewards (team reward for multi-agent envs) under fixed seed streams."""
    if episodes < 1:
        raise ConfigError("evaluation needs at least one episode")
    env_rng, sample_rng = make_rng(seed, "env"), make_rng(seed, "sampling")
    totals = []
    for _ in range(episodes):
        env.reset(env_rng)
        trajs = run_episode(policy, env, max_steps, sample_rng, greedy)
        totals.append(trajs[0].total_reward)
    return np.array(totals)


def collect_dataset(policy, env, n_pairs, seed, max_steps=500, greedy=True):
    """Logged (state, action) pairs from `policy` for batch tree fitting."""
    env_rng, sample_rng = make_rng(seed, "env"), make_rng(seed, "data")
    states, actions = [], []
    while len(actions) < n_pairs:
        env.reset(env_rng)
        for traj in run_episode(policy, env, max_steps, sample_rng, greedy):
            states.extend(traj.states)
            actions.extend(traj.actions)
    states = np.array(states[:n_pairs]).reshape(-1, env.n_features)
    return CartDataset(states, np.array(actions[:n_pairs], dtype=int), env.n_actions)


# ---------------------------------------------------------------------------
# Returns
# ---------------------------------------------------------------------------

def compute_returns(traj, gamma, convention=VERBATIM):
    """
    verbatim:      A_t = sum_{t'=t..T} gamma^(T - t') r_t'   (T = last step index)
    conventional:  A_t = sum_{t'=t..T} gamma^(t' - t) r_t'
    One backward pass either way. Returns a new trajectory.
    """
    rewards = traj.rewards
    out = np.zeros(len(rewards))
    acc = 0.0
    last = len(rewards) - 1
    for t in reversed(range(len(rewards))):
        if convention == VERBATIM:
            acc = acc + gamma ** (last - t) * rewards[t]
        elif convention == CONVENTIONAL:
            acc = rewards[t] + gamma * acc
        else:
            raise ConfigError(f"unknown return convention '{convention}'")
        out[t] = acc
    return replace(traj, returns=out)


def _advantages(trajectories, baseline):
    for traj in trajectories:
        if traj.returns is None:
            raise ValueError("compute_returns must run before the update")
    if not baseline:
        return [traj.returns for traj in trajectories]
    flat = np.concatenate([traj.returns for traj in trajectories])
    mean = float(flat.mean()) if flat.size else 0.0
    return [traj.returns - mean for traj in trajectories]


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def rmsprop_apply(optimizer, grads, params):
    """
    v <- rho v + (1 - rho) g^2;  theta <- theta +- lr g / (sqrt(v) + eps).
    Nothing is changed when a gradient is non-finite.
    """
    if set(grads) != set(params):
        raise KeyMismatchError("gradient keys do not match parameter keys")
    if optimizer.v and set(optimizer.v) != set(params):
        raise KeyMismatchError("optimizer state keys do not match parameter keys")
    for k, g in grads.items():
        check_finite(f"gradient {k}", g)
    sign = 1.0 if optimizer.ascent else -1.0
    new_v, new_params = {}, {}
    for k, theta in params.items():
        g = np.asarray(grads[k], dtype=float)
        v = optimizer.v.get(k, np.zeros_like(g))
        v = optimizer.rho * v + (1.0 - optimizer.rho) * g * g
        step = optimizer.lr * g / (np.sqrt(v) + optimizer.eps)
        updated = np.asarray(theta, dtype=float) + sign * step
        new_v[k] = v
        new_params[k] = float(updated) if np.ndim(theta) == 0 else updated
    for k, value in new_params.items():
        check_finite(f"parameter {k}", value)
    optimizer.v = new_v
    return new_params


def _apply_freeze(grads, freeze):
    if not freeze:
        return grads
    out = GradientBuffer(grads)
    for k, g in grads.items():
        if param_kind(k) in freeze:
            out[k] = np.zeros_like(g) if isinstance(g, np.ndarray) else 0.0
    return out


def shrink_beta(params, amount, freeze=()):
    """Soft-threshold every split weight towards zero by `amount` (proximal L1 step)."""
    if amount <= 0.0 or "beta" in freeze:
        return params
    out = dict(params)
    for k, value in params.items():
        if param_kind(k) == "beta":
            out[k] = np.sign(value) * np.maximum(np.abs(value) - amount, 0.0)
    return out


def _optimizer_step(policy, grads, optimizer, freeze=(), beta_l1=0.0):
    if not grads.all_finite():
        raise DivergenceError("non-finite gradient; update skipped")
    grads = _apply_freeze(grads, freeze)
    params = rmsprop_apply(optimizer, grads, params_of(policy))
    if isinstance(policy, SoftTree):
        params = shrink_beta(params, optimizer.lr * beta_l1, freeze)
    return rebuild(policy, params)


# ---------------------------------------------------------------------------
# Policy gradient
# ---------------------------------------------------------------------------

def pg_gradient(policy, trajectories, baseline=True):
    """sum_t (A_t - b) grad log pi(a_t | s_t), summed per trajectory then across."""
    total = _zeros(policy)
    for traj, adv in zip(trajectories, _advantages(trajectories, baseline)):
        buf = _zeros(policy)
        for s, a, w in zip(traj.states, traj.actions, adv):
            probs = distribution(policy, s)
            upstream = np.zeros(len(probs))
            upstream[a] = 1.0 / probs[a]
            buf.add(vjp(policy, s, upstream), float(w))
        total.add(buf)
    return total


def pg_step(policy, trajectories, optimizer, baseline=True, freeze=(), beta_l1=0.0):
    """One RMSProp ascent step on the policy-gradient estimate."""
    if not trajectories:
        return policy
    return _optimizer_step(policy, pg_gradient(policy, trajectories, baseline), optimizer, freeze, beta_l1)


# ---------------------------------------------------------------------------
# PPO-clip
# ---------------------------------------------------------------------------

def ppo_gradient(policy, trajectories, advantages, clip_eps, entropy_coef):
    """
    Gradient of sum_t min(rho_t A_t, clip(rho_t, 1 +- eps) A_t) + c H(pi(.|s_t)).
    A clipped step contributes only its entropy term.
    """
    total = _zeros(policy)
    for traj, adv in zip(trajectories, advantages):
        buf = _zeros(policy)
        for s, a, old_lp, w in zip(traj.states, traj.actions, traj.log_probs, adv):
            probs = distribution(policy, s)
            ratio = probs[a] / math.exp(old_lp)
            upstream = np.zeros(len(probs))
            clipped = (w > 0 and ratio > 1.0 + clip_eps) or (w < 0 and ratio < 1.0 - clip_eps)
            if not clipped:
                upstream[a] = float(w) / math.exp(old_lp)
            if entropy_coef:
                upstream = upstream - entropy_coef * (np.log(np.maximum(probs, 1e-300)) + 1.0)
            if np.any(upstream):
                buf.add(vjp(policy, s, upstream))
        total.add(buf)
    return total


def ppo_step(policy, trajectories, config, optimizer):
    """K epochs of clipped-surrogate ascent against the sampling-time log-probs."""
    if not trajectories:
        return policy
    advantages = _advantages(trajectories, config.baseline)
    for _ in range(config.ppo_epochs):
        grads = ppo_gradient(policy, trajectories, advantages, config.clip_eps, config.entropy_coef)
        policy = _optimizer_step(policy, grads, optimizer, config.freeze, config.beta_l1)
    return policy


# ---------------------------------------------------------------------------
# Q-learning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    terminal: bool


def q_values(policy, x):
    if not isinstance(policy, SoftTree) or policy.interpretation == POLICY:
        raise InvalidInterpretationError("Q-learning needs a Q-interpretation tree")
    return eval_soft(policy, x)


def td_error(policy, transition, gamma):
    target = transition.r
    if not transition.terminal:
        target = target + gamma * float(np.max(q_values(policy, transition.s_next)))
    return target - float(q_values(policy, transition.s)[transition.a])


def q_gradient(policy, transition, gamma):
    """(r + gamma max_a' Q(s', a') - Q(s, a)) grad Q(s, a); no bootstrap past a terminal step."""
    delta = td_error(policy, transition, gamma)
    onehot = np.zeros(policy.n_actions)
    onehot[transition.a] = 1.0
    return backward(policy, transition.s, onehot).scaled(delta)


def q_step(policy, transition, optimizer, gamma, freeze=()):
    return _optimizer_step(policy, q_gradient(policy, transition, gamma), optimizer, freeze)


def greedy_q_action(policy, x):
    return int(np.argmax(q_values(policy, x)))


def q_episode(policy, env, max_steps, rng, epsilon=0.0):
    """Epsilon-greedy episode under a fixed Q tree. Returns the transitions."""
    transitions = []
    obs = env.observation()
    for t in range(max_steps):
        if epsilon > 0.0 and rng.random() < epsilon:
            a = int(rng.integers(policy.n_actions))
        else:
            a = greedy_q_action(policy, obs)
        try:
            nxt, reward, done = env.step(a)
        except EnvError as e:
            raise EnvError(str(e), step=t) from e
        transitions.append(Transition(np.array(obs, dtype=float), a, float(reward), np.array(nxt, dtype=float), done))
        obs = nxt
        if done:
            break
    return transitions


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def _curve_row(episode, reward, history):
    window = history[-50:]
    return {"episode": episode, "cumulative_reward": reward, "moving_avg_50": float(np.mean(window))}


def train(policy, env, config, on_episode=None):
    """
    Run `config.episodes` episodes, updating with PPO or plain policy gradient
    every `episodes_per_update` episodes. Returns the final policy and the
    learning-curve rows. On divergence the raised error carries `.partial`.
    """
    if config.algo == "q":
        return train_q(policy, env, config, on_episode)
    env_rng, sample_rng = make_rng(config.seed, "env"), make_rng(config.seed, "sampling")
    optimizer = RmsProp(config.learning_rate, config.rho, config.eps, ascent=True)
    rows, history, batch = [], [], []
    for episode in range(1, config.episodes + 1):
        env.reset(env_rng)
        trajs = run_episode(policy, env, config.max_steps, sample_rng)
        reward = trajs[0].total_reward
        history.append(reward)
        rows.append(_curve_row(episode, reward, history))
        batch.extend(compute_returns(t, config.gamma, config.returns) for t in trajs)
        if episode % config.episodes_per_update == 0:
            try:
                if config.algo == "ppo":
                    policy = ppo_step(policy, batch, config, optimizer)
                else:
                    policy = pg_step(policy, batch, optimizer, config.baseline, config.freeze, config.beta_l1)
            except DivergenceError as e:
                e.partial = TrainResult(policy, rows, episode)
                raise
            batch = []
        if on_episode:
            on_episode(rows[-1])
        if episode % 100 == 0:
            log.info(f"episode {episode}: moving average {rows[-1]['moving_avg_50']:.2f}")
    return TrainResult(policy, rows, config.episodes)


def epsilon_at(episode, config):
    """Linear anneal from epsilon_start to epsilon_end over the run."""
    if config.episodes <= 1:
        return config.epsilon_end
    frac = min(1.0, (episode - 1) / (config.episodes - 1))
    return config.epsilon_start + (config.epsilon_end - config.epsilon_start) * frac


def train_q(policy, env, config, on_episode=None):
    """Online Q-learning: one RMSProp step per transition, epsilon-greedy behaviour."""
    if env.n_agents != 1:
        raise ConfigError("Q-learning training supports single-agent environments")
    env_rng, explore_rng = make_rng(config.seed, "env"), make_rng(config.seed, "explore")
    optimizer = RmsProp(config.learning_rate, config.rho, config.eps, ascent=True)
    rows, history = [], []
    for episode in range(1, config.episodes + 1):
        obs = env.reset(env_rng)
        epsilon = epsilon_at(episode, config)
        total = 0.0
        for t in range(config.max_steps):
            if explore_rng.random() < epsilon:
                a = int(explore_rng.integers(policy.n_actions))
            else:
                a = greedy_q_action(policy, obs)
            try:
                nxt, reward, done = env.step(a)
            except EnvError as e:
                raise EnvError(str(e), step=t) from e
            transition = Transition(np.array(obs, dtype=float), a, float(reward), np.array(nxt, dtype=float), done)
            try:
                policy = q_step(policy, transition, optimizer, config.gamma, config.freeze)
            except DivergenceError as e:
                e.partial = TrainResult(policy, rows, episode - 1)
                raise
            total += reward
            obs = nxt
            if done:
                break
        history.append(total)
        rows.append(_curve_row(episode, total, history))
        if on_episode:
            on_episode(rows[-1])
    return TrainResult(policy, rows, config.episodes)
