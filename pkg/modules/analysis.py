"""
analysis.py - Update landscapes of a single-node tree on the chain MDP.

For a tree with one feature (the state index s), weight 1, steepness alpha and
threshold phi, this module computes the summed per-episode update of phi under
Q-learning and under policy gradient, finds the points where it vanishes, and
integrates it into normalized optimality curves. Everything is exact: p = 1
makes Q-learning episodes deterministic and policy-gradient episodes are
enumerated action sequence by action sequence.

The TRUE branch (s > phi) holds the leaf that prefers a2 (move left), the FALSE
branch the leaf that prefers a1 (move right).
"""

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from modules.core import ConfigError, get_logger
from modules.data import ANALYSIS_CURVES, ANALYSIS_SUMMARY, SUMMARY_SCHEMA_VERSION
from modules.ddt import POLICY, eval_soft, single_node_tree
from modules.envs import A1, A2, ChainEnv, ChainMdpConfig
from modules.history import write_json, write_points


log = get_logger("analysis")

AVERAGE = "average"
ROOT_FTOL = 1e-10
ROOT_XTOL = 1e-8
PLATEAU_TOL = 1e-9
EXTREMUM_TOL = 1e-12


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

class QLeaves(NamedTuple):
    false_a2: float
    true_a1: float
    false_a1: float
    true_a2: float


@dataclass(frozen=True)
class AnalysisConfig:
    """
    `q_start` / `pg_start`: a state index or "average" (mean over s_i*, s_i*+1).
    `q_start=None` means s_i*. `horizon=None` means n steps, `phi_max=None` means n.
    """

    chain: ChainMdpConfig = field(default_factory=ChainMdpConfig)
    alpha: float = 10.0
    beta: float = 1.0
    pg_high: float = 0.99
    pg_low: float = 0.01
    q_leaves: str = "finite"
    phi_min: float = 0.0
    phi_max: float = None
    grid: int = 2001
    horizon: int = None
    q_start: object = None
    pg_start: object = AVERAGE
    value_start: int = None
    pg_returns: str = "conventional"
    wrong_action_phi_max: float = 5.0

    def __post_init__(self):
        if self.grid < 2:
            raise ConfigError(f"analysis grid needs >= 2 points, got {self.grid}")
        if self.phi_min > 0.0 or self.phi_range()[1] < self.chain.n:
            raise ConfigError(f"analysis scan range must cover [0, {self.chain.n}]")
        if self.chain.p != 1.0:
            raise ConfigError("analysis curves assume deterministic transitions (p = 1)")
        if self.q_leaves not in ("finite", "infinite"):
            raise ConfigError("q_leaves must be 'finite' or 'infinite'")
        if self.pg_returns not in ("conventional", "verbatim"):
            raise ConfigError("pg_returns must be 'conventional' or 'verbatim'")
        for name in ("q_start", "pg_start"):
            start = getattr(self, name)
            if start in (None, AVERAGE):
                continue
            try:
                index = int(start)
            except (TypeError, ValueError):
                raise ConfigError(f"{name}={start!r} is not a state index") from None
            if not 1 < index < self.chain.n:
                raise ConfigError(f"{name}={start} is not a non-terminal state")

    @classmethod
    def from_dict(cls, section):
        section = dict(section)
        chain = ChainMdpConfig.from_dict(section.pop("chain", {}))
        known = {k: v for k, v in section.items() if k in cls.__dataclass_fields__}
        return cls(chain=chain, **known)

    def to_dict(self):
        return asdict(self)

    def phi_range(self):
        return self.phi_min, (float(self.chain.n) if self.phi_max is None else self.phi_max)

    def phi_grid(self):
        lo, hi = self.phi_range()
        return np.linspace(lo, hi, self.grid)

    def steps(self):
        return self.chain.n if self.horizon is None else self.horizon

    def starts(self, which):
        if which == AVERAGE:
            return [self.chain.i_star, self.chain.i_star + 1]
        return [self.chain.i_star if which is None else int(which)]


@dataclass
class CriticalPoints:
    roots: list
    tangential: list


@dataclass
class AnalysisReport:
    grid: np.ndarray
    delta_q: np.ndarray
    delta_pg: np.ndarray
    roots_q: CriticalPoints
    roots_pg: CriticalPoints
    pg_roots_by_start: dict
    optimality_q: np.ndarray
    optimality_pg: np.ndarray
    policy_values: np.ndarray
    wrong_grid: np.ndarray
    wrong_action: np.ndarray
    files: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Leaf settings
# ---------------------------------------------------------------------------

def optimal_q_leaves(gamma, r_plus, r_minus, infinite=False):
    """
    Q leaves of the optimal single-node tree. Suboptimal pairs are worth
    r+ + gamma r-; optimal pairs r+(1 + gamma + gamma^2 + gamma^3), or the
    infinite series r+/(1 - gamma) when `infinite`.
    """
    low = r_plus + gamma * r_minus
    if infinite:
        if gamma >= 1.0:
            raise ConfigError("infinite-horizon leaves need gamma < 1")
        high = r_plus / (1.0 - gamma)
    else:
        high = r_plus * (1.0 + gamma + gamma ** 2 + gamma ** 3)
    return QLeaves(false_a2=low, true_a1=low, false_a1=high, true_a2=high)


def _q_leaf_vectors(config):
    chain = config.chain
    q = optimal_q_leaves(chain.gamma, chain.r_plus, chain.r_minus, config.q_leaves == "infinite")
    return np.array([q.true_a1, q.true_a2]), np.array([q.false_a1, q.false_a2])


def _pg_leaf_vectors(config):
    return (np.array([config.pg_low, config.pg_high]),
            np.array([config.pg_high, config.pg_low]))


# ---------------------------------------------------------------------------
# Single-node tree, closed form
# ---------------------------------------------------------------------------

def _mu(phi, s, config):
    z = config.alpha * (config.beta * s - phi)
    z = min(max(z, -500.0), 500.0)
    return 1.0 / (1.0 + math.exp(-z))


def _dmu_dphi(mu, config):
    return -mu * (1.0 - mu) * config.alpha


def _greedy(q):
    return A2 if q[1] > q[0] else A1


def _q_episode(phi, start, config):
    """Summed Q-learning update of phi over the greedy episode from `start`."""
    chain = config.chain
    w_true, w_false = _q_leaf_vectors(config)

    def q_of(s):
        mu = _mu(phi, s, config)
        return mu, mu * w_true + (1.0 - mu) * w_false

    total, s = 0.0, start
    for _ in range(config.steps()):
        mu, q = q_of(s)
        a = _greedy(q)
        dq_dphi = (w_true[a] - w_false[a]) * mu * (1.0 - mu) * -config.alpha
        if chain.is_terminal(s):
            total += (chain.terminal_value() - q[a]) * dq_dphi
            return total, False
        s_next = s + 1 if a == A1 else s - 1
        target = chain.state_reward(s) + chain.gamma * float(np.max(q_of(s_next)[1]))
        total += (target - q[a]) * dq_dphi
        s = s_next
    return total, True


def delta_phi_q(phi, config, warn=True):
    """Summed Q-learning update of phi, averaged over the configured start states."""
    results = [_q_episode(phi, s, config) for s in config.starts(config.q_start)]
    if warn and any(capped for _, capped in results):
        log.warning(f"delta_phi_q(phi={phi:g}): episode reached the {config.steps()}-step cap")
    return float(np.mean([value for value, _ in results]))


def _pg_episodes(phi, start, config):
    """Expected policy-gradient update of phi from `start`, by exact enumeration."""
    chain = config.chain
    p_true, p_false = _pg_leaf_vectors(config)
    horizon = config.steps()
    verbatim = config.pg_returns == "verbatim"
    capped = [False]

    def finish(prob, rewards, scores):
        g, acc, last = np.zeros(len(rewards)), 0.0, len(rewards) - 1
        for t in reversed(range(len(rewards))):
            acc = acc + chain.gamma ** (last - t) * rewards[t] if verbatim else rewards[t] + chain.gamma * acc
            g[t] = acc
        return prob * float(np.dot(g, scores))

    def walk(s, t, prob, rewards, scores):
        if t == horizon:
            capped[0] = True
            return finish(prob, rewards, scores)
        if chain.is_terminal(s):
            return finish(prob, rewards + [chain.terminal_value()], scores + [0.0])
        mu = _mu(phi, s, config)
        dmu = _dmu_dphi(mu, config)
        total = 0.0
        for a in (A1, A2):
            pi = mu * p_true[a] + (1.0 - mu) * p_false[a]
            if pi <= 0.0:
                continue
            score = (p_true[a] - p_false[a]) * dmu / pi
            s_next = s + 1 if a == A1 else s - 1
            total += walk(s_next, t + 1, prob * pi, rewards + [chain.state_reward(s)], scores + [score])
        return total

    return walk(start, 0, 1.0, [], []), capped[0]


def delta_phi_pg(phi, config, start=None, warn=False):
    """
    Expected policy-gradient update of phi. `start` overrides the configured
    start-state policy. Horizon truncation is the normal case for good
    policies, so it is only reported when `warn` is set.
    """
    starts = config.starts(config.pg_start if start is None else start)
    results = [_pg_episodes(phi, s, config) for s in starts]
    if warn and any(capped for _, capped in results):
        log.warning(f"delta_phi_pg(phi={phi:g}): episodes truncated at {config.steps()} steps")
    return float(np.mean([value for value, _ in results]))


# ---------------------------------------------------------------------------
# Critical points and optimality curves
# ---------------------------------------------------------------------------

def _bisect(func, lo, hi, f_lo, ftol=ROOT_FTOL, xtol=ROOT_XTOL):
    while hi - lo > xtol:
        mid = 0.5 * (lo + hi)
        f_mid = func(mid)
        if abs(f_mid) < ftol:
            return mid
        if (f_mid < 0.0) == (f_lo < 0.0):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def find_critical_points(grid, values, func=None):
    """
    Roots of a sampled curve: each sign change between neighbouring samples is
    refined by bisection on `func` (or on the linear interpolant when `func`
    is None). Exact zeros count once when their neighbours differ in sign.
    Runs of |value| < 1e-9 without a crossing are returned as tangential.
    """
    grid = np.asarray(grid, dtype=float)
    values = np.asarray(values, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")

    def interp(x):
        return float(np.interp(x, grid, values))

    f = func or interp
    roots, tangential = [], []
    n = len(values)
    for i in range(n - 1):
        a, b = values[i], values[i + 1]
        if a * b < 0.0:
            roots.append(_bisect(f, grid[i], grid[i + 1], a))
    for i in range(1, n - 1):
        if values[i] == 0.0 and values[i - 1] * values[i + 1] < 0.0:
            roots.append(float(grid[i]))

    flat = np.abs(values) < PLATEAU_TOL
    i = 0
    while i < n:
        if not flat[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and flat[j + 1]:
            j += 1
        before = values[i - 1] if i > 0 else 0.0
        after = values[j + 1] if j + 1 < n else 0.0
        crossing = before * after < 0.0
        if not crossing and not (i == j and values[i] != 0.0 and (before == 0.0 or after == 0.0)):
            tangential.append(float(0.5 * (grid[i] + grid[j])))
        i = j + 1
    return CriticalPoints(sorted(roots), tangential)


def optimality_curve(grid, values):
    """Left-Riemann cumulative integral of the update curve, min-max normalized to [0, 1]."""
    grid = np.asarray(grid, dtype=float)
    values = np.asarray(values, dtype=float)
    steps = np.diff(grid)
    if len(steps) and not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
        raise ValueError("optimality_curve needs a uniform grid")
    integral = np.concatenate([[0.0], np.cumsum(values[:-1] * steps)])
    span = integral.max() - integral.min()
    if span <= 0.0:
        log.warning("optimality curve: integral is constant, returning a flat curve")
        return np.zeros_like(integral)
    return (integral - integral.min()) / span


def interior_extrema(grid, curve):
    """(maxima, minima) grid positions of the sampled curve, plateaus collapsed."""
    diffs = np.diff(np.asarray(curve, dtype=float))
    signs = np.where(np.abs(diffs) <= EXTREMUM_TOL, 0, np.sign(diffs))
    maxima, minima = [], []
    last_sign, last_idx = 0, None
    for i, sgn in enumerate(signs):
        if sgn == 0:
            continue
        if last_sign > 0 and sgn < 0:
            maxima.append(float(grid[(last_idx + 1 + i) // 2]))
        elif last_sign < 0 and sgn > 0:
            minima.append(float(grid[(last_idx + 1 + i) // 2]))
        last_sign, last_idx = sgn, i
    return maxima, minima


# ---------------------------------------------------------------------------
# Crisp threshold policy
# ---------------------------------------------------------------------------

def policy_value(phi, config):
    """
    Discounted return of the crisp policy "s > phi -> a2, else a1" over one
    episode of `config.steps()` steps from `value_start` (default s_i*+1).
    """
    chain = config.chain
    start = chain.i_star + 1 if config.value_start is None else config.value_start
    env = ChainEnv(replace(chain, start=start))
    s = env.reset(None)[0]
    value, discount = 0.0, 1.0
    for _ in range(config.steps()):
        a = A2 if s > phi else A1
        obs, reward, done = env.step(a)
        value += discount * reward
        discount *= chain.gamma
        if done:
            break
        s = obs[0]
    return value


def wrong_action_prob(phi, alpha, leaves=None, states=(2, 3)):
    """
    Mean probability of the suboptimal action in the two reward states:
    1/2 (pi(s_lo, a2) + pi(s_hi, a1)), evaluated on the soft tree.
    `leaves` = (TRUE distribution, FALSE distribution).
    """
    p_true, p_false = leaves if leaves is not None else ([0.01, 0.99], [0.99, 0.01])
    tree = single_node_tree(alpha, [1.0], phi, np.log(p_true), np.log(p_false), POLICY)
    s_lo, s_hi = states
    return 0.5 * (float(eval_soft(tree, [s_lo])[A2]) + float(eval_soft(tree, [s_hi])[A1]))


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def _curve(func, grid):
    return np.array([func(phi) for phi in grid])


def build_report(config):
    grid = config.phi_grid()

    q_capped = sum(any(c for _, c in (_q_episode(phi, s, config) for s in config.starts(config.q_start)))
                   for phi in grid)
    if q_capped:
        log.warning(f"delta_phi_q: {q_capped} of {len(grid)} grid points reached the {config.steps()}-step cap")

    def dq(phi):
        return delta_phi_q(phi, config, warn=False)

    def dpg(phi):
        return delta_phi_pg(phi, config)

    delta_q = _curve(dq, grid)
    delta_pg = _curve(dpg, grid)
    by_start = {}
    for s in config.starts(AVERAGE):
        def f(phi, s=s):
            return delta_phi_pg(phi, config, start=s)
        by_start[str(s)] = find_critical_points(grid, _curve(f, grid), f).roots

    lo, hi = 0.0, config.wrong_action_phi_max
    wrong_grid = np.linspace(lo, hi, config.grid)
    leaves = _pg_leaf_vectors(config)
    states = (config.chain.i_star, config.chain.i_star + 1)
    return AnalysisReport(
        grid=grid,
        delta_q=delta_q,
        delta_pg=delta_pg,
        roots_q=find_critical_points(grid, delta_q, dq),
        roots_pg=find_critical_points(grid, delta_pg, dpg),
        pg_roots_by_start=by_start,
        optimality_q=optimality_curve(grid, delta_q),
        optimality_pg=optimality_curve(grid, delta_pg),
        policy_values=_curve(lambda phi: policy_value(phi, config), grid),
        wrong_grid=wrong_grid,
        wrong_action=_curve(lambda phi: wrong_action_prob(phi, config.alpha, leaves, states), wrong_grid),
    )


def summarize(report, config):
    q_max, q_min = interior_extrema(report.grid, report.optimality_q)
    pg_max, pg_min = interior_extrema(report.grid, report.optimality_pg)
    best = int(np.argmin(report.wrong_action))
    best_value = float(report.policy_values.max())
    return {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "parameters": config.to_dict(),
        "roots": {"q": report.roots_q.roots, "pg": report.roots_pg.roots},
        "root_counts": {"q": len(report.roots_q.roots), "pg": len(report.roots_pg.roots)},
        "tangential": {"q": report.roots_q.tangential, "pg": report.roots_pg.tangential},
        "pg_roots_by_start": report.pg_roots_by_start,
        "extrema": {
            "q": {"maxima": q_max, "minima": q_min},
            "pg": {"maxima": pg_max, "minima": pg_min},
        },
        "extrema_counts": {"q": len(q_max) + len(q_min), "pg": len(pg_max) + len(pg_min)},
        "policy_value_max": {
            "value": best_value,
            "phi": [float(x) for x, v in zip(report.grid, report.policy_values) if v == best_value],
        },
        "wrong_action_min": {
            "phi": float(report.wrong_grid[best]),
            "value": float(report.wrong_action[best]),
        },
    }


def emit_report(config, out_dir):
    """Write one `phi,value` CSV per curve plus a JSON summary; returns the report."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out_dir}: {e}") from e
    report = build_report(config)
    curves = {
        "delta_phi_q": report.delta_q,
        "delta_phi_pg": report.delta_pg,
        "optimality_q": report.optimality_q,
        "optimality_pg": report.optimality_pg,
        "policy_value": report.policy_values,
    }
    try:
        for key, values in curves.items():
            path = out_dir / ANALYSIS_CURVES[key]
            write_points(path, report.grid, values)
            report.files.append(str(path))
        wrong_path = out_dir / "wrong_action.csv"
        write_points(wrong_path, report.wrong_grid, report.wrong_action)
        report.files.append(str(wrong_path))
        summary_path = out_dir / ANALYSIS_SUMMARY
        write_json(summary_path, summarize(report, config))
        report.files.append(str(summary_path))
    except OSError as e:
        raise ConfigError(f"cannot write analysis output to {out_dir}: {e}") from e
    counts = (len(report.roots_q.roots), len(report.roots_pg.roots))
    log.info(f"critical points: q={counts[0]} pg={counts[1]}; wrote {len(report.files)} files to {out_dir}")
    return report
