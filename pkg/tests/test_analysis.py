import json
import logging

import numpy as np
import pytest

from modules.analysis import (
    AnalysisConfig,
    build_report,
    delta_phi_pg,
    delta_phi_q,
    emit_report,
    find_critical_points,
    interior_extrema,
    optimal_q_leaves,
    optimality_curve,
    policy_value,
    summarize,
    wrong_action_prob,
)
from modules.core import ConfigError
from modules.data import ANALYSIS_CURVES, ANALYSIS_SUMMARY
from modules.envs import ChainMdpConfig


@pytest.fixture(scope="module")
def report():
    return build_report(AnalysisConfig())


def _step(config):
    lo, hi = config.phi_range()
    return (hi - lo) / (config.grid - 1)


# ---------------------------------------------------------------------------
# Leaves and policy values
# ---------------------------------------------------------------------------

def test_q_leaves_without_penalty():
    leaves = optimal_q_leaves(0.95, 1.0, 0.0)
    assert leaves.false_a2 == pytest.approx(1.0)
    assert leaves.true_a1 == pytest.approx(1.0)
    assert leaves.false_a1 == pytest.approx(3.709875)
    assert leaves.true_a2 == pytest.approx(3.709875)


def test_q_leaves_infinite_horizon():
    leaves = optimal_q_leaves(0.95, 1.0, -1.0, infinite=True)
    assert leaves.true_a2 == pytest.approx(20.0)
    assert leaves.false_a2 == pytest.approx(0.05)
    with pytest.raises(ConfigError):
        optimal_q_leaves(1.0, 1.0, -1.0, infinite=True)


@pytest.mark.parametrize("gamma", [0.95, 0.9])
@pytest.mark.parametrize("r_minus", [-1.0, 0.0])
def test_threshold_policy_values(gamma, r_minus):
    config = AnalysisConfig(chain=ChainMdpConfig(gamma=gamma, r_minus=r_minus))
    expected = {
        0.0: 1.0 + gamma + r_minus * gamma ** 2,
        1.0: 1.0 + gamma + r_minus * gamma ** 2,
        2.0: 1.0 + gamma + gamma ** 2 + gamma ** 3,
        3.0: 1.0 + r_minus * gamma,
        4.0: 1.0 + r_minus * gamma,
    }
    for phi, value in expected.items():
        assert policy_value(phi, config) == pytest.approx(value, abs=1e-12)


# ---------------------------------------------------------------------------
# Root finding and integration
# ---------------------------------------------------------------------------

def test_linear_root():
    grid = np.linspace(0.0, 4.0, 41)

    def f(x):
        return x - 2.5

    points = find_critical_points(grid, f(grid), f)
    assert len(points.roots) == 1
    assert points.roots[0] == pytest.approx(2.5, abs=1e-8)
    assert points.tangential == []


def test_touching_zero_is_tangential():
    grid = np.linspace(0.0, 4.0, 41)
    points = find_critical_points(grid, (grid - 2.0) ** 2)
    assert points.roots == []
    assert points.tangential == [pytest.approx(2.0)]


def test_root_finder_needs_increasing_grid():
    with pytest.raises(ValueError):
        find_critical_points([0.0, 2.0, 1.0], [1.0, -1.0, 1.0])


def test_optimality_curve_of_constant_is_linear():
    curve = optimality_curve(np.linspace(0.0, 1.0, 5), np.ones(5))
    assert list(curve) == pytest.approx([0.0, 0.25, 0.5, 0.75, 1.0])


def test_flat_optimality_curve_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="ddt_rl"):
        curve = optimality_curve(np.linspace(0.0, 1.0, 5), np.zeros(5))
    assert list(curve) == [0.0] * 5
    assert "constant" in caplog.text


def test_optimality_curve_needs_uniform_grid():
    with pytest.raises(ValueError):
        optimality_curve([0.0, 0.1, 0.5], [1.0, 1.0, 1.0])


def test_sign_integrand_gives_tent():
    grid = np.linspace(0.0, 4.0, 81)
    curve = optimality_curve(grid, np.sign(2.5 - grid))
    maxima, minima = interior_extrema(grid, curve)
    assert minima == []
    assert len(maxima) == 1
    assert maxima[0] == pytest.approx(2.5, abs=0.05 + 1e-9)


# ---------------------------------------------------------------------------
# Update landscapes
# ---------------------------------------------------------------------------

def test_q_landscape_has_more_critical_points_than_pg(report):
    q_roots, pg_roots = report.roots_q.roots, report.roots_pg.roots
    assert len(pg_roots) == 1
    assert pg_roots[0] == pytest.approx(2.5, abs=0.02)
    assert len(q_roots) > len(pg_roots)
    assert sum(abs(r - 2.5) <= 0.05 for r in q_roots) == 1


def test_pg_root_per_start_state(report):
    assert len(report.pg_roots_by_start["2"]) == 1
    assert len(report.pg_roots_by_start["3"]) == 1
    assert report.pg_roots_by_start["2"][0] == pytest.approx(2.535, abs=0.02)
    assert report.pg_roots_by_start["3"][0] == pytest.approx(2.465, abs=0.02)


@pytest.mark.parametrize("returns", ["conventional", "verbatim"])
def test_pg_update_at_midpoint_pushes_threshold_away_from_start(returns):
    config = AnalysisConfig(grid=11, pg_returns=returns)
    assert delta_phi_pg(2.5, config, start=2) > 0.0
    assert delta_phi_pg(2.5, config, start=3) < 0.0


def test_non_numeric_start_is_a_config_error():
    with pytest.raises(ConfigError):
        AnalysisConfig(pg_start="middle")
    with pytest.raises(ConfigError):
        AnalysisConfig(q_start=[2])


def test_optimality_curve_shapes(report):
    step = _step(AnalysisConfig())
    pg_max, pg_min = interior_extrema(report.grid, report.optimality_pg)
    assert len(pg_max) == 1
    assert abs(pg_max[0] - 2.5) <= step + 1e-9
    q_max, q_min = interior_extrema(report.grid, report.optimality_q)
    assert len(q_max) + len(q_min) >= 2


def test_averaged_updates_are_antisymmetric_about_the_midpoint():
    config = AnalysisConfig(q_start="average")
    for phi in np.random.default_rng(0).uniform(0.0, 2.5, 20):
        assert delta_phi_q(5.0 - phi, config, warn=False) == pytest.approx(-delta_phi_q(phi, config, warn=False),
                                                                          abs=1e-9)
        assert delta_phi_pg(5.0 - phi, config) == pytest.approx(-delta_phi_pg(phi, config), abs=1e-9)


@pytest.mark.parametrize("gamma", [0.9, 0.95])
@pytest.mark.parametrize("alpha", [5.0, 10.0, 20.0])
def test_pg_root_is_unique_for_each_start(gamma, alpha):
    config = AnalysisConfig(chain=ChainMdpConfig(gamma=gamma), alpha=alpha, grid=201)
    grid = config.phi_grid()
    for start in (2, 3):
        values = [delta_phi_pg(phi, config, start=start) for phi in grid]
        assert len(find_critical_points(grid, values).roots) == 1


@pytest.mark.parametrize("n", [4, 6, 8])
def test_averaged_pg_root_sits_between_the_reward_states(n):
    config = AnalysisConfig(chain=ChainMdpConfig(n=n, i_star=n // 2), grid=8 * n + 1)
    grid = config.phi_grid()

    def f(phi):
        return delta_phi_pg(phi, config)

    roots = find_critical_points(grid, [f(phi) for phi in grid], f).roots
    assert any(abs(r - (n // 2 + 0.5)) <= _step(config) for r in roots)


def test_wrong_action_probability():
    assert wrong_action_prob(2.5, 1e6) == pytest.approx(0.01, abs=1e-9)
    grid = np.linspace(0.0, 5.0, 2001)
    values = [wrong_action_prob(phi, 10.0) for phi in grid]
    assert abs(grid[int(np.argmin(values))] - 2.5) <= grid[1] - grid[0] + 1e-9


# ---------------------------------------------------------------------------
# Configuration and output
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("bad", [
    dict(grid=1),
    dict(phi_max=3.0),
    dict(phi_min=0.5),
    dict(chain=ChainMdpConfig(p=0.5)),
    dict(q_leaves="huge"),
    dict(pg_returns="forward"),
    dict(q_start=1),
])
def test_analysis_config_validation(bad):
    with pytest.raises(ConfigError):
        AnalysisConfig(**bad)


def test_analysis_config_from_nested_section():
    config = AnalysisConfig.from_dict({"chain": {"n": 6, "i_star": 3}, "alpha": 5.0, "comment": "ignored"})
    assert config.chain.n == 6
    assert config.alpha == 5.0
    assert config.phi_range() == (0.0, 6.0)
    assert config.starts("average") == [3, 4]


def test_emit_report_is_deterministic(tmp_path):
    config = AnalysisConfig(grid=161)
    first = emit_report(config, tmp_path / "a")
    emit_report(config, tmp_path / "b")
    assert len(first.files) == len(ANALYSIS_CURVES) + 2
    for name in list(ANALYSIS_CURVES.values()) + ["wrong_action.csv", ANALYSIS_SUMMARY]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    summary = json.loads((tmp_path / "a" / ANALYSIS_SUMMARY).read_text())
    assert summary["root_counts"]["pg"] == 1
    assert summary["parameters"]["chain"]["n"] == 4
    header = (tmp_path / "a" / ANALYSIS_CURVES["delta_phi_q"]).read_text().splitlines()[0]
    assert header == "phi,value"


def test_summary_reports_best_threshold_values(report):
    summary = summarize(report, AnalysisConfig())
    best = summary["policy_value_max"]
    assert best["value"] == pytest.approx(1.0 + 0.95 + 0.95 ** 2 + 0.95 ** 3)
    assert all(1.0 <= phi < 3.0 for phi in best["phi"])
    assert summary["wrong_action_min"]["phi"] == pytest.approx(2.5, abs=0.0025 + 1e-9)
