import math

import numpy as np
import pytest
from pytest import approx

from stopline.model import RewardFunction
from stopline.pde import (
    SolverError,
    SolverSettings,
    ValueGrid,
    apply_operator,
    contact_boundary,
    residual_report,
    solve_generation_system,
    solve_scalar,
)

from conftest import make_spec, put_oracle


def test_apply_operator_reduces_to_heat_minus_discount():
    spec = make_spec(diffusion=("constant", math.sqrt(2.0)), alpha=0.0, gamma=1.0)
    v, vxx = 0.7, -0.3
    got = apply_operator(spec, 0.0, v, 0.1, vxx, next_gen_value=v)
    assert got == approx(vxx - v + 0.1 * 0.0)


def test_apply_operator_alpha_cancels_for_single_offspring():
    base = dict(diffusion=("constant", 1.0), offspring=("deterministic", 1), gamma=0.8)
    vals = []
    for a in (0.0, 0.5, 2.0):
        spec = make_spec(alpha=a, **base)
        vals.append(apply_operator(spec, 0.3, 0.6, -0.2, 0.4, next_gen_value=0.6))
    assert vals[0] == approx(vals[1]) == approx(vals[2])


def test_apply_operator_constant_one_has_negative_generator():
    spec = make_spec(alpha=0.7, offspring=("poisson", 0.5), gamma=1.0)
    got = apply_operator(spec, 0.0, 1.0, 0.0, 0.0, next_gen_value=1.0)
    assert got == approx(-spec.gamma, abs=1e-10)


def test_apply_operator_rejects_multidim():
    spec = make_spec(dimension=2)
    with pytest.raises(SolverError):
        apply_operator(spec, 0.0, 1.0, 0.0, 0.0, 1.0)


@pytest.mark.parametrize("offspring", [
    ("deterministic", 2), ("binary", (0.5, 0.5)), ("poisson", 0.5),
])
def test_constant_obstacle_solves_to_one(offspring):
    spec = make_spec(diffusion=("constant", 1.0), alpha=0.5, alpha_bar=0.5,
                     offspring=offspring, gamma=1.0,
                     rewards=(RewardFunction("constant", c=1.0),))
    grid = solve_scalar(spec, SolverSettings(x_lo=-2, x_hi=2, n_cells=120))
    assert np.max(np.abs(grid.values[0] - 1.0)) <= 1e-8
    assert grid.stats[0].contact_count == len(grid.xs)
    rep = residual_report(grid).levels[0]
    assert rep["max_obstacle_violation"] <= 1e-12


def test_put_matches_closed_form(put_spec):
    vtrue_fn = put_oracle
    xs_hi = 4.0
    v_far, xstar = vtrue_fn(np.array([xs_hi]))
    settings = SolverSettings(x_lo=1e-3, x_hi=xs_hi, n_cells=1000,
                              bc_hi="value", bc_hi_value=float(v_far[0]),
                              omega=1.99)
    grid = solve_scalar(put_spec, settings)
    vtrue, xstar = vtrue_fn(grid.xs)
    h = grid.xs[1] - grid.xs[0]
    mask = np.abs(grid.xs - xstar) > 5 * h
    rel = np.abs(grid.values[0] - vtrue) / np.maximum(vtrue, 1e-12)
    assert np.max(rel[mask]) < 0.01
    cb = contact_boundary(grid)
    assert abs(cb - xstar) <= 2 * h


def test_put_boundary_bias_shrinks_with_domain(put_spec):
    # default obstacle boundary: truncation bias, measured by domain doubling
    errs = []
    for x_hi, n in ((4.0, 500), (8.0, 1000)):
        grid = solve_scalar(put_spec, SolverSettings(x_lo=1e-3, x_hi=x_hi,
                                                     n_cells=n, omega=1.99))
        vtrue, _ = put_oracle(grid.xs)
        i = int(np.argmin(np.abs(grid.xs - 2.0)))
        errs.append(abs(grid.values[0][i] - vtrue[i]))
    assert errs[1] < 0.5 * errs[0]


def test_alpha_invariance_single_offspring():
    rewards = (RewardFunction("bump", a=0.8, center=0.0, width=1.0),)
    sols = []
    for a in (0.0, 0.5, 2.0):
        spec = make_spec(diffusion=("constant", 1.0), alpha=a, alpha_bar=max(a, 1e-9),
                         offspring=("deterministic", 1), gamma=1.0, rewards=rewards)
        grid = solve_scalar(spec, SolverSettings(x_lo=-6, x_hi=6, n_cells=400,
                                                 omega=1.9))
        sols.append(grid.values[0])
    tol_fp = 1e-8
    assert np.max(np.abs(sols[1] - sols[0])) <= 10 * tol_fp
    assert np.max(np.abs(sols[2] - sols[0])) <= 10 * tol_fp


def test_generation_collapse_equal_rewards(bump_spec):
    g = bump_spec.reward_levels[0]
    spec_deep = make_spec(diffusion=("constant", 1.5), alpha=0.25,
                          offspring=("deterministic", 2), gamma=1.0,
                          rewards=(g, g, g, g))
    settings = SolverSettings(x_lo=-8, x_hi=8, n_cells=400, omega=1.9)
    multi = solve_generation_system(spec_deep, settings)
    scalar = solve_scalar(bump_spec, settings)
    assert multi.depth == 3
    for n in range(4):
        assert np.max(np.abs(multi.values[n] - scalar.values[0])) <= 1e-8


def test_generation_monotone_in_obstacle():
    g_hi = RewardFunction("bump", a=0.8, center=0.0, width=1.0)
    g_lo = RewardFunction("bump", a=0.5, center=0.0, width=1.0)
    spec = make_spec(diffusion=("constant", 1.5), alpha=0.25,
                     offspring=("deterministic", 2), gamma=1.0,
                     rewards=(g_hi, g_lo))
    grid = solve_generation_system(spec, SolverSettings(x_lo=-8, x_hi=8,
                                                        n_cells=400, omega=1.9))
    assert np.all(grid.values[0] >= grid.values[1] - 1e-10)


def test_generation_depth_one_unit_deep_level():
    g1 = RewardFunction("constant", c=1.0)
    g0 = RewardFunction("bump", a=0.8, center=0.0, width=1.0)
    spec = make_spec(diffusion=("constant", 1.0), alpha=0.5,
                     offspring=("deterministic", 2), gamma=1.0,
                     rewards=(g0, g1))
    grid = solve_generation_system(spec, SolverSettings(x_lo=-6, x_hi=6,
                                                        n_cells=300, omega=1.9))
    assert np.max(np.abs(grid.values[1] - 1.0)) <= 1e-8
    # level 0 sees a plain source alpha * G(x, 1) = alpha
    assert np.all(grid.values[0] + 1e-12 >= grid.obstacles[0])


def test_value_bound_and_maximum_principle(bump_spec):
    grid = solve_scalar(bump_spec, SolverSettings(x_lo=-8, x_hi=8, n_cells=400,
                                                  omega=1.9))
    v = grid.values[0]
    assert np.all(v >= -1e-12)
    assert np.all(v <= 1.0 + 1e-8)
    assert np.all(v >= grid.obstacles[0] - 1e-10)


def test_picard_monotone_decrease_and_contraction(bump_spec):
    grid = solve_scalar(bump_spec, SolverSettings(x_lo=-8, x_hi=8, n_cells=400,
                                                  omega=1.9))
    ratios = grid.stats[0].step_ratios
    assert ratios, "expected at least two Picard steps"
    assert all(r < 1.0 for r in ratios)


def test_complementarity_residuals(bump_spec):
    grid = solve_scalar(bump_spec, SolverSettings(x_lo=-8, x_hi=8, n_cells=800,
                                                  omega=1.97))
    rep = residual_report(grid).levels[0]
    assert rep["max_obstacle_violation"] <= 1e-12
    assert rep["max_residual_noncontact"] <= 1e-5
    assert rep["min_residual_contact"] >= -1e-5
    assert 0 < rep["contact_count"] < len(grid.xs)


def test_grid_refinement_improves_put(put_spec):
    errs = []
    for n in (250, 500):
        v_far, xstar = put_oracle(np.array([4.0]))
        grid = solve_scalar(put_spec, SolverSettings(
            x_lo=1e-3, x_hi=4.0, n_cells=n, bc_hi="value",
            bc_hi_value=float(v_far[0]), omega=1.95))
        vtrue, xstar = put_oracle(grid.xs)
        h = grid.xs[1] - grid.xs[0]
        mask = np.abs(grid.xs - xstar) > 8 * h
        errs.append(np.max(np.abs(grid.values[0] - vtrue)[mask]))
    assert errs[1] < errs[0]


def test_unsolved_grid_rejected(bump_spec):
    grid = solve_scalar(bump_spec, SolverSettings(x_lo=-8, x_hi=8, n_cells=100,
                                                  omega=1.8))
    grid.solved = False
    with pytest.raises(SolverError):
        residual_report(grid)


def test_value_bound_overflow_raises():
    spec = make_spec(diffusion=("constant", 1.0), alpha=0.5,
                     offspring=("binary", (0.5, 0.5)), gamma=1.0, k_g=2.0,
                     rewards=(RewardFunction("constant", c=1.0),))
    with pytest.raises(SolverError):
        solve_scalar(spec, SolverSettings(x_lo=-2, x_hi=2, n_cells=50))


def test_interpolation_and_containment(bump_spec):
    grid = solve_scalar(bump_spec, SolverSettings(x_lo=-8, x_hi=8, n_cells=200,
                                                  omega=1.8))
    xs = np.array([-9.0, 0.0, 8.0, 9.0])
    inside = grid.contains(xs)
    assert inside.tolist() == [False, True, True, False]
    mid = 0.5 * (grid.xs[3] + grid.xs[4])
    expect = 0.5 * (grid.values[0][3] + grid.values[0][4])
    assert grid.values_at(0, np.array([mid]))[0] == approx(expect)


def test_grid_csv_roundtrip_values(tmp_path, bump_spec):
    grid = solve_scalar(bump_spec, SolverSettings(x_lo=-8, x_hi=8, n_cells=100,
                                                  omega=1.8))
    path = tmp_path / "grid.csv"
    grid.write_csv(str(path))
    import csv

    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == len(grid.xs)
    assert float(rows[0]["x"]) == approx(grid.x_lo)
    assert float(rows[50]["v"]) == approx(grid.values[0][50])
