from __future__ import annotations

import csv

import numpy as np
import pytest

from absorbmfg.bsde import ConstantPolicy
from absorbmfg.dynamics import bankrun_model, draw_noise, simulate_paths, uncontrolled_paths
from absorbmfg.errors import DegenerateAtomError, ToleranceBelowNoiseFloorError
from absorbmfg.fixed_point import (
    EquilibriumIterate,
    EquilibriumSolver,
    estimator_agreement,
    girsanov_density,
    phi_step,
    solve_equilibrium,
    write_history_csv,
)
from absorbmfg.measure_flow import Environment, SubProbabilityFlow, flow_distance, mix_flows
from absorbmfg.scenarios import brownian_model, decoupled_model

SMALL = dict(n_time=1, n_quant=0, n_paths=800, grid_sample=400, min_occupancy=50, max_iter=10, seed=3)


def test_density_is_one_without_drift():
    model = brownian_model(n_steps=10)
    paths = uncontrolled_paths(model, draw_noise(model, 100, 0))
    report = girsanov_density(model, paths, Environment.constant(model, 1.0))
    np.testing.assert_array_equal(report.density, 1.0)
    assert report.c_bound == 0.0 and report.moment_bound == 1.0


def test_density_with_constant_drift():
    """theta = 0.5 constant, no absorption: E[D] = 1 and E[D^2] = exp(theta^2 T)."""
    model = brownian_model(n_steps=20)
    paths = uncontrolled_paths(model, draw_noise(model, 50_000, 1))
    report = girsanov_density(model, paths, Environment.constant(model, 1.0), policy=ConstantPolicy((0.5,)))
    assert abs(report.mean - 1.0) < 3 * report.se
    assert report.c_bound == pytest.approx(0.5)
    assert report.second_moment == pytest.approx(np.exp(0.25), rel=0.03)
    assert report.second_moment <= report.moment_bound * 1.05


def test_reweighting_reproduces_controlled_law():
    model = brownian_model(x0=1.0, lower=0.0, n_steps=40)
    env = Environment.constant(model, 1.0)
    policy = ConstantPolicy((0.4,))
    ref = uncontrolled_paths(model, draw_noise(model, 40_000, 2))
    w = girsanov_density(model, ref, env, policy=policy).density
    direct = simulate_paths(model, env, policy, n_paths=40_000, rng=3)
    survive_w = np.average(~ref.absorbed, weights=w)
    survive_d = np.mean(~direct.absorbed)
    ess = w.sum() ** 2 / np.sum(w**2)
    se = np.sqrt(survive_d * (1 - survive_d) * (1 / ess + 1 / 40_000))
    assert abs(survive_w - survive_d) < 3 * se


def test_bankrun_density_bound_on_initial_flow():
    solver = EquilibriumSolver(bankrun_model(n_steps=20), **{k: SMALL[k] for k in ("n_time", "n_quant", "n_paths", "grid_sample", "min_occupancy", "seed")})
    flow = solver.initial_flow()
    for atom in solver.atoms:
        s = solver.samples[atom]
        report = girsanov_density(solver.model, s.reference, flow.environment(atom, solver.model), atom)
        assert abs(report.mean - 1.0) < 3 * report.se
        assert report.second_moment <= report.moment_bound * 1.05


def test_decoupled_phi_ignores_the_flow():
    model = decoupled_model(n_steps=40)
    solver = EquilibriumSolver(model, n_paths=1000, seed=1)
    flow_a = solver.initial_flow()
    flow_b = solver.phi(flow_a)[0]
    # perturb the input by mixing in a flow from a different model run
    other = EquilibriumSolver(model, n_paths=1000, seed=2, grid=solver.grid).initial_flow()
    flow_c = mix_flows(flow_a, other, 0.5)
    out_a = solver.phi(flow_a)[0]
    out_c = solver.phi(flow_c)[0]
    floor = solver.noise_floor(flow_a)
    assert flow_distance(out_a, out_c, solver.battery) <= 2 * floor
    assert flow_distance(out_a, flow_b, solver.battery) == 0.0


def test_decoupled_converges_quickly():
    iterate, history = solve_equilibrium(decoupled_model(n_steps=40), n_paths=1000, tol=0.05, seed=1)
    assert iterate.converged and len(history) <= 2
    assert iterate.residual < 0.05


def test_iterate_invariants():
    iterate, history = solve_equilibrium(bankrun_model(n_steps=20), tol=0.04, **SMALL)
    assert iterate.converged and iterate.residual < 0.04
    for atom in iterate.flow.atoms:
        mass = iterate.flow.mass(atom)
        assert np.all((mass >= 0) & (mass <= 1 + 1e-12)) and np.all(np.diff(mass) <= 1e-12)
        dens = iterate.density[atom]
        assert dens["second_moment"] <= dens["moment_bound"] * 1.05
    assert [h["iteration"] for h in history] == list(range(1, len(history) + 1))


def test_determinism():
    _, h1 = solve_equilibrium(bankrun_model(n_steps=20), tol=0.03, check_floor=False, **SMALL)
    _, h2 = solve_equilibrium(bankrun_model(n_steps=20), tol=0.03, check_floor=False, **SMALL)
    assert [r["residual"] for r in h1] == [r["residual"] for r in h2]
    assert [r["density_second_moment"] for r in h1] == [r["density_second_moment"] for r in h2]


@pytest.mark.parametrize("damping", [0.5, 1.0])
def test_damping_variants_terminate(damping):
    iterate, history = solve_equilibrium(bankrun_model(n_steps=20), tol=0.04, damping=damping, check_floor=False, **SMALL)
    assert iterate.converged or len(history) == SMALL["max_iter"]
    if iterate.converged:
        assert iterate.residual < 0.04


def test_non_convergence_returns_best_flagged():
    iterate, history = solve_equilibrium(
        bankrun_model(n_steps=20), tol=1e-6, check_floor=False, **{**SMALL, "max_iter": 2}
    )
    assert not iterate.converged
    assert iterate.residual == min(h["residual"] for h in history)


def test_tolerance_below_floor_is_refused():
    with pytest.raises(ToleranceBelowNoiseFloorError) as err:
        solve_equilibrium(bankrun_model(n_steps=20), tol=1e-4, **SMALL)
    assert err.value.floor > 1e-4


def test_bad_arguments():
    with pytest.raises(ValueError):
        solve_equilibrium(bankrun_model(n_steps=20), damping=0.0, **SMALL)
    solver = EquilibriumSolver(decoupled_model(n_steps=40), n_paths=300, seed=0)
    flow = solver.initial_flow()
    with pytest.raises(ValueError):
        solver.phi(flow, mode="importance")
    partial = SubProbabilityFlow(flow.times, {0: flow.components[0]})
    with pytest.raises(DegenerateAtomError):
        solver.phi(partial)


def test_direct_and_girsanov_estimators_agree():
    solver = EquilibriumSolver(bankrun_model(n_steps=20), n_time=1, n_quant=0, n_paths=2000, grid_sample=400, min_occupancy=50, seed=4)
    flow = solver.initial_flow()
    direct, _, _, _ = solver.phi(flow, "direct")
    weighted, _, _, dens = solver.phi(flow, "girsanov")
    z_max, crit = estimator_agreement(
        solver.model, direct, weighted, solver.n_paths, {a: d["ess"] for a, d in dens.items()}, solver.battery
    )
    assert z_max < crit


def test_phi_step_residual():
    solver = EquilibriumSolver(bankrun_model(n_steps=20), n_time=1, n_quant=0, n_paths=500, grid_sample=400, min_occupancy=50, seed=5)
    start = EquilibriumIterate(solver.grid, solver.initial_flow(), None, 0, float("inf"))
    nxt = phi_step(solver, start)
    assert nxt.iteration == 1 and set(nxt.policies) == set(solver.atoms)
    assert nxt.residual == pytest.approx(flow_distance(nxt.flow, start.flow, solver.battery))


def test_history_csv(tmp_path):
    _, history = solve_equilibrium(bankrun_model(n_steps=20), tol=0.04, **SMALL)
    path = tmp_path / "history.csv"
    write_history_csv(path, history)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == len(history)
    assert float(rows[0]["residual"]) == history[0]["residual"]
    assert "density_m2_atom0" in rows[0] and "wall_time" not in rows[0]
