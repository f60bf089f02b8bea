"""Damped fixed-point iteration for the discretized mean-field equilibrium.

The common noise is reduced to finitely many atoms.  For a candidate flow
(one sub-probability flow per atom) the map ``Phi`` solves each atom's
control problem by BSDE regression and returns the conditional law of the
optimally controlled state, either by direct controlled simulation or by
Girsanov reweighting of the uncontrolled reference paths.  The same noise
is reused across iterations, so ``Phi`` is a deterministic map and the
residual measures flow change, not resampling noise.
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .bsde import BsdeSolution, FeedbackPolicy, PolynomialBasis, solve_bsde
from .dynamics import (
    NoiseBatch,
    PathBatch,
    StateModel,
    StepContext,
    draw_noise,
    resolve_environment,
    simulate_paths,
    uncontrolled_paths,
)
from .errors import DegenerateAtomError, ToleranceBelowNoiseFloorError
from .hamiltonian import HamiltonianSpec
from .measure_flow import (
    Environment,
    SubProbabilityFlow,
    default_battery,
    empirical_flow,
    flow_distance,
    mix_flows,
)
from .noise_grid import CommonNoiseGrid, conditional_atoms

logger = logging.getLogger(__name__)

__all__ = [
    "GirsanovReport",
    "girsanov_density",
    "AtomSample",
    "EquilibriumIterate",
    "EquilibriumSolver",
    "phi_step",
    "solve_equilibrium",
    "estimator_agreement",
    "write_history_csv",
]


@dataclass
class GirsanovReport:
    density: np.ndarray
    c_bound: float       # in-sample sup of |sigma^{-1} btilde|
    horizon: float

    @property
    def mean(self) -> float:
        return float(self.density.mean())

    @property
    def se(self) -> float:
        return float(self.density.std(ddof=1) / np.sqrt(self.density.size))

    @property
    def second_moment(self) -> float:
        return float(np.mean(self.density**2))

    @property
    def moment_bound(self) -> float:
        return float(np.exp(self.c_bound**2 * self.horizon))

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "se": self.se,
            "second_moment": self.second_moment,
            "c_bound": self.c_bound,
            "moment_bound": self.moment_bound,
        }


def girsanov_density(model: StateModel, paths: PathBatch, flow, atom=0, policy=None) -> GirsanovReport:
    """``E(U)_tau`` with ``U = int sigma^{-1} btilde dW`` along uncontrolled ``paths``.

    The sum runs over the steps before each path's exit; ``policy=None`` is
    the zero control.
    """
    env = resolve_environment(model, flow, atom)
    n, m_steps = paths.n_paths, paths.n_steps
    dt, times = model.dt, model.times
    env_m = np.broadcast_to(env.m, (n, m_steps + 1))
    env_mass = np.broadcast_to(env.mass, (n, m_steps + 1))
    env_lp = np.broadcast_to(env.lprime, (n, m_steps + 1))
    sig_inv_t = model.sigma_inv.T
    log_d = np.zeros(n)
    c_hat = 0.0
    for j in range(m_steps):
        rows = np.flatnonzero(paths.exit_step > j)
        if rows.size == 0:
            break
        x = paths.values[rows, j]
        if policy is None:
            a = np.zeros((rows.size, model.control_dim))
        else:
            ctx = StepContext(j, times[j], env_m[rows, j], env_mass[rows, j], rows, rows, paths.noise.dW0[:, :j])
            a = np.asarray(policy(x, ctx), dtype=float).reshape(rows.size, model.control_dim)
        theta = model.drift(times[j], x, env_m[rows, j], env_lp[rows, j], a) @ sig_inv_t
        c_hat = max(c_hat, float(np.max(np.linalg.norm(theta, axis=1))))
        log_d[rows] += np.sum(theta * paths.noise.dW[rows, j], axis=1) - 0.5 * np.sum(theta**2, axis=1) * dt
    return GirsanovReport(np.exp(log_d), c_hat, model.horizon)


@dataclass
class AtomSample:
    """Cached noise and uncontrolled reference paths for one atom (common random numbers)."""

    atom: int
    noise: NoiseBatch
    reference: PathBatch


@dataclass
class EquilibriumIterate:
    grid: CommonNoiseGrid
    flow: SubProbabilityFlow
    policies: dict[int, FeedbackPolicy] | None
    iteration: int
    residual: float
    density: dict[int, dict] = field(default_factory=dict)
    solutions: dict[int, BsdeSolution] = field(default_factory=dict)
    converged: bool = False
    noise_floor: float | None = None


def estimator_agreement(model, flow_a, flow_b, n_a: int, n_b_eff: dict | None = None, battery=None, level: float = 0.01):
    """Max z-score between two flow estimates and its Bonferroni critical value.

    Standard errors of the battery pairings are those of means over ``n_a``
    equally weighted paths (used for both flows unless effective sample
    sizes ``n_b_eff`` per atom are supplied for the second).
    """
    battery = battery or default_battery(model)
    z_max, n_tests = 0.0, 0
    for atom in flow_a.atoms:
        for g in battery:
            pa = flow_a.pair_path(g, atom)
            pb = flow_b.pair_path(g, atom)
            # pairings of functions bounded by 1: variance <= p (1 - p) style bound via second moment
            var_a = np.maximum(_second_moment(flow_a, g, atom) - pa**2, 1e-12) / n_a
            nb = n_a if n_b_eff is None else n_b_eff[atom]
            var_b = np.maximum(_second_moment(flow_b, g, atom) - pb**2, 1e-12) / nb
            z = np.abs(pa - pb) / np.sqrt(var_a + var_b)
            z_max = max(z_max, float(np.max(z)))
            n_tests += pa.size
    crit = float(norm.ppf(1.0 - level / (2 * n_tests)))
    return z_max, crit


def _second_moment(flow: SubProbabilityFlow, g, atom: int) -> np.ndarray:
    """``<g^2, mu_t>`` computed from the live components of ``flow``."""
    total = 0.0
    for c in flow.components[atom]:
        if c.states is None:
            raise ValueError("second moments need unsummarized components")
        n, steps, d = c.states.shape
        gx = np.asarray(g(c.states.reshape(-1, d).astype(float)), dtype=float).reshape(n, steps)
        total = total + c.weight * (c.particle_weights @ np.where(c.alive, gx * gx, 0.0))
    return total


class EquilibriumSolver:
    """Holds the atom table, cached per-atom samples and solver settings."""

    def __init__(
        self,
        model: StateModel,
        n_time: int = 2,
        n_quant: int = 1,
        n_paths: int = 5000,
        grid_sample: int = 1000,
        min_occupancy: int = 125,
        basis: PolynomialBasis | None = None,
        seed: int = 0,
        workers: int = 1,
        grid: CommonNoiseGrid | None = None,
    ):
        self.model = model
        self.n_paths = n_paths
        self.basis = basis or PolynomialBasis(2)
        self.spec = HamiltonianSpec(model)
        self.battery = default_battery(model)
        self.workers = max(1, int(workers))
        self.seed = seed
        ss = np.random.SeedSequence(seed)
        self._grid_seq, self._path_seq, self._floor_seq = ss.spawn(3)
        if grid is None:
            rng = np.random.default_rng(self._grid_seq)
            sample = rng.standard_normal((grid_sample, model.n_steps, model.noise_dim)) * np.sqrt(model.dt)
            grid = conditional_atoms(sample, n_time, n_quant, model.horizon, min_occupancy)
        self.grid = grid
        logger.info("common noise reduced to %d atoms", grid.n_atoms)
        self.samples = self._draw_samples(self._path_seq)

    def _draw_samples(self, seq: np.random.SeedSequence) -> dict[int, AtomSample]:
        out = {}
        for atom, child in zip(range(self.grid.n_atoms), seq.spawn(self.grid.n_atoms)):
            rng = np.random.default_rng(child)
            common = self.grid.sample_atom_increments(atom, self.n_paths, self.model.n_steps, rng)
            noise = draw_noise(self.model, self.n_paths, rng, common=common)
            out[atom] = AtomSample(atom, noise, uncontrolled_paths(self.model, noise))
        return out

    @property
    def atoms(self) -> list[int]:
        return list(range(self.grid.n_atoms))

    def _map(self, fn, items):
        if self.workers == 1:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(self.workers) as pool:
            return list(pool.map(fn, items))

    def initial_flow(self) -> SubProbabilityFlow:
        """Flow of the zero control against a population that never leaves."""
        env = Environment.constant(self.model, m=float(np.mean(self.model.h(self.samples[0].noise.xi))), mass=1.0)

        def one(atom):
            s = self.samples[atom]
            return simulate_paths(self.model, env, None, s.noise)

        paths = self._map(one, self.atoms)
        return self._assemble(paths, None)

    def _assemble(self, paths: list[PathBatch], weights: list | None) -> SubProbabilityFlow:
        comps = {}
        for atom, batch in zip(self.atoms, paths):
            w = None if weights is None else weights[atom]
            comps[atom] = empirical_flow(batch, self.model.times, weights=w).components[0]
        return SubProbabilityFlow(self.model.times, comps)

    def phi(self, flow: SubProbabilityFlow, mode: str = "direct", samples: dict | None = None):
        """One evaluation of ``Phi``; returns (new flow, policies, solutions, density diagnostics)."""
        samples = samples or self.samples
        if mode not in ("direct", "girsanov"):
            raise ValueError(f"unknown Phi mode {mode!r}")
        for atom in self.atoms:
            if atom not in flow.components:
                raise DegenerateAtomError(atom)

        def one(atom):
            s = samples[atom]
            env = flow.environment(atom, self.model)
            sol = solve_bsde(self.model, env, atom, s.reference, self.basis, spec=self.spec, keep_paths=False)
            policy = FeedbackPolicy(sol, self.spec)
            report = girsanov_density(self.model, s.reference, env, atom, policy)
            if mode == "direct":
                batch = simulate_paths(self.model, env, policy, s.noise)
                weights = None
            else:
                batch = s.reference
                weights = report.density
            return sol, policy, report, batch, weights

        results = self._map(one, self.atoms)
        policies, sols, dens = {}, {}, {}
        for atom, (sol, policy, report, _, _) in zip(self.atoms, results):
            policies[atom], sols[atom], dens[atom] = policy, sol, report.to_dict()
            w = report.density
            dens[atom]["ess"] = float(w.sum() ** 2 / np.sum(w**2))
        flow = self._assemble([r[3] for r in results], None if mode == "direct" else [r[4] for r in results])
        return flow, policies, sols, dens

    def noise_floor(self, flow: SubProbabilityFlow, mode: str = "direct") -> float:
        """``flow_distance`` between ``Phi(flow)`` under two independent noise draws."""
        alt = self._draw_samples(self._floor_seq)
        a = self.phi(flow, mode)[0]
        b = self.phi(flow, mode, samples=alt)[0]
        return flow_distance(a, b, self.battery)


def phi_step(solver: EquilibriumSolver, iterate: EquilibriumIterate, mode: str = "direct") -> EquilibriumIterate:
    """Apply ``Phi`` once (no damping); the residual is the distance to the input flow."""
    new, policies, sols, dens = solver.phi(iterate.flow, mode)
    residual = flow_distance(new, iterate.flow, solver.battery)
    return EquilibriumIterate(solver.grid, new, policies, iterate.iteration + 1, residual, dens, sols)


def solve_equilibrium(
    model: StateModel,
    n_time: int = 2,
    n_quant: int = 1,
    n_paths: int = 5000,
    damping: float = 0.5,
    tol: float = 0.05,
    max_iter: int = 30,
    seed: int = 0,
    grid_sample: int = 1000,
    min_occupancy: int = 125,
    basis: PolynomialBasis | None = None,
    mode: str = "direct",
    check_floor: bool = True,
    workers: int = 1,
    solver: EquilibriumSolver | None = None,
) -> tuple[EquilibriumIterate, list[dict]]:
    """Iterate ``flow <- (1 - rho) flow + rho Phi(flow)`` until the residual drops below ``tol``.

    The residual is ``flow_distance(Phi(flow), flow)``.  When ``check_floor``
    is set, the Monte Carlo floor is measured at the initial flow first and a
    ``tol`` below it raises :class:`ToleranceBelowNoiseFloorError`.
    Non-convergence returns the iterate with the smallest residual, flagged.
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError(f"damping must lie in (0, 1], got {damping}")
    if solver is None:
        solver = EquilibriumSolver(model, n_time, n_quant, n_paths, grid_sample, min_occupancy,
                                   basis, seed, workers)
    flow = solver.initial_flow()
    floor = None
    if check_floor:
        floor = solver.noise_floor(flow, mode)
        logger.info("Monte Carlo noise floor of the residual: %.4g", floor)
        if tol < floor:
            raise ToleranceBelowNoiseFloorError(tol, floor)

    history: list[dict] = []
    best: EquilibriumIterate | None = None
    for it in range(1, max_iter + 1):
        t0 = time.perf_counter()
        new, policies, sols, dens = solver.phi(flow, mode)
        residual = flow_distance(new, flow, solver.battery)
        current = EquilibriumIterate(solver.grid, flow, policies, it, residual, dens, sols, noise_floor=floor)
        history.append({
            "iteration": it,
            "residual": residual,
            "density_second_moment": {a: d["second_moment"] for a, d in dens.items()},
            "density_mean": {a: d["mean"] for a, d in dens.items()},
            "wall_time": time.perf_counter() - t0,
        })
        logger.info("iteration %d: residual %.5g", it, residual)
        if best is None or residual < best.residual:
            best = current
        if residual < tol:
            current.converged = True
            return current, history
        flow = mix_flows(flow, new, damping)
        flow.summarize(solver.battery, keep_last=1)
    logger.warning("no convergence within %d iterations; best residual %.4g", max_iter, best.residual)
    return best, history


def write_history_csv(path, history: list[dict]) -> None:
    """Convergence history without wall times (those go to a separate timing file)."""
    atoms = sorted(history[0]["density_second_moment"]) if history else []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "residual"] + [f"density_m2_atom{a}" for a in atoms]
                        + [f"density_mean_atom{a}" for a in atoms])
        for row in history:
            writer.writerow(
                [row["iteration"], repr(row["residual"])]
                + [repr(row["density_second_moment"][a]) for a in atoms]
                + [repr(row["density_mean"][a]) for a in atoms]
            )
