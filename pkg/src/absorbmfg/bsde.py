"""Regression Monte Carlo for the random-horizon BSDE of the control problem.

The reference paths are uncontrolled, ``X = xi + sigma W + sigma0 W0``,
stopped at the exit time ``tau``.  The BSDE

    Y_t = G(tau, X_tau) + int_t^tau Psi(s, X_s, Z_s) ds - int_t^tau Z_s dW_s

is solved backwards on the grid with the multistep scheme: at step ``j``
the pathwise target ``R_j = G(tau, X_tau) + sum_{i >= j} Psi_i dt`` is
regressed on a polynomial basis of the state to give ``Y_j``, and ``Z_j``
is the regression of ``(R_{j+1} - E[R_{j+1} | X_j]) dW_j / dt``.  Paths
already absorbed are frozen at their terminal value.  With the maximized
Hamiltonian as driver, ``a(t, x) = ahat(t, x, Z(t, x))`` is the feedback
control.
"""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr as scipy_qr

from .dynamics import PathBatch, StateModel, StepContext, draw_noise, payoffs, resolve_environment, simulate_paths
from .errors import BasisDegeneracyError, UnderSampledError
from .hamiltonian import HamiltonianSpec, hamiltonian_values, maximize_values

logger = logging.getLogger(__name__)

__all__ = [
    "PolynomialBasis",
    "BsdeStep",
    "BsdeSolution",
    "solve_bsde",
    "FeedbackPolicy",
    "ConstantPolicy",
    "RandomizedPolicy",
    "ComparisonReport",
    "comparison_check",
    "policy_value",
]


@dataclass(frozen=True)
class PolynomialBasis:
    """Monomials of total degree ``<= degree`` in standardized inputs.

    Inputs are the state coordinates and, with ``flow_features``, the
    pairing ``<h, mu_t>`` and the mass seen by each path (useful when the
    environment differs across paths).  Inputs with no spread at a step are
    dropped there.
    """

    degree: int = 2
    flow_features: bool = False
    prune: bool = False  # drop collinear monomials instead of raising

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("basis degree must be non-negative")

    def raw_inputs(self, x: np.ndarray, m=None, mass=None) -> np.ndarray:
        cols = [np.asarray(x, dtype=float)]
        if self.flow_features:
            n = cols[0].shape[0]
            cols.append(np.broadcast_to(np.asarray(m, dtype=float), (n,))[:, None])
            cols.append(np.broadcast_to(np.asarray(mass, dtype=float), (n,))[:, None])
        return np.concatenate(cols, axis=1)

    def exponents(self, n_inputs: int) -> list[tuple[int, ...]]:
        out = []
        for deg in range(self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(n_inputs), deg):
                out.append(combo)
        return out

    def design(self, u: np.ndarray) -> np.ndarray:
        """Design matrix from already standardized inputs ``u`` of shape ``(n, q)``."""
        cols = []
        for combo in self.exponents(u.shape[1]):
            col = np.ones(u.shape[0])
            for i in combo:
                col = col * u[:, i]
            cols.append(col)
        return np.stack(cols, axis=1)

    def to_dict(self) -> dict:
        return {"kind": "polynomial", "degree": self.degree, "flow_features": self.flow_features,
                "prune": self.prune}


@dataclass
class BsdeStep:
    """Regression at one grid step: kept inputs, their standardization, coefficients."""

    kept: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    coef_y: np.ndarray          # (p,)
    coef_z: np.ndarray          # (p, d)
    resid_var: float
    n_alive: int
    columns: np.ndarray | None = None  # design columns kept by pruning

    def features(self, basis: PolynomialBasis, raw: np.ndarray) -> np.ndarray:
        u = (raw[:, self.kept] - self.center) / self.scale
        phi = basis.design(u)
        return phi if self.columns is None else phi[:, self.columns]

    def to_dict(self) -> dict:
        return {
            "kept_inputs": self.kept.tolist(),
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
            "coef_y": self.coef_y.tolist(),
            "coef_z": self.coef_z.tolist(),
            "resid_var": self.resid_var,
            "n_alive": self.n_alive,
            "columns": None if self.columns is None else self.columns.tolist(),
        }


@dataclass
class BsdeSolution:
    """Per-step regressions plus the ``Y_0`` estimate.

    ``y_paths``/``y_se`` hold the fitted ``Y`` on every reference path and
    its regression standard error (frozen values carry zero error).
    """

    times: np.ndarray
    basis: PolynomialBasis
    steps: list[BsdeStep | None]
    y0: float
    y0_se: float
    atom: int | None = None
    y_paths: np.ndarray | None = None
    y_se: np.ndarray | None = None
    z_paths: np.ndarray | None = None
    bound_violations: float = 0.0
    meta: dict = field(default_factory=dict)

    def z_at(self, j: int, x: np.ndarray, m=None, mass=None) -> np.ndarray:
        step = self.steps[j] if j < len(self.steps) else None
        if step is None:
            return np.zeros_like(x, dtype=float)
        phi = step.features(self.basis, self.basis.raw_inputs(x, m, mass))
        return phi @ step.coef_z

    def y_at(self, j: int, x: np.ndarray, m=None, mass=None) -> np.ndarray:
        step = self.steps[j] if j < len(self.steps) else None
        if step is None:
            return np.full(x.shape[0], np.nan)
        phi = step.features(self.basis, self.basis.raw_inputs(x, m, mass))
        return phi @ step.coef_y

    def to_dict(self) -> dict:
        return {
            "atom": self.atom,
            "basis": self.basis.to_dict(),
            "y0": self.y0,
            "y0_se": self.y0_se,
            "times": [float(t) for t in self.times],
            "steps": [None if s is None else s.to_dict() for s in self.steps],
            "bound_violation_fraction": self.bound_violations,
            **self.meta,
        }

    def dump_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


def _standardize(raw: np.ndarray):
    """Center and scale inputs, dropping constant ones and exact linear duplicates."""
    center = raw.mean(axis=0)
    scale = raw.std(axis=0)
    kept: list[int] = []
    for i in np.flatnonzero(scale > 1e-9 * (1.0 + np.abs(center))):
        u = (raw[:, i] - center[i]) / scale[i]
        if kept:
            prev = (raw[:, kept] - center[kept]) / scale[kept]
            coef, *_ = np.linalg.lstsq(prev, u, rcond=None)
            if np.linalg.norm(u - prev @ coef) <= 1e-8 * np.sqrt(u.size):
                continue
        kept.append(int(i))
    kept_arr = np.asarray(kept, dtype=np.int64)
    return kept_arr, center[kept_arr], scale[kept_arr]


def _rank_tol(r: np.ndarray, n_rows: int) -> float:
    diag = np.abs(np.diag(r))
    return 1e-10 * diag.max() * np.sqrt(n_rows) if diag.size else 0.0


def _qr_fit(phi: np.ndarray, step: int):
    q, r = np.linalg.qr(phi)
    diag = np.abs(np.diag(r))
    if diag.size and diag.min() <= _rank_tol(r, phi.shape[0]):
        raise BasisDegeneracyError(step)
    return q, r


def _independent_columns(phi: np.ndarray) -> np.ndarray:
    _, r, piv = scipy_qr(phi, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > _rank_tol(r, phi.shape[0])))
    return np.sort(piv[:rank])


def _driver_hamiltonian(spec: HamiltonianSpec):
    def psi(j, t, x, z, m, lprime, ctx):
        return maximize_values(spec, t, x, m, lprime, z)[1]

    return psi


def _driver_fixed(spec: HamiltonianSpec, policy):
    def psi(j, t, x, z, m, lprime, ctx):
        a = np.asarray(policy(x, ctx), dtype=float).reshape(x.shape[0], spec.model.control_dim)
        return hamiltonian_values(spec, t, x, m, lprime, z, a)

    return psi


def solve_bsde(
    model: StateModel,
    flow,
    atom: int | None,
    paths: PathBatch,
    basis: PolynomialBasis | None = None,
    driver="hamiltonian",
    spec: HamiltonianSpec | None = None,
    keep_paths: bool = True,
) -> BsdeSolution:
    """Backward regression for ``(Y, Z)`` on uncontrolled reference ``paths``.

    ``driver`` is ``"hamiltonian"`` (maximized Hamiltonian), a policy object
    (fixed control: ``Psi = H(., policy(x))``), or a callable
    ``psi(j, t, x, z, m, lprime, ctx)`` returning one value per row.
    """
    basis = basis or PolynomialBasis()
    spec = spec or HamiltonianSpec(model)
    env = resolve_environment(model, flow, atom)
    if isinstance(driver, str):
        if driver != "hamiltonian":
            raise ValueError(f"unknown driver {driver!r}")
        psi = _driver_hamiltonian(spec)
    elif hasattr(driver, "is_policy"):
        psi = _driver_fixed(spec, driver)
    else:
        psi = driver

    n, m_steps = paths.n_paths, paths.n_steps
    dt, times = model.dt, model.times
    env_m = np.broadcast_to(env.m, (n, m_steps + 1))
    env_mass = np.broadcast_to(env.mass, (n, m_steps + 1))
    env_lp = np.broadcast_to(env.lprime, (n, m_steps + 1))
    dW = paths.noise.dW

    target = model.G(times[paths.exit_step], paths.exit_values()).astype(float)
    y_paths = np.empty((n, m_steps + 1)) if keep_paths else None
    y_se = np.zeros((n, m_steps + 1)) if keep_paths else None
    z_paths = np.zeros((n, m_steps, model.dim)) if keep_paths else None
    if keep_paths:
        y_paths[:, m_steps] = target
    steps: list[BsdeStep | None] = [None] * m_steps
    z_max = 0.0
    mart_sum = np.zeros(n)  # sum_j Z_j . dW_j along each path, for the Y0 control variate

    for j in range(m_steps - 1, -1, -1):
        rows = np.flatnonzero(paths.exit_step > j)
        if keep_paths:
            y_paths[:, j] = target  # frozen rows keep their terminal value
        if rows.size == 0:
            continue
        x = paths.values[rows, j]
        raw = basis.raw_inputs(x, env_m[rows, j], env_mass[rows, j])
        kept, center, scale = _standardize(raw)
        u = (raw[:, kept] - center) / scale
        phi = basis.design(u)
        columns = None
        if basis.prune:
            columns = _independent_columns(phi)
            phi = phi[:, columns]
        p = phi.shape[1]
        if rows.size < p:
            raise UnderSampledError(j, rows.size, p)
        q, r = _qr_fit(phi, j)

        nxt = target[rows]
        fit_next = q @ (q.T @ nxt)
        mart = (nxt - fit_next)[:, None] * dW[rows, j] / dt
        coef_z = np.linalg.solve(r, q.T @ mart)
        z = phi @ coef_z
        z_max = max(z_max, float(np.max(np.abs(z))))
        mart_sum[rows] += np.sum(z * dW[rows, j], axis=1)

        ctx = StepContext(j, times[j], env_m[rows, j], env_mass[rows, j], rows, rows, paths.noise.dW0[:, :j])
        drive = np.asarray(psi(j, times[j], x, z, env_m[rows, j], env_lp[rows, j], ctx), dtype=float)
        target[rows] = nxt + drive * dt

        coef_y = np.linalg.solve(r, q.T @ target[rows])
        fitted = q @ (q.T @ target[rows])
        dof = max(rows.size - p, 1)
        resid_var = float(np.sum((target[rows] - fitted) ** 2) / dof)
        steps[j] = BsdeStep(kept, center, scale, coef_y, coef_z, resid_var, int(rows.size), columns)
        if keep_paths:
            y_paths[rows, j] = fitted
            y_se[rows, j] = np.sqrt(resid_var * np.sum(q * q, axis=1))
            z_paths[rows, j] = z

    # Y_0 = R_0 - int Z dW pathwise; subtracting the fitted martingale part cuts the variance
    corrected = target - mart_sum
    y0 = float(corrected.mean())
    y0_se = float(corrected.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    sol = BsdeSolution(times, basis, steps, y0, y0_se, atom, y_paths, y_se, z_paths)
    sol.meta["y0_plain"] = float(target.mean())
    sol.meta["y0_plain_se"] = float(target.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    sol.bound_violations = _bound_check(model, sol, z_max)
    return sol


def _bound_check(model: StateModel, sol: BsdeSolution, z_max: float) -> float:
    """Fraction of fitted ``Y`` outside the a-priori bound; logged, never raised."""
    bounds = model.bounds
    if sol.y_paths is None or not {"G", "f", "b1", "eta"} <= bounds.keys():
        return 0.0
    sig_inv = np.linalg.norm(np.linalg.inv(model.sigma), 2)
    b2_norm = max(np.linalg.norm(np.asarray(model.b2(t)), 2) for t in (0.0, model.horizon))
    a_norm = float(np.linalg.norm(np.maximum(np.abs(model.controls.lower), np.abs(model.controls.upper))))
    drift_bound = bounds["b1"] + b2_norm * a_norm + bounds["eta"] * 2.0 * model.kernel.peak
    limit = bounds["G"] + model.horizon * (bounds["f"] + z_max * sig_inv * drift_bound)
    frac = float(np.mean(np.abs(sol.y_paths) > limit))
    if frac > 1e-3:
        logger.warning("%.3g%% of fitted Y exceed the a-priori bound %.4g", 100 * frac, limit)
    return frac


# --------------------------------------------------------------------------
# policies


class _Policy:
    is_policy = True


@dataclass
class FeedbackPolicy(_Policy):
    """``a(t_j, x) = ahat(t_j, x, Z_j(x))`` from a solved BSDE; always inside ``A``."""

    solution: BsdeSolution
    spec: HamiltonianSpec

    def __call__(self, x, ctx: StepContext) -> np.ndarray:
        z = self.solution.z_at(ctx.j, x, ctx.m, ctx.mass)
        a, _ = maximize_values(self.spec, ctx.t, x, ctx.m, 0.0, z)
        return a


@dataclass
class ConstantPolicy(_Policy):
    value: tuple[float, ...]

    def __call__(self, x, ctx) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.value, dtype=float), (x.shape[0], len(self.value)))


@dataclass
class RandomizedPolicy(_Policy):
    """Piecewise-constant random controls, drawn per path on ``n_blocks`` time blocks.

    Draws depend only on ``(seed, block)`` and the row index, so the policy is
    adapted and reproducible.
    """

    box: object
    n_steps: int
    seed: int = 0
    n_blocks: int = 4

    def __call__(self, x, ctx) -> np.ndarray:
        block = ctx.j * self.n_blocks // self.n_steps
        rows = np.arange(x.shape[0]) if ctx.rows is None else ctx.rows
        size = int(rows.max()) + 1 if rows.size else 0
        draws = self.box.sample(size, np.random.default_rng([self.seed, block]))
        return draws[rows]


@dataclass
class ComparisonReport:
    n_pairs: int
    n_violations: int
    fraction: float
    passed: bool


def comparison_check(sol_a: BsdeSolution, sol_b: BsdeSolution, n_se: float = 3.0, max_fraction: float = 0.01) -> ComparisonReport:
    """Count (path, step) pairs with ``Y^A < Y^B - n_se * SE``; pass below ``max_fraction``."""
    if sol_a.y_paths is None or sol_b.y_paths is None:
        raise ValueError("comparison needs solutions kept with keep_paths=True")
    if sol_a.y_paths.shape != sol_b.y_paths.shape:
        raise ValueError("solutions were computed on different path sets")
    tol = n_se * np.sqrt(sol_a.y_se**2 + sol_b.y_se**2)
    viol = sol_a.y_paths < sol_b.y_paths - tol - 1e-12
    n_pairs = viol.size
    n_viol = int(viol.sum())
    frac = n_viol / n_pairs
    return ComparisonReport(n_pairs, n_viol, frac, frac < max_fraction)


def policy_value(model: StateModel, flow, atom, policy, n_paths: int | None = None, seed=None, noise=None):
    """Mean payoff of ``policy`` against ``flow`` and its standard error."""
    if noise is None:
        noise = draw_noise(model, n_paths, seed)
    paths = simulate_paths(model, flow, policy, noise, atom=atom)
    vals = payoffs(model, paths)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size))
