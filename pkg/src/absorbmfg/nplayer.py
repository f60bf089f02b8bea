"""Finite-N games: coupled simulation, the conditioned approximate game, and epsilon-Nash gaps.

Games are simulated for ``reps`` independent realizations at once, with
arrays shaped ``(reps, N, ...)``.  Noise comes from four independent
streams spawned from the seed (initial states, idiosyncratic, common,
auxiliary), so a game and its approximate counterpart, or a game and a
unilateral deviation from it, share the same realizations.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bsde import ConstantPolicy, FeedbackPolicy, PolynomialBasis, RandomizedPolicy, solve_bsde
from .dynamics import NoiseBatch, ParticlePath, StateModel, StepContext, uncontrolled_paths
from .errors import InvalidParameterError, NumericalBlowupError, UnderResolvedGridError
from .hamiltonian import HamiltonianSpec
from .kernel import _cell_weights
from .measure_flow import Environment
from .noise_grid import CommonNoiseGrid, quantize_index

logger = logging.getLogger(__name__)

__all__ = [
    "GameRun",
    "EquilibriumPolicy",
    "simulate_game",
    "simulate_approx_game",
    "GapEstimate",
    "best_response_gap",
    "gap_trend_ok",
]


@dataclass
class EquilibriumPolicy:
    """Mean-field policy for a player who observes the common noise as it unfolds.

    The per-atom feedback controls are mixed with the probabilities of the
    atoms consistent with the quantized common-noise increments completed so
    far, so the control is adapted and stays in the (convex) control box.
    """

    grid: CommonNoiseGrid
    policies: dict
    n_steps: int
    is_policy = True

    def __post_init__(self):
        if self.n_steps % self.grid.n_coarse:
            raise InvalidParameterError("time grid does not refine the coarse common-noise grid")
        self._per = self.n_steps // self.grid.n_coarse

    def atom_weights(self, j: int, common_groups: np.ndarray) -> np.ndarray:
        """Normalized atom probabilities per group given increments before ``t_j``."""
        n_groups = common_groups.shape[0]
        done = min(j // self._per, self.grid.n_coarse)
        if done == 0:
            w = self.grid.consistent_weights(())
            return np.broadcast_to(w / w.sum(), (n_groups, w.size))
        d0 = common_groups.shape[-1]
        coarse = common_groups[:, : done * self._per].reshape(n_groups, done, self._per, d0).sum(axis=2)
        idx = quantize_index(coarse, self.grid.n_quant).reshape(n_groups, -1)
        out = np.empty((n_groups, self.grid.n_atoms))
        cache = {}
        for g in range(n_groups):
            key = tuple(int(v) for v in idx[g])
            w = cache.get(key)
            if w is None:
                w = self.grid.consistent_weights(key)
                w = cache[key] = w / w.sum()
            out[g] = w
        return out

    def __call__(self, x, ctx: StepContext) -> np.ndarray:
        n = x.shape[0]
        if ctx.group is None:
            w = self.grid.consistent_weights(())
            w = np.broadcast_to(w / w.sum(), (n, w.size))
        else:
            w = self.atom_weights(ctx.j, ctx.common_groups)[ctx.group]
        a = np.zeros((n, next(iter(self.policies.values())).spec.model.control_dim))
        for atom, pol in self.policies.items():
            wk = w[:, atom]
            rows = np.flatnonzero(wk > 0)
            if rows.size == 0:
                continue
            sub = StepContext(ctx.j, ctx.t, ctx.m[rows], ctx.mass[rows], None if ctx.rows is None else ctx.rows[rows])
            a[rows] += wk[rows, None] * pol(x[rows], sub)
        return a


@dataclass
class GameRun:
    """Realizations of an N-player game; arrays are indexed ``[rep, player, ...]``."""

    n_players: int
    values: np.ndarray        # (R, N, M+1, d)
    exit_step: np.ndarray     # (R, N)
    absorbed: np.ndarray      # (R, N)
    controls: np.ndarray      # (R, N, M, k)
    payoffs: np.ndarray       # (R, N)
    mass: np.ndarray          # (R, M+1) mass of mu^N
    m: np.ndarray             # (R, M+1) <h, mu^N>
    dW0: np.ndarray           # (R, M, d0)
    dt: float
    seed: int | None = None
    rho_mass: np.ndarray | None = None  # (R, M+1) conditioned flow, approximate game only
    rho_m: np.ndarray | None = None
    grid: CommonNoiseGrid | None = None
    meta: dict = field(default_factory=dict)

    @property
    def reps(self) -> int:
        return self.values.shape[0]

    def path(self, rep: int, player: int) -> ParticlePath:
        e = int(self.exit_step[rep, player])
        return ParticlePath(
            values=self.values[rep, player],
            dW=np.full((self.values.shape[2] - 1, self.values.shape[3]), np.nan),
            dW0=self.dW0[rep],
            exit_time=e * self.dt,
            exit_step=e,
            absorbed=bool(self.absorbed[rep, player]),
            controls=self.controls[rep, player],
        )


def _streams(seed):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def _draw_game_noise(model: StateModel, n_players: int, reps: int, seed):
    rng_xi, rng_w, rng_w0, rng_aux = _streams(seed)
    sq = np.sqrt(model.dt)
    xi = np.asarray(model.initial(reps * n_players, rng_xi), dtype=float).reshape(reps, n_players, model.dim)
    dW = rng_w.standard_normal((reps, n_players, model.n_steps, model.dim)) * sq
    dW0 = rng_w0.standard_normal((reps, model.n_steps, model.noise_dim)) * sq
    return xi, dW, dW0, rng_aux


def _policy_groups(policies, n_players: int):
    """``[(policy, player indices)]`` from one shared policy or one policy per player."""
    if not isinstance(policies, (list, tuple)):
        return [(policies, np.arange(n_players))]
    if len(policies) != n_players:
        raise InvalidParameterError(f"expected {n_players} policies, got {len(policies)}")
    groups: dict[int, tuple] = {}
    for i, pol in enumerate(policies):
        groups.setdefault(id(pol), (pol, []))[1].append(i)
    return [(pol, np.asarray(idx)) for pol, idx in groups.values()]


def _run(model: StateModel, policies, xi, dW, dW0, n_copies: int = 1):
    """Lock-step simulation of ``R * n_copies`` coupled N-player systems.

    ``xi``/``dW`` are per (rep, player) and shared by the copies of a rep;
    ``dW0`` is ``(R, n_copies, M, d0)``.  Players consume the flow averaged
    over the copies of their rep (plain ``mu^N`` when ``n_copies == 1``).
    """
    reps, n_players, m_steps, d = dW.shape
    dt, times = model.dt, model.times
    k = model.control_dim
    shape = (reps, n_copies, n_players)
    x = np.broadcast_to(xi[:, None], shape + (d,)).copy()
    values = np.empty(shape + (m_steps + 1, d))
    values[..., 0, :] = x
    controls = np.zeros(shape + (m_steps, k), dtype=np.float32)
    alive = model.domain.contains(x)
    absorbed = ~alive
    exit_step = np.where(alive, m_steps, 0)
    running = np.zeros(shape)
    mass = np.zeros((reps, n_copies, m_steps + 1))
    m_trace = np.zeros((reps, n_copies, m_steps + 1))
    rho_mass = np.zeros((reps, m_steps + 1))
    rho_m = np.zeros((reps, m_steps + 1))
    w_der = _cell_weights(model.kernel, m_steps, dt, "derivative")
    k_tail = model.kernel(dt * np.arange(m_steps + 1))
    groups = _policy_groups(policies, n_players)
    common_flat = dW0.reshape(reps * n_copies, m_steps, -1)
    copy_id = np.broadcast_to(np.arange(reps * n_copies).reshape(reps, n_copies, 1), shape)
    sig_t, sig0_t = model.sigma.T, model.sigma0.T

    for j in range(m_steps + 1):
        h_x = model.h(x.reshape(-1, d)).reshape(shape)
        mass[..., j] = alive.mean(axis=2)
        m_trace[..., j] = np.where(alive, h_x, 0.0).mean(axis=2)
        rho_mass[:, j] = mass[..., j].mean(axis=1)
        rho_m[:, j] = m_trace[..., j].mean(axis=1)
        if j == m_steps:
            break
        lprime = rho_mass[:, : j + 1] @ w_der[j, : j + 1]
        if model.loss_prehistory:
            lprime = lprime - rho_mass[:, 0] * k_tail[j]
        a = np.zeros(shape + (k,))
        for pol, players in groups:
            sel = np.zeros(shape, dtype=bool)
            sel[:, :, players] = True
            sel &= alive
            r_idx, c_idx, p_idx = np.nonzero(sel)
            if r_idx.size == 0:
                continue
            flat_rows = (r_idx * n_copies + c_idx) * n_players + p_idx
            ctx = StepContext(j, times[j], rho_m[r_idx, j], rho_mass[r_idx, j], flat_rows,
                              copy_id[r_idx, c_idx, p_idx], common_flat[:, :j])
            a[r_idx, c_idx, p_idx] = np.asarray(pol(x[r_idx, c_idx, p_idx], ctx), dtype=float).reshape(-1, k)
        r_idx, c_idx, p_idx = np.nonzero(alive)
        xr = x[r_idx, c_idx, p_idx]
        ar = a[r_idx, c_idx, p_idx]
        m_row = rho_m[r_idx, j]
        running[r_idx, c_idx, p_idx] += model.f(times[j], xr, m_row, ar) * dt
        step = (
            model.drift(times[j], xr, m_row, lprime[r_idx], ar) * dt
            + dW[r_idx, p_idx, j] @ sig_t
            + dW0[r_idx, c_idx, j] @ sig0_t
        )
        x_new = xr + step
        if not np.all(np.isfinite(x_new)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(x_new), axis=1))[0])
            raise NumericalBlowupError(j, f"non-finite state at step {j} for player {int(p_idx[bad])} in rep {int(r_idx[bad])}")
        x[r_idx, c_idx, p_idx] = x_new
        controls[r_idx, c_idx, p_idx, j] = ar
        out = ~model.domain.contains(x_new)
        hit = (r_idx[out], c_idx[out], p_idx[out])
        exit_step[hit] = j + 1
        absorbed[hit] = True
        alive[hit] = False
        values[..., j + 1, :] = x

    exit_vals = np.take_along_axis(values, exit_step[..., None, None], axis=3)[..., 0, :]
    payoff = running + model.G(times[exit_step], exit_vals)
    return dict(values=values, exit_step=exit_step, absorbed=absorbed, controls=controls,
                payoffs=payoff, mass=mass, m=m_trace, rho_mass=rho_mass, rho_m=rho_m)


def simulate_game(model: StateModel, policies, n_players: int, seed=0, reps: int = 1) -> GameRun:
    """``reps`` independent N-player games; players see the live empirical flow ``mu^N``."""
    if n_players < 1 or reps < 1:
        raise InvalidParameterError("need at least one player and one repetition")
    xi, dW, dW0, _ = _draw_game_noise(model, n_players, reps, seed)
    out = _run(model, policies, xi, dW, dW0[:, None])
    return GameRun(
        n_players, out["values"][:, 0], out["exit_step"][:, 0], out["absorbed"][:, 0],
        out["controls"][:, 0], out["payoffs"][:, 0], out["mass"][:, 0], out["m"][:, 0],
        dW0, model.dt, seed if isinstance(seed, int) else None,
    )


def simulate_approx_game(
    model: StateModel,
    policies,
    n_players: int,
    grid: CommonNoiseGrid,
    seed=0,
    reps: int = 1,
    inner_batch: int = 16,
    condition_on: str = "key",
) -> GameRun:
    """Game in which players consume ``rho = E[mu^N | xi, W, V^n]`` instead of ``mu^N``.

    The conditional expectation is estimated by running ``inner_batch``
    copies of the game that share initial states and idiosyncratic noise with
    the main realization; the copies' common noise is redrawn inside the
    quantization cell of the main path (``condition_on="key"``) or inside its
    atom of ``grid`` (``"atom"``).  All copies consume the copy-averaged flow.
    """
    if grid.n_atoms == 0:
        raise UnderResolvedGridError("noise grid has no atoms")
    if inner_batch < 1:
        raise InvalidParameterError("inner_batch must be at least 1")
    xi, dW, dW0, rng_aux = _draw_game_noise(model, n_players, reps, seed)
    copies = np.empty((reps, inner_batch, model.n_steps, model.noise_dim))
    copies[:, 0] = dW0
    for r in range(reps):
        if inner_batch == 1:
            break
        if condition_on == "key":
            key = grid.key_of(dW0[r])
            copies[r, 1:] = grid.sample_key_increments(key, inner_batch - 1, model.n_steps, rng_aux)
        elif condition_on == "atom":
            atom = grid.assign(dW0[r])
            copies[r, 1:] = grid.sample_atom_increments(atom, inner_batch - 1, model.n_steps, rng_aux)
        else:
            raise ValueError(f"condition_on must be 'key' or 'atom', got {condition_on!r}")
    out = _run(model, policies, xi, dW, copies, n_copies=inner_batch)
    run = GameRun(
        n_players, out["values"][:, 0], out["exit_step"][:, 0], out["absorbed"][:, 0],
        out["controls"][:, 0], out["payoffs"][:, 0], out["mass"][:, 0], out["m"][:, 0],
        dW0, model.dt, seed if isinstance(seed, int) else None,
        rho_mass=out["rho_mass"], rho_m=out["rho_m"], grid=grid,
    )
    run.meta["inner_batch"] = inner_batch
    run.meta["condition_on"] = condition_on
    return run


@dataclass
class GapEstimate:
    n_players: int
    gap: float                 # raw, max over deviation candidates
    gap_clipped: float
    ci: tuple[float, float]
    candidate: str
    per_candidate: dict
    reps: int
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "N": self.n_players,
            "gap": self.gap,
            "gap_clipped": self.gap_clipped,
            "ci_low": self.ci[0],
            "ci_high": self.ci[1],
            "best_candidate": self.candidate,
            "per_candidate": self.per_candidate,
            "reps": self.reps,
            "seed": self.seed,
        }


def _bootstrap_ci(diff: np.ndarray, rng, n_boot: int = 2000, level: float = 0.95):
    idx = rng.integers(0, diff.size, size=(n_boot, diff.size))
    means = diff[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def _deviation_battery(model, base: GameRun, seed, k: int, basis, constant_controls, n_randomized: int) -> dict:
    """BSDE best response pooled over reps, plus constant and randomized policies."""
    reps = base.reps
    # pooled reference paths for the deviator
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(5)[4])
    n_ref = reps * k
    xi = np.asarray(model.initial(n_ref, rng), dtype=float)
    dW = rng.standard_normal((n_ref, model.n_steps, model.dim)) * np.sqrt(model.dt)
    dW0 = np.repeat(base.dW0, k, axis=0)
    noise = NoiseBatch(xi, dW, dW0)
    ref = uncontrolled_paths(model, noise)
    env = Environment.from_traces(model, np.repeat(base.m, k, axis=0), np.repeat(base.mass, k, axis=0))
    spec = HamiltonianSpec(model)
    basis = basis or PolynomialBasis(2, flow_features=True, prune=True)
    sol = solve_bsde(model, env, None, ref, basis, spec=spec, keep_paths=False)
    br = FeedbackPolicy(sol, spec)

    if constant_controls is None:
        lo, hi = model.controls.lower[0], model.controls.upper[0]
        constant_controls = [lo, 0.5 * (lo + hi), hi] if lo < hi else [lo]
    candidates = {"bsde_best_response": br}
    for c in constant_controls:
        candidates[f"constant_{c:g}"] = ConstantPolicy((float(c),) * model.control_dim)
    for i in range(n_randomized):
        candidates[f"randomized_{i}"] = RandomizedPolicy(model.controls, model.n_steps, seed=1000 + i)
    return candidates


def best_response_gap(
    model: StateModel,
    equilibrium,
    n_players: int,
    player: int = 0,
    reps: int = 64,
    seed=0,
    br_paths_per_rep: int = 64,
    basis: PolynomialBasis | None = None,
    constant_controls: Sequence[float] | None = None,
    n_randomized: int = 4,
    deviations: dict | None = None,
) -> GapEstimate:
    """Estimate how much ``player`` gains by deviating from the mean-field policy.

    1. Simulate ``reps`` games with every player on the equilibrium policy.
    2. Solve one BSDE for the deviator, pooled over reps: reference paths
       use each rep's common noise and face that rep's realized flow, which
       enters the regression basis as features, so the best response reacts
       to the observed flow rather than to its future.
    3. Re-simulate the same games (same noise) with ``player`` switched to
       the best response, to each constant control and to ``n_randomized``
       piecewise-constant random policies.

    The gap is the largest mean payoff gain over these candidates; it is a
    lower bound on the true gap, reported raw and clipped at zero, with a
    bootstrap CI for the winning candidate.  Passing ``deviations`` (name ->
    policy) replaces the candidate battery and skips the BSDE step; a
    ``None`` policy stands for the equilibrium policy itself.
    """
    policy = EquilibriumPolicy(equilibrium.grid, equilibrium.policies, model.n_steps)
    base = simulate_game(model, policy, n_players, seed, reps)
    j_eq = base.payoffs[:, player]

    if deviations is not None:
        candidates = dict(deviations)
    else:
        candidates = _deviation_battery(model, base, seed, br_paths_per_rep, basis, constant_controls, n_randomized)

    boot_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(6)[5])
    per, diffs = {}, {}
    for name, dev in candidates.items():
        pols = [policy] * n_players
        pols[player] = policy if dev is None else dev
        run = simulate_game(model, pols, n_players, seed, reps)
        diff = run.payoffs[:, player] - j_eq
        diffs[name] = diff
        per[name] = {"mean": float(diff.mean()), "se": float(diff.std(ddof=1) / np.sqrt(reps)) if reps > 1 else 0.0}
    best = max(per, key=lambda n: per[n]["mean"])
    gap = per[best]["mean"]
    ci = _bootstrap_ci(diffs[best], boot_rng)
    return GapEstimate(n_players, gap, max(gap, 0.0), (max(ci[0], 0.0), max(ci[1], 0.0)), best, per, reps,
                       seed if isinstance(seed, int) else None)


def gap_trend_ok(estimates: Sequence[GapEstimate]) -> bool:
    """Clipped gaps non-increasing in ``N``, allowing any step whose CIs overlap."""
    ests = sorted(estimates, key=lambda e: e.n_players)
    for a, b in zip(ests, ests[1:]):
        if b.gap_clipped > a.gap_clipped and b.ci[0] > a.ci[1]:
            return False
    return True
