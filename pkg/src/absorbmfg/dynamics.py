"""Controlled absorbed diffusions: model definition and Euler-Maruyama simulation.

The state solves

    dX = (b1(t, X, m_t) + b2(t) a_t) dt + sigma dW + sigma0 dW0 + eta(t) dLhat_t

until it leaves the open domain ``O``; afterwards it is frozen.  ``m_t`` is
``<h, mu_t>`` and ``Lhat`` is the kernel-smoothed surviving mass of the
population flow.  Absorption is monitored at grid times.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidControlError, InvalidParameterError, NumericalBlowupError
from .kernel import SmoothingKernel, bump_kernel
from .measure_flow import Environment, SubProbabilityFlow

logger = logging.getLogger(__name__)

__all__ = [
    "HalfSpace",
    "Domain",
    "ControlBox",
    "StateModel",
    "StepContext",
    "NoiseBatch",
    "draw_noise",
    "ParticlePath",
    "PathBatch",
    "resolve_environment",
    "drift_tilde",
    "simulate_paths",
    "uncontrolled_paths",
    "exit_time",
    "payoff_sample",
    "payoffs",
    "check_bounds",
    "BankRunParams",
    "bankrun_model",
]


@dataclass(frozen=True)
class HalfSpace:
    """Open half-space ``{x : normal . x > offset}``."""

    normal: tuple[float, ...]
    offset: float

    def margin(self, x: np.ndarray) -> np.ndarray:
        return x @ np.asarray(self.normal) - self.offset


@dataclass(frozen=True)
class Domain:
    """Finite intersection of open half-spaces (the whole space when empty)."""

    faces: tuple[HalfSpace, ...] = ()

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float]) -> "Domain":
        """Open box; infinite bounds are dropped."""
        d = len(lower)
        faces = []
        for i in range(d):
            e = tuple(1.0 if k == i else 0.0 for k in range(d))
            if np.isfinite(lower[i]):
                faces.append(HalfSpace(e, float(lower[i])))
            if np.isfinite(upper[i]):
                faces.append(HalfSpace(tuple(-v for v in e), -float(upper[i])))
        return cls(tuple(faces))

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        inside = np.ones(x.shape[:-1], dtype=bool)
        for face in self.faces:
            inside &= face.margin(x) > 0.0
        return inside

    def bridge_crossed(self, x0, x1, cov: np.ndarray, dt: float, u: np.ndarray) -> np.ndarray:
        """Brownian-bridge test for an unseen excursion out of ``O`` between two inside nodes.

        For each face the crossing probability is ``exp(-2 a b / (n' cov n dt))``
        with ``a, b`` the margins at the two nodes; ``u`` holds one uniform per
        row and face.
        """
        crossed = np.zeros(x0.shape[0], dtype=bool)
        for i, face in enumerate(self.faces):
            nrm = np.asarray(face.normal)
            var = float(nrm @ cov @ nrm) * dt
            if var <= 0.0:
                continue
            a = np.maximum(face.margin(x0), 0.0)
            b = np.maximum(face.margin(x1), 0.0)
            crossed |= u[:, i] < np.exp(-2.0 * a * b / var)
        return crossed


@dataclass(frozen=True)
class ControlBox:
    """Product of closed intervals ``[lower_i, upper_i]``."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        if len(self.lower) != len(self.upper):
            raise InvalidParameterError("control bounds have different lengths")
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise InvalidParameterError(f"empty control box {self.lower} > {self.upper}")

    @property
    def dim(self) -> int:
        return len(self.lower)

    def clamp(self, a):
        return np.clip(a, self.lower, self.upper)

    def contains(self, a, tol: float = 1e-12) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        return np.all((a >= np.asarray(self.lower) - tol) & (a <= np.asarray(self.upper) + tol), axis=-1)

    def check(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if not np.all(self.contains(a)):
            raise InvalidControlError(f"control outside A = {list(zip(self.lower, self.upper))}")
        return a

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))


@dataclass
class StateModel:
    """Coefficients of one absorbed mean-field control problem.

    ``b1(t, x, m)``, ``h(x)``, ``f(t, x, m, a)`` and ``G(t, x)`` act row-wise on
    ``(n, d)`` arrays with ``m`` of shape ``(n,)``.  When ``f`` has the form
    ``f0(t, x, m) - c |a|^2`` set ``quadratic_cost = c``: the Hamiltonian is
    then maximized in closed form.
    """

    name: str
    dim: int
    b1: Callable
    b2: Callable                  # t -> (d, k)
    h: Callable
    eta: Callable                 # t -> (d,)
    sigma: np.ndarray             # (d, d)
    sigma0: np.ndarray            # (d, d0)
    f: Callable
    G: Callable
    domain: Domain
    controls: ControlBox
    initial: Callable             # (n, rng) -> (n, d)
    kernel: SmoothingKernel
    horizon: float
    n_steps: int
    quadratic_cost: float | None = None
    bounds: dict = field(default_factory=dict)
    battery_radius: float = 2.0
    loss_prehistory: bool = True
    bridge_correction: bool = False

    def __post_init__(self):
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        self.sigma0 = np.asarray(self.sigma0, dtype=float).reshape(self.dim, -1)
        if self.sigma.shape != (self.dim, self.dim):
            raise InvalidParameterError(f"sigma must be {self.dim}x{self.dim}")
        if self.horizon <= 0 or self.n_steps < 1:
            raise InvalidParameterError("horizon and n_steps must be positive")
        cond = np.linalg.cond(self.sigma)
        if not np.isfinite(cond) or cond > 1e12:
            raise InvalidParameterError(f"sigma is singular (condition number {cond:.3g})")
        # an all-zero sigma0 switches the common noise off
        if np.any(self.sigma0) and np.linalg.matrix_rank(self.sigma0) < min(self.sigma0.shape):
            raise InvalidParameterError("sigma0 does not have full column rank")
        self.sigma_inv = np.linalg.inv(self.sigma)
        self.noise_cov = self.sigma @ self.sigma.T + self.sigma0 @ self.sigma0.T

    @property
    def noise_dim(self) -> int:
        return self.sigma0.shape[1]

    @property
    def control_dim(self) -> int:
        return self.controls.dim

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def drift(self, t: float, x: np.ndarray, m, lprime, a: np.ndarray) -> np.ndarray:
        """``b1 + b2 a + eta(t) Lhat'`` row-wise; no control-set check."""
        n = x.shape[0]
        m = np.broadcast_to(np.asarray(m, dtype=float), (n,))
        lprime = np.broadcast_to(np.asarray(lprime, dtype=float), (n,))
        return (
            self.b1(t, x, m)
            + a @ np.asarray(self.b2(t)).T
            + lprime[:, None] * np.asarray(self.eta(t))[None, :]
        )


@dataclass
class StepContext:
    """What a policy sees at grid step ``j`` (arrays over the rows being advanced).

    Rows sharing a common-noise path form a group: ``common_groups[g]`` holds
    the increments ``dW0`` before ``t_j`` of group ``g`` and ``group`` maps
    each row to its group.
    """

    j: int
    t: float
    m: np.ndarray
    mass: np.ndarray
    rows: np.ndarray | None = None      # indices of the rows into the full batch
    group: np.ndarray | None = None
    common_groups: np.ndarray | None = None  # (n_groups, j, d0)

    @property
    def common(self) -> np.ndarray | None:
        if self.group is None:
            return None
        return self.common_groups[self.group]


@dataclass
class NoiseBatch:
    """Initial states and Brownian increments for ``n`` paths."""

    xi: np.ndarray    # (n, d)
    dW: np.ndarray    # (n, M, d)
    dW0: np.ndarray   # (n, M, d0), possibly a broadcast view of one shared path
    uniforms: np.ndarray | None = None  # (n, M, n_faces) for the bridge test

    @property
    def n_paths(self) -> int:
        return self.xi.shape[0]

    def take(self, rows) -> "NoiseBatch":
        u = None if self.uniforms is None else self.uniforms[rows]
        return NoiseBatch(self.xi[rows], self.dW[rows], self.dW0[rows], u)


def draw_noise(model: StateModel, n_paths: int, rng, common=None) -> NoiseBatch:
    """Draw ``xi`` and ``dW``; ``common`` is ``None`` (independent ``dW0`` per path),
    one shared path ``(M, d0)``, or per-path increments ``(n, M, d0)``."""
    rng = np.random.default_rng(rng)
    m, d, d0 = model.n_steps, model.dim, model.noise_dim
    xi = np.asarray(model.initial(n_paths, rng), dtype=float).reshape(n_paths, d)
    dW = rng.standard_normal((n_paths, m, d)) * np.sqrt(model.dt)
    if common is None:
        dW0 = rng.standard_normal((n_paths, m, d0)) * np.sqrt(model.dt)
    else:
        common = np.asarray(common, dtype=float)
        if common.ndim == 2:
            dW0 = np.broadcast_to(common.reshape(m, d0), (n_paths, m, d0))
        else:
            dW0 = common.reshape(n_paths, m, d0)
    u = None
    if model.bridge_correction:
        u = rng.uniform(size=(n_paths, m, len(model.domain.faces)))
    return NoiseBatch(xi, dW, dW0, u)


@dataclass
class ParticlePath:
    """One simulated path (a view into a :class:`PathBatch`)."""

    values: np.ndarray
    dW: np.ndarray
    dW0: np.ndarray
    exit_time: float
    exit_step: int
    absorbed: bool
    controls: np.ndarray


@dataclass
class PathBatch:
    """``n`` absorbed paths on the model grid, stored as arrays.

    ``exit_step`` is the first grid index outside ``O`` (``M`` when the path
    never leaves, with ``absorbed`` false).  Values are frozen after exit.
    """

    values: np.ndarray      # (n, M+1, d)
    exit_step: np.ndarray   # (n,)
    absorbed: np.ndarray    # (n,)
    controls: np.ndarray    # (n, M, k)
    noise: NoiseBatch
    dt: float
    env_m: np.ndarray | None = None  # (n, M+1) <h, mu_t> seen by each path

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1] - 1

    def __len__(self) -> int:
        return self.n_paths

    def __getitem__(self, i: int) -> ParticlePath:
        e = int(self.exit_step[i])
        return ParticlePath(
            values=self.values[i],
            dW=self.noise.dW[i],
            dW0=self.noise.dW0[i],
            exit_time=e * self.dt,
            exit_step=e,
            absorbed=bool(self.absorbed[i]),
            controls=self.controls[i],
        )

    def __iter__(self):
        return (self[i] for i in range(self.n_paths))

    @property
    def exit_times(self) -> np.ndarray:
        return self.exit_step * self.dt

    def alive_mask(self) -> np.ndarray:
        """``(n, M+1)``: counted in ``mu_t`` (before exit, or never absorbed)."""
        steps = np.arange(self.n_steps + 1)
        return (steps[None, :] < self.exit_step[:, None]) | ~self.absorbed[:, None]

    def exit_values(self) -> np.ndarray:
        return self.values[np.arange(self.n_paths), self.exit_step]

    def take(self, rows) -> "PathBatch":
        env_m = None if self.env_m is None else self.env_m[rows]
        return PathBatch(
            self.values[rows], self.exit_step[rows], self.absorbed[rows],
            self.controls[rows], self.noise.take(rows), self.dt, env_m,
        )


def resolve_environment(model: StateModel, flow, atom: int | None = 0) -> Environment:
    if isinstance(flow, Environment):
        return flow
    if isinstance(flow, SubProbabilityFlow):
        return flow.environment(atom, model)
    raise TypeError(f"expected a SubProbabilityFlow or Environment, got {type(flow).__name__}")


def drift_tilde(model: StateModel, j: int, x, flow, atom: int = 0, a=None) -> np.ndarray:
    """``b(t_j, x, <h, mu_t>, a) + eta(t_j) Lhat'(t_j)`` for rows of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    a = np.zeros((n, model.control_dim)) if a is None else np.atleast_2d(np.asarray(a, dtype=float))
    model.controls.check(a)
    env = resolve_environment(model, flow, atom)
    m, _, lprime = env.at(j)
    return model.drift(model.times[j], x, m, lprime, np.broadcast_to(a, (n, model.control_dim)))


def _zero_policy(model):
    zero = np.zeros(model.control_dim)

    def act(x, ctx):
        return np.broadcast_to(zero, (x.shape[0], zero.size))

    return act


def simulate_paths(
    model: StateModel,
    flow,
    policy=None,
    noise: NoiseBatch | None = None,
    n_paths: int | None = None,
    atom: int = 0,
    rng=None,
) -> PathBatch:
    """Euler-Maruyama for the controlled absorbed state against a fixed flow.

    ``flow`` may be a :class:`SubProbabilityFlow` (with ``atom``) or an
    :class:`Environment`, whose arrays may also be per path.  ``policy`` is
    called as ``policy(x, ctx)`` and must return controls in ``A``; ``None``
    means the zero control.  A path with ``xi`` outside ``O`` exits at ``t = 0``.
    """
    env = resolve_environment(model, flow, atom)
    if noise is None:
        noise = draw_noise(model, n_paths, rng)
    policy = _zero_policy(model) if policy is None else policy
    n, m_steps, d = noise.n_paths, model.n_steps, model.dim
    dt, times = model.dt, model.times

    values = np.empty((n, m_steps + 1, d))
    controls = np.zeros((n, m_steps, model.control_dim))
    x = noise.xi.copy()
    values[:, 0] = x
    alive = model.domain.contains(x)
    absorbed = ~alive
    exit_step = np.where(alive, m_steps, 0)
    env_m = np.broadcast_to(env.m, (n, m_steps + 1))
    env_mass = np.broadcast_to(env.mass, (n, m_steps + 1))
    env_lp = np.broadcast_to(env.lprime, (n, m_steps + 1))
    sig_t, sig0_t = model.sigma.T, model.sigma0.T

    for j in range(m_steps):
        rows = np.flatnonzero(alive)
        if rows.size:
            xr = x[rows]
            ctx = StepContext(j, times[j], env_m[rows, j], env_mass[rows, j], rows,
                              rows, noise.dW0[:, :j])
            a = np.asarray(policy(xr, ctx), dtype=float).reshape(rows.size, model.control_dim)
            controls[rows, j] = a
            step = (
                model.drift(times[j], xr, env_m[rows, j], env_lp[rows, j], a) * dt
                + noise.dW[rows, j] @ sig_t
                + noise.dW0[rows, j] @ sig0_t
            )
            x_new = xr + step
            if not np.all(np.isfinite(x_new)):
                raise NumericalBlowupError(j)
            x[rows] = x_new
            out = ~model.domain.contains(x_new)
            if model.bridge_correction and noise.uniforms is not None:
                out |= model.domain.bridge_crossed(xr, x_new, model.noise_cov, dt, noise.uniforms[rows, j])
            hit = rows[out]
            exit_step[hit] = j + 1
            absorbed[hit] = True
            alive[hit] = False
        values[:, j + 1] = x
    return PathBatch(values, exit_step, absorbed, controls, noise, dt, np.array(env_m))


def uncontrolled_paths(model: StateModel, noise: NoiseBatch) -> PathBatch:
    """Reference paths ``X = xi + sigma W + sigma0 W0``, absorbed on exit from ``O``."""
    n, m_steps = noise.n_paths, model.n_steps
    incr = noise.dW @ model.sigma.T + noise.dW0 @ model.sigma0.T
    raw = np.concatenate([noise.xi[:, None, :], noise.xi[:, None, :] + np.cumsum(incr, axis=1)], axis=1)
    inside = model.domain.contains(raw)
    if model.bridge_correction and noise.uniforms is not None:
        for j in range(m_steps):
            both = inside[:, j] & inside[:, j + 1]
            crossed = model.domain.bridge_crossed(raw[:, j], raw[:, j + 1], model.noise_cov, model.dt, noise.uniforms[:, j])
            inside[:, j + 1] &= ~(both & crossed)
    outside = ~inside
    absorbed = outside.any(axis=1)
    exit_step = np.where(absorbed, outside.argmax(axis=1), m_steps)
    steps = np.arange(m_steps + 1)
    idx = np.minimum(steps[None, :], exit_step[:, None])
    values = np.take_along_axis(raw, idx[:, :, None], axis=1)
    controls = np.zeros((n, m_steps, model.control_dim))
    return PathBatch(values, exit_step, absorbed, controls, noise, model.dt)


def exit_time(path, domain: Domain, dt: float) -> float:
    """First grid time with the state outside ``domain``, else the horizon."""
    values = path.values if hasattr(path, "values") else np.asarray(path)
    outside = ~domain.contains(values)
    if outside.any():
        return float(np.argmax(outside) * dt)
    return float((values.shape[0] - 1) * dt)


def payoffs(model: StateModel, paths: PathBatch, flow=None, atom: int = 0) -> np.ndarray:
    """``sum_{t_j < tau} f(t_j, X_j, m_j, a_j) dt + G(tau, X_tau)`` for every path."""
    n, m_steps = paths.n_paths, paths.n_steps
    if flow is None:
        env_m = paths.env_m if paths.env_m is not None else np.zeros((n, m_steps + 1))
    else:
        env_m = np.broadcast_to(resolve_environment(model, flow, atom).m, (n, m_steps + 1))
    times = model.times
    running = np.zeros(n)
    for j in range(m_steps):
        rows = np.flatnonzero(paths.exit_step > j)
        if rows.size == 0:
            break
        running[rows] += model.f(times[j], paths.values[rows, j], env_m[rows, j], paths.controls[rows, j]) * model.dt
    terminal = model.G(times[paths.exit_step], paths.exit_values())
    return running + terminal


def payoff_sample(model: StateModel, path: ParticlePath, flow=None, atom: int = 0) -> float:
    """Payoff of a single path (see :func:`payoffs`)."""
    m_steps = path.values.shape[0] - 1
    env_m = np.zeros(m_steps + 1) if flow is None else resolve_environment(model, flow, atom).m
    env_m = np.broadcast_to(env_m, (m_steps + 1,))
    times = model.times
    total = 0.0
    for j in range(path.exit_step):
        total += float(model.f(times[j], path.values[j][None], env_m[j:j + 1], path.controls[j][None])[0]) * model.dt
    total += float(model.G(np.array([times[path.exit_step]]), path.values[path.exit_step][None])[0])
    return total


def check_bounds(model: StateModel, rng=None, n: int = 10_000, scale: float = 10.0) -> dict:
    """Sample random arguments and compare ``|b1|, |f|, |h|, |eta|`` to the declared bounds.

    Returns the observed sup of each; raises :class:`InvalidParameterError`
    when a declared bound is exceeded.
    """
    rng = np.random.default_rng(rng)
    t = rng.uniform(0.0, model.horizon, size=n)
    x = rng.normal(scale=scale, size=(n, model.dim))
    m = rng.uniform(0.0, 1.0, size=n)
    a = model.controls.sample(n, rng)
    ts = np.linspace(0.0, model.horizon, 11)
    observed = {
        "b1": max(float(np.max(np.abs(model.b1(ti, x, m)))) for ti in ts),
        "h": float(np.max(np.abs(model.h(x)))),
        "eta": max(float(np.max(np.abs(model.eta(ti)))) for ti in ts),
        "f": max(float(np.max(np.abs(model.f(ti, x, m, a)))) for ti in ts),
        "G": float(np.max(np.abs(model.G(t, x)))),
    }
    for key, value in observed.items():
        bound = model.bounds.get(key)
        if bound is not None and value > bound * (1 + 1e-9):
            raise InvalidParameterError(f"|{key}| reached {value:.4g}, above the declared bound {bound:.4g}")
    return observed


# --------------------------------------------------------------------------
# bank-run scenario


@dataclass(frozen=True)
class BankRunParams:
    """Parameters of the bank-run scenario; state is ``(S, Y)`` = (bank assets, trust)."""

    mu_drift: float = 0.05
    sigma0: float = 0.3
    sigma_s: float = 0.3      # idiosyncratic noise on S so sigma is invertible
    sigma_y: float = 0.4
    r: float = 0.05
    b_threshold: float = 1.0
    lam: float = 1.0
    gamma_max: float = 0.5
    gamma_scale: float = 0.5
    deposit: float = 1.0       # D0, per-depositor claim before interest
    loss_scale: float = 0.8    # assets paid out per unit of running mass
    a_low: float = -1.0
    a_high: float = 1.0
    cost: float = 0.5
    s0: float = 1.4
    y0: float = 0.6
    y0_spread: float = 0.2
    epsilon: float = 0.2
    horizon: float = 1.0
    n_steps: int = 100

    def validate(self) -> None:
        positive = ["sigma0", "sigma_s", "sigma_y", "r", "b_threshold", "gamma_scale", "deposit",
                    "cost", "s0", "y0", "epsilon", "horizon"]
        for name in positive:
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise InvalidParameterError(f"{name} must be positive, got {v!r}")
        # zero switches the corresponding coupling off
        for name in ("lam", "gamma_max", "loss_scale"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InvalidParameterError(f"{name} must be non-negative, got {v!r}")
        if not 0 <= self.y0_spread < self.y0:
            raise InvalidParameterError("y0_spread must lie in [0, y0) so initial trust is positive")
        if self.a_low > self.a_high:
            raise InvalidParameterError("a_low must not exceed a_high")
        if self.n_steps < 1:
            raise InvalidParameterError("n_steps must be positive")


def bankrun_model(params: BankRunParams | None = None, **overrides) -> StateModel:
    """Depositors' trust ``Y`` and the bank's asset value ``S`` with run contagion.

    ``dS = mu dt + sigma0 dW0 + sigma_s dW^1 + loss_scale e^{rt} dLhat``,
    ``dY = (a + gamma(S - b) - lam (1 - L)) dt + sigma_y dW^2``, with
    ``gamma(u) = gamma_max tanh(u / gamma_scale)`` and ``L`` the surviving mass.
    Payoff ``G = min(e^{r tau} D0, S_tau^+)`` and cost ``f = -c a^2``.
    """
    p = params if params is not None else BankRunParams()
    if overrides:
        p = BankRunParams(**{**p.__dict__, **overrides})
    p.validate()

    def gamma(u):
        return p.gamma_max * np.tanh(u / p.gamma_scale)

    def b1(t, x, m):
        out = np.empty_like(x)
        out[:, 0] = p.mu_drift
        out[:, 1] = gamma(x[:, 0] - p.b_threshold) - p.lam * (1.0 - m)
        return out

    b2_mat = np.array([[0.0], [1.0]])

    def f(t, x, m, a):
        return -p.cost * np.sum(np.asarray(a) ** 2, axis=-1)

    def G(t, x):
        return np.minimum(np.exp(p.r * np.asarray(t)) * p.deposit, np.maximum(x[..., 0], 0.0))

    def initial(n, rng):
        y = p.y0 + p.y0_spread * rng.uniform(-1.0, 1.0, size=n)
        return np.column_stack([np.full(n, p.s0), y])

    a_bound = max(abs(p.a_low), abs(p.a_high))
    bounds = {
        "b1": max(abs(p.mu_drift), p.gamma_max + p.lam),
        "h": 1.0,
        "eta": p.loss_scale * np.exp(p.r * p.horizon),
        "f": p.cost * a_bound**2,
        "G": p.deposit * np.exp(p.r * p.horizon),
    }
    return StateModel(
        name="bankrun",
        dim=2,
        b1=b1,
        b2=lambda t: b2_mat,
        h=lambda x: np.ones(x.shape[:-1]),
        eta=lambda t: np.array([p.loss_scale * np.exp(p.r * t), 0.0]),
        sigma=np.diag([p.sigma_s, p.sigma_y]),
        sigma0=np.array([[p.sigma0], [0.0]]),
        f=f,
        G=G,
        domain=Domain.box([0.0, 0.0], [np.inf, np.inf]),
        controls=ControlBox((p.a_low,), (p.a_high,)),
        initial=initial,
        kernel=bump_kernel(p.epsilon),
        horizon=p.horizon,
        n_steps=p.n_steps,
        quadratic_cost=p.cost,
        bounds=bounds,
        battery_radius=2.0,
    )
