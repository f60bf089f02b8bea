"""Hamiltonian ``H = f + z . sigma^{-1} btilde`` and its maximizer over the control box."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import StateModel, resolve_environment
from .errors import MaximizationError

__all__ = ["HamiltonianSpec", "hamiltonian", "hamiltonian_values", "maximize", "maximize_values"]

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class HamiltonianSpec:
    """Model plus the precomputed ``sigma^{-1}`` and the maximizer mode.

    ``mode`` is ``"auto"`` (closed form when the model declares a quadratic
    cost), ``"closed-form-quadratic"``, ``"numeric-1d"`` or ``"projected-ascent"``.
    """

    model: StateModel
    mode: str = "auto"
    sigma_inverse: np.ndarray = field(init=False)

    def __post_init__(self):
        self.sigma_inverse = np.linalg.inv(self.model.sigma)
        if self.mode == "auto":
            if self.model.quadratic_cost is not None:
                self.mode = "closed-form-quadratic"
            elif self.model.control_dim == 1:
                self.mode = "numeric-1d"
            else:
                self.mode = "projected-ascent"
        if self.mode not in ("closed-form-quadratic", "numeric-1d", "projected-ascent"):
            raise ValueError(f"unknown maximizer mode {self.mode!r}")
        if self.mode == "closed-form-quadratic" and not self.model.quadratic_cost:
            raise ValueError("closed-form maximizer needs a model with quadratic_cost > 0")


def hamiltonian_values(spec: HamiltonianSpec, t, x, m, lprime, z, a) -> np.ndarray:
    """Row-wise ``f(t, x, m, a) + z . sigma^{-1} btilde(t, x, m, a)``; no control-set check."""
    model = spec.model
    x = np.atleast_2d(x)
    n = x.shape[0]
    m = np.broadcast_to(np.asarray(m, dtype=float), (n,))
    a = np.broadcast_to(np.atleast_2d(np.asarray(a, dtype=float)), (n, model.control_dim))
    z = np.broadcast_to(np.atleast_2d(np.asarray(z, dtype=float)), (n, model.dim))
    theta = model.drift(t, x, m, lprime, a) @ spec.sigma_inverse.T
    return model.f(t, x, m, a) + np.sum(z * theta, axis=1)


def hamiltonian(spec: HamiltonianSpec, j: int, x, flow, atom: int, z, a) -> np.ndarray:
    """``H`` at grid step ``j`` against ``flow`` restricted to ``atom``."""
    spec.model.controls.check(a)
    env = resolve_environment(spec.model, flow, atom)
    m, _, lprime = env.at(j)
    return hamiltonian_values(spec, spec.model.times[j], x, m, lprime, z, a)


def _control_gain(spec: HamiltonianSpec, t) -> np.ndarray:
    """``b2(t)^T sigma^{-T}``, shape ``(k, d)``: ``H`` depends on ``a`` through ``z -> gain z``."""
    return np.asarray(spec.model.b2(t)).T @ spec.sigma_inverse.T


def _golden_1d(fun, lo: float, hi: float, n: int, tol: float = 1e-10) -> np.ndarray:
    """Vectorized golden-section search for the max of a concave function on ``[lo, hi]``."""
    a = np.full(n, float(lo))
    b = np.full(n, float(hi))
    while np.max(b - a) > tol:
        c = b - _GOLDEN * (b - a)
        d = a + _GOLDEN * (b - a)
        left = fun(c) >= fun(d)  # ties keep the lower part, so the smaller argmax wins
        b = np.where(left, d, b)
        a = np.where(left, a, c)
    mid = 0.5 * (a + b)
    # the maximum may sit on a boundary; listing lo first makes ties resolve to the smallest argmax
    cands = np.stack([np.full(n, float(lo)), mid, np.full(n, float(hi))])
    vals = np.stack([fun(c) for c in cands])
    return cands[np.argmax(vals, axis=0), np.arange(n)]


def maximize_values(spec: HamiltonianSpec, t, x, m, lprime, z) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise maximizer ``ahat`` and maximum ``Hhat`` for states ``x`` and adjoints ``z``."""
    model = spec.model
    x = np.atleast_2d(x)
    n, k = x.shape[0], model.control_dim
    z = np.broadcast_to(np.atleast_2d(np.asarray(z, dtype=float)), (n, model.dim))
    box = model.controls

    if spec.mode == "closed-form-quadratic":
        ahat = box.clamp(z @ _control_gain(spec, t).T / (2.0 * model.quadratic_cost))
    elif spec.mode == "numeric-1d":
        if k != 1:
            raise MaximizationError("numeric-1d mode needs a scalar control")

        def fun(a):
            return hamiltonian_values(spec, t, x, m, lprime, z, a[:, None])

        ahat = _golden_1d(fun, box.lower[0], box.upper[0], n)[:, None]
    else:
        ahat = _projected_ascent(spec, t, x, m, lprime, z)

    hhat = hamiltonian_values(spec, t, x, m, lprime, z, ahat)
    if spec.mode != "closed-form-quadratic":
        _check_bracket(spec, t, x, m, lprime, z, hhat)
    return ahat, hhat


def maximize(spec: HamiltonianSpec, j: int, x, flow, atom: int, z) -> tuple[np.ndarray, np.ndarray]:
    """``(ahat, Hhat)`` at grid step ``j`` against ``flow`` restricted to ``atom``."""
    env = resolve_environment(spec.model, flow, atom)
    m, _, lprime = env.at(j)
    return maximize_values(spec, spec.model.times[j], x, m, lprime, z)


def _check_bracket(spec, t, x, m, lprime, z, hhat, n_probe: int = 9):
    """Reject the numeric maximizer if a coarse probe of ``A`` beats it (non-concave ``f``)."""
    box = spec.model.controls
    k = box.dim
    grids = np.meshgrid(*[np.linspace(lo, hi, n_probe) for lo, hi in zip(box.lower, box.upper)], indexing="ij")
    probes = np.stack([g.ravel() for g in grids], axis=1)
    if probes.shape[0] > 729:
        probes = probes[np.linspace(0, probes.shape[0] - 1, 729).astype(int)]
    for a in probes:
        h = hamiltonian_values(spec, t, x, m, lprime, z, np.broadcast_to(a, (x.shape[0], k)))
        worst = np.max(h - hhat)
        if worst > 1e-6 * (1.0 + np.max(np.abs(hhat))):
            raise MaximizationError(
                f"numeric maximizer beaten by {worst:.3g} at a probe point; is f concave in a?"
            )


def _projected_ascent(spec, t, x, m, lprime, z, max_iter: int = 500, tol: float = 1e-10):
    box = spec.model.controls
    n, k = x.shape[0], box.dim
    lo, hi = np.asarray(box.lower), np.asarray(box.upper)
    a = box.clamp(0.5 * (lo + hi) * np.ones((n, k)))

    def value(a):
        return hamiltonian_values(spec, t, x, m, lprime, z, a)

    def grad(a, h=1e-6):
        g = np.zeros_like(a)
        for i in range(k):
            e = np.zeros(k)
            e[i] = h
            up, down = box.clamp(a + e), box.clamp(a - e)
            width = up[:, i] - down[:, i]
            safe = width > 0
            g[safe, i] = (value(up) - value(down))[safe] / width[safe]
        return g

    hv = value(a)
    for _ in range(max_iter):
        g = grad(a)
        step = np.ones(n)
        moved = np.zeros(n, dtype=bool)
        gain = np.zeros(n)
        for _ in range(40):
            trial = box.clamp(a + step[:, None] * g)
            ht = value(trial)
            ok = ht >= hv + 1e-4 * np.sum(g * (trial - a), axis=1)
            accept = ok & ~moved
            gain = np.where(accept, ht - hv, gain)
            a = np.where(accept[:, None], trial, a)
            hv = np.where(accept, ht, hv)
            moved |= ok
            step = np.where(moved, step, step * 0.5)
            if moved.all():
                break
        if np.max(np.abs(gain)) < tol:
            break
    return a
