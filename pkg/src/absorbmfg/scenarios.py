"""Small reference models used by oracle tests and the decoupled fixed-point check."""
from __future__ import annotations

import numpy as np

from .dynamics import ControlBox, Domain, StateModel
from .kernel import bump_kernel

__all__ = ["brownian_model", "decoupled_model"]


def brownian_model(
    dim: int = 1,
    sigma: float = 1.0,
    sigma0: float = 0.0,
    x0: float = 0.0,
    lower=-np.inf,
    upper=np.inf,
    terminal=None,
    running_cost: float = 0.0,
    cost: float = 1.0,
    control_bounds=(-1.0, 1.0),
    drift: float = 0.0,
    horizon: float = 1.0,
    n_steps: int = 50,
    epsilon: float = 0.1,
    x0_spread: float = 0.0,
) -> StateModel:
    """``dX = (drift + a) dt + sigma dW + sigma0 dW0`` in a box, no mean-field coupling.

    ``terminal`` defaults to ``G(t, x) = x_0``.  ``f = running_cost - cost |a|^2``.
    """
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (dim,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (dim,))
    terminal = terminal or (lambda t, x: np.asarray(x, dtype=float)[..., 0])
    b2 = np.zeros((dim, 1))
    b2[0, 0] = 1.0
    sig0 = np.zeros((dim, 1))
    sig0[0, 0] = sigma0

    def initial(n, rng):
        base = np.full((n, dim), float(x0))
        if x0_spread:
            base += x0_spread * rng.uniform(-1.0, 1.0, size=(n, dim))
        return base

    return StateModel(
        name="brownian",
        dim=dim,
        b1=lambda t, x, m: np.full_like(x, drift) * np.eye(dim)[0],
        b2=lambda t: b2,
        h=lambda x: np.ones(x.shape[:-1]),
        eta=lambda t: np.zeros(dim),
        sigma=sigma * np.eye(dim),
        sigma0=sig0,
        f=lambda t, x, m, a: running_cost - cost * np.sum(np.asarray(a) ** 2, axis=-1),
        G=terminal,
        domain=Domain.box(lower, upper),
        controls=ControlBox((float(control_bounds[0]),), (float(control_bounds[1]),)),
        initial=initial,
        kernel=bump_kernel(epsilon),
        horizon=horizon,
        n_steps=n_steps,
        quadratic_cost=cost if cost > 0 else None,
    )


def decoupled_model(n_steps: int = 50, horizon: float = 1.0) -> StateModel:
    """Absorbed Brownian motion with ``A = {0}``, ``eta = 0`` and no dependence on ``m``.

    Its best response and controlled law ignore the flow, so the fixed-point
    map is constant.
    """
    return brownian_model(
        dim=2,
        sigma=0.5,
        sigma0=0.3,
        x0=1.0,
        lower=0.0,
        control_bounds=(0.0, 0.0),
        cost=1.0,
        terminal=lambda t, x: np.minimum(np.maximum(x[..., 0], 0.0), 2.0),
        n_steps=n_steps,
        horizon=horizon,
        x0_spread=0.3,
    )
