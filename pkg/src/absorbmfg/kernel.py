"""Compactly supported smoothing kernels and the smoothed loss process.

The loss ``L`` is the surviving mass of a population, stored as a
right-continuous step function on a uniform time grid (``L[j]`` holds on
``[t_j, t_{j+1})``).  Its smoothed version is

    Lhat_t = int_0^t k(t - s) L_s ds

and, because ``L`` is piecewise constant, both ``Lhat`` and its time
derivative reduce to sums over grid cells of kernel-CDF / kernel
differences.  The derivative is exact (the antiderivative of ``k'`` is
``k``); the kernel CDF is integrated per cell with Gauss-Legendre.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .errors import InvalidParameterError

__all__ = [
    "SmoothingKernel",
    "bump_kernel",
    "smoothed_loss",
    "smoothed_loss_derivative",
    "smoothed_loss_path",
    "smoothed_loss_derivative_path",
]

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


@dataclass(frozen=True)
class SmoothingKernel:
    """Bump kernel ``k(u) = exp(-1/(eps - u)) / c`` on ``[0, eps)``."""

    epsilon: float
    normalization: float
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        out = np.zeros_like(u)
        inside = (u >= 0.0) & (u < self.epsilon)
        gap = self.epsilon - u[inside]
        out[inside] = np.exp(-1.0 / gap) / self.normalization
        return out

    def derivative(self, u):
        """Analytic ``k'(u)``; zero outside ``[0, eps)``."""
        u = np.asarray(u, dtype=float)
        out = np.zeros_like(u)
        inside = (u >= 0.0) & (u < self.epsilon)
        gap = self.epsilon - u[inside]
        out[inside] = -np.exp(-1.0 / gap) / (gap * gap) / self.normalization
        return out

    @property
    def peak(self) -> float:
        """``k(0)``, the kernel maximum (the bump is decreasing on its support)."""
        return math.exp(-1.0 / self.epsilon) / self.normalization

    @property
    def derivative_bound(self) -> float:
        """Bound ``k(0) + int |k'|`` on ``|Lhat'|`` for any loss with values in [0, 1]."""
        # k is monotone decreasing on [0, eps), so int |k'| = k(0).
        return 2.0 * self.peak

    def cdf(self, u, pieces: int = 16):
        """``K(u) = int_0^u k``, composite 8-node Gauss-Legendre on ``[0, min(u, eps)]``."""
        u = np.clip(np.asarray(u, dtype=float), 0.0, self.epsilon)
        edges = u[..., None] * np.linspace(0.0, 1.0, pieces + 1)
        return self._interval_integral(edges[..., :-1], edges[..., 1:]).sum(axis=-1)

    def _interval_integral(self, lo, hi):
        lo = np.clip(lo, 0.0, self.epsilon)
        hi = np.clip(hi, 0.0, self.epsilon)
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        nodes = mid[..., None] + half[..., None] * _GL_NODES
        vals = self(nodes)
        return half * (vals @ _GL_WEIGHTS)


def bump_kernel(epsilon: float) -> SmoothingKernel:
    """Build the normalized bump kernel with support ``[0, epsilon]``."""
    if not np.isfinite(epsilon) or epsilon <= 0:
        raise InvalidParameterError(f"kernel support epsilon must be positive, got {epsilon!r}")
    c, _ = quad(
        lambda u: math.exp(-1.0 / (epsilon - u)) if u < epsilon else 0.0,
        0.0,
        epsilon,
        epsabs=0.0,
        epsrel=1e-13,
        limit=200,
    )
    return SmoothingKernel(float(epsilon), float(c))


def _check_time(t: float, horizon: float) -> None:
    if not (0.0 <= t <= horizon * (1 + 1e-12)):
        raise ValueError(f"time {t} outside [0, {horizon}]")


def _cells(loss, dt):
    loss = np.asarray(loss, dtype=float)
    starts = dt * np.arange(loss.size)
    return loss, starts, starts + dt


def smoothed_loss(loss, kernel: SmoothingKernel, t: float, dt: float, l0: float | None = None) -> float:
    """``int_0^t k(t - s) L_s ds`` for the step function ``loss`` on a grid of width ``dt``.

    With ``l0`` given, ``L`` is extended by the constant ``l0`` on ``s < 0``,
    so a population that never loses mass has a constant smoothed loss.
    """
    loss, starts, ends = _cells(loss, dt)
    _check_time(t, loss.size * dt)
    # cell [s_j, e_j) contributes L_j * (K(t - s_j) - K(t - e_j)), with K = 0 below 0
    lo = np.maximum(t - ends, 0.0)
    hi = np.maximum(t - starts, 0.0)
    val = float(loss @ kernel._interval_integral(lo, hi))
    if l0 is not None:
        val += l0 * (1.0 - float(kernel.cdf(t)))
    return val


def smoothed_loss_derivative(loss, kernel: SmoothingKernel, t: float, dt: float, l0: float | None = None) -> float:
    """Right time-derivative ``k(0) L_t + int_0^t k'(t - s) L_s ds`` of the smoothed loss."""
    loss, starts, ends = _cells(loss, dt)
    _check_time(t, loss.size * dt)
    active = starts <= t + 1e-12 * dt
    k_start = kernel(np.where(active, np.maximum(t - starts, 0.0), -1.0))
    k_end = kernel(np.where(t - ends >= -1e-12 * dt, np.maximum(t - ends, 0.0), -1.0))
    val = float(loss @ (k_start - k_end))
    if l0 is not None:
        val -= l0 * float(kernel(t))
    return val


def _cell_weights(kernel: SmoothingKernel, n_steps: int, dt: float, which: str) -> np.ndarray:
    """Matrix ``W[m, j]`` with ``Lhat(t_m) = sum_j W[m, j] L_j`` (or the derivative)."""
    key = (which, n_steps, round(dt, 15))
    cached = kernel._cache.get(key)
    if cached is not None:
        return cached
    lag = np.arange(n_steps + 1)[:, None] - np.arange(n_steps + 1)[None, :]  # m - j
    if which == "value":
        lo = np.maximum((lag - 1) * dt, 0.0)
        hi = np.maximum(lag * dt, 0.0)
        w = kernel._interval_integral(lo, hi)
        w[lag <= 0] = 0.0
    else:
        # cell j contributes k(t_m - t_j) - k(t_m - t_{j+1}); the current cell j = m gives k(0)
        k_at = kernel(np.where(lag >= 0, lag * dt, -1.0))
        k_next = kernel(np.where(lag >= 1, (lag - 1) * dt, -1.0))
        w = k_at - k_next
    kernel._cache[key] = w
    return w


def smoothed_loss_path(loss, kernel: SmoothingKernel, dt: float, l0: float | None = None) -> np.ndarray:
    """Smoothed loss at every grid time; ``loss`` may be ``(M+1,)`` or ``(n, M+1)``."""
    loss = np.asarray(loss, dtype=float)
    m = loss.shape[-1] - 1
    w = _cell_weights(kernel, m, dt, "value")
    out = loss @ w.T
    if l0 is not None:
        tail = 1.0 - kernel.cdf(dt * np.arange(m + 1))
        out = out + np.asarray(l0, dtype=float)[..., None] * tail
    return out


def smoothed_loss_derivative_path(loss, kernel: SmoothingKernel, dt: float, l0: float | None = None) -> np.ndarray:
    """Right derivative of the smoothed loss at every grid time (vectorized form)."""
    loss = np.asarray(loss, dtype=float)
    m = loss.shape[-1] - 1
    w = _cell_weights(kernel, m, dt, "derivative")
    out = loss @ w.T
    if l0 is not None:
        out = out - np.asarray(l0, dtype=float)[..., None] * kernel(dt * np.arange(m + 1))
    return out
