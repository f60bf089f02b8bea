"""Random flows of sub-probability measures, one flow per common-noise atom.

A flow for one atom is a finite mixture of *components*.  Each component is
a weighted particle cloud observed on the time grid: particle ``i`` carries
a weight and is counted in ``mu_t`` while it is alive.  Mixing two flows (the
damped fixed-point update) concatenates their components with scaled
mixture weights.  Old components can be *summarized*: their particle arrays
are dropped after the pairings with a fixed battery of test functions are
cached, which keeps memory bounded while leaving those pairings exact.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateAtomError, IncompatibleFlowError
from .kernel import smoothed_loss_derivative_path, smoothed_loss_path

__all__ = [
    "TestFunction",
    "Environment",
    "FlowComponent",
    "SubProbabilityFlow",
    "empirical_flow",
    "pair",
    "flow_distance",
    "default_battery",
    "mix_flows",
    "ONE",
]


@dataclass(frozen=True)
class TestFunction:
    """A named bounded function ``R^d -> R`` evaluated row-wise on ``(n, d)`` arrays."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x):
        return np.broadcast_to(np.asarray(self.fn(x), dtype=float), x.shape[:-1])


ONE = TestFunction("one", lambda x: np.ones(x.shape[:-1]))


def default_battery(model, radius: float | None = None) -> list[TestFunction]:
    """``{1, h, clip(x_i, -R, R) / R for each coordinate}``."""
    radius = model.battery_radius if radius is None else radius
    battery = [ONE, TestFunction("h", model.h)]
    for i in range(model.dim):
        battery.append(
            TestFunction(f"clip_x{i}", lambda x, i=i: np.clip(x[..., i], -radius, radius) / radius)
        )
    return battery


@dataclass
class Environment:
    """What the drift consumes from a flow, per grid time.

    Arrays have shape ``(M+1,)`` (one deterministic flow) or ``(n, M+1)``
    (a different flow per path).
    """

    m: np.ndarray       # <h, mu_t>
    mass: np.ndarray    # <1, mu_t>
    lprime: np.ndarray  # time derivative of the smoothed loss

    def at(self, j: int, n: int | None = None):
        vals = (self.m[..., j], self.mass[..., j], self.lprime[..., j])
        if n is None:
            return vals
        return tuple(np.broadcast_to(v, (n,)) for v in vals)

    def take(self, rows) -> "Environment":
        if self.m.ndim == 1:
            return self
        return Environment(self.m[rows], self.mass[rows], self.lprime[rows])

    @classmethod
    def from_traces(cls, model, m, mass) -> "Environment":
        mass = np.asarray(mass, dtype=float)
        l0 = mass[..., 0] if model.loss_prehistory else None
        lprime = smoothed_loss_derivative_path(mass, model.kernel, model.dt, l0=l0)
        return cls(np.asarray(m, dtype=float), mass, lprime)

    @classmethod
    def constant(cls, model, m: float, mass: float = 1.0) -> "Environment":
        n = model.n_steps + 1
        return cls.from_traces(model, np.full(n, float(m)), np.full(n, float(mass)))

    def smoothed_loss(self, model) -> np.ndarray:
        l0 = self.mass[..., 0] if model.loss_prehistory else None
        return smoothed_loss_path(self.mass, model.kernel, model.dt, l0=l0)


@dataclass
class FlowComponent:
    """One weighted particle cloud; ``particle_weights`` sum to 1 over the whole population."""

    weight: float
    states: np.ndarray | None          # (n, M+1, d) float32
    alive: np.ndarray | None           # (n, M+1) bool
    particle_weights: np.ndarray | None  # (n,)
    summary: dict = field(default_factory=dict)

    def pair_path(self, f) -> np.ndarray:
        name = getattr(f, "name", None)
        if name is not None and name in self.summary:
            return self.summary[name]
        if self.states is None:
            raise KeyError(f"component was summarized without test function {name!r}")
        if f is ONE:
            vals = self.particle_weights @ self.alive
        else:
            n, steps, d = self.states.shape
            fx = np.asarray(f(self.states.reshape(-1, d).astype(float)), dtype=float).reshape(n, steps)
            vals = self.particle_weights @ np.where(self.alive, fx, 0.0)
        if name is not None:
            self.summary[name] = vals
        return vals

    def summarize(self, battery: Sequence[TestFunction]) -> None:
        for f in battery:
            self.pair_path(f)
        self.states = self.alive = self.particle_weights = None


@dataclass
class SubProbabilityFlow:
    """Per-atom flows of sub-probabilities on a common time grid."""

    times: np.ndarray
    components: dict[int, list[FlowComponent]]

    @property
    def atoms(self) -> list[int]:
        return sorted(self.components)

    def pair_path(self, f, atom: int) -> np.ndarray:
        comps = self.components[atom]
        return sum(c.weight * c.pair_path(f) for c in comps)

    def mass(self, atom: int) -> np.ndarray:
        return self.pair_path(ONE, atom)

    def environment(self, atom: int, model) -> Environment:
        h = TestFunction("h", model.h)
        return Environment.from_traces(model, self.pair_path(h, atom), self.mass(atom))

    def summarize(self, battery: Sequence[TestFunction], keep_last: int = 1) -> None:
        """Drop particle arrays of all but the newest ``keep_last`` components per atom."""
        for comps in self.components.values():
            for c in comps[: max(len(comps) - keep_last, 0)]:
                if c.states is not None:
                    c.summarize(battery)

    def to_csv(self, path, battery: Sequence[TestFunction]) -> None:
        """One row per (atom, time): mass and each battery pairing."""
        names = [f.name for f in battery if f is not ONE]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["atom", "step", "time", "mass"] + [f"pair_{n}" for n in names])
            for atom in self.atoms:
                cols = [self.mass(atom)] + [self.pair_path(f, atom) for f in battery if f is not ONE]
                for j, t in enumerate(self.times):
                    writer.writerow([atom, j, repr(float(t))] + [repr(float(c[j])) for c in cols])


def empirical_flow(paths, times, atom_assignment=None, atoms=None, weights=None) -> SubProbabilityFlow:
    """Empirical sub-distribution of the paths not yet absorbed, one flow per atom.

    Within atom ``k`` each path gets weight ``1/N_k`` unless ``weights`` (for
    example Girsanov densities) are given, in which case weights are
    normalized to sum to one within the atom.
    """
    n = paths.n_paths
    if atom_assignment is None:
        assignment = np.zeros(n, dtype=np.int64)
    elif callable(atom_assignment):
        assignment = np.array([atom_assignment(i) for i in range(n)], dtype=np.int64)
    else:
        assignment = np.asarray(atom_assignment, dtype=np.int64)
    atoms = sorted(set(assignment.tolist())) if atoms is None else list(atoms)
    alive = paths.alive_mask()
    comps: dict[int, list[FlowComponent]] = {}
    for atom in atoms:
        rows = np.flatnonzero(assignment == atom)
        if rows.size == 0:
            raise DegenerateAtomError(atom)
        if weights is None:
            w = np.full(rows.size, 1.0 / rows.size)
        else:
            w = np.asarray(weights, dtype=float)[rows]
            w = w / w.sum()
        comps[atom] = [
            FlowComponent(1.0, paths.values[rows].astype(np.float32), alive[rows], w)
        ]
    return SubProbabilityFlow(np.asarray(times, dtype=float), comps)


def pair(f, flow: SubProbabilityFlow, atom: int, j: int) -> float:
    """``<f, mu_{t_j}>`` for the flow of ``atom``."""
    return float(flow.pair_path(f, atom)[j])


def _check_compatible(a: SubProbabilityFlow, b: SubProbabilityFlow) -> None:
    if a.times.shape != b.times.shape or not np.allclose(a.times, b.times):
        raise IncompatibleFlowError("flows live on different time grids")
    if a.atoms != b.atoms:
        raise IncompatibleFlowError(f"flows have different atoms: {a.atoms} vs {b.atoms}")


def flow_distance(a: SubProbabilityFlow, b: SubProbabilityFlow, battery: Sequence) -> float:
    """Max over atoms, grid times and battery functions of ``|<g, mu^a_t> - <g, mu^b_t>|``."""
    _check_compatible(a, b)
    worst = 0.0
    for atom in a.atoms:
        for g in battery:
            gap = np.max(np.abs(a.pair_path(g, atom) - b.pair_path(g, atom)))
            worst = max(worst, float(gap))
    return worst


def mix_flows(old: SubProbabilityFlow, new: SubProbabilityFlow, rho: float) -> SubProbabilityFlow:
    """Mixture ``(1 - rho) old + rho new`` as a weighted union of particle clouds."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"damping must lie in (0, 1], got {rho}")
    _check_compatible(old, new)
    if rho == 1.0:
        return new
    comps = {}
    for atom in old.atoms:
        comps[atom] = [
            FlowComponent((1.0 - rho) * c.weight, c.states, c.alive, c.particle_weights, c.summary)
            for c in old.components[atom]
        ] + [
            FlowComponent(rho * c.weight, c.states, c.alive, c.particle_weights, c.summary)
            for c in new.components[atom]
        ]
    return SubProbabilityFlow(old.times, comps)
