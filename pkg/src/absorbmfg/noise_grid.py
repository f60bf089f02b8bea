"""Finite discretization of the common noise into atoms.

A common-noise path is reduced to its increments over ``2**n_time`` coarse
intervals, each increment quantized componentwise by ``project`` at
resolution ``4**-n_quant``.  The tuple of quantized increments is the atom
key; the running sum of projected increments is the representative path.
The textbook schedule couples both levels (``n_time == n_quant == n``); they
are separate knobs here because the coupled atom count grows very fast.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from .errors import UnderResolvedGridError

logger = logging.getLogger(__name__)

__all__ = [
    "project",
    "quantize_index",
    "discretize_path",
    "CommonNoiseGrid",
    "conditional_atoms",
    "coarse_increments",
]


def quantize_index(x, n: int) -> np.ndarray:
    """Integer cell index ``i`` with ``project(x, n) == i * 4**-n``."""
    scale = 4.0**n
    x = np.asarray(x, dtype=float)
    idx = np.floor(scale * x)
    clamp = scale * scale  # 4**n on the value scale is 16**n cells
    idx = np.where(x > scale, clamp, idx)
    idx = np.where(x < -scale, -clamp, idx)
    return idx.astype(np.int64)


def project(x, n: int) -> np.ndarray:
    """Componentwise ``4**-n * floor(4**n x)`` inside ``[-4**n, 4**n]``, ``4**n sign(x)`` outside."""
    x = np.asarray(x, dtype=float)
    scale = 4.0**n
    inner = np.floor(scale * x) / scale
    return np.where(np.abs(x) <= scale, inner, scale * np.sign(x))


def discretize_path(increments, n: int) -> tuple[tuple[int, ...], np.ndarray]:
    """Quantize coarse increments ``(n_coarse, d0)``; return the atom key and the path ``v``.

    ``v[0] = 0`` and ``v[i] = v[i-1] + project(increment_i, n)``.
    """
    inc = np.asarray(increments, dtype=float)
    if inc.ndim == 1:
        inc = inc[:, None]
    idx = quantize_index(inc, n)
    v = np.zeros((inc.shape[0] + 1, inc.shape[1]))
    v[1:] = np.cumsum(idx / 4.0**n, axis=0)
    key = tuple(int(i) for i in idx.ravel())
    return key, v


def coarse_increments(fine_increments, n_time: int) -> np.ndarray:
    """Sum fine increments ``(..., M, d0)`` into ``2**n_time`` coarse increments."""
    fine = np.asarray(fine_increments, dtype=float)
    m = fine.shape[-2]
    n_coarse = 2**n_time
    if m % n_coarse:
        raise ValueError(f"{m} time steps do not split into {n_coarse} coarse intervals")
    shape = fine.shape[:-2] + (n_coarse, m // n_coarse, fine.shape[-1])
    return fine.reshape(shape).sum(axis=-2)


def _cell_bounds(idx: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    scale = 4.0**n
    clamp = scale * scale
    lo = idx / scale
    hi = (idx + 1) / scale
    lo = np.where(idx >= clamp, scale, lo)
    hi = np.where(idx >= clamp, np.inf, hi)
    lo = np.where(idx <= -clamp, -np.inf, lo)
    return lo, hi


@dataclass
class CommonNoiseGrid:
    """Atom table for a discretized common noise.

    ``keys[k]`` lists the quantized keys merged into atom ``k``; atoms are
    numbered by decreasing probability.  Keys never seen while building the
    grid are sent to the atom with the nearest representative path.
    """

    n_time: int
    n_quant: int
    horizon: float
    noise_dim: int
    keys: list[list[tuple[int, ...]]]
    counts: list[list[int]]
    representatives: np.ndarray  # (K, n_coarse + 1, d0)
    sample_size: int
    _lookup: dict = field(default_factory=dict, repr=False)
    _prefix_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._lookup = {key: k for k, members in enumerate(self.keys) for key in members}

    @property
    def n_coarse(self) -> int:
        return 2**self.n_time

    @property
    def n_atoms(self) -> int:
        return len(self.keys)

    @property
    def coarse_times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_coarse + 1)

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([sum(c) for c in self.counts], dtype=float) / self.sample_size

    def key_of(self, fine_increments) -> tuple[int, ...]:
        key, _ = discretize_path(
            coarse_increments(fine_increments, self.n_time), self.n_quant
        )
        return key

    def assign_key(self, key: tuple[int, ...]) -> int:
        k = self._lookup.get(key)
        if k is not None:
            return k
        idx = np.asarray(key, dtype=float).reshape(self.n_coarse, self.noise_dim)
        v = np.concatenate([np.zeros((1, self.noise_dim)), np.cumsum(idx / 4.0**self.n_quant, axis=0)])
        dist = ((self.representatives - v) ** 2).sum(axis=(1, 2))
        return int(np.argmin(dist))

    def assign(self, fine_increments) -> int:
        """Atom id of one common-noise path given its fine increments ``(M, d0)``."""
        return self.assign_key(self.key_of(fine_increments))

    def sample_key_increments(self, key, n_paths: int, n_steps: int, rng: np.random.Generator) -> np.ndarray:
        """Fine increments ``(n_paths, n_steps, d0)`` of Brownian paths conditioned on ``key``.

        Coarse increments are truncated normals on the quantization cell;
        the fine increments inside each coarse interval are a Brownian bridge.
        """
        n_coarse, d0 = self.n_coarse, self.noise_dim
        if n_steps % n_coarse:
            raise ValueError(f"{n_steps} time steps do not split into {n_coarse} coarse intervals")
        per = n_steps // n_coarse
        dt = self.horizon / n_steps
        sd = np.sqrt(self.horizon / n_coarse)
        idx = np.asarray(key, dtype=np.int64).reshape(n_coarse, d0)
        lo, hi = _cell_bounds(idx, self.n_quant)
        a = np.broadcast_to(lo / sd, (n_paths, n_coarse, d0))
        b = np.broadcast_to(hi / sd, (n_paths, n_coarse, d0))
        coarse = sd * truncnorm.rvs(a, b, size=(n_paths, n_coarse, d0), random_state=rng)
        fine = rng.standard_normal((n_paths, n_coarse, per, d0)) * np.sqrt(dt)
        fine += (coarse - fine.sum(axis=2))[:, :, None, :] / per
        return fine.reshape(n_paths, n_steps, d0)

    def sample_atom_increments(self, atom: int, n_paths: int, n_steps: int, rng: np.random.Generator) -> np.ndarray:
        """Fine common-noise increments conditioned on atom ``atom``.

        Member keys of a merged atom are drawn in proportion to their
        counts in the generating sample.
        """
        members = self.keys[atom]
        weights = np.asarray(self.counts[atom], dtype=float)
        which = rng.choice(len(members), size=n_paths, p=weights / weights.sum())
        out = np.empty((n_paths, n_steps, self.noise_dim))
        for m in np.unique(which):
            rows = np.flatnonzero(which == m)
            out[rows] = self.sample_key_increments(members[m], rows.size, n_steps, rng)
        return out

    def consistent_weights(self, prefix: tuple[int, ...]) -> np.ndarray:
        """Unnormalized weight of each atom given the quantized increments observed so far.

        Falls back to shorter prefixes when no member key matches.
        """
        hit = self._prefix_cache.get(prefix)
        if hit is None:
            hit = self._prefix_cache[prefix] = self._consistent_weights(prefix)
        return hit

    def _consistent_weights(self, prefix):
        n = len(prefix)
        while True:
            w = np.array(
                [sum(c for key, c in zip(keys, cnts) if key[:n] == prefix[:n])
                 for keys, cnts in zip(self.keys, self.counts)],
                dtype=float,
            )
            if w.sum() > 0 or n == 0:
                return w
            n -= self.noise_dim

    def to_csv(self, path) -> None:
        """Atom table: id, probability, member count, representative path values."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            n_rep = self.representatives.shape[1] * self.noise_dim
            writer.writerow(["atom", "probability", "n_keys"] + [f"v{i}" for i in range(n_rep)])
            for k, p in enumerate(self.probabilities):
                writer.writerow(
                    [k, repr(float(p)), len(self.keys[k])]
                    + [repr(float(v)) for v in self.representatives[k].ravel()]
                )


def conditional_atoms(
    fine_increments,
    n_time: int,
    n_quant: int | None = None,
    horizon: float = 1.0,
    min_occupancy: int = 50,
) -> CommonNoiseGrid:
    """Build the atom table from a sample of common-noise paths ``(n, M, d0)``.

    Atoms holding fewer than ``min_occupancy`` sample paths are merged,
    smallest first, into the atom with the nearest representative path.
    """
    n_quant = n_time if n_quant is None else n_quant
    fine = np.asarray(fine_increments, dtype=float)
    if fine.ndim == 2:
        fine = fine[:, :, None]
    n_sample = fine.shape[0]
    if n_sample == 0:
        raise UnderResolvedGridError("empty common-noise sample")
    if n_sample < min_occupancy:
        raise UnderResolvedGridError(
            f"{n_sample} sample paths cannot fill a single atom of minimum occupancy {min_occupancy}"
        )
    d0 = fine.shape[2]
    coarse = coarse_increments(fine, n_time)

    table: dict[tuple[int, ...], list] = {}
    for row in coarse:
        key, v = discretize_path(row, n_quant)
        entry = table.get(key)
        if entry is None:
            table[key] = [1, v]
        else:
            entry[0] += 1

    # each group: [member keys, member counts, representative]
    groups = [[[key], [cnt], v] for key, (cnt, v) in sorted(table.items())]
    n_merged = 0
    while len(groups) > 1:
        sizes = np.array([sum(g[1]) for g in groups])
        small = int(np.argmin(sizes))
        if sizes[small] >= min_occupancy:
            break
        reps = np.stack([g[2] for g in groups])
        dist = ((reps - reps[small]) ** 2).sum(axis=(1, 2))
        dist[small] = np.inf
        target = int(np.argmin(dist))
        g_small, g_target = groups[small], groups[target]
        g_target[0].extend(g_small[0])
        g_target[1].extend(g_small[1])
        del groups[small]
        n_merged += 1
    if n_merged:
        logger.info(
            "merged %d under-occupied atoms (minimum occupancy %d); %d atoms remain",
            n_merged, min_occupancy, len(groups),
        )

    groups.sort(key=lambda g: (-sum(g[1]), g[0][0]))
    return CommonNoiseGrid(
        n_time=n_time,
        n_quant=n_quant,
        horizon=horizon,
        noise_dim=d0,
        keys=[g[0] for g in groups],
        counts=[g[1] for g in groups],
        representatives=np.stack([g[2] for g in groups]),
        sample_size=n_sample,
    )
