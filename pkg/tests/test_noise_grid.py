from __future__ import annotations

import csv
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from absorbmfg.errors import UnderResolvedGridError
from absorbmfg.noise_grid import (
    coarse_increments,
    conditional_atoms,
    discretize_path,
    project,
    quantize_index,
)

levels = st.integers(0, 3)


def test_project_examples():
    assert project(0.0, 1) == 0.0
    assert project(0.3, 1) == 0.25
    assert project(17.0, 1) == 4.0
    assert project(-17.0, 1) == -4.0
    np.testing.assert_array_equal(project([0.3, -0.3], 1), [0.25, -0.5])


def test_discretize_path_examples():
    key, v = discretize_path([0.0, 0.0, 0.0], 2)
    assert key == (0, 0, 0)
    np.testing.assert_array_equal(v[:, 0], 0.0)
    key, v = discretize_path([0.3, -0.6], 1)
    np.testing.assert_allclose(v[:, 0], [0.0, 0.25, -0.5])
    assert key == (1, -3)


@given(st.floats(-50, 50), levels)
def test_project_idempotent_and_error_bound(x, n):
    p = project(x, n)
    if abs(x) <= 4.0**n:
        assert project(p, n) == p
        assert 0.0 <= x - p <= 4.0**-n
    else:
        assert p == 4.0**n * np.sign(x)


@given(st.floats(-50, 50), levels)
def test_index_matches_projection(x, n):
    assert quantize_index(x, n) * 4.0**-n == project(x, n)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_representative_tracks_path(n, seed):
    """|V_{t_i} - W0_{t_i}| <= i 4^-n, hence <= 2^-n on 2^n coarse steps (coupled schedule)."""
    rng = np.random.default_rng(seed)
    inc = rng.normal(scale=np.sqrt(1.0 / 2**n), size=(2**n, 1))
    _, v = discretize_path(inc, n)
    w = np.concatenate([[0.0], np.cumsum(inc[:, 0])])
    if np.max(np.abs(w)) <= 4.0**n - 1:
        i = np.arange(2**n + 1)
        assert np.all(np.abs(v[:, 0] - w) <= i * 4.0**-n + 1e-12)
        assert np.max(np.abs(v[:, 0] - w)) <= 2.0**-n + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_assignment_depends_on_coarse_increments_only(seed):
    rng = np.random.default_rng(seed)
    sample = rng.normal(scale=0.1, size=(300, 8, 1))
    grid = conditional_atoms(sample, 2, 1, 1.0, min_occupancy=1)
    a = rng.normal(scale=0.1, size=(8, 1))
    # reshuffle the fine increments inside each coarse interval
    b = a.reshape(4, 2, 1)[:, ::-1].reshape(8, 1)
    np.testing.assert_allclose(coarse_increments(a, 2), coarse_increments(b, 2))
    assert grid.key_of(a) == grid.key_of(b)
    assert grid.assign(a) == grid.assign(b)


def test_gaussian_cell_masses():
    rng = np.random.default_rng(7)
    n_paths, horizon = 10_000, 1.0
    fine = rng.standard_normal((n_paths, 10, 1)) * np.sqrt(horizon / 10)
    grid = conditional_atoms(fine, 1, 1, horizon, min_occupancy=1)
    sd = np.sqrt(horizon / 2)
    checked = 0
    for k in range(grid.n_atoms):
        (key,) = grid.keys[k]
        p = 1.0
        for i in key:
            p *= norm.cdf((i + 1) / 4, scale=sd) - norm.cdf(i / 4, scale=sd)
        if p < 0.005:
            continue
        se = np.sqrt(p * (1 - p) / n_paths)
        assert abs(grid.probabilities[k] - p) <= 3 * se + 1e-12
        checked += 1
    assert checked > 20
    assert grid.probabilities.sum() == pytest.approx(1.0)


def test_one_path_gives_one_atom():
    grid = conditional_atoms(np.full((1, 4, 1), 0.1), 1, 1, 1.0, min_occupancy=1)
    assert grid.n_atoms == 1
    assert grid.probabilities[0] == 1.0


def test_symmetric_sample_has_mirror_atoms():
    rng = np.random.default_rng(3)
    half = rng.standard_normal((2000, 4, 1)) * 0.5
    grid = conditional_atoms(np.concatenate([half, -half]), 1, 1, 1.0, min_occupancy=1)  # no clamping at |x| <= 4
    prob = {keys[0]: p for keys, p in zip(grid.keys, grid.probabilities)}
    # floor quantization maps cell i of x to cell -i-1 of -x (for x off the cell edges)
    for key, p in prob.items():
        mirror = tuple(-i - 1 for i in key)
        assert prob[mirror] == pytest.approx(p)


def test_atom_count_bounded_by_occupied_cells(caplog):
    rng = np.random.default_rng(4)
    fine = rng.standard_normal((3000, 100, 1)) * np.sqrt(0.01)
    grid = conditional_atoms(fine, 2, 1, 1.0, min_occupancy=1)
    idx = quantize_index(coarse_increments(fine, 2), 1)
    cells = len(np.unique(idx))
    assert grid.n_atoms <= cells**4
    assert grid.n_atoms == len({tuple(r.ravel()) for r in idx})


def test_merging_preserves_mass_and_occupancy(caplog):
    rng = np.random.default_rng(5)
    fine = rng.standard_normal((1000, 100, 1)) * 0.1
    with caplog.at_level("INFO", logger="absorbmfg.noise_grid"):
        grid = conditional_atoms(fine, 2, 1, 1.0, min_occupancy=125)
    assert "merged" in caplog.text
    counts = [sum(c) for c in grid.counts]
    assert sum(counts) == 1000
    assert min(counts) >= 125
    assert np.all(grid.probabilities > 0)
    assert np.all(np.diff(grid.probabilities) <= 0)
    # every sample path lands in the atom holding its key
    for row in fine[:50]:
        k = grid.assign(row)
        assert grid.key_of(row) in grid.keys[k]


def test_under_resolved_sample():
    with pytest.raises(UnderResolvedGridError):
        conditional_atoms(np.zeros((10, 4, 1)), 1, 1, 1.0, min_occupancy=50)
    with pytest.raises(UnderResolvedGridError):
        conditional_atoms(np.zeros((0, 4, 1)), 1, 1, 1.0, min_occupancy=1)


def test_conditional_sampling_stays_in_cell():
    rng = np.random.default_rng(6)
    fine = rng.standard_normal((500, 20, 1)) * np.sqrt(0.05)
    grid = conditional_atoms(fine, 1, 1, 1.0, min_occupancy=1)
    key = grid.keys[0][0]
    draws = grid.sample_key_increments(key, 200, 20, rng)
    assert all(grid.key_of(d) == key for d in draws)
    atom_draws = grid.sample_atom_increments(3, 100, 20, rng)
    assert all(grid.assign(d) == 3 for d in atom_draws)


def test_conditional_sampling_matches_brownian_law():
    """Mixing key-conditioned draws over the empirical key law reproduces N(0, T) at T."""
    rng = np.random.default_rng(8)
    fine = rng.standard_normal((4000, 20, 1)) * np.sqrt(0.05)
    grid = conditional_atoms(fine, 1, 1, 1.0, min_occupancy=1)
    keys = [k for keys in grid.keys for k in keys]
    counts = np.array([c for cnts in grid.counts for c in cnts], dtype=float)
    pick = rng.choice(len(keys), size=4000, p=counts / counts.sum())
    ends = []
    for i, c in Counter(pick.tolist()).items():
        ends.append(grid.sample_key_increments(keys[i], c, 20, rng).sum(axis=1)[:, 0])
    ends = np.concatenate(ends)
    assert abs(ends.mean()) < 4 / np.sqrt(4000)
    assert ends.var() == pytest.approx(1.0, rel=0.08)


def test_prefix_weights():
    rng = np.random.default_rng(9)
    fine = rng.standard_normal((800, 8, 1)) * np.sqrt(1 / 8)
    grid = conditional_atoms(fine, 2, 0, 1.0, min_occupancy=100)
    assert grid.consistent_weights(()).sum() == 800
    key = grid.keys[0][0]
    w = grid.consistent_weights(key[:1])
    expected = sum(1 for r in fine if grid.key_of(r)[:1] == key[:1])
    assert w.sum() == expected


def test_atom_csv(tmp_path):
    rng = np.random.default_rng(10)
    grid = conditional_atoms(rng.standard_normal((300, 4, 1)), 1, 1, 1.0, min_occupancy=30)
    path = tmp_path / "atoms.csv"
    grid.to_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == grid.n_atoms
    assert sum(float(r["probability"]) for r in rows) == pytest.approx(1.0)
    assert set(rows[0]) == {"atom", "probability", "n_keys", "v0", "v1", "v2"}
