"""Random ridge dictionaries: seeding, angles, pairing, evaluation."""

import numpy as np
import pytest

from greedykernel.dictionary import (Atom, RandomDictionary, derive_seed, evaluate_atom,
                                     evaluate_atoms, hypersphere_map, inject_atoms,
                                     ridge_values, sample_dictionary)
from greedykernel.geometry import BiasBounds, uniform_grid_1d


def test_derive_seed_is_deterministic_and_order_sensitive():
    assert derive_seed(3, 5) == derive_seed(3, 5)
    assert derive_seed(3, 5) != derive_seed(5, 3)
    assert derive_seed(0) != derive_seed(1)
    assert 0 <= derive_seed(123456789, 42) < 2**64
    # negative parts are masked into 64-bit values, not rejected
    assert derive_seed(-1) == derive_seed(2**64 - 1)


def test_hypersphere_map_2d_is_circle():
    for theta in (0.0, 0.3, np.pi / 2, np.pi, 5.5):
        w = hypersphere_map([theta])
        assert np.allclose(w, [np.cos(theta), np.sin(theta)])


def test_hypersphere_map_3d_matches_spherical_coordinates():
    phi = np.array([0.7, 4.0])
    w = hypersphere_map(phi)
    expect = [np.cos(0.7), np.sin(0.7) * np.cos(4.0), np.sin(0.7) * np.sin(4.0)]
    assert np.allclose(w, expect)
    assert np.isclose(np.linalg.norm(w), 1.0)


def test_hypersphere_map_batch_unit_norm():
    rng = np.random.default_rng(0)
    for d in (2, 3, 4, 6):
        angles = np.column_stack([
            rng.uniform(0, np.pi, size=(50, d - 2)).reshape(50, d - 2),
            rng.uniform(0, 2 * np.pi, size=(50, 1)),
        ]) if d > 2 else rng.uniform(0, 2 * np.pi, size=(50, 1))
        w = hypersphere_map(angles)
        assert w.shape == (50, d)
        assert np.allclose(np.linalg.norm(w, axis=1), 1.0, atol=1e-12)


def test_hypersphere_map_rejects_out_of_range():
    with pytest.raises(ValueError):
        hypersphere_map([[3.5, 1.0]])  # leading angle beyond pi
    with pytest.raises(ValueError):
        hypersphere_map([2 * np.pi])   # final angle must stay below 2*pi


def test_atom_validation():
    Atom(1.0, np.array([0.6, 0.8]), 0.1, 1)
    with pytest.raises(ValueError):
        Atom(1.0, np.array([0.6, 0.7]), 0.1, 1)  # not unit norm
    with pytest.raises(ValueError):
        Atom(2.0, np.array([1.0]), 0.1, 1)       # sign must be +-1
    with pytest.raises(ValueError):
        Atom(1.0, np.array([1.0]), 0.1, -1)      # negative power


def test_sample_dictionary_emits_sign_pairs():
    bounds = BiasBounds(-2.0, 2.0)
    d = sample_dictionary(3, 1, bounds, 32, seed=11)
    assert len(d) == 64 and d.n_samples == 32 and d.dim == 3
    assert np.array_equal(d.signs[0::2], np.ones(32))
    assert np.array_equal(d.signs[1::2], -np.ones(32))
    # entries 2i and 2i+1 share direction and bias
    assert np.array_equal(d.directions[0::2], d.directions[1::2])
    assert np.array_equal(d.biases[0::2], d.biases[1::2])
    assert np.allclose(np.linalg.norm(d.directions, axis=1), 1.0, atol=1e-12)
    assert np.all(d.biases >= -2.0) and np.all(d.biases <= 2.0)


def test_sample_dictionary_is_seed_deterministic():
    bounds = BiasBounds(-1.0, 1.0)
    a = sample_dictionary(2, 1, bounds, 16, seed=5)
    b = sample_dictionary(2, 1, bounds, 16, seed=5)
    c = sample_dictionary(2, 1, bounds, 16, seed=6)
    assert np.array_equal(a.directions, b.directions)
    assert np.array_equal(a.biases, b.biases)
    assert not np.array_equal(a.biases, c.biases)


def test_sample_dictionary_1d_directions_are_plus_one():
    d = sample_dictionary(1, 1, BiasBounds(-1.0, 1.0), 8, seed=0)
    assert np.array_equal(d.directions, np.ones((16, 1)))
    # reflections come from the sign channel instead
    assert set(d.signs.tolist()) == {1.0, -1.0}


def test_sample_dictionary_angle_ranges():
    d = sample_dictionary(4, 1, BiasBounds(-1.0, 1.0), 4000, seed=9)
    w = d.directions[0::2]
    # first coordinate = cos(phi_1) with phi_1 in [0, pi]: both signs appear
    assert (w[:, 0] > 0).any() and (w[:, 0] < 0).any()
    # last two coordinates share sin(phi_1) sin(phi_2) >= 0 factors only via
    # the final angle in [0, 2 pi): all four sign quadrants appear
    quadrants = {(sx, sy) for sx, sy in zip(np.sign(w[:, 2]), np.sign(w[:, 3]))}
    assert {(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)} <= quadrants


def test_ridge_values_relu_powers():
    nodes = np.array([[-1.0], [0.0], [0.5], [2.0]])
    directions = np.array([[1.0]])
    biases = np.array([0.0])
    # k = 1: plain ReLU
    v1 = ridge_values(directions, biases, None, 1, nodes)
    assert np.allclose(v1, [[0.0, 0.0, 0.5, 2.0]])
    # k = 2: squared ReLU
    v2 = ridge_values(directions, biases, None, 2, nodes)
    assert np.allclose(v2, [[0.0, 0.0, 0.25, 4.0]])
    # k = 0: indicator with 0^0 = 0 at the hinge
    v0 = ridge_values(directions, biases, None, 0, nodes)
    assert np.allclose(v0, [[0.0, 0.0, 1.0, 1.0]])


def test_ridge_values_signs_and_geometry():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    directions = np.array([[1.0, 0.0], [0.0, 1.0]])
    biases = np.array([-0.5, 0.25])
    signs = np.array([1.0, -1.0])
    table = ridge_values(directions, biases, signs, 1, nodes)
    assert np.allclose(table[0], [0.0, 0.5, 0.0])
    assert np.allclose(table[1], [-0.25, -0.25, -1.25])


def test_evaluate_atom_matches_table():
    mesh = uniform_grid_1d(0.0, 1.0, 7)
    d = sample_dictionary(1, 2, BiasBounds(-1.0, 1.0), 5, seed=3)
    table = evaluate_atoms(d, mesh)
    assert table.shape == (10, 7)
    for i in (0, 3, 9):
        assert np.allclose(table[i], evaluate_atom(d.atom(i), mesh.nodes))
    # sign pairing shows up as exact negation of rows
    assert np.array_equal(table[0::2], -table[1::2])


def test_inject_atoms_prepends_mirror_pairs():
    base = sample_dictionary(2, 1, BiasBounds(-1.0, 1.0), 4, seed=1)
    planted = Atom(-1.0, np.array([0.0, 1.0]), 0.25, 1)
    merged = inject_atoms(base, [planted])
    assert len(merged) == len(base) + 2
    assert merged.n_samples == base.n_samples + 1
    assert merged.signs[0] == -1.0 and merged.signs[1] == 1.0
    assert np.allclose(merged.directions[0], planted.direction)
    assert merged.biases[0] == planted.bias
    assert np.array_equal(merged.directions[2:], base.directions)
    with pytest.raises(ValueError):
        inject_atoms(base, [Atom(1.0, np.array([1.0]), 0.0, 1)])  # dim mismatch
    with pytest.raises(ValueError):
        inject_atoms(base, [Atom(1.0, np.array([0.0, 1.0]), 0.0, 2)])  # power mismatch
