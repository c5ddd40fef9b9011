"""Randomized dictionaries of signed ReLU^k ridge atoms.

An atom is x -> sign * max(0, w.x + b)^k with w on the unit sphere and b in a
bias interval sized to the mesh. Dictionaries are drawn fresh each greedy
iteration: directions come from uniform hyperspherical angles, biases from
the uniform distribution on [c1, c2], and every draw is emitted with both
signs so maximizing the raw score equals maximizing |score| over unsigned
atoms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import BiasBounds, Mesh

_UINT64_MASK = (1 << 64) - 1


def derive_seed(*parts: int) -> int:
    """Deterministic 64-bit child seed from integer parts (order matters)."""
    entropy = [int(p) & _UINT64_MASK for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class Atom:
    """One signed ridge function sign * max(0, direction.x + bias)^power."""

    sign: float
    direction: np.ndarray
    bias: float
    power: int

    def __post_init__(self):
        direction = np.asarray(self.direction, dtype=np.float64).reshape(-1)
        if direction.size == 0:
            raise ValueError("atom direction must be non-empty")
        if abs(float(np.linalg.norm(direction)) - 1.0) > 1e-12:
            raise ValueError(f"atom direction must be unit-norm, got {np.linalg.norm(direction)}")
        if self.sign not in (-1.0, 1.0, -1, 1):
            raise ValueError(f"atom sign must be +-1, got {self.sign}")
        if int(self.power) < 0:
            raise ValueError(f"atom power must be >= 0, got {self.power}")
        direction.flags.writeable = False
        object.__setattr__(self, "direction", direction)
        object.__setattr__(self, "sign", float(self.sign))
        object.__setattr__(self, "bias", float(self.bias))
        object.__setattr__(self, "power", int(self.power))

    @property
    def dim(self) -> int:
        return self.direction.shape[0]


@dataclass(frozen=True, eq=False)
class RandomDictionary:
    """2 * n_samples signed atoms; entries 2i and 2i+1 share (w, b), signs +/-."""

    signs: np.ndarray       # (2 * n_samples,)
    directions: np.ndarray  # (2 * n_samples, dim)
    biases: np.ndarray      # (2 * n_samples,)
    power: int
    seed: int
    n_samples: int

    def __post_init__(self):
        if self.signs.shape[0] != 2 * self.n_samples:
            raise ValueError("dictionary must hold one +/- pair per sample")
        if self.directions.shape[0] != self.signs.shape[0] or self.biases.shape[0] != self.signs.shape[0]:
            raise ValueError("dictionary arrays disagree on atom count")

    def __len__(self) -> int:
        return self.signs.shape[0]

    @property
    def dim(self) -> int:
        return self.directions.shape[1]

    def atom(self, i: int) -> Atom:
        return Atom(float(self.signs[i]), self.directions[i], float(self.biases[i]), self.power)

    @property
    def atoms(self) -> list[Atom]:
        return [self.atom(i) for i in range(len(self))]


def hypersphere_map(phi) -> np.ndarray:
    """Map angles in [0, pi]^(d-2) x [0, 2pi) to a unit vector in R^d, d >= 2.

    Accepts one angle vector of length d-1 or a batch (n, d-1); always returns
    unit vectors (up to rounding).
    """
    phi = np.asarray(phi, dtype=np.float64)
    single = phi.ndim == 1
    phi = np.atleast_2d(phi)
    if phi.shape[1] < 1:
        raise ValueError("need at least one angle (output dim >= 2)")
    if phi.shape[1] >= 2 and (np.any(phi[:, :-1] < 0) or np.any(phi[:, :-1] > np.pi)):
        raise ValueError("leading angles must lie in [0, pi]")
    if np.any(phi[:, -1] < 0) or np.any(phi[:, -1] >= 2 * np.pi):
        raise ValueError("final angle must lie in [0, 2*pi)")
    n, d1 = phi.shape
    sines = np.cumprod(np.sin(phi), axis=1)          # sines[:, i] = prod_{j<=i} sin(phi_j)
    out = np.empty((n, d1 + 1))
    out[:, 0] = np.cos(phi[:, 0])
    if d1 > 1:
        out[:, 1:d1] = sines[:, :-1] * np.cos(phi[:, 1:])
    out[:, d1] = sines[:, -1]
    return out[0] if single else out


def sample_dictionary(dim: int, power: int, bounds: BiasBounds, n_samples: int, seed: int) -> RandomDictionary:
    """Draw n_samples (direction, bias) pairs uniformly; emit both signs each."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    if power < 0:
        raise ValueError(f"power must be >= 0, got {power}")
    rng = np.random.default_rng(int(seed) & _UINT64_MASK)
    if dim == 1:
        # 1-input convention: direction is +1, the +- sign supplies the reflection.
        directions = np.ones((n_samples, 1))
    else:
        phi = np.empty((n_samples, dim - 1))
        if dim > 2:
            phi[:, :-1] = rng.uniform(0.0, np.pi, size=(n_samples, dim - 2))
        phi[:, -1] = rng.uniform(0.0, 2 * np.pi, size=n_samples)
        directions = hypersphere_map(phi)
    biases = rng.uniform(bounds.c1, bounds.c2, size=n_samples)
    return RandomDictionary(
        signs=np.tile([1.0, -1.0], n_samples),
        directions=np.repeat(directions, 2, axis=0),
        biases=np.repeat(biases, 2),
        power=int(power),
        seed=int(seed) & _UINT64_MASK,
        n_samples=int(n_samples),
    )


def inject_atoms(dictionary: RandomDictionary, atoms: Sequence[Atom]) -> RandomDictionary:
    """Prepend given atoms (with their +/- mirrors) to a sampled dictionary."""
    if not atoms:
        return dictionary
    for atom in atoms:
        if atom.dim != dictionary.dim:
            raise ValueError(f"injected atom dim {atom.dim} != dictionary dim {dictionary.dim}")
        if atom.power != dictionary.power:
            raise ValueError("injected atom power differs from dictionary power")
    k = len(atoms)
    dirs = np.repeat(np.stack([a.direction for a in atoms]), 2, axis=0)
    biases = np.repeat([a.bias for a in atoms], 2)
    signs = np.concatenate([[a.sign, -a.sign] for a in atoms])
    return RandomDictionary(
        signs=np.concatenate([signs, dictionary.signs]),
        directions=np.vstack([dirs, dictionary.directions]),
        biases=np.concatenate([biases, dictionary.biases]),
        power=dictionary.power,
        seed=dictionary.seed,
        n_samples=dictionary.n_samples + k,
    )


def ridge_values(directions: np.ndarray, biases: np.ndarray, signs, power: int, nodes: np.ndarray) -> np.ndarray:
    """Evaluate ridge atoms on nodes; returns an (atoms, nodes) table.

    power 0 uses the convention max(0, t)^0 = 1 for t > 0 and 0 otherwise.
    """
    pre = directions @ nodes.T
    pre += np.asarray(biases, dtype=np.float64)[:, None]
    if power == 0:
        values = (pre > 0).astype(np.float64)
    else:
        np.maximum(pre, 0.0, out=pre)
        if power != 1:
            np.power(pre, power, out=pre)
        values = pre
    if signs is not None:
        values *= np.asarray(signs, dtype=np.float64)[:, None]
    return values


def evaluate_atoms(dictionary: RandomDictionary, mesh: Mesh) -> np.ndarray:
    """Table of all signed atom values on mesh nodes, shape (len(dict), m)."""
    if mesh.dim != dictionary.dim:
        raise ValueError(f"mesh dim {mesh.dim} != dictionary dim {dictionary.dim}")
    return ridge_values(dictionary.directions, dictionary.biases, dictionary.signs,
                        dictionary.power, mesh.nodes)


def evaluate_atom(atom: Atom, nodes: np.ndarray) -> np.ndarray:
    """Values of one atom on an (m, d) node array."""
    return ridge_values(atom.direction[None, :], np.array([atom.bias]),
                        np.array([atom.sign]), atom.power, nodes)[0]
