"""Quadrature meshes for problem domains.

A mesh is the discrete stand-in for a domain: every integral in this library
is a weighted node sum. Weights follow the equal-weight Monte-Carlo rule
(volume / node count) even on structured grids, so structured and scattered
meshes go through identical code paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Product meshes are materialized node lists; cap them so a typo cannot
# allocate tens of gigabytes.
MAX_PRODUCT_NODES = 1 << 24

_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


class ResourceLimitError(RuntimeError):
    """A requested object would exceed a configured size cap."""


@dataclass(frozen=True)
class BiasBounds:
    """Admissible bias interval [c1, c2] for dictionary atoms."""

    c1: float
    c2: float

    def __post_init__(self):
        if not (np.isfinite(self.c1) and np.isfinite(self.c2)):
            raise ValueError("bias bounds must be finite")
        if self.c1 > self.c2:
            raise ValueError(f"bias bounds out of order: c1={self.c1} > c2={self.c2}")


@dataclass(frozen=True, eq=False)
class Mesh:
    """Quadrature nodes and weights over a d-dimensional domain."""

    nodes: np.ndarray    # (m, dim)
    weights: np.ndarray  # (m,)
    volume: float

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.float64)
        if nodes.ndim == 1:
            nodes = nodes.reshape(-1, 1)
        if nodes.ndim != 2 or nodes.shape[0] == 0 or nodes.shape[1] == 0:
            raise ValueError(f"mesh nodes must be a non-empty (m, dim) array, got shape {np.shape(self.nodes)}")
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if weights.shape[0] != nodes.shape[0]:
            raise ValueError(f"mesh has {nodes.shape[0]} nodes but {weights.shape[0]} weights")
        volume = float(self.volume)
        if not np.isfinite(nodes).all():
            raise ValueError("mesh nodes must be finite")
        if not np.isfinite(weights).all() or (weights < 0).any():
            raise ValueError("mesh weights must be finite and non-negative")
        if not np.isfinite(volume) or volume <= 0:
            raise ValueError(f"mesh volume must be positive, got {volume}")
        if abs(weights.sum() - volume) > 1e-12 * volume:
            raise ValueError(f"mesh weights sum to {weights.sum()!r}, expected volume {volume!r}")
        nodes.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "volume", volume)

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def node_count(self) -> int:
        return self.nodes.shape[0]


def mesh_from_points(points, volume: float, weights=None) -> Mesh:
    """Wrap an imported point cloud as a mesh; equal weights unless given."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points.reshape(-1, 1)
    if weights is None:
        weights = np.full(points.shape[0], float(volume) / points.shape[0])
    return Mesh(points, weights, volume)


def uniform_grid_1d(a: float, b: float, m: int) -> Mesh:
    """m equispaced nodes on [a, b] (endpoints included), equal weights (b-a)/m."""
    if not b > a:
        raise ValueError(f"need a < b, got [{a}, {b}]")
    if m < 2:
        raise ValueError(f"need at least 2 grid points, got {m}")
    nodes = np.linspace(a, b, m).reshape(-1, 1)
    return Mesh(nodes, np.full(m, (b - a) / m), b - a)


def cube_grid(points_per_axis: int, dim: int = 3, low: float = 0.0, high: float = 1.0) -> Mesh:
    """Tensor grid on [low, high]^dim with equal Monte-Carlo weights."""
    if points_per_axis < 2:
        raise ValueError("need at least 2 points per axis")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    axis = np.linspace(low, high, points_per_axis)
    grids = np.meshgrid(*([axis] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    volume = float((high - low) ** dim)
    return Mesh(nodes, np.full(nodes.shape[0], volume / nodes.shape[0]), volume)


def disk_mesh(m: int, radius: float = 1.0) -> Mesh:
    """Deterministic near-uniform point cloud on a disk (sunflower layout)."""
    if m < 1:
        raise ValueError("need at least one node")
    i = np.arange(m) + 0.5
    r = radius * np.sqrt(i / m)
    theta = i * _GOLDEN_ANGLE
    nodes = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    volume = float(np.pi * radius**2)
    return Mesh(nodes, np.full(m, volume / m), volume)


def product_mesh(mesh_x: Mesh, mesh_y: Mesh, max_nodes: int = MAX_PRODUCT_NODES) -> Mesh:
    """Mesh over the product domain; node (s, t) sits at row s * m_y + t.

    Weights are the products of the factors' weights, so the product rule
    integrates separable functions as the product of the 1-factor rules.
    """
    m = mesh_x.node_count * mesh_y.node_count
    if m > max_nodes:
        raise ResourceLimitError(
            f"product mesh would hold {m} nodes, above the cap of {max_nodes}"
        )
    nodes = np.hstack([
        np.repeat(mesh_x.nodes, mesh_y.node_count, axis=0),
        np.tile(mesh_y.nodes, (mesh_x.node_count, 1)),
    ])
    weights = np.outer(mesh_x.weights, mesh_y.weights).ravel()
    return Mesh(nodes, weights, mesh_x.volume * mesh_y.volume)


def bias_bounds(mesh: Mesh) -> BiasBounds:
    """Symmetric bias interval covering w.x for all nodes x and unit w."""
    rho = float(np.sqrt(np.max(np.sum(mesh.nodes**2, axis=1))))
    return BiasBounds(-rho, rho)


def pair_bias_bounds(mesh_out: Mesh, mesh_in: Mesh) -> BiasBounds:
    """bias_bounds of the product mesh, computed without materializing it."""
    rho_out = np.sqrt(np.max(np.sum(mesh_out.nodes**2, axis=1)))
    rho_in = np.sqrt(np.max(np.sum(mesh_in.nodes**2, axis=1)))
    rho = float(np.hypot(rho_out, rho_in))
    return BiasBounds(-rho, rho)
