"""Discrete inner products.

Three layers: the plain quadrature L2 product on a mesh, the data semi-inner
product <G1, G2> = (1/N) sum_j (G1*f_j, G2*f_j)_L2 induced by a set of
forcings (a seminorm: kernels acting identically on the data span are
indistinguishable), and the correlation field that factors atom scoring into
one dense table independent of the dictionary. Sums run through numpy, whose
reductions use pairwise accumulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Mesh


@dataclass(frozen=True, eq=False)
class FieldSet:
    """N functions sampled on a shared mesh; row j holds function j."""

    values: np.ndarray  # (N, m)
    mesh: Mesh

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"field values must be 2-D (N, m), got shape {values.shape}")
        if values.shape[1] != self.mesh.node_count:
            raise ValueError(
                f"fields have {values.shape[1]} columns but mesh has {self.mesh.node_count} nodes"
            )
        if values.shape[0] == 0:
            raise ValueError("field set must hold at least one function")
        if not np.isfinite(values).all():
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class CorrelationField:
    """Dense scoring table M with the 1/N data factor baked in (kept in scale)."""

    values: np.ndarray  # (m_out, m_in)
    scale: float


def l2_inner(u, v, mesh: Mesh) -> float:
    """Quadrature L2 inner product of two node vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != (mesh.node_count,) or v.shape != (mesh.node_count,):
        raise ValueError(
            f"l2_inner needs two length-{mesh.node_count} vectors, got {u.shape} and {v.shape}"
        )
    return float(np.sum(mesh.weights * u * v))


def l2_norm(u, mesh: Mesh) -> float:
    return float(np.sqrt(max(l2_inner(u, u, mesh), 0.0)))


def kernel_apply(table: np.ndarray, f, mesh_in: Mesh) -> np.ndarray:
    """Apply the discrete kernel operator: (G*f)(x_s) = sum_t w_t G[s,t] f(y_t).

    f may be one vector (m_in,) or a batch (N, m_in); the output matches.
    """
    table = np.asarray(table, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if table.ndim != 2 or table.shape[1] != mesh_in.node_count:
        raise ValueError(
            f"kernel table must be (m_out, {mesh_in.node_count}), got {table.shape}"
        )
    if f.shape[-1] != mesh_in.node_count:
        raise ValueError(f"forcing has {f.shape[-1]} values but mesh has {mesh_in.node_count} nodes")
    return (f * mesh_in.weights) @ table.T


def semi_inner(g1: np.ndarray, g2: np.ndarray, forcings: FieldSet, output_mesh: Mesh) -> float:
    """Data semi-inner product of two kernel tables (m_out, m_in)."""
    u1 = kernel_apply(g1, forcings.values, forcings.mesh)
    u2 = kernel_apply(g2, forcings.values, forcings.mesh)
    if u1.shape[1] != output_mesh.node_count:
        raise ValueError("kernel tables do not match the output mesh")
    return float(np.sum((u1 * u2) @ output_mesh.weights) / len(forcings))


def semi_norm(g: np.ndarray, forcings: FieldSet, output_mesh: Mesh) -> float:
    return float(np.sqrt(max(semi_inner(g, g, forcings, output_mesh), 0.0)))


def correlation_field(residuals: FieldSet, forcings: FieldSet) -> CorrelationField:
    """Scoring table M[s,t] = (1/N) w_out[s] w_in[t] sum_j r_j(x_s) f_j(y_t).

    For any kernel table g, sum(g * M) equals the semi-inner product of g with
    the residual fields, so one table scores a whole dictionary.
    """
    if len(residuals) != len(forcings):
        raise ValueError(
            f"residual set has {len(residuals)} functions, forcings {len(forcings)}"
        )
    n = len(forcings)
    m = residuals.values.T @ forcings.values
    m *= residuals.mesh.weights[:, None]
    m *= forcings.mesh.weights[None, :]
    m /= n
    return CorrelationField(m, 1.0 / n)
