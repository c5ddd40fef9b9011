"""Error metrics, convergence-rate fits, and data-rank diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Mesh


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""


def relative_l2_solutions(predicted: np.ndarray, reference: np.ndarray, mesh: Mesh) -> float:
    """Mean over samples of ||u - u_ref|| / ||u_ref|| in the quadrature norm."""
    predicted = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    reference = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    if predicted.shape != reference.shape:
        raise MetricError(f"shape mismatch: {predicted.shape} vs {reference.shape}")
    if predicted.shape[1] != mesh.node_count:
        raise MetricError(f"{predicted.shape[1]} values per sample, mesh has {mesh.node_count} nodes")
    ref_norms = (reference * reference) @ mesh.weights
    if np.any(ref_norms == 0.0):
        bad = int(np.argmax(ref_norms == 0.0))
        raise MetricError(f"reference sample {bad} has zero norm; relative error undefined")
    diff = predicted - reference
    err_norms = (diff * diff) @ mesh.weights
    return float(np.mean(np.sqrt(err_norms / ref_norms)))


def relative_l2_kernel(table: np.ndarray, oracle, mesh_out: Mesh, mesh_in: Mesh) -> float:
    """||G_model - G|| / ||G|| over the product quadrature rule."""
    table = np.asarray(table, dtype=np.float64)
    reference = oracle.table(mesh_out, mesh_in) if hasattr(oracle, "table") else np.asarray(oracle)
    if table.shape != (mesh_out.node_count, mesh_in.node_count):
        raise MetricError(
            f"kernel table shape {table.shape} does not match meshes "
            f"({mesh_out.node_count}, {mesh_in.node_count})"
        )
    if reference.shape != table.shape:
        raise MetricError(f"reference table shape {reference.shape} != {table.shape}")
    diff = table - reference
    num = float(mesh_out.weights @ ((diff * diff) @ mesh_in.weights))
    den = float(mesh_out.weights @ ((reference * reference) @ mesh_in.weights))
    if den == 0.0:
        raise MetricError("reference kernel has zero norm; relative error undefined")
    return float(np.sqrt(num / den))


def pointwise_abs_error(predicted: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Node-wise absolute error field |u - u_ref|."""
    predicted = np.asarray(predicted, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if predicted.shape != reference.shape:
        raise MetricError(f"shape mismatch: {predicted.shape} vs {reference.shape}")
    return np.abs(predicted - reference)


@dataclass(frozen=True)
class RateFit:
    """Least-squares fit of log(metric) against log(n)."""

    slope: float
    intercept: float
    r_squared: float
    n_lo: int
    n_hi: int
    n_points: int


def fit_rate(n_values, metric_values, n_lo: int, n_hi: int) -> RateFit:
    """Fit metric ~ C * n^slope over the window [n_lo, n_hi].

    Only finite positive metric values inside the window enter the fit; fewer
    than 3 such points is an error.
    """
    n_values = np.asarray(n_values, dtype=np.float64).reshape(-1)
    metric_values = np.asarray(metric_values, dtype=np.float64).reshape(-1)
    if n_values.shape != metric_values.shape:
        raise MetricError(f"shape mismatch: {n_values.shape} vs {metric_values.shape}")
    if n_lo < 1 or n_hi < n_lo:
        raise MetricError(f"bad rate window [{n_lo}, {n_hi}]")
    keep = ((n_values >= n_lo) & (n_values <= n_hi)
            & np.isfinite(metric_values) & (metric_values > 0))
    if int(keep.sum()) < 3:
        raise MetricError(
            f"rate fit needs at least 3 positive points in [{n_lo}, {n_hi}], found {int(keep.sum())}"
        )
    log_n = np.log(n_values[keep])
    log_m = np.log(metric_values[keep])
    design = np.stack([log_n, np.ones_like(log_n)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(design, log_m, rcond=None)
    fitted = design @ [slope, intercept]
    ss_res = float(np.sum((log_m - fitted) ** 2))
    ss_tot = float(np.sum((log_m - log_m.mean()) ** 2))
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return RateFit(slope=float(slope), intercept=float(intercept), r_squared=r_squared,
                   n_lo=int(n_lo), n_hi=int(n_hi), n_points=int(keep.sum()))


def data_rank_diagnostic(values: np.ndarray, threshold_rel: float = 1e-8) -> tuple[np.ndarray, int]:
    """Singular values of a sample matrix and its effective rank.

    Effective rank counts singular values above threshold_rel * sigma_max.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise MetricError(f"need a non-empty 2-D sample matrix, got shape {values.shape}")
    singular = np.linalg.svd(values, compute_uv=False)
    if singular[0] == 0.0:
        return singular, 0
    return singular, int(np.sum(singular > threshold_rel * singular[0]))


def theoretical_rate(power: int, dim: int) -> float:
    """Dictionary approximation-rate exponent 1/2 + (2k + 1) / (2d)."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if power < 0:
        raise ValueError(f"power must be >= 0, got {power}")
    return 0.5 + (2 * power + 1) / (2 * dim)
