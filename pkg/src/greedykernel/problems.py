"""Benchmark kernels, Gaussian-process forcings, and dataset synthesis.

The analytic kernels double as evaluation oracles: datasets are synthesized
by pushing random smooth forcings through the discrete kernel operator, and
fits are later compared against the same kernel sampled on the mesh pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np
import scipy.linalg

from .dataio import DataSet, normalize_pairs
from .geometry import Mesh
from .products import FieldSet, kernel_apply

# Radii below this count as coincident for the singular log kernel.
LOGCOS_COINCIDENCE_TOL = 1e-12
LOGCOS_CLAMP = 1e-8

# GP factorization: eigenvalues below this fraction of the largest are zeroed
# so samples stay inside the numerically significant span of the covariance.
GP_EIGEN_CLIP = 1e-12
GP_MAX_JITTER = 1e-4


class GPGenerationError(RuntimeError):
    """The GP covariance could not be factorized."""


def poisson1d_green(x, y):
    """Green's function of -u'' on [0, 1] with zero boundary values."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_unit_interval(x, y)
    return np.where(x <= y, x * (y - 1.0), y * (x - 1.0))


def helmholtz1d_green(x, y, k_wave: float = 15.0):
    """Green's function of -u'' - k^2 u on [0, 1] with zero boundary values."""
    if abs(np.sin(k_wave)) < 1e-12:
        raise ValueError(f"k_wave={k_wave} is resonant (sin k = 0); kernel undefined")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_unit_interval(x, y)
    scale = 1.0 / (k_wave * np.sin(k_wave))
    upper = np.sin(k_wave * x) * np.sin(k_wave * (y - 1.0))
    lower = np.sin(k_wave * y) * np.sin(k_wave * (x - 1.0))
    return scale * np.where(x >= y, upper, lower)


def _check_unit_interval(x, y):
    for name, values in (("x", x), ("y", y)):
        if np.any(values < -1e-12) or np.any(values > 1.0 + 1e-12):
            raise ValueError(f"{name} outside [0, 1]: this kernel lives on the unit interval")


def _pair_distance(x, y):
    """||x - y||. Inputs of ndim <= 1 are scalar coordinate batches; for
    higher-rank inputs the trailing axis holds coordinates."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim <= 1 and y.ndim <= 1:
        return np.abs(x - y)
    diff = x - y
    return np.sqrt(np.sum(diff * diff, axis=-1))


def cosine_kernel(x, y, wave: float = 1.0):
    """Smooth oscillatory kernel cos(wave * pi * ||x - y||)."""
    return np.cos(wave * np.pi * _pair_distance(x, y))


def logcos_kernel(x, y):
    """Weakly singular kernel log(||x - y||) cos(2 pi ||x - y||), clamped.

    At coincidence (distance below 1e-12) the value is the clamp log(1e-8).
    """
    r = _pair_distance(x, y)
    scalar = np.ndim(r) == 0
    r = np.atleast_1d(r)
    safe = np.where(r < LOGCOS_COINCIDENCE_TOL, 1.0, r)
    out = np.where(r < LOGCOS_COINCIDENCE_TOL,
                   np.log(LOGCOS_CLAMP),
                   np.log(safe) * np.cos(2.0 * np.pi * safe))
    return float(out[0]) if scalar else out


def _xlogx(t):
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    nonzero = t != 0.0
    out[nonzero] = t[nonzero] * np.log(np.abs(t[nonzero]))
    return out


def log_kernel_discrete(x, y_k, h: float):
    """Cell average of log|x - y| over a width-h cell centered at y_k.

    Exact antiderivative form b log|b| - a log|a| - h with a = x - y_k - h/2,
    b = x - y_k + h/2 (0 log 0 = 0), which reduces to h log(h/2) - h at
    x = y_k and to the upwind/downwind branch forms away from the cell.
    """
    if h <= 0:
        raise ValueError(f"cell width h must be positive, got {h}")
    t = np.asarray(x, dtype=np.float64) - np.asarray(y_k, dtype=np.float64)
    scalar = np.ndim(t) == 0
    b = np.atleast_1d(t + 0.5 * h)
    a = np.atleast_1d(t - 0.5 * h)
    out = _xlogx(b) - _xlogx(a) - h
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class KernelOracle:
    """Named analytic kernel with parameters; evaluates on node arrays."""

    name: str
    dim: int
    params: dict = dataclass_field(default_factory=dict)

    def __post_init__(self):
        if self.name not in _ORACLES:
            raise ValueError(f"unknown kernel {self.name!r}; known: {sorted(_ORACLES)}")
        spec = _ORACLES[self.name]
        if spec.dims is not None and self.dim not in spec.dims:
            raise ValueError(f"kernel {self.name} supports dims {spec.dims}, got {self.dim}")
        unknown = set(self.params) - set(spec.defaults)
        if unknown:
            raise ValueError(f"kernel {self.name} does not take parameters {sorted(unknown)}")

    def evaluate(self, x, y):
        spec = _ORACLES[self.name]
        params = {**spec.defaults, **self.params}
        return spec.fn(x, y, **params)

    def row(self, x_node: np.ndarray, mesh_in: Mesh) -> np.ndarray:
        """G(x, .) sampled on the input mesh for one output node."""
        x = np.broadcast_to(np.atleast_1d(x_node), mesh_in.nodes.shape)
        if _ORACLES[self.name].scalar_coords:
            return np.asarray(self.evaluate(x[:, 0], mesh_in.nodes[:, 0]), dtype=np.float64)
        return np.asarray(self.evaluate(x, mesh_in.nodes), dtype=np.float64)

    def table(self, mesh_out: Mesh, mesh_in: Mesh, row_chunk: int = 512) -> np.ndarray:
        """Kernel samples on the mesh pair, shape (m_out, m_in), chunked rows."""
        out = np.empty((mesh_out.node_count, mesh_in.node_count))
        scalar_coords = _ORACLES[self.name].scalar_coords
        for start in range(0, mesh_out.node_count, row_chunk):
            stop = min(start + row_chunk, mesh_out.node_count)
            x = mesh_out.nodes[start:stop, None, :]
            y = mesh_in.nodes[None, :, :]
            if scalar_coords:
                out[start:stop] = self.evaluate(x[:, :, 0], y[:, :, 0])
            else:
                out[start:stop] = self.evaluate(x, y)
        return out


@dataclass(frozen=True)
class _OracleSpec:
    fn: object
    dims: tuple | None
    defaults: dict
    scalar_coords: bool  # 1-D kernels take plain coordinates; distance
    #                      kernels take (..., d) point arrays


_ORACLES = {
    "poisson1d": _OracleSpec(poisson1d_green, (1,), {}, True),
    "helmholtz1d": _OracleSpec(helmholtz1d_green, (1,), {"k_wave": 15.0}, True),
    "cosine": _OracleSpec(cosine_kernel, None, {"wave": 1.0}, False),
    "logcos": _OracleSpec(logcos_kernel, None, {}, False),
    "logdiscrete": _OracleSpec(log_kernel_discrete, (1,), {"h": 0.01}, True),
}


ORACLE_NAMES = tuple(_ORACLES)


def make_oracle(name: str, dim: int, **params) -> KernelOracle:
    return KernelOracle(name=name, dim=dim, params=params)


@dataclass
class GPConfig:
    """Squared-exponential Gaussian-process sampler settings."""

    length_scale: float
    variance: float = 1.0
    jitter: float = 1e-12
    seed: int = 0

    def __post_init__(self):
        if self.length_scale <= 0:
            raise ValueError(f"length_scale must be positive, got {self.length_scale}")
        if self.variance <= 0:
            raise ValueError(f"variance must be positive, got {self.variance}")
        if self.jitter <= 0:
            raise ValueError(f"jitter must be positive, got {self.jitter}")


def gp_covariance(mesh: Mesh, config: GPConfig) -> np.ndarray:
    """Dense covariance variance * exp(-||x - x'||^2 / (2 l^2)) + jitter * I."""
    sq_norms = np.sum(mesh.nodes**2, axis=1)
    sq_dist = sq_norms[:, None] + sq_norms[None, :] - 2.0 * (mesh.nodes @ mesh.nodes.T)
    np.maximum(sq_dist, 0.0, out=sq_dist)
    off_diag = sq_dist + np.diag(np.full(mesh.node_count, np.inf))
    if mesh.node_count > 1 and np.min(off_diag) < 1e-30:
        raise ValueError("mesh has coincident nodes; GP covariance would be singular")
    cov = config.variance * np.exp(-sq_dist / (2.0 * config.length_scale**2))
    cov[np.diag_indices_from(cov)] += config.jitter
    return cov


def _gp_factor(cov: np.ndarray) -> np.ndarray:
    lam, vectors = scipy.linalg.eigh(cov, check_finite=False)
    lam_max = float(lam[-1])
    lam = np.where(lam > GP_EIGEN_CLIP * lam_max, lam, 0.0)
    return vectors * np.sqrt(lam)


def sample_gp_forcings(mesh: Mesh, n_samples: int, config: GPConfig) -> FieldSet:
    """Draw n_samples zero-mean GP functions on mesh nodes, deterministic per seed.

    The covariance (plus jitter) is factorized by symmetric eigendecomposition
    with small eigenvalues zeroed; if the eigensolver fails to converge the
    jitter escalates tenfold up to 1e-4 before a generation error.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    jitter = config.jitter
    factor = None
    while True:
        try:
            factor = _gp_factor(gp_covariance(mesh, GPConfig(
                config.length_scale, config.variance, jitter, config.seed)))
            break
        except scipy.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > GP_MAX_JITTER:
                raise GPGenerationError(
                    f"GP covariance factorization failed up to jitter {GP_MAX_JITTER}"
                ) from None
    rng = np.random.default_rng(config.seed)
    draws = rng.standard_normal((mesh.node_count, n_samples))
    return FieldSet((factor @ draws).T, mesh)


def synthesize_dataset(oracle: KernelOracle, mesh_in: Mesh, mesh_out: Mesh,
                       n_samples: int, gp: GPConfig, split: tuple[int, int],
                       normalize: bool = True,
                       provenance: dict | None = None) -> tuple[DataSet, DataSet]:
    """Sample forcings, push them through the kernel, split train/test.

    The first split[0] samples become the training set, the next split[1] the
    test set; split must consume n_samples exactly.
    """
    train_count, test_count = split
    if train_count < 1 or test_count < 1:
        raise ValueError(f"bad split {split} (need at least one sample on each side)")
    if train_count + test_count != n_samples:
        raise ValueError(f"split {split} does not sum to n_samples={n_samples}")
    if oracle.dim != mesh_in.dim or oracle.dim != mesh_out.dim:
        raise ValueError(
            f"kernel {oracle.name} is {oracle.dim}-dimensional; meshes are "
            f"{mesh_in.dim}/{mesh_out.dim}"
        )
    forcings = sample_gp_forcings(mesh_in, n_samples, gp).values
    table = oracle.table(mesh_out, mesh_in)
    responses = kernel_apply(table, forcings, mesh_in)
    if normalize:
        forcings, responses = normalize_pairs(forcings, responses, mesh_in)
    provenance = dict(provenance or {})
    provenance.setdefault("problem", oracle.name)
    for key, value in oracle.params.items():
        provenance.setdefault(f"kernel_{key}", repr(value))
    provenance.setdefault("gp_length_scale", repr(gp.length_scale))
    provenance.setdefault("gp_variance", repr(gp.variance))
    provenance.setdefault("gp_seed", str(gp.seed))

    def build(rows: slice) -> DataSet:
        return DataSet(mesh_in, mesh_out,
                       FieldSet(forcings[rows], mesh_in),
                       FieldSet(responses[rows], mesh_out),
                       normalized=normalize, provenance=provenance)

    return build(slice(0, train_count)), build(slice(train_count, train_count + test_count))


def oracle_from_provenance(provenance: dict, dim: int) -> KernelOracle | None:
    """Rebuild the generating oracle from dataset provenance, if recorded."""
    name = provenance.get("problem")
    if name is None or name not in _ORACLES:
        return None
    params = {}
    for key, value in provenance.items():
        if key.startswith("kernel_"):
            params[key.removeprefix("kernel_")] = float(value)
    try:
        return KernelOracle(name=name, dim=dim, params=params)
    except ValueError:
        return None
