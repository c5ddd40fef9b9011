"""Kernel estimation with 2d-input atoms under the data semi-inner product.

The learned kernel is a sum of ridge atoms over concatenated (output, input)
coordinates. Scoring uses the correlation-field factorization so each
iteration touches the dictionary through one dense table; the Gram system is
built from cached per-atom response fields u_hat[j, i] = g_i * f_j.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dataio import DataSet
from .dictionary import Atom, RandomDictionary, ridge_values
from .geometry import BiasBounds, Mesh, ResourceLimitError, pair_bias_bounds
from .greedy import (DictionaryConfig, FitTrace, GreedyModel, GreedyProblem,
                     _RowStack, evaluation_points, paired_scores, run_oga)
from .products import FieldSet, correlation_field

# Transient scoring buffers are chunked to stay under this many bytes.
SCORING_CHUNK_BYTES = 128 * 2**20


@dataclass
class KernelFitConfig:
    """Knobs for one kernel fit."""

    n_max: int
    dict_size: int = 512
    power: int = 1
    seed: int = 0
    normalized_scoring: bool = False
    eval_dense_until: int = 64
    eval_stride: int = 8
    cache_limit_bytes: int = 3 * 2**30

    def dictionary_config(self) -> DictionaryConfig:
        return DictionaryConfig(n_samples=self.dict_size, power=self.power,
                                normalized_scoring=self.normalized_scoring)

    def cadence(self) -> list[int]:
        return evaluation_points(self.n_max, self.eval_dense_until, self.eval_stride)


@dataclass
class KernelModel:
    """A fitted kernel expansion plus the meshes it was trained on."""

    model: GreedyModel
    output_mesh: Mesh
    input_mesh: Mesh

    @property
    def trace(self) -> FitTrace:
        return self.model.trace

    @property
    def status(self) -> str:
        return self.model.status


def _pair_table(directions: np.ndarray, biases: np.ndarray, signed_weights: np.ndarray,
                power: int, mesh_out: Mesh, mesh_in: Mesh) -> np.ndarray:
    """Weighted sum of pair atoms evaluated on the (out x in) node grid.

    Exploits the split w.z = w_x.x + w_y.y: per atom, an outer sum of two
    small projections replaces evaluation on the materialized product mesh.
    """
    d = mesh_out.dim
    a = mesh_out.nodes @ directions[:, :d].T            # (m_out, n)
    b = mesh_in.nodes @ directions[:, d:].T + biases    # (m_in, n)
    table = np.zeros((mesh_out.node_count, mesh_in.node_count))
    for i in range(directions.shape[0]):
        pre = a[:, i, None] + b[None, :, i]
        if power == 0:
            values = (pre > 0).astype(np.float64)
        else:
            np.maximum(pre, 0.0, out=pre)
            if power != 1:
                np.power(pre, power, out=pre)
            values = pre
        table += signed_weights[i] * values
    return table


def atom_pair_table(atom: Atom, mesh_out: Mesh, mesh_in: Mesh) -> np.ndarray:
    """One pair atom sampled on the (out x in) grid."""
    return _pair_table(atom.direction[None, :], np.array([atom.bias]),
                       np.array([atom.sign]), atom.power, mesh_out, mesh_in)


def evaluate_kernel(kernel_model: KernelModel,
                    mesh_out: Optional[Mesh] = None,
                    mesh_in: Optional[Mesh] = None) -> np.ndarray:
    """Kernel value table of the fitted expansion on a mesh pair."""
    mesh_out = kernel_model.output_mesh if mesh_out is None else mesh_out
    mesh_in = kernel_model.input_mesh if mesh_in is None else mesh_in
    model = kernel_model.model
    if model.dim != mesh_out.dim + mesh_in.dim:
        raise ValueError(
            f"model atoms take {model.dim} inputs, meshes supply {mesh_out.dim + mesh_in.dim}"
        )
    directions, biases, signed = model.atom_arrays()
    if directions.shape[0] == 0:
        return np.zeros((mesh_out.node_count, mesh_in.node_count))
    return _pair_table(directions, biases, signed, model.power, mesh_out, mesh_in)


def predict(kernel_model: KernelModel, forcings) -> np.ndarray:
    """Responses of the fitted kernel to forcings sampled on the input mesh."""
    from .products import kernel_apply
    table = evaluate_kernel(kernel_model)
    return kernel_apply(table, forcings, kernel_model.input_mesh)


class KernelProblem(GreedyProblem):
    """Greedy problem for the data semi-inner product over kernel tables."""

    def __init__(self, data: DataSet, config: KernelFitConfig):
        self.mesh_out = data.output_mesh
        self.mesh_in = data.input_mesh
        self.forcings = data.forcings.values
        self.responses = data.responses.values
        self.n_data = self.forcings.shape[0]
        self.w_out = self.mesh_out.weights
        self.w_in = self.mesh_in.weights
        self.forcings_weighted = self.forcings * self.w_in
        self.power = config.power
        self._normalized = config.normalized_scoring
        self._bounds = pair_bias_bounds(self.mesh_out, self.mesh_in)
        self.residuals = self.responses.copy()

        row_bytes = 8 * self.n_data * self.mesh_out.node_count
        if row_bytes * config.n_max > config.cache_limit_bytes:
            raise ResourceLimitError(
                f"response-field cache needs {row_bytes * config.n_max} bytes "
                f"for n_max={config.n_max}, above the {config.cache_limit_bytes} byte limit"
            )
        self._uhat = _RowStack((self.n_data, self.mesh_out.node_count))
        self._gram = np.zeros((0, 0))
        self._rhs = np.zeros(0)
        self._r0 = self._seminorm(self.responses)

        # Flattened product nodes for chunked dictionary scoring; row s*m_in+t
        # matches the C-order flattening of kernel tables.
        self._pair_nodes = np.hstack([
            np.repeat(self.mesh_out.nodes, self.mesh_in.node_count, axis=0),
            np.tile(self.mesh_in.nodes, (self.mesh_out.node_count, 1)),
        ])

    def _seminorm(self, fields: np.ndarray) -> float:
        value = np.sum((fields * fields) @ self.w_out) / self.n_data
        return float(np.sqrt(max(value, 0.0)))

    def input_dim(self) -> int:
        return self.mesh_out.dim + self.mesh_in.dim

    def bias_bounds(self) -> BiasBounds:
        return self._bounds

    def initial_residual(self) -> float:
        return self._r0

    def _unsigned_values_chunks(self, dictionary: RandomDictionary):
        directions = dictionary.directions[0::2]
        biases = dictionary.biases[0::2]
        n_nodes = self._pair_nodes.shape[0]
        chunk = max(1, SCORING_CHUNK_BYTES // (8 * n_nodes))
        for start in range(0, directions.shape[0], chunk):
            stop = min(start + chunk, directions.shape[0])
            yield start, stop, ridge_values(directions[start:stop], biases[start:stop],
                                            None, dictionary.power, self._pair_nodes)

    def score_dictionary(self, dictionary: RandomDictionary) -> np.ndarray:
        field_flat = correlation_field(
            FieldSet(self.residuals, self.mesh_out),
            FieldSet(self.forcings, self.mesh_in),
        ).values.ravel()
        unsigned = np.empty(dictionary.n_samples)
        for start, stop, values in self._unsigned_values_chunks(dictionary):
            unsigned[start:stop] = values @ field_flat
        if self._normalized:
            unsigned = self._normalize_scores(dictionary, unsigned)
        return paired_scores(unsigned)

    def _normalize_scores(self, dictionary: RandomDictionary, unsigned: np.ndarray) -> np.ndarray:
        # Exact per-atom seminorms; costs one response-field pass per atom, so
        # this path is for experimentation at small scale.
        norms = np.empty_like(unsigned)
        m_out = self.mesh_out.node_count
        for start, stop, values in self._unsigned_values_chunks(dictionary):
            for i in range(stop - start):
                table = values[i].reshape(m_out, -1)
                uhat = self.forcings_weighted @ table.T
                norms[start + i] = self._seminorm(uhat)
        safe = norms > 0
        return np.where(safe, unsigned / np.where(safe, norms, 1.0), 0.0)

    def append_atom(self, atom: Atom) -> None:
        table = atom_pair_table(atom, self.mesh_out, self.mesh_in)
        uhat = self.forcings_weighted @ table.T          # (N, m_out)
        self._uhat.append(uhat)
        stack = self._uhat.view()
        n = len(self._uhat)
        weighted = uhat * self.w_out
        row = stack.reshape(n, -1) @ weighted.ravel() / self.n_data
        gram = np.empty((n, n))
        gram[: n - 1, : n - 1] = self._gram
        gram[n - 1, :] = row
        gram[:, n - 1] = row
        self._gram = gram
        self._rhs = np.append(self._rhs, np.sum(self.responses * weighted) / self.n_data)

    def gram(self) -> np.ndarray:
        return self._gram

    def rhs(self) -> np.ndarray:
        return self._rhs

    def apply_coefficients(self, coefficients: np.ndarray) -> float:
        stack = self._uhat.view()
        self.residuals = self.responses - np.tensordot(coefficients, stack, axes=(0, 0))
        return self._seminorm(self.residuals)

    def residual_atom_inners(self) -> np.ndarray:
        stack = self._uhat.view()
        weighted = self.residuals * self.w_out
        return stack.reshape(len(self._uhat), -1) @ weighted.ravel() / self.n_data

    def residual_seminorm(self) -> float:
        return self._seminorm(self.residuals)


def fit_kernel(data: DataSet, config: KernelFitConfig, *,
               oracle=None, test_data: Optional[DataSet] = None,
               progress=None, seed_atoms=None) -> KernelModel:
    """Fit a kernel expansion to a dataset by orthogonal greedy iterations.

    When test_data is given, trace rows at the evaluation cadence carry the
    mean relative L2 response error on it; when an analytic oracle is also
    attached, they carry the relative L2 kernel error on the training mesh
    pair.
    """
    problem = KernelProblem(data, config)
    cadence = set(config.cadence())
    oracle_table = None
    if oracle is not None:
        oracle_table = oracle.table(data.output_mesh, data.input_mesh)

    compute_eps = None
    if test_data is not None or oracle_table is not None:
        from .metrics import relative_l2_solutions
        from .products import kernel_apply

        def compute_eps(atoms: list[Atom], coefficients: np.ndarray):
            snapshot = KernelModel(
                GreedyModel(list(atoms), coefficients.copy(), FitTrace(),
                            "completed", problem.input_dim(), config.power),
                data.output_mesh, data.input_mesh)
            table = evaluate_kernel(snapshot)
            eps_u = eps_g = None
            if test_data is not None:
                predicted = kernel_apply(table, test_data.forcings.values, data.input_mesh)
                eps_u = relative_l2_solutions(predicted, test_data.responses.values,
                                              data.output_mesh)
            if oracle_table is not None:
                diff = table - oracle_table
                num = np.sum((diff * diff) @ problem.w_in * problem.w_out)
                den = np.sum((oracle_table * oracle_table) @ problem.w_in * problem.w_out)
                eps_g = float(np.sqrt(num / den))
            return eps_u, eps_g

    diagnostics = None
    if compute_eps is not None:
        def diagnostics(n: int, atoms: list[Atom], coefficients: np.ndarray):
            if n not in cadence:
                return None, None
            return compute_eps(atoms, coefficients)

    greedy_model = run_oga(problem, config.dictionary_config(), config.n_max,
                           config.seed, diagnostics=diagnostics, progress=progress,
                           seed_atoms=seed_atoms)
    kernel_model = KernelModel(greedy_model, data.output_mesh, data.input_mesh)
    # Early termination can land off cadence; the last row always carries eps.
    records = greedy_model.trace.records
    if compute_eps is not None and records and records[-1].eps_u is None and records[-1].eps_g is None:
        records[-1].eps_u, records[-1].eps_g = compute_eps(greedy_model.atoms,
                                                           greedy_model.coefficients)
    return kernel_model
