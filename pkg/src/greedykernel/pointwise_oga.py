"""Point-wise kernel estimation: one independent greedy fit per output sensor.

Each output node x_s gets its own d-input atom expansion G_s(y) fitted to the
scalar data {(f_j, u_j(x_s))} under the per-sensor semi-inner product
(1/N) sum_j a_j b_j of quadrature responses. Sensors draw dictionaries from
seeds derived from (base seed, sensor), so a subset fit is bit-identical to
the same sensors inside a full fit, and fits can run in a process pool.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dataio import DataSet
from .dictionary import Atom, RandomDictionary, derive_seed, ridge_values
from .geometry import BiasBounds, Mesh, bias_bounds
from .greedy import (COMPLETED, FitTrace, GreedyModel, GreedyProblem,
                     TraceRecord, _RowStack, paired_scores, run_oga)
from .kernel_oga import KernelFitConfig


@dataclass
class PointwiseModel:
    """Per-sensor greedy models plus the aggregated fit trace."""

    models: list[GreedyModel]
    sensor_indices: np.ndarray
    output_mesh: Mesh
    input_mesh: Mesh
    trace: FitTrace
    status: str
    power: int

    def __post_init__(self):
        self.sensor_indices = np.asarray(self.sensor_indices, dtype=np.int64)
        if len(self.models) != self.sensor_indices.shape[0]:
            raise ValueError(
                f"{len(self.models)} sensor models for {self.sensor_indices.shape[0]} indices"
            )
        if self.sensor_indices.shape[0] and (
                self.sensor_indices.min() < 0
                or self.sensor_indices.max() >= self.output_mesh.node_count):
            raise ValueError("sensor indices fall outside the output mesh")

    @property
    def sensor_count(self) -> int:
        return len(self.models)


class SensorProblem(GreedyProblem):
    """Least-squares greedy problem for a single output sensor."""

    def __init__(self, forcings: np.ndarray, forcings_weighted: np.ndarray,
                 input_mesh: Mesh, targets: np.ndarray, bounds: BiasBounds,
                 power: int, normalized_scoring: bool = False,
                 test_forcings_weighted: Optional[np.ndarray] = None,
                 keep_atom_values: bool = False):
        self.forcings = forcings
        self.forcings_weighted = forcings_weighted
        self.mesh = input_mesh
        self.targets = np.asarray(targets, dtype=np.float64).reshape(-1)
        self.n_data = forcings.shape[0]
        self.power = power
        self._bounds = bounds
        self._normalized = normalized_scoring
        self.residual = self.targets.copy()
        self._quadratures = _RowStack((self.n_data,))
        self._test = (_RowStack((test_forcings_weighted.shape[0],))
                      if test_forcings_weighted is not None else None)
        self._test_fw = test_forcings_weighted
        self._atom_values = _RowStack((input_mesh.node_count,)) if keep_atom_values else None
        self._gram = np.zeros((0, 0))
        self._rhs = np.zeros(0)
        self._r0 = float(np.sqrt(max(np.mean(self.targets**2), 0.0)))

    def input_dim(self) -> int:
        return self.mesh.dim

    def bias_bounds(self) -> BiasBounds:
        return self._bounds

    def initial_residual(self) -> float:
        return self._r0

    def score_dictionary(self, dictionary: RandomDictionary) -> np.ndarray:
        # v_t = (1/N) w_t sum_j rho_j f_j(y_t); atom score is its table row . v
        v = (self.mesh.weights / self.n_data) * (self.forcings.T @ self.residual)
        table = ridge_values(dictionary.directions[0::2], dictionary.biases[0::2],
                             None, dictionary.power, self.mesh.nodes)
        unsigned = table @ v
        if self._normalized:
            responses = self.forcings_weighted @ table.T
            norms = np.sqrt(np.maximum(np.mean(responses**2, axis=0), 0.0))
            safe = norms > 0
            unsigned = np.where(safe, unsigned / np.where(safe, norms, 1.0), 0.0)
        return paired_scores(unsigned)

    def append_atom(self, atom: Atom) -> None:
        values = ridge_values(atom.direction[None, :], np.array([atom.bias]),
                              np.array([atom.sign]), atom.power, self.mesh.nodes)[0]
        quadrature = self.forcings_weighted @ values
        self._quadratures.append(quadrature)
        if self._test is not None:
            self._test.append(self._test_fw @ values)
        if self._atom_values is not None:
            self._atom_values.append(values)
        stack = self._quadratures.view()
        n = len(self._quadratures)
        row = stack @ quadrature / self.n_data
        gram = np.empty((n, n))
        gram[: n - 1, : n - 1] = self._gram
        gram[n - 1, :] = row
        gram[:, n - 1] = row
        self._gram = gram
        self._rhs = np.append(self._rhs, float(self.targets @ quadrature) / self.n_data)

    def gram(self) -> np.ndarray:
        return self._gram

    def rhs(self) -> np.ndarray:
        return self._rhs

    def apply_coefficients(self, coefficients: np.ndarray) -> float:
        self.residual = self.targets - coefficients @ self._quadratures.view()
        return float(np.sqrt(max(np.mean(self.residual**2), 0.0)))

    def residual_atom_inners(self) -> np.ndarray:
        return self._quadratures.view() @ self.residual / self.n_data

    def test_predictions(self, coefficients: np.ndarray) -> np.ndarray:
        # After a projection breakdown the stacks hold one more (rolled-back)
        # atom than the model keeps, so slice to the coefficient count.
        return coefficients @ self._test.view()[: coefficients.shape[0]]

    def kernel_row(self, coefficients: np.ndarray) -> np.ndarray:
        return coefficients @ self._atom_values.view()[: coefficients.shape[0]]


@dataclass
class _FitContext:
    forcings: np.ndarray
    forcings_weighted: np.ndarray
    responses: np.ndarray
    input_mesh: Mesh
    output_nodes: np.ndarray
    bounds: BiasBounds
    config: KernelFitConfig
    cadence: list[int]
    test_forcings_weighted: Optional[np.ndarray]
    oracle: object


@dataclass
class _SensorOutcome:
    sensor: int
    model: GreedyModel
    initial_residual: float
    test_predictions: Optional[np.ndarray]  # (len(cadence), n_test)
    row_sq_error: Optional[np.ndarray]      # (len(cadence),)
    row_sq_reference: Optional[float]


_WORKER_CTX: Optional[_FitContext] = None


def _init_worker(ctx: _FitContext) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _fit_sensor(sensor: int, ctx: Optional[_FitContext] = None) -> _SensorOutcome:
    ctx = ctx if ctx is not None else _WORKER_CTX
    config = ctx.config
    want_rows = ctx.oracle is not None
    problem = SensorProblem(ctx.forcings, ctx.forcings_weighted, ctx.input_mesh,
                            ctx.responses[:, sensor], ctx.bounds, config.power,
                            config.normalized_scoring,
                            test_forcings_weighted=ctx.test_forcings_weighted,
                            keep_atom_values=want_rows)
    oracle_row = None
    if want_rows:
        oracle_row = ctx.oracle.row(ctx.output_nodes[sensor], ctx.input_mesh)
    cadence = ctx.cadence
    cadence_pos = {n: i for i, n in enumerate(cadence)}
    preds = (np.zeros((len(cadence), ctx.test_forcings_weighted.shape[0]))
             if ctx.test_forcings_weighted is not None else None)
    row_err = np.zeros(len(cadence)) if want_rows else None
    row_ref = float(ctx.input_mesh.weights @ oracle_row**2) if want_rows else None
    w_in = ctx.input_mesh.weights

    def diagnostics(n: int, atoms, coefficients):
        pos = cadence_pos.get(n)
        if pos is not None:
            if preds is not None:
                preds[pos] = problem.test_predictions(coefficients)
            if row_err is not None:
                diff = problem.kernel_row(coefficients) - oracle_row
                row_err[pos] = float(w_in @ diff**2)
        return None, None

    track = preds is not None or row_err is not None
    model = run_oga(problem, config.dictionary_config(), config.n_max,
                    derive_seed(config.seed, sensor),
                    diagnostics=diagnostics if track else None)
    # Early termination: later cadence points inherit the final state.
    if track:
        n_final = model.size
        final_pred = (problem.test_predictions(model.coefficients)
                      if preds is not None else None)
        final_err = None
        if row_err is not None:
            if n_final > 0:
                diff = problem.kernel_row(model.coefficients) - oracle_row
            else:
                diff = -oracle_row
            final_err = float(w_in @ diff**2)
        for pos, n in enumerate(cadence):
            if n > n_final:
                if preds is not None:
                    preds[pos] = final_pred if n_final > 0 else 0.0
                if row_err is not None:
                    row_err[pos] = final_err
    return _SensorOutcome(sensor=sensor, model=model,
                          initial_residual=problem.initial_residual(),
                          test_predictions=preds, row_sq_error=row_err,
                          row_sq_reference=row_ref)


def _sensor_residual_at(outcome: _SensorOutcome, n: int) -> float:
    records = outcome.model.trace.records
    if not records:
        return outcome.initial_residual
    index = min(n, records[-1].n) - 1
    return records[index].residual


def fit_pointwise(data: DataSet, config: KernelFitConfig,
                  sensors: Optional[Sequence[int]] = None, *,
                  oracle=None, test_data: Optional[DataSet] = None,
                  threads: int = 1, progress=None) -> PointwiseModel:
    """Fit every requested output sensor independently and aggregate traces.

    Aggregated eps_u/eps_G trace entries (and the aggregated residual) are
    computed across fitted sensors at each cadence n; with an explicit sensor
    subset they are restricted to that subset. threads > 1 fans sensors out
    to a process pool; results are identical to the serial path.

    A sensor whose projection breaks down keeps its last good model and the
    remaining sensors still run (at saturation depth this is the routine
    terminal state), so the aggregate status reports on the pipeline itself,
    which always completes; per-sensor outcomes stay on the sub-models.
    """
    if sensors is None:
        sensor_list = list(range(data.output_mesh.node_count))
    else:
        sensor_list = [int(s) for s in sensors]
        if len(set(sensor_list)) != len(sensor_list):
            raise ValueError("sensor subset contains duplicates")
        for s in sensor_list:
            if s < 0 or s >= data.output_mesh.node_count:
                raise ValueError(f"sensor {s} outside output mesh of size {data.output_mesh.node_count}")
    if not sensor_list:
        raise ValueError("need at least one sensor")

    test_fw = None
    if test_data is not None:
        test_fw = test_data.forcings.values * data.input_mesh.weights
    ctx = _FitContext(
        forcings=data.forcings.values,
        forcings_weighted=data.forcings.values * data.input_mesh.weights,
        responses=data.responses.values,
        input_mesh=data.input_mesh,
        output_nodes=data.output_mesh.nodes,
        bounds=bias_bounds(data.input_mesh),
        config=config,
        cadence=config.cadence(),
        test_forcings_weighted=test_fw,
        oracle=oracle,
    )

    outcomes: list[_SensorOutcome] = []
    if threads > 1 and len(sensor_list) > 1:
        with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker,
                                 initargs=(ctx,)) as pool:
            chunk = max(1, len(sensor_list) // (8 * threads))
            for outcome in pool.map(_fit_sensor, sensor_list, chunksize=chunk):
                outcomes.append(outcome)
                if progress is not None:
                    progress(outcome.sensor, outcome.model)
    else:
        for sensor in sensor_list:
            outcome = _fit_sensor(sensor, ctx)
            outcomes.append(outcome)
            if progress is not None:
                progress(outcome.sensor, outcome.model)

    weights = data.output_mesh.weights[np.asarray(sensor_list, dtype=np.int64)]
    trace = _aggregate_trace(outcomes, weights, ctx, test_data)
    # Every sensor keeps its last good model even when its own projection
    # breaks down, so the aggregate fit itself always completes.
    return PointwiseModel(models=[o.model for o in outcomes],
                          sensor_indices=np.asarray(sensor_list, dtype=np.int64),
                          output_mesh=data.output_mesh, input_mesh=data.input_mesh,
                          trace=trace, status=COMPLETED, power=config.power)


def _aggregate_trace(outcomes: list[_SensorOutcome], weights: np.ndarray,
                     ctx: _FitContext, test_data: Optional[DataSet]) -> FitTrace:
    from .metrics import MetricError

    cadence = ctx.cadence
    trace = FitTrace()
    if not cadence:
        return trace
    have_preds = all(o.test_predictions is not None for o in outcomes) and test_data is not None
    have_rows = all(o.row_sq_error is not None for o in outcomes)
    ref_u = None
    if have_preds:
        truth = test_data.responses.values[:, [o.sensor for o in outcomes]]  # (n_test, S)
        ref_u = truth**2 @ weights
        if np.any(ref_u == 0.0):
            bad = int(np.argmax(ref_u == 0.0))
            raise MetricError(f"test response {bad} vanishes on the fitted sensors")
    row_ref_total = None
    if have_rows:
        row_ref_total = float(np.dot(weights, [o.row_sq_reference for o in outcomes]))
    for pos, n in enumerate(cadence):
        residuals = np.array([_sensor_residual_at(o, n) for o in outcomes])
        agg_residual = float(np.sqrt(max(np.dot(weights, residuals**2), 0.0)))
        eps_u = eps_g = None
        if have_preds:
            err = np.zeros(truth.shape[0])
            for k, outcome in enumerate(outcomes):
                diff = truth[:, k] - outcome.test_predictions[pos]
                err += weights[k] * diff**2
            eps_u = float(np.mean(np.sqrt(err / ref_u)))
        if have_rows and row_ref_total > 0:
            err_g = float(np.dot(weights, [o.row_sq_error[pos] for o in outcomes]))
            eps_g = float(np.sqrt(err_g / row_ref_total))
        trace.append(TraceRecord(n=n, residual=agg_residual, score=np.nan,
                                 gram_cond=np.nan, coeff_l1=np.nan,
                                 eps_u=eps_u, eps_g=eps_g))
    return trace


def assemble_kernel(model: PointwiseModel, mesh_in: Optional[Mesh] = None) -> np.ndarray:
    """Kernel rows G(x_s, .) for the fitted sensors, shape (sensors, m_in)."""
    mesh_in = model.input_mesh if mesh_in is None else mesh_in
    rows = np.zeros((model.sensor_count, mesh_in.node_count))
    for i, sub in enumerate(model.models):
        directions, biases, signed = sub.atom_arrays()
        if directions.shape[0]:
            rows[i] = signed @ ridge_values(directions, biases, None, sub.power,
                                            mesh_in.nodes)
    return rows


def predict_pointwise(model: PointwiseModel, forcings) -> np.ndarray:
    """Predicted responses at the fitted sensors, columns in sensor order."""
    from .products import kernel_apply
    rows = assemble_kernel(model)
    return kernel_apply(rows, forcings, model.input_mesh)
