"""Orthogonal greedy engine.

Each iteration draws a fresh random dictionary, picks the atom most
correlated with the current residual, re-projects the target onto the span of
all selected atoms by solving the Gram normal equations, and recomputes the
residual. The engine is generic over a GreedyProblem, which owns the inner
product structure; plain L2 function fitting, kernel estimation, and
per-sensor fitting all instantiate it.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from .dictionary import (Atom, RandomDictionary, derive_seed, inject_atoms,
                         ridge_values, sample_dictionary)
from .geometry import BiasBounds

COMPLETED = "completed"
STAGNATION = "stagnation"
BREAKDOWN = "projection_breakdown"

# Gram eigenvalues below this fraction of the largest are truncated in the
# pseudo-solve fallback; 1/cutoff is also the conditioning threshold beyond
# which the Cholesky path is not trusted.
EIGEN_CUTOFF = 1e-12

# A selected score at or below 1e-14 * (initial residual)^2 counts as stalled;
# three stalls in a row terminate the fit.
STALL_SCORE_FACTOR = 1e-14
STALL_LIMIT = 3

# Monotonicity slack: a projection step may not raise the residual seminorm by
# more than this fraction of the initial residual.
MONOTONE_TOL = 1e-12


@dataclass
class DictionaryConfig:
    """Dictionary draw parameters shared by all fit entry points."""

    n_samples: int = 512
    power: int = 1
    normalized_scoring: bool = False

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"dictionary n_samples must be >= 1, got {self.n_samples}")
        if self.power < 0:
            raise ValueError(f"atom power must be >= 0, got {self.power}")


@dataclass
class TraceRecord:
    n: int
    residual: float
    score: float
    gram_cond: float
    coeff_l1: float
    eps_u: Optional[float] = None
    eps_g: Optional[float] = None


class FitTrace:
    """Per-iteration fit records with strictly increasing model size n."""

    def __init__(self, records: Optional[list[TraceRecord]] = None):
        self.records: list[TraceRecord] = []
        for rec in records or []:
            self.append(rec)

    def append(self, record: TraceRecord) -> None:
        if self.records and record.n <= self.records[-1].n:
            raise ValueError(f"trace n must increase, got {record.n} after {self.records[-1].n}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        """One trace column as floats; missing eps entries become NaN."""
        out = np.empty(len(self.records))
        for i, rec in enumerate(self.records):
            value = getattr(rec, name)
            out[i] = np.nan if value is None else float(value)
        return out


@dataclass
class GreedyModel:
    """Selected atoms, their jointly projected coefficients, and the fit trace."""

    atoms: list[Atom]
    coefficients: np.ndarray
    trace: FitTrace
    status: str
    dim: int
    power: int

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64).reshape(-1)
        if len(self.atoms) != self.coefficients.shape[0]:
            raise ValueError(
                f"model has {len(self.atoms)} atoms but {self.coefficients.shape[0]} coefficients"
            )

    @property
    def size(self) -> int:
        return len(self.atoms)

    def atom_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(directions, biases, signed coefficients) for vectorized evaluation."""
        if not self.atoms:
            return np.zeros((0, self.dim)), np.zeros(0), np.zeros(0)
        directions = np.stack([a.direction for a in self.atoms])
        biases = np.array([a.bias for a in self.atoms])
        signed = self.coefficients * np.array([a.sign for a in self.atoms])
        return directions, biases, signed


class GreedyProblem(ABC):
    """Inner-product structure a greedy fit runs against."""

    @abstractmethod
    def input_dim(self) -> int: ...

    @abstractmethod
    def bias_bounds(self) -> BiasBounds: ...

    @abstractmethod
    def initial_residual(self) -> float: ...

    @abstractmethod
    def score_dictionary(self, dictionary) -> np.ndarray:
        """Residual correlation of every signed atom, in dictionary order."""

    @abstractmethod
    def append_atom(self, atom: Atom) -> None:
        """Admit an atom: extend the cached Gram matrix and right-hand side."""

    @abstractmethod
    def gram(self) -> np.ndarray: ...

    @abstractmethod
    def rhs(self) -> np.ndarray: ...

    @abstractmethod
    def apply_coefficients(self, coefficients: np.ndarray) -> float:
        """Set coefficients, refresh the residual, return its seminorm."""

    @abstractmethod
    def residual_atom_inners(self) -> np.ndarray:
        """Semi-inner products of the current residual with each kept atom."""


class _RowStack:
    """Append-only stack of equal-shaped float64 rows with doubling growth."""

    def __init__(self, row_shape: tuple[int, ...], capacity: int = 8):
        self._buf = np.empty((capacity, *row_shape))
        self._n = 0

    def append(self, row: np.ndarray) -> None:
        if self._n == self._buf.shape[0]:
            grown = np.empty((2 * self._buf.shape[0], *self._buf.shape[1:]))
            grown[: self._n] = self._buf
            self._buf = grown
        self._buf[self._n] = row
        self._n += 1

    def view(self) -> np.ndarray:
        return self._buf[: self._n]

    def __len__(self) -> int:
        return self._n


def paired_scores(unsigned_scores: np.ndarray) -> np.ndarray:
    """Expand scores of the + atoms into the interleaved signed layout."""
    out = np.empty(2 * unsigned_scores.shape[0])
    out[0::2] = unsigned_scores
    out[1::2] = -unsigned_scores
    return out


def select_atom(problem: GreedyProblem, dictionary: RandomDictionary) -> tuple[int, Atom, float, bool]:
    """Best atom by residual correlation.

    Returns (index, atom, score, zero_flag); ties resolve to the lowest index
    and zero_flag marks an all-zero score vector (nothing left to select).
    """
    scores = problem.score_dictionary(dictionary)
    if scores.shape[0] != len(dictionary):
        raise ValueError("problem returned one score per atom, shapes disagree")
    idx = int(np.argmax(scores))
    score = float(scores[idx])
    return idx, dictionary.atom(idx), score, score == 0.0


def solve_projection(gram: np.ndarray, rhs: np.ndarray,
                     cutoff: float = EIGEN_CUTOFF,
                     force_truncated: bool = False) -> tuple[np.ndarray, float, bool]:
    """Solve the Gram normal equations.

    Tries Cholesky first; on failure or a conditioning estimate beyond
    1/cutoff, falls back to an eigenvalue-truncated pseudo-solve that drops
    eigenvalues below cutoff * lambda_max. Returns (coefficients, condition
    estimate, used_truncated_path).
    """
    if gram.shape[0] != gram.shape[1] or gram.shape[0] != rhs.shape[0]:
        raise ValueError(f"gram/rhs shapes disagree: {gram.shape} vs {rhs.shape}")
    if not force_truncated:
        try:
            factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
            diag = np.diag(factor[0])
            cond = float((diag.max() / diag.min()) ** 2)
            if cond <= 1.0 / cutoff:
                alpha = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
                return alpha, cond, False
        except scipy.linalg.LinAlgError:
            pass
    lam, vectors = scipy.linalg.eigh(gram, check_finite=False)
    lam_max = float(lam[-1])
    if lam_max <= 0.0:
        return np.zeros_like(rhs), np.inf, True
    keep = lam > cutoff * lam_max
    projected = vectors[:, keep].T @ rhs
    alpha = vectors[:, keep] @ (projected / lam[keep])
    cond = float(lam_max / lam[0]) if lam[0] > 0 else np.inf
    return alpha, cond, True


def project(problem: GreedyProblem) -> np.ndarray:
    """Coefficients of the orthogonal projection onto the admitted atoms."""
    return solve_projection(problem.gram(), problem.rhs())[0]


def run_oga(problem: GreedyProblem,
            dict_config: DictionaryConfig,
            n_max: int,
            seed: int,
            *,
            seed_atoms: Optional[Sequence[Atom]] = None,
            diagnostics: Optional[Callable[[int, list[Atom], np.ndarray],
                                           tuple[Optional[float], Optional[float]]]] = None,
            progress: Optional[Callable[[TraceRecord], None]] = None) -> GreedyModel:
    """Run the greedy loop for up to n_max iterations.

    seed_atoms are injected (with mirrors) into the first iteration's
    dictionary; diagnostics may attach (eps_u, eps_g) to the trace row.
    Terminates at n_max, on three consecutive stalled selections, or on a
    projection breakdown, in which case the last good model is returned with
    status "projection_breakdown".
    """
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    r0 = problem.initial_residual()
    stall_threshold = STALL_SCORE_FACTOR * r0 * r0
    monotone_slack = MONOTONE_TOL * r0
    atoms: list[Atom] = []
    coefficients = np.zeros(0)
    trace = FitTrace()
    status = COMPLETED
    previous_residual = r0
    stall_count = 0

    for iteration in range(1, n_max + 1):
        dict_seed = derive_seed(seed, iteration)
        dictionary = sample_dictionary(problem.input_dim(), dict_config.power,
                                       problem.bias_bounds(), dict_config.n_samples,
                                       dict_seed)
        if iteration == 1 and seed_atoms:
            dictionary = inject_atoms(dictionary, list(seed_atoms))
        _, atom, score, _ = select_atom(problem, dictionary)
        if abs(score) <= stall_threshold:
            stall_count += 1
            if stall_count >= STALL_LIMIT:
                status = STAGNATION
                break
            continue
        stall_count = 0

        problem.append_atom(atom)
        gram, rhs = problem.gram(), problem.rhs()
        alpha, cond, truncated = solve_projection(gram, rhs)
        residual = problem.apply_coefficients(alpha)
        if not np.isfinite(residual) or residual > previous_residual + monotone_slack:
            if not truncated:
                alpha, cond, _ = solve_projection(gram, rhs, force_truncated=True)
                residual = problem.apply_coefficients(alpha)
            if not np.isfinite(residual) or residual > previous_residual + monotone_slack:
                # Roll the problem state back to the last good projection.
                problem.apply_coefficients(np.append(coefficients, 0.0))
                status = BREAKDOWN
                break

        atoms.append(atom)
        coefficients = alpha
        previous_residual = residual
        record = TraceRecord(n=len(atoms), residual=residual, score=score,
                             gram_cond=cond, coeff_l1=float(np.sum(np.abs(alpha))))
        if diagnostics is not None:
            record.eps_u, record.eps_g = diagnostics(record.n, atoms, coefficients)
        trace.append(record)
        if progress is not None:
            progress(record)

    return GreedyModel(atoms=atoms, coefficients=coefficients, trace=trace,
                       status=status, dim=problem.input_dim(), power=dict_config.power)


class FunctionProblem(GreedyProblem):
    """Plain L2(mesh) fitting of one target function."""

    def __init__(self, target, mesh, normalized_scoring: bool = False):
        from .geometry import bias_bounds  # local import keeps module load light
        self.mesh = mesh
        target = np.asarray(target, dtype=np.float64).reshape(-1)
        if target.shape[0] != mesh.node_count:
            raise ValueError(f"target has {target.shape[0]} values, mesh {mesh.node_count} nodes")
        if not np.isfinite(target).all():
            raise ValueError("target must be finite")
        self.target = target
        self.residual = target.copy()
        self._bounds = bias_bounds(mesh)
        self._normalized = normalized_scoring
        self._values = _RowStack((mesh.node_count,))
        self._gram = np.zeros((0, 0))
        self._rhs = np.zeros(0)
        self._r0 = float(np.sqrt(max(np.sum(mesh.weights * target**2), 0.0)))

    def input_dim(self) -> int:
        return self.mesh.dim

    def bias_bounds(self) -> BiasBounds:
        return self._bounds

    def initial_residual(self) -> float:
        return self._r0

    def score_dictionary(self, dictionary) -> np.ndarray:
        table = ridge_values(dictionary.directions[0::2], dictionary.biases[0::2],
                             None, dictionary.power, self.mesh.nodes)
        unsigned = table @ (self.mesh.weights * self.residual)
        if self._normalized:
            norms = np.sqrt(np.maximum(table**2 @ self.mesh.weights, 0.0))
            safe = norms > 0
            unsigned = np.where(safe, unsigned / np.where(safe, norms, 1.0), 0.0)
        return paired_scores(unsigned)

    def append_atom(self, atom: Atom) -> None:
        values = ridge_values(atom.direction[None, :], np.array([atom.bias]),
                              np.array([atom.sign]), atom.power, self.mesh.nodes)[0]
        self._values.append(values)
        stack = self._values.view()
        n = len(self._values)
        row = stack @ (self.mesh.weights * values)
        gram = np.empty((n, n))
        gram[: n - 1, : n - 1] = self._gram
        gram[n - 1, :] = row
        gram[:, n - 1] = row
        self._gram = gram
        self._rhs = np.append(self._rhs, np.sum(self.mesh.weights * self.target * values))

    def gram(self) -> np.ndarray:
        return self._gram

    def rhs(self) -> np.ndarray:
        return self._rhs

    def apply_coefficients(self, coefficients: np.ndarray) -> float:
        self.residual = self.target - coefficients @ self._values.view()
        return float(np.sqrt(max(np.sum(self.mesh.weights * self.residual**2), 0.0)))

    def residual_atom_inners(self) -> np.ndarray:
        return self._values.view() @ (self.mesh.weights * self.residual)

    def atom_norms(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self._gram), 0.0))


def fit_function(target, mesh, dict_config: DictionaryConfig, n_max: int, seed: int,
                 **kwargs) -> GreedyModel:
    """Greedy L2 fit of a sampled function; returns the fitted model."""
    problem = FunctionProblem(target, mesh, dict_config.normalized_scoring)
    return run_oga(problem, dict_config, n_max, seed, **kwargs)


def evaluate_model(model: GreedyModel, nodes: np.ndarray) -> np.ndarray:
    """Evaluate a fitted atom expansion on an (m, d) node array."""
    directions, biases, signed = model.atom_arrays()
    if directions.shape[0] == 0:
        return np.zeros(nodes.shape[0])
    table = ridge_values(directions, biases, None, model.power, nodes)
    return signed @ table


def evaluation_points(n_max: int, dense_until: int = 64, stride: int = 8) -> list[int]:
    """Trace diagnostic cadence: every n up to dense_until, then every stride."""
    if n_max < 1:
        return []
    points = list(range(1, min(n_max, dense_until) + 1))
    points += list(range(dense_until + stride, n_max + 1, stride))
    if points[-1] != n_max:
        points.append(n_max)
    return points
