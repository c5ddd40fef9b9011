"""Learn kernels of linear operators from input/output function pairs.

The library fits sparse ReLU^k ridge expansions of an unknown kernel by
orthogonal greedy iterations over freshly sampled random dictionaries,
either jointly on the product domain (fit_kernel) or one output sensor at
a time (fit_pointwise). Datasets can be synthesized from analytic kernels
with Gaussian-process forcings or imported from files.
"""

from .dataio import (DataLoadError, DataSet, RunManifest, dataset_content_hash,
                     load_dataset, load_model, load_trace_csv, normalize_pairs,
                     save_dataset, save_model, save_trace_csv, trace_rows)
from .dictionary import (Atom, RandomDictionary, derive_seed, evaluate_atom,
                         evaluate_atoms, hypersphere_map, inject_atoms,
                         ridge_values, sample_dictionary)
from .geometry import (BiasBounds, Mesh, ResourceLimitError, bias_bounds,
                       cube_grid, disk_mesh, mesh_from_points, pair_bias_bounds,
                       product_mesh, uniform_grid_1d)
from .greedy import (BREAKDOWN, COMPLETED, STAGNATION, DictionaryConfig,
                     FitTrace, GreedyModel, TraceRecord, evaluate_model,
                     evaluation_points, fit_function, run_oga, solve_projection)
from .kernel_oga import (KernelFitConfig, KernelModel, atom_pair_table,
                         evaluate_kernel, fit_kernel, predict)
from .metrics import (MetricError, RateFit, data_rank_diagnostic, fit_rate,
                      pointwise_abs_error, relative_l2_kernel,
                      relative_l2_solutions, theoretical_rate)
from .pointwise_oga import (PointwiseModel, assemble_kernel, fit_pointwise,
                            predict_pointwise)
from .presets import PRESET_NAMES, PresetResult, run_preset
from .problems import (GPConfig, GPGenerationError, KernelOracle, ORACLE_NAMES,
                       gp_covariance, make_oracle, oracle_from_provenance,
                       sample_gp_forcings, synthesize_dataset)
from .products import (CorrelationField, FieldSet, correlation_field,
                       kernel_apply, l2_inner, l2_norm, semi_inner, semi_norm)

__version__ = "0.1.0"

__all__ = [
    "Atom", "BiasBounds", "BREAKDOWN", "COMPLETED", "CorrelationField",
    "DataLoadError", "DataSet", "DictionaryConfig", "FieldSet", "FitTrace",
    "GPConfig", "GPGenerationError", "GreedyModel", "KernelFitConfig",
    "KernelModel", "KernelOracle", "Mesh", "MetricError", "ORACLE_NAMES",
    "PRESET_NAMES", "PointwiseModel", "PresetResult", "RandomDictionary",
    "RateFit", "ResourceLimitError", "RunManifest", "STAGNATION", "TraceRecord",
    "assemble_kernel", "atom_pair_table", "bias_bounds", "correlation_field",
    "cube_grid", "data_rank_diagnostic", "dataset_content_hash", "derive_seed",
    "disk_mesh", "evaluate_atom", "evaluate_atoms", "evaluate_kernel",
    "evaluate_model", "evaluation_points", "fit_function", "fit_kernel",
    "fit_pointwise", "fit_rate", "gp_covariance", "hypersphere_map",
    "inject_atoms", "kernel_apply", "l2_inner", "l2_norm", "load_dataset",
    "load_model", "load_trace_csv", "make_oracle", "mesh_from_points",
    "normalize_pairs", "oracle_from_provenance", "pair_bias_bounds",
    "pointwise_abs_error", "predict", "predict_pointwise", "product_mesh",
    "relative_l2_kernel", "relative_l2_solutions", "ridge_values", "run_oga",
    "run_preset", "sample_dictionary", "sample_gp_forcings", "save_dataset",
    "save_model", "save_trace_csv", "semi_inner", "semi_norm",
    "solve_projection", "synthesize_dataset", "theoretical_rate", "trace_rows",
    "uniform_grid_1d",
]
