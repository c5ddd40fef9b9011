"""Experiment command line: generate, train, eval, rate, repro.

Options may come from flags or from a `key = value` config file passed with
--config; flags win over file entries, and unknown file keys are rejected.
Live progress goes to stderr; machine-readable output goes to files.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import dataio, metrics, presets
from .dataio import DataLoadError, RunManifest
from .geometry import ResourceLimitError, cube_grid, disk_mesh, mesh_from_points, uniform_grid_1d
from .greedy import BREAKDOWN
from .kernel_oga import KernelFitConfig, KernelModel, evaluate_kernel, fit_kernel
from .metrics import MetricError
from .pointwise_oga import PointwiseModel, assemble_kernel, fit_pointwise
from .problems import (GPConfig, GPGenerationError, ORACLE_NAMES, make_oracle,
                       oracle_from_provenance, synthesize_dataset)
from .products import kernel_apply

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BREAKDOWN = 3
EXIT_BANDS_FAILED = 4

THREADS_ENV = "GREEDYKERNEL_THREADS"


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ValueError(f"{THREADS_ENV} must be >= 1, got {value}")
    return value


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def parse_sensor_spec(spec: str) -> Optional[list[int]]:
    """Sensor subsets: 'all', comma lists, and inclusive 'a..b' ranges."""
    spec = spec.strip()
    if spec == "all":
        return None
    out: list[int] = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo_text, _, hi_text = part.partition("..")
            lo, hi = int(lo_text), int(hi_text)
            if hi < lo:
                raise ValueError(f"bad sensor range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError(f"empty sensor spec {spec!r}")
    return out


class _Command:
    """Subparser plus the option schema used for config-file merging."""

    def __init__(self, subparsers, name: str, help_text: str):
        self.name = name
        self.parser = subparsers.add_parser(name, help=help_text)
        self.parser.add_argument("--config", default=None, metavar="FILE",
                                 help="key = value file supplying defaults for any flag")
        self.schema: dict[str, Callable[[str], object]] = {}
        self.defaults: dict[str, object] = {}

    def add(self, flag: str, *, kind: Callable = str, default=None, help: str = "",
            choices=None, metavar=None) -> None:
        dest = flag.lstrip("-").replace("-", "_")
        self.parser.add_argument(flag, type=kind, default=None, choices=choices,
                                 help=help, metavar=metavar, dest=dest)
        self.schema[dest] = kind
        self.defaults[dest] = default

    def add_flag(self, flag: str, *, help: str = "") -> None:
        dest = flag.lstrip("-").replace("-", "_")
        self.parser.add_argument(flag, action="store_const", const=True,
                                 default=None, help=help, dest=dest)
        self.schema[dest] = _parse_bool
        self.defaults[dest] = False

    def finish(self, args: argparse.Namespace) -> None:
        """Merge config-file values under explicit flags, then apply defaults."""
        if args.config is not None:
            entries = dataio.read_manifest(args.config)
            for key, raw in entries.items():
                dest = key.replace("-", "_")
                if dest not in self.schema:
                    known = ", ".join(sorted(k.replace("_", "-") for k in self.schema))
                    raise ValueError(
                        f"config file {args.config}: unknown key {key!r} for "
                        f"'{self.name}' (known: {known})")
                if getattr(args, dest) is None:
                    setattr(args, dest, self.schema[dest](raw))
        for dest, value in self.defaults.items():
            if getattr(args, dest) is None:
                setattr(args, dest, value)


def _require(args: argparse.Namespace, *dests: str) -> None:
    for dest in dests:
        if getattr(args, dest) is None:
            flag = "--" + dest.replace("_", "-")
            raise ValueError(f"{flag} is required (flag or config file)")


def _log(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


# ---------------------------------------------------------------- generate

def _mesh_from_spec(spec: str, dim: int):
    if spec.startswith("disk:"):
        if dim != 2:
            raise ValueError("disk meshes are 2-D; use --dim 2")
        return disk_mesh(int(spec.partition(":")[2]))
    if spec.startswith("cube:"):
        return cube_grid(int(spec.partition(":")[2]), dim=dim)
    path = Path(spec)
    if not path.exists():
        raise ValueError(f"mesh spec {spec!r}: not disk:M, cube:P, or an existing CSV file")
    table = np.loadtxt(path, delimiter=",", ndmin=2)
    if table.shape[1] != dim + 1:
        raise ValueError(
            f"mesh file {spec}: expected {dim + 1} columns "
            f"({dim} coordinates + quadrature weight), got {table.shape[1]}")
    weights = table[:, dim]
    return mesh_from_points(table[:, :dim], float(weights.sum()), weights)


def cmd_generate(args: argparse.Namespace) -> int:
    _require(args, "problem", "train", "test", "gp_scale", "out")
    params = {}
    if args.wave is not None:
        params["wave"] = args.wave
    if args.kwave is not None:
        params["k_wave"] = args.kwave
    if args.h is not None:
        params["h"] = args.h
    oracle = make_oracle(args.problem, args.dim, **params)

    if args.dim == 1:
        if args.mesh is not None:
            raise ValueError("--mesh applies to dim >= 2; 1-D runs use --grid")
        low, high = (-1.0, 1.0) if args.problem == "logdiscrete" else (0.0, 1.0)
        mesh = uniform_grid_1d(low, high, args.grid)
    else:
        if args.mesh is None:
            raise ValueError("--mesh is required for dim >= 2 (disk:M, cube:P, or CSV)")
        mesh = _mesh_from_spec(args.mesh, args.dim)

    out = Path(args.out)
    for split_name in ("train", "test"):
        target = out / split_name
        if target.exists() and any(target.iterdir()) and not args.force:
            raise FileExistsError(f"{target} exists and is not empty (pass --force)")

    gp = GPConfig(length_scale=args.gp_scale, variance=args.gp_variance, seed=args.seed)
    n_total = args.train + args.test
    _log(f"generating {n_total} samples ({args.train} train / {args.test} test) "
         f"for {args.problem} on {mesh.node_count} nodes")
    train_set, test_set = synthesize_dataset(
        oracle, mesh, mesh, n_total, gp, (args.train, args.test),
        normalize=not args.no_normalize)
    dataio.save_dataset(train_set, out / "train", force=args.force)
    dataio.save_dataset(test_set, out / "test", force=args.force)
    print(out / "train")
    print(out / "test")
    return EXIT_OK


# ------------------------------------------------------------------- train

def _oga_progress(record) -> None:
    msg = (f"n={record.n:4d} residual_H={record.residual:.6e} "
           f"score={record.score:.3e} cond={record.gram_cond:.3e} "
           f"l1={record.coeff_l1:.6e}")
    if record.eps_u is not None:
        msg += f" eps_u={record.eps_u:.3e}"
    if record.eps_g is not None:
        msg += f" eps_G={record.eps_g:.3e}"
    _log(msg)


def cmd_train(args: argparse.Namespace) -> int:
    _require(args, "data", "mode", "nmax", "out")
    data = dataio.load_dataset(args.data)
    test_data = dataio.load_dataset(args.test_data) if args.test_data else None
    oracle = None
    if args.kernel_error:
        oracle = oracle_from_provenance(data.provenance, data.input_mesh.dim)
        if oracle is None:
            raise ValueError(
                "--kernel-error needs a dataset whose provenance names an "
                "analytic kernel (generated by this tool)")

    config = KernelFitConfig(n_max=args.nmax, dict_size=args.dict, power=args.power,
                             seed=args.seed, normalized_scoring=args.normalized_scoring)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if (out / "model.bin").exists() and not args.force:
        raise FileExistsError(f"{out / 'model.bin'} exists (pass --force)")

    sensors = parse_sensor_spec(args.sensors)
    if args.mode == "oga":
        if sensors is not None:
            raise ValueError("--sensors applies to --mode pwoga only")
        model = fit_kernel(data, config, oracle=oracle, test_data=test_data,
                           progress=_oga_progress)
        rows = dataio.trace_rows(model.trace)
        with_sensor = False
    else:
        def progress(sensor, sub):
            _log(f"sensor {sensor}: n={sub.size} status={sub.status} "
                 f"residual={sub.trace.records[-1].residual if sub.trace.records else float('nan'):.6e}")
        model = fit_pointwise(data, config, sensors, oracle=oracle,
                              test_data=test_data, threads=args.threads,
                              progress=progress)
        rows = []
        for sub, sensor in zip(model.models, model.sensor_indices):
            rows.extend(dataio.trace_rows(sub.trace, sensor=int(sensor)))
        rows.extend(dataio.trace_rows(model.trace, sensor=-1))
        with_sensor = True

    dataio.save_model(model, out / "model.bin")
    dataio.save_trace_csv(out / "trace.csv", rows, with_sensor=with_sensor)
    RunManifest(
        mode=args.mode, seed=args.seed, dict_size=args.dict, power=args.power,
        n_max=args.nmax, normalized=data.normalized, dataset_path=str(args.data),
        dataset_hash=dataio.dataset_content_hash(args.data),
        sensors=args.sensors,
    ).write(out / "run_manifest.txt")
    _log(f"model written to {out / 'model.bin'} (status: {model.status})")
    print(out / "model.bin")
    if model.status == BREAKDOWN:
        _log("warning: projection breakdown; saved the last numerically sound model")
        return EXIT_BREAKDOWN
    return EXIT_OK


# -------------------------------------------------------------------- eval

def _check_same_nodes(mesh_a, mesh_b, what: str) -> None:
    if mesh_a.nodes.shape != mesh_b.nodes.shape or not np.allclose(
            mesh_a.nodes, mesh_b.nodes, rtol=0.0, atol=1e-12):
        raise ValueError(f"{what}: dataset nodes differ from the model's training nodes")


def cmd_eval(args: argparse.Namespace) -> int:
    _require(args, "model", "data")
    model = dataio.load_model(args.model)
    data = dataio.load_dataset(args.data)
    lines: list[str] = []

    if isinstance(model, KernelModel):
        table = evaluate_kernel(model, data.output_mesh, data.input_mesh)
        predicted = kernel_apply(table, data.forcings.values, data.input_mesh)
        truth = data.responses.values
        eval_mesh = data.output_mesh
        lines.append(f"model = kernel expansion, n_atoms = {model.model.size}")
    elif isinstance(model, PointwiseModel):
        _check_same_nodes(data.output_mesh, model.output_mesh, "pointwise eval")
        rows = assemble_kernel(model, mesh_in=data.input_mesh)
        predicted = kernel_apply(rows, data.forcings.values, data.input_mesh)
        truth = data.responses.values[:, model.sensor_indices]
        weights = model.output_mesh.weights[model.sensor_indices]
        eval_mesh = mesh_from_points(model.output_mesh.nodes[model.sensor_indices],
                                     float(weights.sum()), weights)
        lines.append(f"model = pointwise expansions at {model.sensor_count} sensors")
    else:
        raise ValueError("eval supports kernel and pointwise models only")

    eps_u = metrics.relative_l2_solutions(predicted, truth, eval_mesh)
    lines.append(f"status = {model.status}")
    lines.append(f"n_test_samples = {len(data.forcings)}")
    lines.append(f"eps_u = {eps_u:.17g}")

    if args.kernel_error:
        oracle = oracle_from_provenance(data.provenance, data.input_mesh.dim)
        if oracle is None:
            raise ValueError(
                "--kernel-error needs a dataset whose provenance names an analytic kernel")
        if isinstance(model, KernelModel):
            eps_g = metrics.relative_l2_kernel(table, oracle, data.output_mesh,
                                               data.input_mesh)
        else:
            reference = np.stack([oracle.row(model.output_mesh.nodes[s], data.input_mesh)
                                  for s in model.sensor_indices])
            w_in = data.input_mesh.weights
            num = float(eval_mesh.weights @ (((rows - reference) ** 2) @ w_in))
            den = float(eval_mesh.weights @ ((reference ** 2) @ w_in))
            if den == 0.0:
                raise MetricError("reference kernel rows have zero norm")
            eps_g = float(np.sqrt(num / den))
        lines.append(f"eps_G = {eps_g:.17g}")

    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text("\n".join(lines) + "\n")
        error_field = metrics.pointwise_abs_error(predicted, truth).mean(axis=0)
        field_table = np.column_stack([eval_mesh.nodes, error_field])
        np.savetxt(out / "error_field.csv", field_table, delimiter=",", fmt="%.17g",
                   header=",".join([f"x{i}" for i in range(eval_mesh.dim)]
                                   + ["mean_abs_error"]),
                   comments="")
        dataio.write_manifest(out / "eval_manifest.txt", {
            "mode": "eval", "model_path": args.model, "dataset_path": args.data,
            "dataset_hash": dataio.dataset_content_hash(args.data),
            "kernel_error": str(bool(args.kernel_error)).lower(),
            "tool_version": dataio.TOOL_VERSION,
        })
    return EXIT_OK


# -------------------------------------------------------------------- rate

def cmd_rate(args: argparse.Namespace) -> int:
    _require(args, "trace")
    columns = dataio.load_trace_csv(args.trace)
    if "sensor" in columns:
        keep = columns["sensor"] == args.sensor
        if not keep.any():
            raise ValueError(f"trace has no rows for sensor {args.sensor} "
                             "(-1 selects the aggregate rows)")
        columns = {name: values[keep] for name, values in columns.items()}
    n_values = columns["n"]
    n_hi = args.nhi if args.nhi else int(np.nanmax(n_values))
    wanted = [args.metric] if args.metric != "all" else ["residual_H", "eps_u", "eps_G"]

    fits: list[tuple[str, metrics.RateFit]] = []
    report: list[str] = []
    for name in wanted:
        if name not in columns:
            raise ValueError(f"trace has no column {name!r}")
        values = columns[name]
        if not np.isfinite(values).any():
            if args.metric != "all":
                raise MetricError(f"column {name!r} holds no finite values")
            report.append(f"{name}: no finite values, skipped")
            continue
        fit = metrics.fit_rate(n_values, values, args.nlo, n_hi)
        fits.append((name, fit))
        report.append(f"{name}: slope = {fit.slope:.6g}, intercept = {fit.intercept:.6g}, "
                      f"r_squared = {fit.r_squared:.6g}, window = [{fit.n_lo}, {fit.n_hi}], "
                      f"points = {fit.n_points}")
    if not fits:
        raise MetricError("no trace column had finite values to fit")
    print("\n".join(report))
    if args.out:
        lines = ["metric,slope,intercept,r_squared,n_lo,n_hi,n_points"]
        for name, fit in fits:
            lines.append(f"{name},{fit.slope:.17g},{fit.intercept:.17g},"
                         f"{fit.r_squared:.17g},{fit.n_lo},{fit.n_hi},{fit.n_points}")
        Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK


# ------------------------------------------------------------------- repro

def cmd_repro(args: argparse.Namespace) -> int:
    out = args.out if args.out is not None else f"repro-{args.preset}"
    result = presets.run_preset(args.preset, out, args.seed, n_max=args.nmax,
                                dict_size=args.dict, threads=args.threads,
                                quiet=bool(args.quiet))
    print("\n".join(result.summary_lines()))
    if result.breakdown:
        return EXIT_BREAKDOWN
    return EXIT_OK if result.passed else EXIT_BANDS_FAILED


# -------------------------------------------------------------------- main

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, _Command]]:
    parser = argparse.ArgumentParser(
        prog="greedykernel",
        description="Learn kernels of linear operators from input/output pairs "
                    "with orthogonal greedy training over random ReLU^k dictionaries.")
    subparsers = parser.add_subparsers(dest="command", required=True)
    commands: dict[str, _Command] = {}

    gen = _Command(subparsers, "generate", "synthesize a train/test dataset")
    gen.add("--problem", choices=list(ORACLE_NAMES), help="analytic kernel name")
    gen.add("--dim", kind=int, default=1, help="spatial dimension (default 1)")
    gen.add("--grid", kind=int, default=501, help="1-D uniform grid point count")
    gen.add("--mesh", help="dim>=2 mesh: disk:M, cube:P, or a CSV of nodes+weights")
    gen.add("--wave", kind=float, help="cosine kernel wave number")
    gen.add("--kwave", kind=float, help="Helmholtz wave number")
    gen.add("--h", kind=float, help="cell width of the averaged log kernel")
    gen.add("--train", kind=int, help="training sample count")
    gen.add("--test", kind=int, help="test sample count")
    gen.add("--gp-scale", kind=float, help="GP length scale of the forcings")
    gen.add("--gp-variance", kind=float, default=1.0, help="GP variance (default 1)")
    gen.add("--seed", kind=int, default=0, help="generation seed")
    gen.add("--out", help="output directory (gets train/ and test/)")
    gen.add_flag("--no-normalize", help="keep raw forcing scales")
    gen.add_flag("--force", help="overwrite existing dataset directories")
    gen.parser.set_defaults(func=cmd_generate)
    commands["generate"] = gen

    train = _Command(subparsers, "train", "fit a kernel model to a dataset")
    train.add("--data", help="training dataset directory")
    train.add("--mode", choices=["oga", "pwoga"], help="joint kernel fit or per-sensor fit")
    train.add("--nmax", kind=int, help="greedy iteration budget")
    train.add("--dict", kind=int, default=512, help="random atoms per iteration (default 512)")
    train.add("--power", kind=int, default=1, help="ReLU power k (default 1)")
    train.add("--seed", kind=int, default=0, help="dictionary seed")
    train.add("--sensors", default="all", help="pwoga sensor subset, e.g. 0..16 or 3,7,11")
    train.add("--test-data", help="held-out dataset for eps_u along the trace")
    train.add("--threads", kind=int, default=_default_threads(),
              help=f"pwoga worker processes (default ${THREADS_ENV} or 1)")
    train.add("--out", help="output directory for model/trace/manifest")
    train.add_flag("--kernel-error", help="track eps_G against the generating kernel")
    train.add_flag("--normalized-scoring", help="scale scores by dictionary seminorms")
    train.add_flag("--force", help="overwrite an existing model")
    train.parser.set_defaults(func=cmd_train)
    commands["train"] = train

    ev = _Command(subparsers, "eval", "evaluate a trained model on a dataset")
    ev.add("--model", help="model file from train")
    ev.add("--data", help="dataset directory (normally the test split)")
    ev.add("--out", help="directory for report.txt and error_field.csv")
    ev.add_flag("--kernel-error", help="also compute eps_G from dataset provenance")
    ev.parser.set_defaults(func=cmd_eval)
    commands["eval"] = ev

    rate = _Command(subparsers, "rate", "fit convergence rates from a trace CSV")
    rate.add("--trace", help="trace.csv from train or repro")
    rate.add("--metric", default="all",
             choices=["all", "residual_H", "eps_u", "eps_G"],
             help="trace column to fit (default all)")
    rate.add("--nlo", kind=int, default=16, help="window lower bound (default 16)")
    rate.add("--nhi", kind=int, default=0, help="window upper bound (default: last n)")
    rate.add("--sensor", kind=int, default=-1,
             help="sensor id for per-sensor traces (-1 = aggregate)")
    rate.add("--out", help="write the fits as CSV")
    rate.parser.set_defaults(func=cmd_rate)
    commands["rate"] = rate

    rep = _Command(subparsers, "repro", "run a full reproduction preset")
    rep.parser.add_argument("preset", choices=list(presets.PRESET_NAMES))
    rep.add("--out", help="output directory (default repro-<preset>)")
    rep.add("--seed", kind=int, default=presets.DEFAULT_SEED,
            help=f"base seed (default {presets.DEFAULT_SEED})")
    rep.add("--nmax", kind=int, help="override the preset iteration budget")
    rep.add("--dict", kind=int, help="override the preset dictionary size")
    rep.add("--threads", kind=int, default=_default_threads(),
            help=f"pwoga worker processes (default ${THREADS_ENV} or 1)")
    rep.add_flag("--quiet", help="suppress progress output")
    rep.parser.set_defaults(func=cmd_repro)
    commands["repro"] = rep

    return parser, commands


def main(argv: Optional[list[str]] = None) -> int:
    try:
        parser, commands = build_parser()
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR
    args = parser.parse_args(argv)
    try:
        commands[args.command].finish(args)
        return args.func(args)
    except (ValueError, FileExistsError, FileNotFoundError, DataLoadError,
            MetricError, ResourceLimitError, GPGenerationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
