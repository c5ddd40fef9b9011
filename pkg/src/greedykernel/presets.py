"""Reproduction presets: scripted generate/train/eval/rate pipelines.

Each preset synthesizes its dataset, trains, evaluates, fits convergence
rates, and checks measured values against target bands. Everything is
deterministic in the base seed.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import dataio, metrics
from .geometry import Mesh, cube_grid, disk_mesh, uniform_grid_1d
from .greedy import BREAKDOWN
from .kernel_oga import KernelFitConfig, evaluate_kernel, fit_kernel
from .pointwise_oga import assemble_kernel, fit_pointwise, predict_pointwise
from .problems import GPConfig, KernelOracle, make_oracle, synthesize_dataset
from .products import kernel_apply

DEFAULT_SEED = 7

PRESET_NAMES = ("poisson1d", "helmholtz1d", "cosine2d-disk", "pwoga-2d",
                "pwoga-3d-smooth", "pwoga-3d-logcos", "overfit-svd")


@dataclass
class BandCheck:
    label: str
    value: float
    target: str
    passed: bool


@dataclass
class PresetResult:
    name: str
    out_dir: Path
    bands: list[BandCheck]
    values: dict
    elapsed_seconds: float
    breakdown: bool = False

    @property
    def passed(self) -> bool:
        return not self.breakdown and all(band.passed for band in self.bands)

    def summary_lines(self) -> list[str]:
        lines = [f"preset {self.name}", f"elapsed_seconds = {self.elapsed_seconds:.1f}"]
        for key, value in self.values.items():
            lines.append(f"{key} = {value}")
        for band in self.bands:
            state = "PASS" if band.passed else "FAIL"
            lines.append(f"[{state}] {band.label}: {band.value:.6g} (target {band.target})")
        lines.append(f"result = {'PASS' if self.passed else 'FAIL'}")
        return lines


@dataclass
class _PresetSpec:
    kind: str                      # "oga" | "pwoga"
    mesh: Callable[[], Mesh]
    oracle: Callable[[], KernelOracle]
    gp_scale: float
    split: tuple[int, int]
    n_max: int
    rate_window: Optional[tuple[int, int]]
    bands: dict
    sensors: Optional[Callable[[Mesh], list[int]]] = None
    dict_size: int = 512


def _sensor_subset(mesh: Mesh, count: int) -> list[int]:
    return [int(i) for i in np.linspace(0, mesh.node_count - 1, count).round().astype(int)]


_SPECS = {
    "poisson1d": _PresetSpec(
        kind="oga",
        mesh=lambda: uniform_grid_1d(0.0, 1.0, 501),
        oracle=lambda: make_oracle("poisson1d", 1),
        gp_scale=0.01, split=(500, 200), n_max=256, rate_window=(16, 256),
        bands={"slope_max": -1.0, "eps_u_max": 1e-2, "eps_g_max": 2e-2}),
    "helmholtz1d": _PresetSpec(
        kind="oga",
        mesh=lambda: uniform_grid_1d(0.0, 1.0, 501),
        oracle=lambda: make_oracle("helmholtz1d", 1, k_wave=15.0),
        gp_scale=0.01, split=(500, 200), n_max=512, rate_window=(64, 512),
        bands={"slope_max": -0.8, "eps_u_max": 5e-2}),
    "cosine2d-disk": _PresetSpec(
        kind="oga",
        mesh=lambda: disk_mesh(833),
        oracle=lambda: make_oracle("cosine", 2, wave=1.0),
        gp_scale=0.2, split=(1000, 500), n_max=64, rate_window=None,
        bands={"residual_decreasing": True}),
    "pwoga-2d": _PresetSpec(
        kind="pwoga",
        mesh=lambda: disk_mesh(833),
        oracle=lambda: make_oracle("cosine", 2, wave=1.0),
        gp_scale=0.2, split=(1000, 500), n_max=256, rate_window=(32, 256),
        bands={"slope_max": -1.0, "eps_u_max": 1e-2}),
    "pwoga-3d-smooth": _PresetSpec(
        kind="pwoga",
        mesh=lambda: cube_grid(17, dim=3),
        oracle=lambda: make_oracle("cosine", 3, wave=2.0),
        gp_scale=0.2, split=(1000, 1000), n_max=256, rate_window=(32, 256),
        bands={"slope_max": -0.8, "eps_u_max": 5e-3},
        sensors=lambda mesh: _sensor_subset(mesh, 64)),
    "pwoga-3d-logcos": _PresetSpec(
        kind="pwoga",
        mesh=lambda: cube_grid(17, dim=3),
        oracle=lambda: make_oracle("logcos", 3),
        gp_scale=0.2, split=(1000, 1000), n_max=256, rate_window=(32, 256),
        bands={},
        sensors=lambda mesh: _sensor_subset(mesh, 64)),
}


def _log(message: str, quiet: bool) -> None:
    if not quiet:
        print(message, file=sys.stderr, flush=True)


def _train_and_eval(spec: _PresetSpec, out_dir: Path, seed: int, n_max: int,
                    dict_size: int, threads: int, quiet: bool,
                    gp_scale: Optional[float] = None,
                    tag: str = "") -> tuple[dict, object, dataio.DataSet]:
    """Shared generate/train/eval steps; returns (values, model, train set)."""
    mesh = spec.mesh()
    oracle = spec.oracle()
    scale = spec.gp_scale if gp_scale is None else gp_scale
    gp = GPConfig(length_scale=scale, seed=seed)
    n_total = spec.split[0] + spec.split[1]
    train, test = synthesize_dataset(oracle, mesh, mesh, n_total, gp, spec.split,
                                     provenance={"preset_seed": str(seed)})
    data_dir = out_dir / (f"data{tag}")
    dataio.save_dataset(train, data_dir / "train", force=True)
    dataio.save_dataset(test, data_dir / "test", force=True)

    config = KernelFitConfig(n_max=n_max, dict_size=dict_size, seed=seed)
    sensors = spec.sensors(mesh) if spec.sensors is not None else None
    started = time.monotonic()
    if spec.kind == "oga":
        def progress(record):
            _log(f"  n={record.n} residual_H={record.residual:.6g} "
                 f"score={record.score:.6g} cond={record.gram_cond:.3g} "
                 f"l1={record.coeff_l1:.6g}", quiet)
        model = fit_kernel(train, config, oracle=oracle, test_data=test,
                           progress=progress)
        trace_rows = dataio.trace_rows(model.trace)
        with_sensor = False
        predicted = kernel_apply(evaluate_kernel(model), test.forcings.values,
                                 train.input_mesh)
        eps_u = metrics.relative_l2_solutions(predicted, test.responses.values,
                                              train.output_mesh)
        eps_g = metrics.relative_l2_kernel(evaluate_kernel(model), oracle,
                                           train.output_mesh, train.input_mesh)
    else:
        def progress(sensor, sub_model):
            _log(f"  sensor {sensor}: n={sub_model.size} status={sub_model.status}", quiet)
        model = fit_pointwise(train, config, sensors, oracle=oracle,
                              test_data=test, threads=threads, progress=progress)
        trace_rows = []
        for sub, sensor in zip(model.models, model.sensor_indices):
            trace_rows.extend(dataio.trace_rows(sub.trace, sensor=int(sensor)))
        trace_rows.extend(dataio.trace_rows(model.trace, sensor=-1))
        with_sensor = True
        weights = mesh.weights[model.sensor_indices]
        predicted = predict_pointwise(model, test.forcings.values)
        truth = test.responses.values[:, model.sensor_indices]
        subset_mesh = Mesh(mesh.nodes[model.sensor_indices], weights,
                           float(weights.sum()))
        eps_u = metrics.relative_l2_solutions(predicted, truth, subset_mesh)
        rows = assemble_kernel(model)
        reference = np.stack([oracle.row(mesh.nodes[s], train.input_mesh)
                              for s in model.sensor_indices])
        num = float(weights @ (((rows - reference) ** 2) @ train.input_mesh.weights))
        den = float(weights @ ((reference ** 2) @ train.input_mesh.weights))
        eps_g = float(np.sqrt(num / den))

    elapsed = time.monotonic() - started
    run_dir = out_dir / (f"run{tag}") if tag else out_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    dataio.save_model(model, run_dir / "model.bin")
    dataio.save_trace_csv(run_dir / "trace.csv", trace_rows, with_sensor=with_sensor)
    dataio.RunManifest(
        mode=spec.kind, seed=seed, dict_size=dict_size, power=config.power,
        n_max=n_max, normalized=train.normalized,
        dataset_path=str(data_dir / "train"),
        dataset_hash=dataio.dataset_content_hash(data_dir / "train"),
        sensors="all" if sensors is None else ",".join(map(str, sensors)),
    ).write(run_dir / "run_manifest.txt")

    values = {"final_eps_u": eps_u, "final_eps_G": eps_g,
              "train_seconds": round(elapsed, 1), "status": model.status}
    if spec.kind == "pwoga":
        values["sensor_breakdowns"] = sum(
            1 for sub in model.models if sub.status == "projection_breakdown")
    return values, model, train


def _rate_from_trace(model, window: tuple[int, int]) -> metrics.RateFit:
    trace = model.trace
    return metrics.fit_rate(trace.column("n"), trace.column("eps_u"),
                            window[0], window[1])


def run_preset(name: str, out_dir, seed: int = DEFAULT_SEED, *,
               n_max: Optional[int] = None, dict_size: Optional[int] = None,
               threads: int = 1, quiet: bool = False) -> PresetResult:
    """Run one named preset end to end and write summary.txt under out_dir."""
    if name not in PRESET_NAMES:
        raise ValueError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()
    if name == "overfit-svd":
        result = _run_overfit(out_dir, seed, n_max, dict_size, threads, quiet)
    else:
        result = _run_standard(name, out_dir, seed, n_max, dict_size, threads, quiet)
    result.elapsed_seconds = time.monotonic() - started
    (out_dir / "summary.txt").write_text("\n".join(result.summary_lines()) + "\n")
    _log("\n".join(result.summary_lines()), quiet)
    return result


def _run_standard(name: str, out_dir: Path, seed: int, n_max: Optional[int],
                  dict_size: Optional[int], threads: int, quiet: bool) -> PresetResult:
    spec = _SPECS[name]
    n_max = spec.n_max if n_max is None else n_max
    dict_size = spec.dict_size if dict_size is None else dict_size
    _log(f"[{name}] generating and training (n_max={n_max}, seed={seed})", quiet)
    values, model, _train_set = _train_and_eval(spec, out_dir, seed, n_max,
                                                dict_size, threads, quiet)
    bands = []
    if "slope_max" in spec.bands and spec.rate_window is not None:
        window = (min(spec.rate_window[0], n_max), min(spec.rate_window[1], n_max))
        values["rate_window"] = f"[{window[0]}, {window[1]}]"
        try:
            rate = _rate_from_trace(model, window)
        except metrics.MetricError as err:
            values["rate_error"] = str(err)
            bands.append(BandCheck("eps_u slope", float("nan"),
                                   f"<= {spec.bands['slope_max']}", False))
        else:
            values["eps_u_slope"] = rate.slope
            values["rate_r_squared"] = round(rate.r_squared, 4)
            bands.append(BandCheck("eps_u slope", rate.slope,
                                   f"<= {spec.bands['slope_max']}",
                                   rate.slope <= spec.bands["slope_max"]))
    if "eps_u_max" in spec.bands:
        bands.append(BandCheck("final eps_u", values["final_eps_u"],
                               f"<= {spec.bands['eps_u_max']}",
                               values["final_eps_u"] <= spec.bands["eps_u_max"]))
    if "eps_g_max" in spec.bands:
        bands.append(BandCheck("final eps_G", values["final_eps_G"],
                               f"<= {spec.bands['eps_g_max']}",
                               values["final_eps_G"] <= spec.bands["eps_g_max"]))
    if spec.bands.get("residual_decreasing"):
        residuals = model.trace.column("residual")
        decreased = residuals.size > 0 and residuals[-1] < residuals[0]
        monotone = residuals.size > 0 and bool(np.all(np.diff(residuals) <= 1e-12 * residuals[0]))
        bands.append(BandCheck("residual trace decreasing",
                               float(residuals[-1] / residuals[0]) if residuals.size else np.nan,
                               "final < initial, non-increasing",
                               decreased and monotone))
    breakdown = values["status"] == BREAKDOWN
    return PresetResult(name=name, out_dir=out_dir, bands=bands, values=values,
                        elapsed_seconds=0.0, breakdown=breakdown)


def _neurons_to_level(ns: np.ndarray, eps: np.ndarray, level: float) -> Optional[int]:
    reached = np.nonzero(eps <= level)[0]
    return int(ns[reached[0]]) if reached.size else None


def _run_overfit(out_dir: Path, seed: int, n_max: Optional[int],
                 dict_size: Optional[int], threads: int, quiet: bool) -> PresetResult:
    """Data-richness diagnostic: GP length scale vs rank and overfitting."""
    n_max = 128 if n_max is None else n_max
    dict_size = 512 if dict_size is None else dict_size
    mesh = disk_mesh(833)
    scales = (0.1, 0.2, 0.5)
    values: dict = {}
    ranks: dict = {}
    spec = _PresetSpec(
        kind="pwoga", mesh=lambda: mesh,
        oracle=lambda: make_oracle("cosine", 2, wave=4.0),
        gp_scale=0.1, split=(400, 100), n_max=n_max, rate_window=None, bands={},
        sensors=lambda m: _sensor_subset(m, 64), dict_size=dict_size)

    for scale in scales:
        gp = GPConfig(length_scale=scale, seed=seed)
        forcings = synthesize_dataset(spec.oracle(), mesh, mesh, 500, gp,
                                      (400, 100))[0].forcings.values
        _, rank = metrics.data_rank_diagnostic(forcings)
        ranks[scale] = rank
        values[f"effective_rank_l{scale}"] = rank
    _log(f"[overfit-svd] effective ranks: {ranks}", quiet)

    traces = {}
    for scale in (0.1, 0.5):
        _log(f"[overfit-svd] PW-OGA training at length scale {scale}", quiet)
        run_values, model, _ = _train_and_eval(spec, out_dir, seed, n_max, dict_size,
                                               threads, quiet, gp_scale=scale,
                                               tag=f"-l{scale}")
        traces[scale] = model.trace
        values[f"final_eps_u_l{scale}"] = run_values["final_eps_u"]
        values[f"final_eps_G_l{scale}"] = run_values["final_eps_G"]

    ns01 = traces[0.1].column("n")
    eps01 = traces[0.1].column("eps_u")
    ns05 = traces[0.5].column("n")
    eps05 = traces[0.5].column("eps_u")
    level_hi = min(np.nanmax(eps01), np.nanmax(eps05))
    level_lo = max(np.nanmin(eps01), np.nanmin(eps05))
    dominated = True
    if level_lo <= level_hi:
        for level in np.geomspace(level_hi, level_lo, 8):
            n01 = _neurons_to_level(ns01, eps01, level)
            n05 = _neurons_to_level(ns05, eps05, level)
            if n01 is not None and n05 is not None and n05 > n01:
                dominated = False
    values["eps_u_levels_checked"] = f"[{level_lo:.3g}, {level_hi:.3g}]"

    bands = [
        BandCheck("effective rank l=0.5 vs l=0.1", float(ranks[0.5]),
                  f"< {ranks[0.1]}", ranks[0.5] < ranks[0.1]),
        BandCheck("neurons to reach any shared eps_u level (l=0.5 vs l=0.1)",
                  1.0 if dominated else 0.0, "no more neurons", dominated),
        BandCheck("final eps_G l=0.5 vs l=0.1", values["final_eps_G_l0.5"],
                  f"> {values['final_eps_G_l0.1']:.6g}",
                  values["final_eps_G_l0.5"] > values["final_eps_G_l0.1"]),
    ]
    return PresetResult(name="overfit-svd", out_dir=out_dir, bands=bands,
                        values=values, elapsed_seconds=0.0)
