"""End-to-end tests of the command line: generate, train, eval, rate, repro."""

import numpy as np
import pytest

from greedykernel import cli, dataio, metrics
from greedykernel.dataio import DataSet, TRACE_COLUMNS
from greedykernel.dictionary import Atom
from greedykernel.geometry import uniform_grid_1d
from greedykernel.greedy import BREAKDOWN, COMPLETED, FitTrace, GreedyModel
from greedykernel.kernel_oga import KernelModel, evaluate_kernel
from greedykernel.products import FieldSet, kernel_apply


def _value(stdout: str, key: str) -> float:
    for line in stdout.splitlines():
        if line.startswith(f"{key} = "):
            return float(line.partition(" = ")[2])
    raise AssertionError(f"no line '{key} = ...' in output:\n{stdout}")


@pytest.fixture(scope="module")
def dataset_dirs(tmp_path_factory):
    """Small 1-D Poisson dataset shared by the CLI tests (6 train / 3 test)."""
    base = tmp_path_factory.mktemp("cli-data")
    code = cli.main([
        "generate", "--problem", "poisson1d", "--grid", "41",
        "--train", "6", "--test", "3", "--gp-scale", "0.3",
        "--seed", "3", "--out", str(base)])
    assert code == 0
    return base / "train", base / "test", base


@pytest.fixture(scope="module")
def trained_oga(tmp_path_factory, dataset_dirs):
    train_dir, test_dir, _ = dataset_dirs
    out = tmp_path_factory.mktemp("cli-oga")
    code = cli.main([
        "train", "--data", str(train_dir), "--mode", "oga",
        "--nmax", "6", "--dict", "32", "--seed", "1",
        "--test-data", str(test_dir), "--kernel-error", "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained_pwoga(tmp_path_factory, dataset_dirs):
    train_dir, test_dir, _ = dataset_dirs
    out = tmp_path_factory.mktemp("cli-pwoga")
    code = cli.main([
        "train", "--data", str(train_dir), "--mode", "pwoga",
        "--sensors", "0..2,40", "--nmax", "4", "--dict", "16", "--seed", "1",
        "--test-data", str(test_dir), "--out", str(out)])
    assert code == 0
    return out


# ------------------------------------------------------------------ generate

def test_generate_writes_both_splits(dataset_dirs):
    train_dir, test_dir, _ = dataset_dirs
    train = dataio.load_dataset(train_dir)
    test = dataio.load_dataset(test_dir)
    assert len(train.forcings) == 6
    assert len(test.forcings) == 3
    assert train.input_mesh.node_count == 41
    assert train.provenance["problem"] == "poisson1d"


def test_generate_refuses_existing_without_force(dataset_dirs, tmp_path, capsys):
    _, _, base = dataset_dirs
    args = ["generate", "--problem", "poisson1d", "--grid", "11",
            "--train", "2", "--test", "1", "--gp-scale", "0.3",
            "--out", str(base)]
    assert cli.main(args) == 1
    assert "exists" in capsys.readouterr().err
    # a fresh directory and an explicit --force both succeed
    assert cli.main(args[:-1] + [str(tmp_path / "fresh")]) == 0
    assert cli.main(args + ["--force"]) == 0
    # put the shared fixture back the way the other tests expect it
    assert cli.main(["generate", "--problem", "poisson1d", "--grid", "41",
                     "--train", "6", "--test", "3", "--gp-scale", "0.3",
                     "--seed", "3", "--out", str(base), "--force"]) == 0


def test_generate_dimension_validation(tmp_path, capsys):
    code = cli.main(["generate", "--problem", "cosine", "--dim", "2",
                     "--train", "2", "--test", "1", "--gp-scale", "0.3",
                     "--out", str(tmp_path / "a")])
    assert code == 1
    assert "--mesh is required" in capsys.readouterr().err

    code = cli.main(["generate", "--problem", "poisson1d", "--dim", "1",
                     "--mesh", "disk:50", "--train", "2", "--test", "1",
                     "--gp-scale", "0.3", "--out", str(tmp_path / "b")])
    assert code == 1
    assert "--grid" in capsys.readouterr().err

    code = cli.main(["generate", "--problem", "cosine", "--dim", "3",
                     "--mesh", "disk:50", "--train", "2", "--test", "1",
                     "--gp-scale", "0.3", "--out", str(tmp_path / "c")])
    assert code == 1
    assert "disk meshes are 2-D" in capsys.readouterr().err


def test_generate_accepts_mesh_csv(tmp_path):
    rng = np.random.default_rng(5)
    nodes = rng.uniform(-0.5, 0.5, size=(25, 2))
    weights = np.full(25, 1.0 / 25)
    np.savetxt(tmp_path / "mesh.csv", np.column_stack([nodes, weights]),
               delimiter=",")
    out = tmp_path / "out"
    code = cli.main(["generate", "--problem", "cosine", "--dim", "2",
                     "--mesh", str(tmp_path / "mesh.csv"), "--wave", "1.5",
                     "--train", "3", "--test", "1", "--gp-scale", "0.4",
                     "--out", str(out)])
    assert code == 0
    data = dataio.load_dataset(out / "train")
    assert data.input_mesh.node_count == 25
    np.testing.assert_allclose(data.input_mesh.nodes, nodes, atol=1e-15)
    assert data.provenance["kernel_wave"] == "1.5"


def test_generate_rejects_bad_mesh_csv_width(tmp_path, capsys):
    np.savetxt(tmp_path / "mesh.csv", np.ones((10, 5)), delimiter=",")
    code = cli.main(["generate", "--problem", "cosine", "--dim", "2",
                     "--mesh", str(tmp_path / "mesh.csv"), "--train", "2",
                     "--test", "1", "--gp-scale", "0.3",
                     "--out", str(tmp_path / "out")])
    assert code == 1
    assert "expected 3 columns" in capsys.readouterr().err


def test_generate_logdiscrete_uses_symmetric_interval(tmp_path):
    out = tmp_path / "out"
    code = cli.main(["generate", "--problem", "logdiscrete", "--grid", "21",
                     "--train", "3", "--test", "1", "--gp-scale", "0.4",
                     "--out", str(out)])
    assert code == 0
    data = dataio.load_dataset(out / "train")
    assert data.input_mesh.nodes.min() == pytest.approx(-1.0)
    assert data.input_mesh.nodes.max() == pytest.approx(1.0)


# ------------------------------------------------------------ config files

def test_config_file_supplies_options_and_flags_win(tmp_path):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("problem = poisson1d\ngrid = 21\ntrain = 3\ntest = 2\n"
                   "gp-scale = 0.25\nout = {}\n".format(tmp_path / "out"))
    code = cli.main(["generate", "--config", str(cfg), "--train", "5"])
    assert code == 0
    data = dataio.load_dataset(tmp_path / "out" / "train")
    assert len(data.forcings) == 5  # the flag overrode train = 3
    assert dataio.load_dataset(tmp_path / "out" / "test").forcings.values.shape[0] == 2


def test_config_file_boolean_flag(tmp_path):
    out = tmp_path / "out"
    args = ["generate", "--problem", "poisson1d", "--grid", "11",
            "--train", "2", "--test", "1", "--gp-scale", "0.3", "--out", str(out)]
    assert cli.main(args) == 0
    cfg = tmp_path / "force.cfg"
    cfg.write_text("force = true\n")
    assert cli.main(args + ["--config", str(cfg)]) == 0


def test_config_file_rejects_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("bogus = 1\n")
    code = cli.main(["generate", "--config", str(cfg), "--problem", "poisson1d",
                     "--train", "2", "--test", "1", "--gp-scale", "0.3",
                     "--out", str(tmp_path / "out")])
    assert code == 1
    err = capsys.readouterr().err
    assert "unknown key 'bogus'" in err
    assert "known:" in err and "gp-scale" in err


def test_missing_required_option_is_reported(tmp_path, capsys):
    code = cli.main(["train", "--data", str(tmp_path), "--mode", "oga",
                     "--out", str(tmp_path / "run")])
    assert code == 1
    assert "--nmax is required" in capsys.readouterr().err


# ------------------------------------------------------------------- train

def test_train_writes_model_trace_and_manifest(trained_oga, dataset_dirs):
    train_dir, _, _ = dataset_dirs
    model = dataio.load_model(trained_oga / "model.bin")
    assert isinstance(model, KernelModel)
    assert model.model.size == 6
    assert model.status == COMPLETED

    columns = dataio.load_trace_csv(trained_oga / "trace.csv")
    assert set(columns) == set(TRACE_COLUMNS)
    assert columns["n"].tolist() == [1, 2, 3, 4, 5, 6]
    assert np.isfinite(columns["eps_u"]).all()
    assert np.isfinite(columns["eps_G"]).all()

    manifest = dataio.RunManifest.read(trained_oga / "run_manifest.txt")
    assert manifest.mode == "oga"
    assert manifest.n_max == 6
    assert manifest.dataset_hash == dataio.dataset_content_hash(train_dir)


def test_train_refuses_overwrite_without_force(trained_oga, dataset_dirs, capsys):
    train_dir, _, _ = dataset_dirs
    code = cli.main(["train", "--data", str(train_dir), "--mode", "oga",
                     "--nmax", "2", "--out", str(trained_oga)])
    assert code == 1
    assert "pass --force" in capsys.readouterr().err


def test_train_rejects_sensors_for_oga(dataset_dirs, tmp_path, capsys):
    train_dir, _, _ = dataset_dirs
    code = cli.main(["train", "--data", str(train_dir), "--mode", "oga",
                     "--nmax", "2", "--sensors", "0..3",
                     "--out", str(tmp_path / "run")])
    assert code == 1
    assert "--sensors applies to --mode pwoga" in capsys.readouterr().err


def test_train_pwoga_trace_has_sensor_rows(trained_pwoga):
    columns = dataio.load_trace_csv(trained_pwoga / "trace.csv")
    assert "sensor" in columns
    sensors = set(columns["sensor"].astype(int).tolist())
    # boundary sensors 0 and 40 have identically zero responses, so their fits
    # stop at size 0 with empty traces; -1 marks the aggregate rows
    assert sensors == {1, 2, -1}
    model = dataio.load_model(trained_pwoga / "model.bin")
    assert model.sensor_indices.tolist() == [0, 1, 2, 40]
    assert model.status == COMPLETED
    by_sensor = dict(zip(model.sensor_indices.tolist(), model.models))
    assert by_sensor[0].size == 0 and by_sensor[40].size == 0
    assert by_sensor[1].size == 4 and by_sensor[1].status == COMPLETED


def test_train_kernel_error_needs_generated_provenance(tmp_path, capsys):
    mesh = uniform_grid_1d(0.0, 1.0, 9)
    values = np.arange(18, dtype=float).reshape(2, 9) + 1.0
    data = DataSet(input_mesh=mesh, output_mesh=mesh,
                   forcings=FieldSet(values, mesh),
                   responses=FieldSet(values * 0.5, mesh),
                   normalized=False, provenance={})
    dataio.save_dataset(data, tmp_path / "ds")
    code = cli.main(["train", "--data", str(tmp_path / "ds"), "--mode", "oga",
                     "--nmax", "2", "--kernel-error",
                     "--out", str(tmp_path / "run")])
    assert code == 1
    assert "provenance" in capsys.readouterr().err


def test_train_breakdown_returns_exit_code_3(dataset_dirs, tmp_path, monkeypatch):
    train_dir, _, _ = dataset_dirs
    atom = Atom(1.0, np.array([0.6, 0.8]), 0.1, 1)
    broken = GreedyModel([atom], np.array([1.0]), FitTrace(), BREAKDOWN,
                         dim=2, power=1)

    def fake_fit(data, config, **kwargs):
        return KernelModel(model=broken, output_mesh=data.output_mesh,
                           input_mesh=data.input_mesh)

    monkeypatch.setattr(cli, "fit_kernel", fake_fit)
    code = cli.main(["train", "--data", str(train_dir), "--mode", "oga",
                     "--nmax", "4", "--out", str(tmp_path / "run")])
    assert code == 3
    saved = dataio.load_model(tmp_path / "run" / "model.bin")
    assert saved.status == BREAKDOWN


# -------------------------------------------------------------------- eval

def test_eval_reports_zero_error_for_exact_model(tmp_path, capsys):
    mesh = uniform_grid_1d(0.0, 1.0, 17)
    atom = Atom(1.0, np.array([0.6, 0.8]), 0.15, 1)
    planted = GreedyModel([atom], np.array([2.5]), FitTrace(), COMPLETED,
                          dim=2, power=1)
    model = KernelModel(model=planted, output_mesh=mesh, input_mesh=mesh)
    table = evaluate_kernel(model)
    rng = np.random.default_rng(11)
    forcings = rng.normal(size=(4, mesh.node_count))
    responses = kernel_apply(table, forcings, mesh)
    data = DataSet(input_mesh=mesh, output_mesh=mesh,
                   forcings=FieldSet(forcings, mesh),
                   responses=FieldSet(responses, mesh), normalized=False)
    dataio.save_dataset(data, tmp_path / "ds")
    dataio.save_model(model, tmp_path / "model.bin")

    code = cli.main(["eval", "--model", str(tmp_path / "model.bin"),
                     "--data", str(tmp_path / "ds")])
    assert code == 0
    assert _value(capsys.readouterr().out, "eps_u") < 1e-13


def test_eval_matches_direct_metric_and_writes_report(trained_oga, dataset_dirs,
                                                      tmp_path, capsys):
    _, test_dir, _ = dataset_dirs
    out = tmp_path / "report"
    code = cli.main(["eval", "--model", str(trained_oga / "model.bin"),
                     "--data", str(test_dir), "--kernel-error",
                     "--out", str(out)])
    assert code == 0
    stdout = capsys.readouterr().out

    model = dataio.load_model(trained_oga / "model.bin")
    data = dataio.load_dataset(test_dir)
    table = evaluate_kernel(model, data.output_mesh, data.input_mesh)
    predicted = kernel_apply(table, data.forcings.values, data.input_mesh)
    expected = metrics.relative_l2_solutions(predicted, data.responses.values,
                                             data.output_mesh)
    assert _value(stdout, "eps_u") == pytest.approx(expected, rel=1e-12)
    assert _value(stdout, "eps_G") > 0.0

    report = (out / "report.txt").read_text()
    assert f"eps_u = {_value(stdout, 'eps_u'):.17g}" in report
    field = np.loadtxt(out / "error_field.csv", delimiter=",", skiprows=1)
    assert field.shape == (41, 2)  # node coordinate + mean absolute error
    assert (field[:, 1] >= 0.0).all()


def test_eval_pointwise_rejects_foreign_output_mesh(trained_pwoga, tmp_path, capsys):
    out = tmp_path / "other"
    assert cli.main(["generate", "--problem", "poisson1d", "--grid", "31",
                     "--train", "2", "--test", "1", "--gp-scale", "0.3",
                     "--out", str(out)]) == 0
    code = cli.main(["eval", "--model", str(trained_pwoga / "model.bin"),
                     "--data", str(out / "test")])
    assert code == 1
    assert "nodes differ" in capsys.readouterr().err


def test_eval_missing_model_file(tmp_path, dataset_dirs, capsys):
    _, test_dir, _ = dataset_dirs
    code = cli.main(["eval", "--model", str(tmp_path / "nope.bin"),
                     "--data", str(test_dir)])
    assert code == 1


# -------------------------------------------------------------------- rate

def test_rate_recovers_exact_power_law(tmp_path, capsys):
    rows = [{"n": n, "residual_H": 7.0 * n ** -1.5, "eps_u": 3.0 * n ** -0.5,
             "eps_G": None, "score": 1.0, "gram_cond": 1.0}
            for n in range(1, 41)]
    trace = tmp_path / "trace.csv"
    dataio.save_trace_csv(trace, rows)

    out_csv = tmp_path / "fits.csv"
    code = cli.main(["rate", "--trace", str(trace), "--metric", "residual_H",
                     "--nlo", "1", "--out", str(out_csv)])
    assert code == 0
    assert "slope = -1.5" in capsys.readouterr().out
    fields = out_csv.read_text().splitlines()[1].split(",")
    assert fields[0] == "residual_H"
    assert float(fields[1]) == pytest.approx(-1.5, rel=1e-12)
    assert int(fields[6]) == 40

    # --metric all skips the empty eps_G column instead of failing
    code = cli.main(["rate", "--trace", str(trace), "--nlo", "1"])
    assert code == 0
    stdout = capsys.readouterr().out
    assert "eps_G: no finite values, skipped" in stdout
    assert "eps_u: slope = -0.5" in stdout

    # asking for the empty column explicitly is an error
    code = cli.main(["rate", "--trace", str(trace), "--metric", "eps_G",
                     "--nlo", "1"])
    assert code == 1


def test_rate_filters_per_sensor_rows(trained_pwoga, capsys):
    trace = str(trained_pwoga / "trace.csv")
    code = cli.main(["rate", "--trace", trace, "--metric", "residual_H",
                     "--sensor", "2", "--nlo", "1"])
    assert code == 0
    assert "points = 4" in capsys.readouterr().out

    code = cli.main(["rate", "--trace", trace, "--metric", "residual_H",
                     "--nlo", "1"])  # default --sensor -1 selects aggregate rows
    assert code == 0

    code = cli.main(["rate", "--trace", trace, "--metric", "residual_H",
                     "--sensor", "7", "--nlo", "1"])
    assert code == 1
    assert "no rows for sensor 7" in capsys.readouterr().err


def test_rate_missing_trace_file(tmp_path, capsys):
    code = cli.main(["rate", "--trace", str(tmp_path / "nope.csv")])
    assert code == 1
    assert "not found" in capsys.readouterr().err


# ----------------------------------------------------------- sensor parsing

def test_parse_sensor_spec():
    assert cli.parse_sensor_spec("all") is None
    assert cli.parse_sensor_spec("0,3,5") == [0, 3, 5]
    assert cli.parse_sensor_spec("2..5") == [2, 3, 4, 5]
    assert cli.parse_sensor_spec("1, 4..6, 9") == [1, 4, 5, 6, 9]
    with pytest.raises(ValueError):
        cli.parse_sensor_spec("5..2")
    with pytest.raises(ValueError):
        cli.parse_sensor_spec(",")


# ------------------------------------------------------------------- repro

def test_repro_tiny_run_fails_bands_with_exit_4(tmp_path, capsys):
    out = tmp_path / "repro"
    code = cli.main(["repro", "poisson1d", "--nmax", "4", "--dict", "16",
                     "--out", str(out), "--quiet"])
    assert code == 4  # bands cannot be met at this budget, but nothing crashed
    stdout = capsys.readouterr().out
    assert "result = FAIL" in stdout
    assert "status = completed" in stdout

    summary = (out / "summary.txt").read_text()
    assert summary.startswith("preset poisson1d")
    assert (out / "model.bin").exists()
    assert (out / "trace.csv").exists()
    assert (out / "run_manifest.txt").exists()
    assert (out / "data" / "train" / "manifest.txt").exists()
    assert dataio.load_trace_csv(out / "trace.csv")["n"].tolist() == [1, 2, 3, 4]


def test_repro_rejects_unknown_preset():
    with pytest.raises(SystemExit) as exc:
        cli.main(["repro", "not-a-preset"])
    assert exc.value.code == 2


# -------------------------------------------------------- argparse plumbing

def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_threads_environment_variable(monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    _, commands = cli.build_parser()
    assert commands["train"].defaults["threads"] == 3

    monkeypatch.setenv(cli.THREADS_ENV, "abc")
    assert cli.main(["train"]) == 1

    monkeypatch.setenv(cli.THREADS_ENV, "0")
    assert cli.main(["train"]) == 1
