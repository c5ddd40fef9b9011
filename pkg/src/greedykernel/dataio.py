"""Dataset directories, model binaries, trace CSVs, and run manifests.

Datasets are directories of plain CSV plus a key = value manifest carrying
dimensions, volumes, content hashes, and free-form provenance. Floats are
written with 17 significant digits so round-trips are exact. Models use a
small length-prefixed binary block format.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .geometry import Mesh
from .greedy import FitTrace, GreedyModel, TraceRecord
from .dictionary import Atom
from .products import FieldSet

FORMAT_VERSION = 1
TOOL_VERSION = "0.1.0"
_MAGIC = b"GKMODEL\x00"
_KIND_FUNCTION = 1
_KIND_KERNEL = 2
_KIND_POINTWISE = 3

_FLOAT_FMT = "%.17g"

TRACE_COLUMNS = ("n", "residual_H", "eps_u", "eps_G", "score", "gram_cond")


class DataLoadError(Exception):
    """A file failed to load; the message names the file and location."""


@dataclass(frozen=True, eq=False)
class DataSet:
    """Forcing/response pairs over an input and an output mesh."""

    input_mesh: Mesh
    output_mesh: Mesh
    forcings: FieldSet
    responses: FieldSet
    normalized: bool = True
    provenance: dict = dataclass_field(default_factory=dict)

    def __post_init__(self):
        if self.forcings.mesh is not self.input_mesh and \
                self.forcings.mesh.node_count != self.input_mesh.node_count:
            raise ValueError("forcings are not sampled on the input mesh")
        if self.responses.mesh.node_count != self.output_mesh.node_count:
            raise ValueError("responses are not sampled on the output mesh")
        if len(self.forcings) != len(self.responses):
            raise ValueError(
                f"{len(self.forcings)} forcings but {len(self.responses)} responses"
            )

    def __len__(self) -> int:
        return len(self.forcings)


def normalize_pairs(forcings: np.ndarray, responses: np.ndarray,
                    input_mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Scale each (f, u) pair by 1 / ||f||_L2 (discrete)."""
    norms = np.sqrt(np.maximum((forcings * forcings) @ input_mesh.weights, 0.0))
    if np.any(norms == 0.0):
        bad = int(np.argmax(norms == 0.0))
        raise ValueError(f"forcing {bad} has zero L2 norm; cannot normalize")
    return forcings / norms[:, None], responses / norms[:, None]


# ---------------------------------------------------------------------------
# manifests


def _write_manifest(path: Path, entries: dict) -> None:
    lines = [f"{key} = {value}" for key, value in entries.items()]
    path.write_text("\n".join(lines) + "\n")


def write_manifest(path: Union[str, Path], entries: dict) -> None:
    """Write a 'key = value' manifest file."""
    _write_manifest(Path(path), entries)


def read_manifest(path: Union[str, Path]) -> dict:
    """Read a 'key = value' manifest file into a dict of strings."""
    return _parse_manifest(Path(path))


def _parse_manifest(path: Path) -> dict:
    entries = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataLoadError(f"{path.name}: line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def dataset_content_hash(directory: Union[str, Path]) -> str:
    """Joint hash over a dataset directory's files, in fixed order."""
    directory = Path(directory)
    digest = hashlib.sha256()
    for name in ("manifest.txt", "mesh_in.csv", "mesh_out.csv", "F.csv", "U.csv"):
        digest.update(_sha256(directory / name).encode())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# CSV


def _save_matrix_csv(path: Path, values: np.ndarray) -> None:
    np.savetxt(path, np.atleast_2d(values), fmt=_FLOAT_FMT, delimiter=",")


def _load_matrix_csv(path: Path, expected_columns: Optional[int] = None) -> np.ndarray:
    if not path.exists():
        raise DataLoadError(f"{path.name}: file not found in {path.parent}")
    try:
        values = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError:
        _scan_csv_for_error(path, expected_columns)
        raise DataLoadError(f"{path.name}: malformed CSV")
    if expected_columns is not None and values.shape[1] != expected_columns:
        _scan_csv_for_error(path, expected_columns)
        raise DataLoadError(
            f"{path.name}: expected {expected_columns} columns, found {values.shape[1]}"
        )
    return values


def _scan_csv_for_error(path: Path, expected_columns: Optional[int]) -> None:
    """Row-precise diagnosis of a CSV that failed the fast path."""
    width = expected_columns
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip():
            raise DataLoadError(f"{path.name}: row {lineno}: blank line")
        cells = raw.split(",")
        if width is None:
            width = len(cells)
        if len(cells) != width:
            raise DataLoadError(
                f"{path.name}: row {lineno}: expected {width} values, got {len(cells)}"
            )
        for cell in cells:
            try:
                float(cell)
            except ValueError:
                raise DataLoadError(
                    f"{path.name}: row {lineno}: not a number: {cell.strip()!r}"
                ) from None


def _save_mesh_csv(path: Path, mesh: Mesh) -> None:
    _save_matrix_csv(path, np.hstack([mesh.nodes, mesh.weights[:, None]]))


def _load_mesh_csv(path: Path, dim: int, volume: float) -> Mesh:
    values = _load_matrix_csv(path)
    if values.shape[1] == dim + 1:
        return Mesh(values[:, :dim], values[:, dim], volume)
    if values.shape[1] == dim:
        return Mesh(values, np.full(values.shape[0], volume / values.shape[0]), volume)
    raise DataLoadError(
        f"{path.name}: expected {dim} or {dim + 1} columns for a dim-{dim} mesh, "
        f"found {values.shape[1]}"
    )


# ---------------------------------------------------------------------------
# datasets


def save_dataset(dataset: DataSet, directory: Union[str, Path], force: bool = False) -> Path:
    """Write a dataset directory; refuses to overwrite unless force."""
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()) and not force:
        raise FileExistsError(f"{directory} exists and is not empty (use force to overwrite)")
    directory.mkdir(parents=True, exist_ok=True)
    _save_mesh_csv(directory / "mesh_in.csv", dataset.input_mesh)
    _save_mesh_csv(directory / "mesh_out.csv", dataset.output_mesh)
    _save_matrix_csv(directory / "F.csv", dataset.forcings.values)
    _save_matrix_csv(directory / "U.csv", dataset.responses.values)
    entries = {
        "format": f"greedykernel-dataset-{FORMAT_VERSION}",
        "tool_version": TOOL_VERSION,
        "dim_in": dataset.input_mesh.dim,
        "dim_out": dataset.output_mesh.dim,
        "n_samples": len(dataset),
        "mesh_in_volume": repr(dataset.input_mesh.volume),
        "mesh_out_volume": repr(dataset.output_mesh.volume),
        "normalized": str(bool(dataset.normalized)).lower(),
    }
    for name in ("mesh_in.csv", "mesh_out.csv", "F.csv", "U.csv"):
        entries[f"sha256_{name.removesuffix('.csv')}"] = _sha256(directory / name)
    for key, value in dataset.provenance.items():
        entries[f"prov.{key}"] = value
    _write_manifest(directory / "manifest.txt", entries)
    return directory


def load_dataset(directory: Union[str, Path], check_hashes: bool = True) -> DataSet:
    """Load a dataset directory, verifying structure and content hashes."""
    directory = Path(directory)
    manifest_path = directory / "manifest.txt"
    if not manifest_path.exists():
        raise DataLoadError(f"manifest.txt: not found in {directory}")
    manifest = _parse_manifest(manifest_path)
    expected_format = f"greedykernel-dataset-{FORMAT_VERSION}"
    if manifest.get("format") != expected_format:
        raise DataLoadError(
            f"manifest.txt: format {manifest.get('format')!r}, expected {expected_format!r}"
        )
    try:
        dim_in = int(manifest["dim_in"])
        dim_out = int(manifest["dim_out"])
        n_samples = int(manifest["n_samples"])
        vol_in = float(manifest["mesh_in_volume"])
        vol_out = float(manifest["mesh_out_volume"])
        normalized = manifest.get("normalized", "false") == "true"
    except KeyError as missing:
        raise DataLoadError(f"manifest.txt: missing key {missing}") from None
    except ValueError as bad:
        raise DataLoadError(f"manifest.txt: bad value: {bad}") from None
    if check_hashes:
        for name in ("mesh_in.csv", "mesh_out.csv", "F.csv", "U.csv"):
            key = f"sha256_{name.removesuffix('.csv')}"
            if key in manifest and _sha256(directory / name) != manifest[key]:
                raise DataLoadError(f"{name}: content hash mismatch against manifest.txt")
    mesh_in = _load_mesh_csv(directory / "mesh_in.csv", dim_in, vol_in)
    mesh_out = _load_mesh_csv(directory / "mesh_out.csv", dim_out, vol_out)
    forcings = _load_matrix_csv(directory / "F.csv", mesh_in.node_count)
    responses = _load_matrix_csv(directory / "U.csv", mesh_out.node_count)
    if forcings.shape[0] != n_samples:
        raise DataLoadError(f"F.csv: {forcings.shape[0]} rows, manifest says {n_samples}")
    if responses.shape[0] != n_samples:
        raise DataLoadError(f"U.csv: {responses.shape[0]} rows, manifest says {n_samples}")
    provenance = {key.removeprefix("prov."): value
                  for key, value in manifest.items() if key.startswith("prov.")}
    return DataSet(mesh_in, mesh_out, FieldSet(forcings, mesh_in),
                   FieldSet(responses, mesh_out), normalized, provenance)


# ---------------------------------------------------------------------------
# trace CSV


def trace_rows(trace: FitTrace, sensor: Optional[int] = None) -> list[dict]:
    rows = []
    for rec in trace.records:
        row = {"n": rec.n, "residual_H": rec.residual, "eps_u": rec.eps_u,
               "eps_G": rec.eps_g, "score": rec.score, "gram_cond": rec.gram_cond}
        if sensor is not None:
            row["sensor"] = sensor
        rows.append(row)
    return rows


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if np.isnan(value):
        return ""
    return _FLOAT_FMT % value


def save_trace_csv(path: Union[str, Path], rows: list[dict], with_sensor: bool = False) -> None:
    """Write trace rows; eps cells left empty when not computed."""
    columns = TRACE_COLUMNS + (("sensor",) if with_sensor else ())
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_format_cell(row.get(col)) for col in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trace_csv(path: Union[str, Path]) -> dict:
    """Read a trace CSV into a dict of float arrays (NaN for empty cells)."""
    path = Path(path)
    if not path.exists():
        raise DataLoadError(f"{path.name}: file not found")
    lines = path.read_text().splitlines()
    if not lines:
        raise DataLoadError(f"{path.name}: empty file")
    header = lines[0].split(",")
    expected = list(TRACE_COLUMNS)
    if header != expected and header != expected + ["sensor"]:
        raise DataLoadError(f"{path.name}: unexpected header {lines[0]!r}")
    data = {name: [] for name in header}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != len(header):
            raise DataLoadError(
                f"{path.name}: row {lineno}: expected {len(header)} cells, got {len(cells)}"
            )
        for name, cell in zip(header, cells):
            try:
                data[name].append(float(cell) if cell != "" else np.nan)
            except ValueError:
                raise DataLoadError(
                    f"{path.name}: row {lineno}: not a number: {cell!r}"
                ) from None
    return {name: np.asarray(values) for name, values in data.items()}


# ---------------------------------------------------------------------------
# model binary

def _pack_block(payload: bytes) -> bytes:
    return struct.pack("<Q", len(payload)) + payload


class _Cursor:
    def __init__(self, buffer: bytes, name: str):
        self.buffer = buffer
        self.offset = 0
        self.name = name

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.buffer):
            raise DataLoadError(f"{self.name}: truncated at byte {self.offset}")
        out = self.buffer[self.offset: self.offset + count]
        self.offset += count
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def block(self) -> "_Cursor":
        (length,) = self.unpack("Q")
        return _Cursor(self.take(length), self.name)

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").copy()


def _mesh_block(mesh: Mesh) -> bytes:
    payload = struct.pack("<IQd", mesh.dim, mesh.node_count, mesh.volume)
    payload += mesh.nodes.astype("<f8").tobytes()
    payload += mesh.weights.astype("<f8").tobytes()
    return _pack_block(payload)


def _read_mesh(cursor: _Cursor) -> Mesh:
    block = cursor.block()
    dim, count, volume = block.unpack("IQd")
    nodes = block.floats(count * dim).reshape(count, dim)
    weights = block.floats(count)
    return Mesh(nodes, weights, volume)


def _model_block(model: GreedyModel) -> bytes:
    status = model.status.encode()
    payload = struct.pack("<H", len(status)) + status
    payload += struct.pack("<IQ", model.dim, model.size)
    rows = np.empty((model.size, model.dim + 3))
    for i, atom in enumerate(model.atoms):
        rows[i, 0] = atom.sign
        rows[i, 1] = atom.power
        rows[i, 2] = atom.bias
        rows[i, 3:] = atom.direction
    payload += rows.astype("<f8").tobytes()
    payload += model.coefficients.astype("<f8").tobytes()
    trace = np.full((len(model.trace), 7), np.nan)
    for i, rec in enumerate(model.trace.records):
        trace[i] = [rec.n, rec.residual,
                    np.nan if rec.eps_u is None else rec.eps_u,
                    np.nan if rec.eps_g is None else rec.eps_g,
                    rec.score, rec.gram_cond, rec.coeff_l1]
    payload += struct.pack("<Q", trace.shape[0])
    payload += trace.astype("<f8").tobytes()
    return _pack_block(payload)


def _read_model(cursor: _Cursor, power: int) -> GreedyModel:
    block = cursor.block()
    (status_len,) = block.unpack("H")
    status = block.take(status_len).decode()
    dim, size = block.unpack("IQ")
    rows = block.floats(size * (dim + 3)).reshape(size, dim + 3)
    atoms = [Atom(row[0], row[3:], row[2], int(row[1])) for row in rows]
    coefficients = block.floats(size)
    (trace_rows_count,) = block.unpack("Q")
    trace_values = block.floats(trace_rows_count * 7).reshape(trace_rows_count, 7)
    trace = FitTrace()
    for row in trace_values:
        trace.append(TraceRecord(
            n=int(row[0]), residual=float(row[1]),
            eps_u=None if np.isnan(row[2]) else float(row[2]),
            eps_g=None if np.isnan(row[3]) else float(row[3]),
            score=float(row[4]), gram_cond=float(row[5]), coeff_l1=float(row[6])))
    return GreedyModel(atoms=atoms, coefficients=coefficients, trace=trace,
                       status=status, dim=dim, power=power)


def save_model(model, path: Union[str, Path]) -> Path:
    """Serialize a GreedyModel, KernelModel, or PointwiseModel to one file."""
    from .kernel_oga import KernelModel
    from .pointwise_oga import PointwiseModel

    if isinstance(model, KernelModel):
        kind, power = _KIND_KERNEL, model.model.power
        body = _mesh_block(model.output_mesh) + _mesh_block(model.input_mesh)
        body += _model_block(model.model)
    elif isinstance(model, PointwiseModel):
        kind, power = _KIND_POINTWISE, model.power
        body = _mesh_block(model.output_mesh) + _mesh_block(model.input_mesh)
        sensors = np.asarray(model.sensor_indices, dtype="<u8")
        body += _pack_block(struct.pack("<Q", sensors.shape[0]) + sensors.tobytes())
        for sub in model.models:
            body += _model_block(sub)
        body += _model_block(_aggregate_as_model(model))
    elif isinstance(model, GreedyModel):
        kind, power = _KIND_FUNCTION, model.power
        body = _model_block(model)
    else:
        raise ValueError(f"cannot serialize object of type {type(model).__name__}")
    header = _MAGIC + struct.pack("<IBI", FORMAT_VERSION, kind, power)
    path = Path(path)
    path.write_bytes(header + body)
    return path


def _aggregate_as_model(model) -> GreedyModel:
    """Wrap the aggregated pointwise trace in an empty model for storage."""
    return GreedyModel(atoms=[], coefficients=np.zeros(0), trace=model.trace,
                       status=model.status, dim=model.input_mesh.dim, power=model.power)


def load_model(path: Union[str, Path]):
    """Load a model file written by save_model."""
    from .kernel_oga import KernelModel
    from .pointwise_oga import PointwiseModel

    path = Path(path)
    if not path.exists():
        raise DataLoadError(f"{path.name}: file not found")
    raw = path.read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise DataLoadError(f"{path.name}: not a greedykernel model file")
    cursor = _Cursor(raw[len(_MAGIC):], path.name)
    version, kind, power = cursor.unpack("IBI")
    if version != FORMAT_VERSION:
        raise DataLoadError(
            f"{path.name}: model format version {version}, this build reads {FORMAT_VERSION}"
        )
    if kind == _KIND_KERNEL:
        mesh_out = _read_mesh(cursor)
        mesh_in = _read_mesh(cursor)
        return KernelModel(_read_model(cursor, power), mesh_out, mesh_in)
    if kind == _KIND_POINTWISE:
        mesh_out = _read_mesh(cursor)
        mesh_in = _read_mesh(cursor)
        block = cursor.block()
        (count,) = block.unpack("Q")
        sensors = np.frombuffer(block.take(8 * count), dtype="<u8").astype(np.int64)
        models = [_read_model(cursor, power) for _ in range(count)]
        aggregate = _read_model(cursor, power)
        return PointwiseModel(models=models, sensor_indices=sensors,
                              output_mesh=mesh_out, input_mesh=mesh_in,
                              trace=aggregate.trace, status=aggregate.status,
                              power=power)
    if kind == _KIND_FUNCTION:
        return _read_model(cursor, power)
    raise DataLoadError(f"{path.name}: unknown model kind {kind}")


# ---------------------------------------------------------------------------
# run manifest


@dataclass
class RunManifest:
    """Reproducibility record written next to every trained model."""

    mode: str
    seed: int
    dict_size: int
    power: int
    n_max: int
    normalized: bool
    dataset_path: str
    dataset_hash: str
    tool_version: str = TOOL_VERSION
    sensors: str = "all"

    def write(self, path: Union[str, Path]) -> None:
        _write_manifest(Path(path), {
            "mode": self.mode, "seed": self.seed, "dict_size": self.dict_size,
            "power": self.power, "n_max": self.n_max,
            "normalized": str(self.normalized).lower(),
            "dataset_path": self.dataset_path, "dataset_hash": self.dataset_hash,
            "tool_version": self.tool_version, "sensors": self.sensors,
        })

    @staticmethod
    def read(path: Union[str, Path]) -> "RunManifest":
        entries = _parse_manifest(Path(path))
        try:
            return RunManifest(
                mode=entries["mode"], seed=int(entries["seed"]),
                dict_size=int(entries["dict_size"]), power=int(entries["power"]),
                n_max=int(entries["n_max"]), normalized=entries["normalized"] == "true",
                dataset_path=entries["dataset_path"], dataset_hash=entries["dataset_hash"],
                tool_version=entries.get("tool_version", "unknown"),
                sensors=entries.get("sensors", "all"))
        except (KeyError, ValueError) as bad:
            raise DataLoadError(f"{Path(path).name}: bad run manifest: {bad}") from None
