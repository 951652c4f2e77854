"""
On-disk formats: the tensor dump, checkpoints, CSV tables, JSON summaries and run manifests.

Tensor dump layout (little-endian): ``u64 rank``, ``rank × u64 dims``, then the raw values in
row-major order. The element type is not part of the dump; checkpoints record it in their
manifest.
"""

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from condnets.autodiff import Param
from condnets.config import dump_arch, parse_arch
from condnets.errors import FormatError
from condnets.graph import ArchSpec, param_shapes
from condnets.util import config_hash
from condnets.version import VERSION

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CHECKPOINT_FORMAT = "condnets-checkpoint"
MANIFEST_NAME = "manifest.json"


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array)
    header = struct.pack(f"<Q{array.ndim}Q", array.ndim, *array.shape)
    return header + array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes()


def decode_tensor(data: bytes, dtype: str = "float64") -> np.ndarray:
    """
    Inverse of :func:`encode_tensor`.

    Raises:
        FormatError: the buffer is shorter or longer than its header announces.
    """
    if len(data) < 8:
        raise FormatError("tensor dump is missing its rank", offset=0)
    (rank,) = struct.unpack_from("<Q", data, 0)
    header = 8 * (rank + 1)
    if len(data) < header:
        raise FormatError(f"tensor dump of rank {rank} is missing dimensions", offset=len(data))
    shape = struct.unpack_from(f"<{rank}Q", data, 8)
    item = np.dtype(dtype).newbyteorder("<")
    expected = header + int(np.prod(shape, dtype=np.int64)) * item.itemsize
    if len(data) != expected:
        raise FormatError(f"tensor dump of shape {shape} needs {expected} bytes, found {len(data)}",
                          offset=min(len(data), expected))
    return np.frombuffer(data, dtype=item, offset=header).reshape(shape).astype(dtype)


def write_tensor(path: PathLike, array: np.ndarray):
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path: PathLike, dtype: str = "float64") -> np.ndarray:
    return decode_tensor(Path(path).read_bytes(), dtype)


def write_json(path: PathLike, data: Any):
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def read_json(path: PathLike) -> Any:
    with open(path, "r") as f:
        return json.load(f)


def _json_default(value: Any):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_csv(path: PathLike, rows: Iterable[Mapping[str, Any]], columns: Sequence[str]):
    """Write ``rows`` with exactly ``columns``; ``None`` becomes an empty cell, sequences join with ``;``."""
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _cell(row.get(key)) for key in columns})
    logger.debug("wrote %s", path)


def _cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, (list, tuple, np.ndarray)):
        return ";".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return value


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, "r", newline="") as f:
        return list(csv.DictReader(f))


@dataclass
class Checkpoint:
    arch: ArchSpec
    params: Dict[str, Param]
    config: Dict[str, Any] = field(default_factory=dict)
    iteration: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(directory: PathLike, checkpoint: Checkpoint) -> Path:
    """
    Write ``arch.yaml``, one tensor dump per parameter and a ``manifest.json`` into ``directory``.
    """
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    (directory / "arch.yaml").write_text(dump_arch(checkpoint.arch))
    tensors: Dict[str, str] = {}
    dtypes = set()
    for i, name in enumerate(sorted(checkpoint.params)):
        filename = f"params/{i:04d}.tensor"
        data = checkpoint.params[name].value.data
        write_tensor(directory / filename, data)
        tensors[name] = filename
        dtypes.add(str(data.dtype))
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": VERSION,
        "dtype": dtypes.pop() if len(dtypes) == 1 else "float64",
        "iteration": checkpoint.iteration,
        "config": checkpoint.config,
        "tensors": tensors,
        "extra": checkpoint.extra,
    }
    write_json(directory / MANIFEST_NAME, manifest)
    logger.info("saved checkpoint with %d tensors to %s", len(tensors), directory)
    return directory


def load_checkpoint(directory: PathLike) -> Checkpoint:
    """
    Raises:
        FormatError: the manifest is missing or does not describe a checkpoint, or a tensor
            does not match the architecture.
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FormatError(f"{directory} has no {MANIFEST_NAME}")
    manifest = read_json(manifest_path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{manifest_path} is not a checkpoint manifest")
    arch = parse_arch((directory / "arch.yaml").read_text())
    shapes = param_shapes(arch)
    params: Dict[str, Param] = {}
    for name, filename in manifest["tensors"].items():
        data = read_tensor(directory / filename, manifest["dtype"])
        if name not in shapes or tuple(data.shape) != tuple(shapes[name]):
            raise FormatError(f"tensor {name!r} of shape {data.shape} does not fit the architecture")
        params[name] = Param(name, data)
    missing = set(shapes) - set(params)
    if missing:
        raise FormatError(f"checkpoint lacks parameters for {sorted(missing)}")
    return Checkpoint(arch, params, manifest.get("config", {}), manifest.get("iteration", 0),
                      manifest.get("extra", {}))


@dataclass
class RunManifest:
    """What one command ran: enough to reproduce its outputs bit for bit."""

    command: str
    config_hash: str
    seed: int
    version: str = VERSION
    outputs: Dict[str, str] = field(default_factory=dict)
    arguments: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def create(cls, command: str, arguments: Mapping[str, Any], seed: int = 0,
               outputs: Optional[Mapping[str, Any]] = None) -> "RunManifest":
        arguments = {k: (str(v) if isinstance(v, Path) else v) for k, v in arguments.items()}
        return cls(command, config_hash(arguments), seed, outputs={k: str(v) for k, v in (outputs or {}).items()},
                   arguments=arguments)

    def write(self, directory: PathLike) -> Path:
        path = Path(directory) / MANIFEST_NAME
        write_json(path, asdict(self))
        return path
