"""
YAML round-trip for :class:`~condnets.graph.ArchSpec`.

The schema is documented in ``docs/source/config.md``.
"""

import logging
import os
from dataclasses import fields
from typing import Any, Dict, List, Union

import yaml

from condnets.autodiff import ActivationKind
from condnets.errors import ValidationError
from condnets.graph import ArchSpec, NodeKind, NodeSpec, RouterInput, validate

logger = logging.getLogger(__name__)

PathLike = Union[str, "os.PathLike[str]"]

_TOP_LEVEL = ("input_shape", "output", "route_counts", "nodes")

_KIND_KEYS = {
    NodeKind.CONV: ("out", "kernel", "groups", "stride", "padding", "pool", "act"),
    NodeKind.FC: ("out", "bias", "act"),
    NodeKind.MAX_POOL: ("pool",),
    NodeKind.GLOBAL_MAX_POOL: (),
    NodeKind.FLATTEN: (),
    NodeKind.IDENTITY: (),
    NodeKind.SELECTION: ("indices",),
    NodeKind.CONCAT: (),
    NodeKind.ROUTER: ("routes", "router_input"),
    NodeKind.COMBINE: (),
}

_DEFAULTS = {f.name: f.default for f in fields(NodeSpec) if f.name not in ("id", "kind")}


def _plain(value: Any) -> Any:
    if isinstance(value, (ActivationKind, NodeKind, RouterInput)):
        return value.value
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def node_to_dict(node: NodeSpec) -> Dict[str, Any]:
    """Mapping form of ``node``: its kind's keys plus any other field that is not at its default."""
    data: Dict[str, Any] = {"id": node.id, "kind": node.kind.value, "inputs": list(node.inputs)}
    own = _KIND_KEYS[node.kind]
    for name in own:
        data[name] = _plain(getattr(node, name))
    for name, default in _DEFAULTS.items():
        if name in own or name == "inputs":
            continue
        value = getattr(node, name)
        if value != default:
            data[name] = _plain(value)
    return data


def node_from_dict(data: Dict[str, Any]) -> NodeSpec:
    if not isinstance(data, dict):
        raise ValidationError(f"node entries must be mappings, got {data!r}")
    unknown = set(data) - set(_DEFAULTS) - {"id", "kind"}
    if unknown:
        raise ValidationError(f"node {data.get('id')!r}: unknown keys {sorted(unknown)}")
    if "id" not in data or "kind" not in data:
        raise ValidationError(f"node entries need an id and a kind, got {data!r}")
    kwargs = dict(data)
    try:
        kwargs["kind"] = NodeKind(kwargs["kind"])
        kwargs["id"] = str(kwargs["id"])
        for name in ("inputs", "kernel", "indices", "route_tag"):
            if kwargs.get(name) is not None:
                kwargs[name] = tuple(kwargs[name])
        return NodeSpec(**kwargs)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"node {data.get('id')!r}: {e}") from e


def arch_to_dict(arch: ArchSpec) -> Dict[str, Any]:
    return {
        "input_shape": list(arch.input_shape),
        "output": arch.output,
        "route_counts": list(arch.route_counts),
        "nodes": [node_to_dict(node) for node in arch.nodes],
    }


def arch_from_dict(data: Dict[str, Any]) -> ArchSpec:
    """Build and validate an ArchSpec from its mapping form."""
    if not isinstance(data, dict):
        raise ValidationError("architecture config must be a mapping")
    unknown = set(data) - set(_TOP_LEVEL)
    if unknown:
        raise ValidationError(f"unknown architecture keys {sorted(unknown)}")
    missing = [key for key in ("input_shape", "output", "nodes") if key not in data]
    if missing:
        raise ValidationError(f"architecture config is missing {missing}")
    nodes: List[NodeSpec] = [node_from_dict(entry) for entry in data["nodes"] or []]
    arch = ArchSpec(
        input_shape=tuple(data["input_shape"]),
        nodes=tuple(nodes),
        output=str(data["output"]),
        route_counts=tuple(data.get("route_counts") or ()),
    )
    return validate(arch)


def dump_arch(arch: ArchSpec) -> str:
    return yaml.safe_dump(arch_to_dict(arch), sort_keys=False, default_flow_style=None)


def parse_arch(text: str) -> ArchSpec:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ValidationError(f"architecture config is not valid YAML: {e}") from e
    return arch_from_dict(data)


def save_arch(arch: ArchSpec, path: PathLike):
    with open(path, "w") as f:
        f.write(dump_arch(arch))
    logger.debug("wrote architecture to %s", path)


def load_arch(path: PathLike) -> ArchSpec:
    with open(path, "r") as f:
        return parse_arch(f.read())


def load_yaml(path: PathLike) -> Dict[str, Any]:
    """Read a YAML mapping (training, search or ensemble configuration)."""
    with open(path, "r") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ValidationError(f"{path} is not valid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValidationError(f"{path} must contain a mapping")
    return data
