"""
Exact multiply-accumulate (MAC) and parameter counting.

Only projections count: every weight tap applied to an input position is one MAC, padded
positions included. Activations, pooling, selection and concatenation are free. Router
nodes are charged like any other projection.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from condnets.autodiff import Param, conv_output_hw
from condnets.errors import ArgumentError, ConfigurationError
from condnets.graph import (
    INPUT,
    ArchSpec,
    NodeKind,
    RoutingPolicy,
    analyze,
    param_shapes,
    run_inference,
)

logger = logging.getLogger(__name__)


def mac_count_conv(c_in: int, c_out: int, k_x: int, k_y: int, width: int, height: int, groups: int = 1) -> int:
    """
    MACs of a grouped convolution producing a ``width × height`` map:
    ``c_out × (c_in / g) × k_x × k_y × W × H``.
    """
    if groups < 1 or c_in % groups or c_out % groups:
        raise ConfigurationError(f"{groups} groups do not divide {c_in} input and {c_out} output channels")
    return c_out * (c_in // groups) * k_x * k_y * width * height


def mac_count_fc(m_in: int, n_out: int) -> int:
    """MACs of an ``n_out × m_in`` projection; ``m_in`` includes the homogeneous column."""
    return n_out * m_in


@dataclass
class NodeCost:
    node_id: str
    kind: str
    macs: int
    params: int
    layer: int = 0


@dataclass
class CostReport:
    """
    Per-node and total MACs and parameter counts of one architecture.

    ``macs`` of every node is the per-sample cost of evaluating it. For routed inference
    ``amortized_macs`` is the dataset mean of the realized visited-node MACs, routers
    included, and ``realized`` holds the per-node share of it.
    """

    nodes: List[NodeCost]
    amortized_macs: Optional[float] = None
    samples: int = 0
    policy: Optional[str] = None
    realized: Dict[str, float] = field(default_factory=dict)

    @property
    def total_macs(self) -> int:
        return sum(node.macs for node in self.nodes)

    @property
    def total_params(self) -> int:
        return sum(node.params for node in self.nodes)

    def rows(self) -> List[Dict[str, object]]:
        return [{"node_id": n.node_id, "kind": n.kind, "macs": n.macs, "params": n.params} for n in self.nodes]

    def summary(self) -> Dict[str, object]:
        data: Dict[str, object] = {"total_macs": self.total_macs, "total_params": self.total_params}
        if self.amortized_macs is not None:
            data.update(
                amortized_macs=self.amortized_macs,
                samples=self.samples,
                policy=self.policy,
                realized=dict(self.realized),
            )
        data["nodes"] = [asdict(n) for n in self.nodes]
        return data


@dataclass(frozen=True)
class CurvePoint:
    """One operating point of an accuracy/cost trade-off curve."""

    error: float
    expected_cost: float
    model_size: int
    setting: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.error <= 1.0:
            raise ArgumentError(f"error must be a fraction, got {self.error}")


def layer_depths(arch: ArchSpec) -> Dict[str, int]:
    """Number of projections on the longest path from the input to each node, the node included."""
    info = analyze(arch)
    depth: Dict[str, int] = {INPUT: 0}
    for node_id in info.order:
        node = arch.node(node_id)
        if node.kind is NodeKind.ROUTER:
            base = depth[node.inputs[0]]
        else:
            base = max(depth[src] for src in node.inputs)
        depth[node_id] = base + int(node.kind in (NodeKind.CONV, NodeKind.FC, NodeKind.ROUTER))
    return depth


def node_costs(arch: ArchSpec) -> List[NodeCost]:
    info = analyze(arch)
    weights = param_shapes(arch)
    depths = layer_depths(arch)
    costs = []
    for node_id in info.order:
        node = arch.node(node_id)
        macs = 0
        params = int(np.prod(weights[node_id])) if node_id in weights else 0
        if node.kind is NodeKind.CONV:
            c_in, height, width = info.shapes[node.inputs[0]]
            out_h, out_w = conv_output_hw(height, width, node.kernel[0], node.kernel[1], node.stride, node.padding)
            macs = mac_count_conv(c_in, node.out, node.kernel[1], node.kernel[0], out_w, out_h, node.groups)
        elif node.kind in (NodeKind.FC, NodeKind.ROUTER):
            n_out, m_in = weights[node_id]
            macs = mac_count_fc(m_in, n_out)
        costs.append(NodeCost(node_id, node.kind.value, macs, params, depths[node_id] if params else 0))
    return costs


def param_count(arch: ArchSpec) -> int:
    """Weight elements of every projection and router; structural nodes have none."""
    return sum(int(np.prod(shape)) for shape in param_shapes(arch).values())


def static_cost(arch: ArchSpec) -> CostReport:
    """Per-sample cost with every route visited (soft routing)."""
    return CostReport(nodes=node_costs(arch))


def amortized_cost(
    arch: ArchSpec,
    params: Mapping[str, Param],
    images: np.ndarray,
    policy: Optional[RoutingPolicy] = None,
    batch_size: int = 256,
) -> CostReport:
    """
    Mean per-sample MACs of the nodes actually visited under ``policy`` over ``images``.

    Raises:
        ArgumentError: ``images`` is empty.
    """
    if len(images) == 0:
        raise ArgumentError("amortized cost needs a non-empty dataset")
    result = run_inference(arch, params, images, policy, batch_size)
    report = static_cost(arch)
    report.amortized_macs = result.macs / result.samples
    report.samples = result.samples
    report.policy = str(policy or RoutingPolicy.soft())
    report.realized = {node_id: total / result.samples for node_id, total in result.node_macs.items()}
    logger.info("amortized cost under %s: %.1f MACs/sample (static %d)", report.policy, report.amortized_macs,
                report.total_macs)
    return report


def visited_cost(unit_costs: Sequence[int], visited: np.ndarray, fixed: int = 0) -> float:
    """
    Mean cost when sample ``i`` pays ``fixed`` plus ``unit_costs[j]`` for every route ``j`` it visits.

    Parameters:
        unit_costs (sequence of int): per-route cost.
        visited (np.ndarray): boolean samples × routes mask.
        fixed (int): cost every sample pays (shared layers, routers).
    """
    visited = np.asarray(visited, dtype=bool)
    if visited.ndim != 2 or visited.shape[0] == 0:
        raise ArgumentError(f"visited mask must be a non-empty samples × routes matrix, got {visited.shape}")
    costs = np.asarray(unit_costs, dtype=np.int64)
    total = int(fixed) * visited.shape[0] + int((visited.astype(np.int64) @ costs).sum())
    return total / visited.shape[0]


@dataclass(frozen=True)
class LayerCost:
    layer: int
    macs: int
    normalized: float


def layer_breakdown(arch: ArchSpec, normalize: bool = True) -> List[LayerCost]:
    """
    Predicted per-layer MACs, ordered by layer depth; with ``normalize`` the largest layer is 1.
    """
    totals: Dict[int, int] = {}
    for cost in node_costs(arch):
        if cost.macs:
            totals[cost.layer] = totals.get(cost.layer, 0) + cost.macs
    peak = max(totals.values(), default=0)
    return [
        LayerCost(layer, macs, (macs / peak if peak else 0.0) if normalize else float(macs))
        for layer, macs in sorted(totals.items())
    ]


def classification_error(outputs: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ArgumentError("classification error over an empty dataset")
    return float(np.mean(np.argmax(outputs, axis=1) != np.asarray(labels)))


def tau_curve(
    arch: ArchSpec,
    params: Mapping[str, Param],
    images: np.ndarray,
    labels: np.ndarray,
    taus: Sequence[int],
    batch_size: int = 256,
) -> List[CurvePoint]:
    """Error and amortized cost of ``arch`` under top-τ routing for each τ in ``taus``."""
    if not len(taus):
        raise ArgumentError("τ sweep needs at least one τ")
    size = param_count(arch)
    points = []
    for tau in taus:
        result = run_inference(arch, params, images, RoutingPolicy.top_tau(int(tau)), batch_size)
        error = classification_error(result.outputs, labels)
        points.append(CurvePoint(error, result.amortized_macs, size, float(tau)))
        logger.info("τ=%d: error %.4f, %.1f MACs/sample", tau, error, result.amortized_macs)
    return points
