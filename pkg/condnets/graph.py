"""
Conditional networks: declarative DAG specs, static validation, routing policies, and
demand-driven forward evaluation under soft, hard or top-τ routing.

A network is an :class:`ArchSpec` listing :class:`NodeSpec` entries. The special node id
``"input"`` names the batch fed to :func:`forward`. A ``router`` node emits softmax route
weights ``r``; a ``combine`` node consumes one router and ``R`` branch nodes and emits
``v2 = r' V1``. Branches are evaluated lazily, only on the rows routed to them, so the
tape holds the visited work only.
"""

import enum
import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from condnets.autodiff import (
    ActivationKind,
    Padding,
    Param,
    Tape,
    Tensor,
    backward,
    concat,
    conv2d_grouped,
    conv_output_hw,
    fc_forward,
    flatten,
    global_max_pool,
    max_pool,
    route_combine,
    select,
    take_rows,
)
from condnets.errors import (
    ArgumentError,
    ConfigurationError,
    ShapeError,
    UnsupportedModeError,
    ValidationError,
)

logger = logging.getLogger(__name__)

INPUT = "input"

Shape = Tuple[int, ...]


class NodeKind(str, enum.Enum):
    CONV = "conv"
    FC = "fc"
    MAX_POOL = "max_pool"
    GLOBAL_MAX_POOL = "global_max_pool"
    FLATTEN = "flatten"
    IDENTITY = "identity"
    SELECTION = "selection"
    CONCAT = "concat"
    ROUTER = "router"
    COMBINE = "combine"


TRANSFORM_KINDS = frozenset({NodeKind.CONV, NodeKind.FC})
PARAMETERIZED_KINDS = frozenset({NodeKind.CONV, NodeKind.FC, NodeKind.ROUTER})


class RouterInput(str, enum.Enum):
    POOLED = "pooled"
    RAW = "raw"


@dataclass(frozen=True)
class NodeSpec:
    """
    One node of a conditional network.

    Attributes:
        id (str): unique node id.
        kind (NodeKind): what the node computes.
        inputs (tuple of str): ordered operand node ids. For ``combine`` the router comes first,
            followed by one branch per route.
        act (ActivationKind): nonlinearity of ``conv``/``fc`` transforms.
        out (int): output channels (``conv``) or units (``fc``).
        kernel (tuple of int): ``(k_y, k_x)`` for ``conv``.
        groups (int): filter groups for ``conv``.
        stride (int): convolution stride.
        padding (str | int): ``"same"``, ``"valid"`` or a symmetric pad width.
        pool (int): window of the max-pool following a ``conv`` (0 = none), or of a ``max_pool`` node.
        bias (bool): homogeneous bias column for ``fc``.
        indices (tuple of int): rows of the selection matrix S, one source index per output.
        routes (int): route count R of a ``router``.
        router_input (RouterInput): global-max-pooled summary or the raw flattened input.
        route_tag (tuple of int, optional): ``(layer index, route index)`` bookkeeping.
    """

    id: str
    kind: NodeKind
    inputs: Tuple[str, ...] = ()
    act: ActivationKind = ActivationKind.IDENTITY
    out: int = 0
    kernel: Tuple[int, int] = (3, 3)
    groups: int = 1
    stride: int = 1
    padding: Padding = "same"
    pool: int = 0
    bias: bool = True
    indices: Tuple[int, ...] = ()
    routes: int = 0
    router_input: RouterInput = RouterInput.POOLED
    route_tag: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", NodeKind(self.kind))
        object.__setattr__(self, "act", ActivationKind(self.act))
        object.__setattr__(self, "router_input", RouterInput(self.router_input))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if self.route_tag is not None:
            object.__setattr__(self, "route_tag", tuple(int(t) for t in self.route_tag))


@dataclass(frozen=True)
class ArchSpec:
    """
    A conditional-network architecture.

    Attributes:
        input_shape (tuple of int): per-sample input shape, ``(C, H, W)`` or ``(m,)``.
        nodes (tuple of NodeSpec): the DAG, in any order.
        output (str): id of the single output node.
        route_counts (tuple of int): R_l per routed level, informational.
    """

    input_shape: Shape
    nodes: Tuple[NodeSpec, ...]
    output: str
    route_counts: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "route_counts", tuple(int(r) for r in self.route_counts))

    def node(self, node_id: str) -> NodeSpec:
        for node in self.nodes:
            if node.id == node_id:
                return node
        raise KeyError(node_id)

    @property
    def node_ids(self) -> List[str]:
        return [node.id for node in self.nodes]


@dataclass(frozen=True)
class GraphInfo:
    order: Tuple[str, ...]
    shapes: Mapping[str, Shape]
    consumers: Mapping[str, Tuple[str, ...]]


def _prod(shape: Sequence[int]) -> int:
    return int(math.prod(shape))


def _node_shape(node: NodeSpec, in_shapes: List[Shape]) -> Shape:
    kind = node.kind
    if kind in (NodeKind.CONV, NodeKind.FC, NodeKind.MAX_POOL, NodeKind.GLOBAL_MAX_POOL,
                NodeKind.FLATTEN, NodeKind.IDENTITY, NodeKind.SELECTION, NodeKind.ROUTER):
        if len(in_shapes) != 1:
            raise ValidationError(f"node {node.id!r} ({kind.value}) takes exactly one input, got {len(in_shapes)}")
        shape = in_shapes[0]
    if kind is NodeKind.CONV:
        if len(shape) != 3:
            raise ValidationError(f"conv node {node.id!r} needs a C×H×W input, got {shape}")
        if node.out < 1:
            raise ValidationError(f"conv node {node.id!r} needs a positive channel count")
        if node.groups < 1 or shape[0] % node.groups or node.out % node.groups:
            raise ConfigurationError(
                f"conv node {node.id!r}: {node.groups} groups do not divide "
                f"{shape[0]} input and {node.out} output channels"
            )
        if node.act is ActivationKind.SOFTMAX:
            raise ValidationError(f"conv node {node.id!r} cannot use softmax")
        h, w = conv_output_hw(shape[1], shape[2], node.kernel[0], node.kernel[1], node.stride, node.padding)
        if node.pool:
            h, w = (h - node.pool) // node.pool + 1, (w - node.pool) // node.pool + 1
        if h < 1 or w < 1:
            raise ValidationError(f"conv node {node.id!r} does not fit its {shape} input")
        return node.out, h, w
    if kind is NodeKind.FC:
        if node.out < 1:
            raise ValidationError(f"fc node {node.id!r} needs a positive unit count")
        return (node.out,)
    if kind is NodeKind.MAX_POOL:
        size = node.pool or 2
        if len(shape) != 3 or shape[1] < size or shape[2] < size:
            raise ValidationError(f"max_pool node {node.id!r} does not fit its {shape} input")
        return shape[0], (shape[1] - size) // size + 1, (shape[2] - size) // size + 1
    if kind is NodeKind.GLOBAL_MAX_POOL:
        if len(shape) != 3:
            raise ValidationError(f"global_max_pool node {node.id!r} needs a C×H×W input, got {shape}")
        return (shape[0],)
    if kind is NodeKind.FLATTEN:
        return (_prod(shape),)
    if kind is NodeKind.IDENTITY:
        return shape
    if kind is NodeKind.SELECTION:
        if not node.indices or min(node.indices) < 0 or max(node.indices) >= shape[0]:
            raise ValidationError(f"selection node {node.id!r} indices out of range for {shape}")
        return (len(node.indices),) + tuple(shape[1:])
    if kind is NodeKind.ROUTER:
        if node.routes < 2:
            raise ConfigurationError(f"router node {node.id!r} needs at least 2 routes, got {node.routes}")
        return (node.routes,)
    if kind is NodeKind.CONCAT:
        if not in_shapes:
            raise ValidationError(f"concat node {node.id!r} has no inputs")
        tail = in_shapes[0][1:]
        for s in in_shapes[1:]:
            if s[1:] != tail:
                raise ValidationError(f"concat node {node.id!r}: operand shapes {in_shapes} disagree")
        return (sum(s[0] for s in in_shapes),) + tuple(tail)
    if kind is NodeKind.COMBINE:
        if len(in_shapes) < 3:
            raise ValidationError(f"combine node {node.id!r} needs a router and at least 2 branches")
        branches = in_shapes[1:]
        if in_shapes[0] != (len(branches),):
            raise ValidationError(
                f"combine node {node.id!r}: router emits {in_shapes[0]} weights for {len(branches)} branches"
            )
        for s in branches[1:]:
            if s != branches[0]:
                raise ValidationError(f"combine node {node.id!r}: branch shapes {branches} disagree")
        return branches[0]
    raise ValidationError(f"unknown node kind {kind!r}")


@functools.lru_cache(maxsize=256)
def analyze(arch: ArchSpec) -> GraphInfo:
    """
    Validate ``arch`` and return its topological order, per-node shapes and consumers.

    Raises:
        ValidationError: duplicate or unknown ids, cycles, nodes not reaching the output,
            or static shape conflicts.
        ConfigurationError: non-dividing filter groups or a router with fewer than 2 routes.
    """
    nodes: Dict[str, NodeSpec] = {}
    for node in arch.nodes:
        if node.id == INPUT or node.id in nodes:
            raise ValidationError(f"duplicate or reserved node id {node.id!r}")
        nodes[node.id] = node
    if arch.output not in nodes:
        raise ValidationError(f"output node {arch.output!r} is not defined")
    if any(r < 1 for r in arch.route_counts):
        raise ValidationError(f"route counts must be positive, got {arch.route_counts}")

    consumers: Dict[str, List[str]] = {INPUT: []}
    consumers.update({node_id: [] for node_id in nodes})
    indegree = {}
    for node in arch.nodes:
        for src in node.inputs:
            if src not in consumers:
                raise ValidationError(f"node {node.id!r} reads unknown node {src!r}")
            consumers[src].append(node.id)
        indegree[node.id] = sum(1 for src in node.inputs if src != INPUT)
        if node.kind is NodeKind.COMBINE and node.inputs and (
            node.inputs[0] == INPUT or nodes[node.inputs[0]].kind is not NodeKind.ROUTER
        ):
            raise ValidationError(f"combine node {node.id!r} must take a router as its first input")
        if node.kind is not NodeKind.COMBINE and any(
            src != INPUT and nodes[src].kind is NodeKind.ROUTER for src in node.inputs
        ):
            raise ValidationError(f"router output can only feed a combine node, not {node.id!r}")

    order: List[str] = []
    ready = [node.id for node in arch.nodes if indegree[node.id] == 0]
    while ready:
        current = ready.pop(0)
        order.append(current)
        for consumer in consumers[current]:
            indegree[consumer] -= nodes[consumer].inputs.count(current)
            if indegree[consumer] == 0:
                ready.append(consumer)
    if len(order) != len(nodes):
        cyclic = sorted(set(nodes) - set(order))
        raise ValidationError(f"architecture has a cycle through {cyclic}")

    ancestors = {arch.output}
    stack = [arch.output]
    while stack:
        for src in nodes[stack.pop()].inputs:
            if src != INPUT and src not in ancestors:
                ancestors.add(src)
                stack.append(src)
    dangling = [node_id for node_id in order if node_id not in ancestors]
    if dangling:
        raise ValidationError(f"nodes {dangling} do not reach the output {arch.output!r}")
    if INPUT not in {src for node in arch.nodes for src in node.inputs}:
        raise ValidationError("no node reads the input")

    shapes: Dict[str, Shape] = {INPUT: tuple(arch.input_shape)}
    for node_id in order:
        node = nodes[node_id]
        shapes[node_id] = tuple(_node_shape(node, [shapes[src] for src in node.inputs]))
    return GraphInfo(
        order=tuple(order),
        shapes=shapes,
        consumers={k: tuple(v) for k, v in consumers.items()},
    )


def validate(arch: ArchSpec) -> ArchSpec:
    analyze(arch)
    return arch


def infer_shapes(arch: ArchSpec) -> Dict[str, Shape]:
    """Per-sample output shape of every node (and of ``"input"``)."""
    return dict(analyze(arch).shapes)


def router_summary_shape(node: NodeSpec, in_shape: Shape) -> Shape:
    if node.router_input is RouterInput.POOLED and len(in_shape) == 3:
        return (in_shape[0],)
    return (_prod(in_shape),)


def param_shapes(arch: ArchSpec) -> Dict[str, Shape]:
    """
    Weight shape of every parameterized node.

    ``conv``: ``(out, C_in/g, k_y, k_x)``; ``fc``: ``(out, in [+1 bias column])``;
    ``router``: ``(R, m + 1)`` over its input summary.
    """
    info = analyze(arch)
    shapes: Dict[str, Shape] = {}
    for node_id in info.order:
        node = arch.node(node_id)
        in_shape = info.shapes[node.inputs[0]] if node.inputs else ()
        if node.kind is NodeKind.CONV:
            shapes[node_id] = (node.out, in_shape[0] // node.groups) + tuple(node.kernel)
        elif node.kind is NodeKind.FC:
            shapes[node_id] = (node.out, _prod(in_shape) + int(node.bias))
        elif node.kind is NodeKind.ROUTER:
            shapes[node_id] = (node.routes, _prod(router_summary_shape(node, in_shape)) + 1)
    return shapes


class RoutingMode(str, enum.Enum):
    SOFT = "soft"
    HARD_TOP1 = "hard"
    TOP_TAU = "tau"


@dataclass(frozen=True)
class RoutingPolicy:
    """
    How router outputs select routes at inference.

    ``SOFT`` visits every route with the raw router weights. ``HARD_TOP1`` is ``TOP_TAU`` with
    τ = 1. ``TOP_TAU`` keeps the τ largest weights (ties to the lower route index) and, with
    ``renormalize``, rescales the survivors to sum to 1.
    """

    mode: RoutingMode = RoutingMode.SOFT
    tau: Optional[int] = None
    renormalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", RoutingMode(self.mode))
        if self.mode is RoutingMode.TOP_TAU and (self.tau is None or self.tau < 1):
            raise ConfigurationError(f"top-τ routing needs τ ≥ 1, got {self.tau}")

    @classmethod
    def soft(cls) -> "RoutingPolicy":
        return cls(RoutingMode.SOFT)

    @classmethod
    def hard(cls) -> "RoutingPolicy":
        return cls(RoutingMode.HARD_TOP1)

    @classmethod
    def top_tau(cls, tau: int, renormalize: bool = True) -> "RoutingPolicy":
        return cls(RoutingMode.TOP_TAU, tau, renormalize)

    @classmethod
    def parse(cls, text: str) -> "RoutingPolicy":
        """Parse ``"soft"``, ``"hard"`` or ``"tau:N"``."""
        text = text.strip().lower()
        if text == "soft":
            return cls.soft()
        if text in ("hard", "hard_top1", "top1"):
            return cls.hard()
        if text.startswith("tau:"):
            try:
                return cls.top_tau(int(text[4:]))
            except ValueError as e:
                raise ConfigurationError(f"bad routing policy {text!r}") from e
        raise ConfigurationError(f"unknown routing policy {text!r}")

    def effective_tau(self, routes: int) -> int:
        if self.mode is RoutingMode.SOFT:
            return routes
        tau = 1 if self.mode is RoutingMode.HARD_TOP1 else int(self.tau)
        if not 1 <= tau <= routes:
            raise ConfigurationError(f"τ = {tau} out of range for a router with {routes} routes")
        return tau

    def truncates(self, routes: int) -> bool:
        return self.effective_tau(routes) < routes

    def __str__(self) -> str:
        if self.mode is RoutingMode.TOP_TAU:
            return f"tau:{self.tau}"
        return self.mode.value


def router_forward(v0: Tensor, pR: Union[Param, Tensor], tape: Optional[Tape] = None) -> Tensor:
    """
    Route weights ``r = softmax(P^R v0)`` for a batch of router inputs.

    Raises:
        ConfigurationError: the router has fewer than 2 routes.
    """
    weights = pR.value if isinstance(pR, Param) else pR
    if weights.ndim != 2 or weights.shape[0] < 2:
        raise ConfigurationError(f"router needs at least 2 routes, got weights of shape {weights.shape}")
    return fc_forward(flatten(v0, tape), pR, ActivationKind.SOFTMAX, tape)


def router_summary(v0: Tensor, router_input: RouterInput, tape: Optional[Tape] = None) -> Tensor:
    if RouterInput(router_input) is RouterInput.POOLED and v0.ndim == 4:
        return global_max_pool(v0, tape)
    return flatten(v0, tape)


def apply_policy(r, policy: RoutingPolicy) -> Tuple[np.ndarray, np.ndarray]:
    """
    Apply ``policy`` to route weights ``r`` (one vector or a batch × R matrix).

    Returns:
        (np.ndarray, np.ndarray): the effective weights r' and the boolean visited mask,
        both shaped like ``r``.
    """
    data = r.data if isinstance(r, Tensor) else np.asarray(r, dtype=np.float64)
    batch = np.atleast_2d(data)
    routes = batch.shape[1]
    tau = policy.effective_tau(routes)
    if tau == routes:
        return data.copy(), np.ones(data.shape, dtype=bool)
    order = np.argsort(-batch, axis=1, kind="stable")
    visited = np.zeros(batch.shape, dtype=bool)
    np.put_along_axis(visited, order[:, :tau], True, axis=1)
    kept = np.where(visited, batch, 0)
    if policy.renormalize:
        total = kept.sum(axis=1, keepdims=True)
        uniform = visited / tau
        kept = np.divide(kept, total, out=uniform.astype(kept.dtype), where=total > 0)
    return kept.reshape(data.shape), visited.reshape(data.shape)


@dataclass
class RoutedOutputs:
    """
    What one ``combine`` node saw during a forward pass.

    Attributes:
        probabilities (np.ndarray): router weights r, rows × R.
        weights (np.ndarray): effective weights r' after the policy.
        visited (np.ndarray): boolean rows × R mask of evaluated routes.
        routes (list): per route, the branch output V1 row block for the visiting rows, or None.
        rows (np.ndarray): batch positions the combine node was evaluated on.
    """

    probabilities: np.ndarray
    weights: np.ndarray
    visited: np.ndarray
    routes: List[Optional[Tensor]]
    rows: np.ndarray

    def route_fractions(self) -> np.ndarray:
        return self.visited.mean(axis=0)


@dataclass
class ForwardResult:
    output: Tensor
    routed: Dict[str, RoutedOutputs]
    tape: Tape
    activations: Dict[str, Tensor]
    visited: Dict[str, int] = field(default_factory=dict)

    @property
    def macs(self) -> int:
        return self.tape.macs


class _Evaluator:
    def __init__(
        self,
        arch: ArchSpec,
        params: Mapping[str, Param],
        x: Tensor,
        policy: RoutingPolicy,
        tape: Tape,
    ):
        self.nodes = {node.id: node for node in arch.nodes}
        self.params = params
        self.policy = policy
        self.tape = tape
        self.batch = x.shape[0]
        self.routed: Dict[str, RoutedOutputs] = {}
        self.visited: Dict[str, int] = {}
        self._cache: Dict[str, List[Tuple[np.ndarray, Tensor]]] = {INPUT: [(np.arange(self.batch), x)]}

    def _param(self, node_id: str) -> Param:
        try:
            return self.params[node_id]
        except KeyError:
            raise ArgumentError(f"no parameters given for node {node_id!r}") from None

    def value(self, node_id: str, rows: np.ndarray) -> Tensor:
        entries = self._cache.setdefault(node_id, [])
        for cached_rows, tensor in entries:
            if cached_rows.shape == rows.shape and np.array_equal(cached_rows, rows):
                return tensor
        for cached_rows, tensor in entries:
            pos = np.searchsorted(cached_rows, rows)
            if np.all(pos < len(cached_rows)) and np.array_equal(cached_rows[pos], rows):
                gathered = take_rows(tensor, pos, self.tape)
                entries.append((rows, gathered))
                return gathered
        node = self.nodes[node_id]
        with self.tape.scope(node_id):
            tensor = self._evaluate(node, rows)
        self.visited[node_id] = self.visited.get(node_id, 0) + len(rows)
        entries.append((rows, tensor))
        return tensor

    def full_batch(self) -> Dict[str, Tensor]:
        everything = np.arange(self.batch)
        found = {}
        for node_id, entries in self._cache.items():
            for cached_rows, tensor in entries:
                if cached_rows.shape == everything.shape and np.array_equal(cached_rows, everything):
                    found[node_id] = tensor
                    break
        return found

    def _evaluate(self, node: NodeSpec, rows: np.ndarray) -> Tensor:
        kind, tape = node.kind, self.tape
        if kind is NodeKind.COMBINE:
            return self._combine(node, rows)
        if kind is NodeKind.CONCAT:
            return concat([self.value(src, rows) for src in node.inputs], tape=tape)
        x = self.value(node.inputs[0], rows)
        if kind is NodeKind.CONV:
            y = conv2d_grouped(x, self._param(node.id), node.groups, node.act, node.stride, node.padding, tape)
            return max_pool(y, node.pool, tape=tape) if node.pool else y
        if kind is NodeKind.FC:
            return fc_forward(flatten(x, tape), self._param(node.id), node.act, tape)
        if kind is NodeKind.MAX_POOL:
            return max_pool(x, node.pool or 2, tape=tape)
        if kind is NodeKind.GLOBAL_MAX_POOL:
            return global_max_pool(x, tape)
        if kind is NodeKind.FLATTEN:
            return flatten(x, tape)
        if kind is NodeKind.IDENTITY:
            return x
        if kind is NodeKind.SELECTION:
            return select(x, node.indices, tape)
        if kind is NodeKind.ROUTER:
            return router_forward(router_summary(x, node.router_input, tape), self._param(node.id), tape)
        raise ValidationError(f"cannot evaluate node kind {kind!r}")

    def _combine(self, node: NodeSpec, rows: np.ndarray) -> Tensor:
        router_id, branches = node.inputs[0], node.inputs[1:]
        r = self.value(router_id, rows)
        effective, visited = apply_policy(r, self.policy)
        if self.policy.truncates(len(branches)):
            weights = Tensor(effective)
            self.tape.mark_untrainable(f"{self.policy} routing at {node.id!r} is inference-only")
        else:
            weights = r
        outputs: List[Optional[Tensor]] = []
        positions: List[Optional[np.ndarray]] = []
        for j, branch in enumerate(branches):
            local = np.flatnonzero(visited[:, j])
            if local.size == 0:
                outputs.append(None)
                positions.append(None)
                continue
            outputs.append(self.value(branch, rows[local]))
            positions.append(local)
        self.routed[node.id] = RoutedOutputs(
            probabilities=r.data, weights=effective, visited=visited, routes=outputs, rows=rows
        )
        return route_combine(weights, outputs, positions, self.tape)


def forward(
    arch: ArchSpec,
    params: Mapping[str, Param],
    x,
    policy: Optional[RoutingPolicy] = None,
    record_grads: bool = True,
) -> ForwardResult:
    """
    Evaluate ``arch`` on a batch.

    Combine nodes evaluate each branch only on the rows the policy routes to it, so nodes
    outside every visited route produce no tape entries.

    Parameters:
        arch (ArchSpec): the network; validated before any compute.
        params (dict of str to Param): weights keyed by node id.
        x (Tensor | np.ndarray): batch × input_shape.
        policy (RoutingPolicy, optional): defaults to soft routing.
        record_grads (bool): keep the closures needed by :func:`backward_routed`.

    Returns:
        ForwardResult: output, routed outputs per combine node, tape, full-batch activations.
    """
    info = analyze(arch)
    policy = policy or RoutingPolicy.soft()
    x = x if isinstance(x, Tensor) else Tensor(x)
    if tuple(x.shape[1:]) != tuple(arch.input_shape):
        raise ShapeError(f"input batch {x.shape} does not match architecture input {arch.input_shape}")
    tape = Tape(keep_grad=record_grads)
    for node_id in info.order:
        if node_id in params:
            tape.watch(params[node_id])
    evaluator = _Evaluator(arch, params, x, policy, tape)
    output = evaluator.value(arch.output, np.arange(x.shape[0]))
    tape.output = output
    return ForwardResult(
        output=output,
        routed=evaluator.routed,
        tape=tape,
        activations=evaluator.full_batch(),
        visited=evaluator.visited,
    )


def backward_routed(result: ForwardResult, loss_grad) -> None:
    """
    Back-propagate ``loss_grad`` through a soft-routed forward pass, router weights included.

    Raises:
        UnsupportedModeError: the forward pass truncated routes (hard or top-τ routing).
    """
    if not result.tape.trainable:
        raise UnsupportedModeError(f"cannot back-propagate: {result.tape.untrainable_reason}")
    backward(result.tape, loss_grad, result.output)


@dataclass
class InferenceResult:
    outputs: np.ndarray
    macs: int
    samples: int
    route_visits: Dict[str, np.ndarray]
    node_macs: Dict[str, int] = field(default_factory=dict)

    @property
    def amortized_macs(self) -> float:
        return self.macs / self.samples


def run_inference(
    arch: ArchSpec,
    params: Mapping[str, Param],
    images: np.ndarray,
    policy: Optional[RoutingPolicy] = None,
    batch_size: int = 256,
) -> InferenceResult:
    """Evaluate ``images`` in mini-batches, accumulating outputs, visited MACs and route visits."""
    if len(images) == 0:
        raise ArgumentError("cannot run inference on an empty dataset")
    if batch_size < 1:
        raise ArgumentError(f"batch size must be positive, got {batch_size}")
    outputs = []
    macs = 0
    visits: Dict[str, np.ndarray] = {}
    node_macs: Dict[str, int] = {}
    for start in range(0, len(images), batch_size):
        result = forward(arch, params, images[start : start + batch_size], policy, record_grads=False)
        outputs.append(result.output.data)
        macs += result.macs
        for node_id, node_total in result.tape.macs_by_node().items():
            node_macs[node_id] = node_macs.get(node_id, 0) + node_total
        for node_id, routed in result.routed.items():
            counts = routed.visited.sum(axis=0)
            visits[node_id] = visits[node_id] + counts if node_id in visits else counts
    logger.debug("inference over %d samples under %s: %d MACs", len(images), policy or "soft", macs)
    return InferenceResult(np.concatenate(outputs), macs, len(images), visits, node_macs)
