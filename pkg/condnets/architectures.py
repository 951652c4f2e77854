"""
Builders for the networks used throughout the experiments.
"""

from typing import List, Optional, Sequence, Tuple

from condnets.autodiff import ActivationKind
from condnets.errors import ConfigurationError
from condnets.graph import INPUT, ArchSpec, NodeKind, NodeSpec, RouterInput, validate


def toy_routed_net(
    in_features: int,
    out_features: int,
    routes: int = 2,
    act: ActivationKind = ActivationKind.SIGMOID,
    router_input: RouterInput = RouterInput.RAW,
) -> ArchSpec:
    """
    One router and ``routes`` parallel projections of the same input: ``v1^j = σ(P^j v0)``,
    ``r = softmax(P^R v0)``, ``v2 = r V1``.
    """
    nodes: List[NodeSpec] = [
        NodeSpec(id="router", kind=NodeKind.ROUTER, inputs=(INPUT,), routes=routes, router_input=router_input)
    ]
    for j in range(routes):
        nodes.append(
            NodeSpec(
                id=f"route{j}", kind=NodeKind.FC, inputs=(INPUT,), out=out_features, act=act, route_tag=(1, j)
            )
        )
    routed = tuple(f"route{j}" for j in range(routes))
    nodes.append(NodeSpec(id="output", kind=NodeKind.COMBINE, inputs=("router",) + routed))
    return validate(ArchSpec((in_features,), tuple(nodes), "output", (routes,)))


def perceptron_tree(
    input_shape: Sequence[int],
    classes: int,
    routes: int,
    hidden: Optional[int] = None,
    router_input: RouterInput = RouterInput.POOLED,
) -> ArchSpec:
    """
    A perceptron turned into a small tree: an optional shared ReLU trunk, a compact router,
    and ``routes`` parallel classifiers whose outputs are combined by the router weights.
    """
    nodes: List[NodeSpec] = []
    source = INPUT
    if hidden:
        nodes.append(NodeSpec(id="trunk", kind=NodeKind.FC, inputs=(INPUT,), out=hidden, act=ActivationKind.RELU))
        source = "trunk"
    nodes.append(
        NodeSpec(id="router", kind=NodeKind.ROUTER, inputs=(source,), routes=routes, router_input=router_input)
    )
    for j in range(routes):
        nodes.append(NodeSpec(id=f"route{j}", kind=NodeKind.FC, inputs=(source,), out=classes, route_tag=(1, j)))
    routed = tuple(f"route{j}" for j in range(routes))
    nodes.append(NodeSpec(id="output", kind=NodeKind.COMBINE, inputs=("router",) + routed))
    return validate(ArchSpec(tuple(input_shape), tuple(nodes), "output", (routes,)))


def standard_two_layer_convnet(c1: int, c2: int, c3: int, size: int, kernel: int = 3) -> ArchSpec:
    """Two dense convolutions ``c1 -> c2 -> c3`` on ``size × size`` maps (one route)."""
    k = (kernel, kernel)
    nodes = (
        NodeSpec(id="conv1", kind=NodeKind.CONV, inputs=(INPUT,), out=c2, kernel=k, act=ActivationKind.RELU),
        NodeSpec(id="conv2", kind=NodeKind.CONV, inputs=("conv1",), out=c3, kernel=k, act=ActivationKind.RELU),
    )
    return validate(ArchSpec((c1, size, size), nodes, "conv2"))


def two_route_convnet(c1: int, c2: int, c3: int, size: int, kernel: int = 3, grouped: bool = False) -> ArchSpec:
    """
    The branched counterpart of :func:`standard_two_layer_convnet`: the second convolution is
    split into two routes, each reading half of the ``c2`` feature maps and producing half of
    the ``c3`` outputs. With ``grouped`` the split is a single 2-group convolution instead of
    explicit selections and a concatenation.
    """
    if c2 % 2 or c3 % 2:
        raise ConfigurationError("two routes need even channel counts")
    k = (kernel, kernel)
    nodes: List[NodeSpec] = [
        NodeSpec(id="conv1", kind=NodeKind.CONV, inputs=(INPUT,), out=c2, kernel=k, act=ActivationKind.RELU)
    ]
    if grouped:
        nodes.append(
            NodeSpec(
                id="conv2",
                kind=NodeKind.CONV,
                inputs=("conv1",),
                out=c3,
                kernel=k,
                groups=2,
                act=ActivationKind.RELU,
            )
        )
        return validate(ArchSpec((c1, size, size), tuple(nodes), "conv2", (2,)))
    half = c2 // 2
    for j in range(2):
        nodes.append(
            NodeSpec(
                id=f"select{j}",
                kind=NodeKind.SELECTION,
                inputs=("conv1",),
                indices=tuple(range(j * half, (j + 1) * half)),
                route_tag=(1, j),
            )
        )
        nodes.append(
            NodeSpec(
                id=f"conv2_{j}",
                kind=NodeKind.CONV,
                inputs=(f"select{j}",),
                out=c3 // 2,
                kernel=k,
                act=ActivationKind.RELU,
                route_tag=(1, j),
            )
        )
    nodes.append(NodeSpec(id="conv2", kind=NodeKind.CONCAT, inputs=("conv2_0", "conv2_1")))
    return validate(ArchSpec((c1, size, size), tuple(nodes), "conv2", (2,)))


def filter_groups(layer: int) -> int:
    """Filter groups of the ``layer``-th (1-based) convolution: ``2^(n-2)``, at least 1."""
    return 2 ** max(layer - 2, 0)


def micro_convnet(
    input_shape: Sequence[int] = (3, 32, 32),
    widths: Sequence[int] = (16, 32, 64, 128),
    classes: int = 10,
    grouped: bool = True,
    pools: Optional[Sequence[bool]] = None,
    kernel: int = 3,
) -> ArchSpec:
    """
    A small VGG-style network ending in global max-pooling and one classifier. With
    ``grouped`` the ``n``-th convolution uses ``2^(n-2)`` filter groups; otherwise it is the
    dense network of identical widths.
    """
    pools = tuple(pools) if pools is not None else tuple(i % 2 == 0 for i in range(len(widths)))
    if len(pools) != len(widths):
        raise ConfigurationError("pools and widths differ in length")
    nodes: List[NodeSpec] = []
    source = INPUT
    route_counts: List[int] = []
    for n, (width, pool) in enumerate(zip(widths, pools), start=1):
        groups = filter_groups(n) if grouped else 1
        node_id = f"conv{n}"
        nodes.append(
            NodeSpec(
                id=node_id,
                kind=NodeKind.CONV,
                inputs=(source,),
                out=width,
                kernel=(kernel, kernel),
                groups=groups,
                pool=2 if pool else 0,
                act=ActivationKind.RELU,
            )
        )
        route_counts.append(groups)
        source = node_id
    nodes.append(NodeSpec(id="gmp", kind=NodeKind.GLOBAL_MAX_POOL, inputs=(source,)))
    nodes.append(NodeSpec(id="classifier", kind=NodeKind.FC, inputs=("gmp",), out=classes))
    return validate(ArchSpec(tuple(input_shape), tuple(nodes), "classifier", tuple(route_counts)))


def decision_tree(in_features: int, classes: int, depth: int) -> ArchSpec:
    """
    A complete binary tree of routers with identity transforms: every internal node routes
    the untouched input to one of two children; every leaf is a softmax classifier.
    """
    if depth < 1:
        raise ConfigurationError("a decision tree needs depth ≥ 1")
    nodes: List[NodeSpec] = []

    def build(path: str, level: int) -> str:
        if level == depth:
            nodes.append(NodeSpec(id=f"pass{path}", kind=NodeKind.IDENTITY, inputs=(INPUT,)))
            nodes.append(
                NodeSpec(
                    id=f"leaf{path}",
                    kind=NodeKind.FC,
                    inputs=(f"pass{path}",),
                    out=classes,
                    act=ActivationKind.SOFTMAX,
                )
            )
            return f"leaf{path}"
        children = [build(path + str(j), level + 1) for j in range(2)]
        router = f"router{path}"
        nodes.append(
            NodeSpec(id=router, kind=NodeKind.ROUTER, inputs=(INPUT,), routes=2, router_input=RouterInput.RAW)
        )
        nodes.append(NodeSpec(id=f"split{path}", kind=NodeKind.COMBINE, inputs=(router,) + tuple(children)))
        return f"split{path}"

    root = build("", 0)
    return validate(ArchSpec((in_features,), tuple(nodes), root, (2,) * depth))


def expert_mlp(in_features: int, classes: int, hidden: Tuple[int, ...] = ()) -> ArchSpec:
    """A plain ReLU perceptron stack used as an ensemble expert or router."""
    nodes: List[NodeSpec] = []
    source = INPUT
    for i, units in enumerate(hidden):
        nodes.append(
            NodeSpec(id=f"hidden{i}", kind=NodeKind.FC, inputs=(source,), out=units, act=ActivationKind.RELU)
        )
        source = f"hidden{i}"
    nodes.append(NodeSpec(id="logits", kind=NodeKind.FC, inputs=(source,), out=classes))
    return validate(ArchSpec((in_features,), tuple(nodes), "logits"))


def expert_convnet(input_shape: Sequence[int], widths: Sequence[int], classes: int) -> ArchSpec:
    """A dense convnet expert: ReLU convolutions with 2×2 pooling, global max-pooling, classifier."""
    return micro_convnet(input_shape, widths, classes, grouped=False, pools=[True] * len(widths))


def ensemble_router(input_shape: Sequence[int], routes: int, hidden: Tuple[int, ...] = ()) -> ArchSpec:
    """Perceptron emitting one correctness logit per expert; image inputs are flattened by the first layer."""
    if routes < 2:
        raise ConfigurationError(f"an ensemble router needs at least 2 routes, got {routes}")
    nodes: List[NodeSpec] = []
    source = INPUT
    for i, units in enumerate(hidden):
        nodes.append(
            NodeSpec(id=f"hidden{i}", kind=NodeKind.FC, inputs=(source,), out=units, act=ActivationKind.RELU)
        )
        source = f"hidden{i}"
    nodes.append(NodeSpec(id="scores", kind=NodeKind.FC, inputs=(source,), out=routes))
    return validate(ArchSpec(tuple(input_shape), tuple(nodes), "scores", (routes,)))
