"""
Rewrites an implicitly routed network (selections, identities, concatenations, filter groups)
into a plain network whose dense weights are the block-diagonal embedding of the routed ones.
"""

import logging
from dataclasses import replace
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from condnets.autodiff import ActivationKind, Param
from condnets.errors import UnsupportedModeError
from condnets.graph import INPUT, ArchSpec, NodeKind, NodeSpec, analyze, param_shapes

logger = logging.getLogger(__name__)

_ELEMENTWISE = frozenset({ActivationKind.RELU, ActivationKind.SIGMOID, ActivationKind.IDENTITY})


class _Rewriter:
    def __init__(self, arch: ArchSpec, weights: Dict[str, np.ndarray]):
        self.input_shape = arch.input_shape
        self.route_counts = arch.route_counts
        self.output = arch.output
        self.nodes: Dict[str, NodeSpec] = {node.id: node for node in arch.nodes}
        self.weights = weights
        self.applied: List[str] = []

    def spec(self) -> ArchSpec:
        return ArchSpec(self.input_shape, tuple(self.nodes.values()), self.output, self.route_counts)

    def shapes(self):
        return analyze(self.spec()).shapes

    def consumers(self, node_id: str) -> List[str]:
        return [node.id for node in self.nodes.values() for src in node.inputs if src == node_id]

    def fresh_id(self, base: str) -> str:
        candidate, n = f"{base}/in", 1
        while candidate in self.nodes or candidate == INPUT:
            n += 1
            candidate = f"{base}/in{n}"
        return candidate

    def prune(self):
        keep = {self.output}
        stack = [self.output]
        while stack:
            for src in self.nodes[stack.pop()].inputs:
                if src != INPUT and src not in keep:
                    keep.add(src)
                    stack.append(src)
        for node_id in [n for n in self.nodes if n not in keep]:
            del self.nodes[node_id]
            self.weights.pop(node_id, None)

    def bypass(self, node: NodeSpec):
        src = node.inputs[0]
        for other in list(self.nodes.values()):
            if node.id in other.inputs:
                inputs = tuple(src if s == node.id else s for s in other.inputs)
                self.nodes[other.id] = replace(other, inputs=inputs)
        if self.output == node.id:
            self.output = src
        del self.nodes[node.id]

    def is_dense_transform(self, node_id: str) -> bool:
        if node_id == INPUT:
            return False
        node = self.nodes[node_id]
        return (node.kind is NodeKind.FC or (node.kind is NodeKind.CONV and node.groups == 1)) and (
            node.act in _ELEMENTWISE
        )

    def bypass_identity(self) -> bool:
        for node in self.nodes.values():
            if node.kind is NodeKind.IDENTITY or (node.kind is NodeKind.CONCAT and len(node.inputs) == 1):
                self.bypass(node)
                return True
        return False

    def ungroup(self) -> bool:
        for node in self.nodes.values():
            if node.kind is NodeKind.CONV and node.groups > 1:
                w = self.weights[node.id]
                g = node.groups
                o_group, c_group = w.shape[0] // g, w.shape[1]
                dense = np.zeros((w.shape[0], c_group * g) + w.shape[2:], dtype=w.dtype)
                for b in range(g):
                    rows = slice(b * o_group, (b + 1) * o_group)
                    dense[rows, b * c_group : (b + 1) * c_group] = w[rows]
                self.weights[node.id] = dense
                self.nodes[node.id] = replace(node, groups=1)
                return True
        return False

    def drop_identity_selection(self) -> bool:
        shapes = self.shapes()
        for node in self.nodes.values():
            if node.kind is NodeKind.SELECTION and node.indices == tuple(range(shapes[node.inputs[0]][0])):
                self.bypass(node)
                return True
        return False

    def block_diagonal(self) -> bool:
        shapes = self.shapes()
        for node in self.nodes.values():
            if node.kind is not NodeKind.CONCAT or len(node.inputs) < 2:
                continue
            parts = node.inputs
            if len(set(parts)) != len(parts) or not all(self.is_dense_transform(p) for p in parts):
                continue
            layers = [self.nodes[p] for p in parts]
            first = layers[0]
            same = all(
                layer.kind is first.kind
                and layer.act is first.act
                and layer.bias == first.bias
                and layer.kernel == first.kernel
                and layer.stride == first.stride
                and layer.padding == first.padding
                and layer.pool == first.pool
                for layer in layers
            )
            if not same:
                continue
            if any(self.consumers(p) != [node.id] or p == self.output for p in parts):
                continue
            sources = [layer.inputs[0] for layer in layers]
            if len({tuple(shapes[s][1:]) for s in sources}) != 1:
                continue
            self._merge_block_diagonal(node, layers, sources, shapes)
            return True
        return False

    def _merge_block_diagonal(self, node: NodeSpec, layers: List[NodeSpec], sources: List[str], shapes):
        blocks = [self.weights[layer.id] for layer in layers]
        first = layers[0]
        out = sum(b.shape[0] for b in blocks)
        if first.kind is NodeKind.CONV:
            width = sum(b.shape[1] for b in blocks)
            merged = np.zeros((out, width) + blocks[0].shape[2:], dtype=blocks[0].dtype)
        else:
            width = sum(int(np.prod(shapes[s])) for s in sources)
            merged = np.zeros((out, width + int(first.bias)), dtype=blocks[0].dtype)
        row = col = 0
        for block in blocks:
            n_out = block.shape[0]
            n_in = block.shape[1] - (int(first.bias) if first.kind is NodeKind.FC else 0)
            merged[row : row + n_out, col : col + n_in] = block[:, :n_in]
            if first.kind is NodeKind.FC and first.bias:
                merged[row : row + n_out, -1] = block[:, -1]
            row += n_out
            col += n_in
        joined = self.fresh_id(node.id)
        for layer in layers:
            del self.nodes[layer.id]
            del self.weights[layer.id]
        self.nodes[joined] = NodeSpec(id=joined, kind=NodeKind.CONCAT, inputs=tuple(sources))
        self.nodes[node.id] = replace(first, id=node.id, inputs=(joined,), out=out, route_tag=None)
        self.weights[node.id] = merged

    def merge_selections(self) -> bool:
        shapes = self.shapes()
        for node in self.nodes.values():
            if node.kind is not NodeKind.CONCAT or len(node.inputs) < 2:
                continue
            roots = set()
            indices: List[int] = []
            for src in node.inputs:
                if src != INPUT and self.nodes[src].kind is NodeKind.SELECTION:
                    roots.add(self.nodes[src].inputs[0])
                    indices.extend(self.nodes[src].indices)
                else:
                    roots.add(src)
                    indices.extend(range(shapes[src][0]))
            has_selection = any(src != INPUT and self.nodes[src].kind is NodeKind.SELECTION for src in node.inputs)
            repeats = len(set(node.inputs)) != len(node.inputs)
            if len(roots) != 1 or not (has_selection or repeats):
                continue
            self.nodes[node.id] = NodeSpec(
                id=node.id, kind=NodeKind.SELECTION, inputs=(roots.pop(),), indices=tuple(indices)
            )
            return True
        return False

    def fold_output_selection(self) -> bool:
        for node in self.nodes.values():
            if node.kind is not NodeKind.SELECTION or not self.is_dense_transform(node.inputs[0]):
                continue
            layer = self.nodes[node.inputs[0]]
            idx = np.asarray(node.indices, dtype=np.intp)
            self.nodes[node.id] = replace(layer, id=node.id, out=len(idx), route_tag=None)
            self.weights[node.id] = self.weights[layer.id][idx].copy()
            return True
        return False

    def fold_input_selection(self) -> bool:
        shapes = self.shapes()
        for node in self.nodes.values():
            if node.kind not in (NodeKind.CONV, NodeKind.FC) or (node.kind is NodeKind.CONV and node.groups != 1):
                continue
            src = node.inputs[0]
            if src == INPUT or self.nodes[src].kind is not NodeKind.SELECTION:
                continue
            selection = self.nodes[src]
            root = selection.inputs[0]
            idx = np.asarray(selection.indices, dtype=np.intp)
            w = self.weights[node.id]
            if node.kind is NodeKind.CONV:
                folded = np.zeros((w.shape[0], shapes[root][0]) + w.shape[2:], dtype=w.dtype)
                np.add.at(folded, (slice(None), idx), w)
            else:
                spatial = int(np.prod(shapes[root][1:]))
                features = (idx[:, None] * spatial + np.arange(spatial)).ravel()
                n_in = int(np.prod(shapes[root]))
                folded = np.zeros((w.shape[0], n_in + int(node.bias)), dtype=w.dtype)
                np.add.at(folded, (slice(None), features), w[:, : len(features)])
                if node.bias:
                    folded[:, -1] = w[:, -1]
            self.weights[node.id] = folded
            self.nodes[node.id] = replace(node, inputs=(root,))
            return True
        return False

    def run(self):
        rules: List[Tuple[str, Callable[[], bool]]] = [
            ("bypass identity", self.bypass_identity),
            ("ungroup", self.ungroup),
            ("drop identity selection", self.drop_identity_selection),
            ("block diagonal", self.block_diagonal),
            ("merge selections", self.merge_selections),
            ("fold output selection", self.fold_output_selection),
            ("fold input selection", self.fold_input_selection),
        ]
        changed = True
        while changed:
            changed = False
            for name, rule in rules:
                if rule():
                    self.prune()
                    self.applied.append(name)
                    changed = True
                    break


def equivalent_dense(
    arch: ArchSpec, params: Optional[Mapping[str, Param]] = None
) -> Tuple[ArchSpec, Optional[Dict[str, Param]]]:
    """
    Rewrite an implicitly routed ``arch`` into an unrouted architecture with dense weights.

    Filter groups become block-diagonal convolutions, parallel transforms joined by a concat
    become one block-diagonal layer, and selections are folded into the weights that read or
    produce them. An architecture with nothing to rewrite is returned unchanged.

    Parameters:
        arch (ArchSpec): a network without routers.
        params (dict of str to Param, optional): weights of ``arch``; when omitted only the
            architecture is rewritten and ``None`` is returned for the weights.

    Returns:
        (ArchSpec, dict of str to Param or None): the dense architecture and its weights.

    Raises:
        UnsupportedModeError: ``arch`` contains router or combine nodes.
    """
    analyze(arch)
    explicit = [node.id for node in arch.nodes if node.kind in (NodeKind.ROUTER, NodeKind.COMBINE)]
    if explicit:
        raise UnsupportedModeError(f"explicitly routed nodes {explicit} have no dense equivalent")
    shapes = param_shapes(arch)
    if params is not None:
        weights = {node_id: np.array(params[node_id].value.data, copy=True) for node_id in shapes}
    else:
        weights = {node_id: np.zeros(shape) for node_id, shape in shapes.items()}
    rewriter = _Rewriter(arch, weights)
    rewriter.run()
    dense = rewriter.spec()
    analyze(dense)
    logger.debug("equivalent_dense applied %s", rewriter.applied or "no rewrites")
    if params is None:
        return dense, None
    return dense, {node_id: Param(node_id, w) for node_id, w in rewriter.weights.items()}
