"""
Correlation analysis of trained networks: activation-correlation matrices between two
layers, block-diagonal reordering of those matrices, and the routed perceptron implied by
zeroing their off-block entries.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage
from scipy.spatial.distance import squareform

from condnets.autodiff import ActivationKind, Param
from condnets.errors import ArgumentError, ShapeError
from condnets.graph import INPUT, ArchSpec, NodeKind, NodeSpec, RoutingPolicy, analyze, forward, validate

logger = logging.getLogger(__name__)


@dataclass
class CorrelationMatrix:
    """
    Pearson correlations between the units of two layers.

    Attributes:
        matrix (np.ndarray): (units of ``layer_i``) × (units of ``layer_j``), entries in [-1, 1].
        layer_i (str): node id of the row layer.
        layer_j (str): node id of the column layer.
        samples (int): dataset size the statistics were accumulated over.
    """

    matrix: np.ndarray
    layer_i: str
    layer_j: str
    samples: int

    @property
    def shape(self) -> Tuple[int, int]:
        return self.matrix.shape

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {"unit_i": i, "unit_j": j, "correlation": float(self.matrix[i, j])}
            for i in range(self.matrix.shape[0])
            for j in range(self.matrix.shape[1])
        ]


CORRELATION_COLUMNS = ("unit_i", "unit_j", "correlation")


def unit_activations(values: np.ndarray) -> np.ndarray:
    """N × units: feature maps are averaged over their spatial positions, one unit per channel."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 4:
        return values.mean(axis=(2, 3))
    return values.reshape(len(values), -1)


def pearson_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Pearson correlation of every column of ``a`` with every column of ``b`` (two-pass).
    Columns with zero variance correlate 0 with everything.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or len(a) != len(b):
        raise ShapeError(f"cannot correlate samples of shapes {a.shape} and {b.shape}")
    if len(a) == 0:
        raise ArgumentError("cannot correlate an empty sample")
    ca = a - a.mean(axis=0)
    cb = b - b.mean(axis=0)
    sa = np.sqrt((ca * ca).sum(axis=0))
    sb = np.sqrt((cb * cb).sum(axis=0))
    denom = np.outer(sa, sb)
    corr = np.divide(ca.T @ cb, denom, out=np.zeros(denom.shape), where=denom > 0)
    return np.clip(corr, -1.0, 1.0)


def _depends_on(arch: ArchSpec, node_id: str, ancestor: str) -> bool:
    nodes = {node.id: node for node in arch.nodes}
    stack, seen = [node_id], set()
    while stack:
        current = stack.pop()
        if current == ancestor:
            return True
        if current in seen or current == INPUT:
            continue
        seen.add(current)
        stack.extend(nodes[current].inputs)
    return False


def activation_correlation(
    arch: ArchSpec,
    params: Mapping[str, Param],
    images: np.ndarray,
    layer_i: str,
    layer_j: str,
    batch_size: int = 256,
) -> CorrelationMatrix:
    """
    Correlate the post-activation values of ``layer_i`` and ``layer_j`` over ``images``.

    The network runs under soft routing. Samples are put in a canonical order before the
    statistics are accumulated, so the result does not depend on the order of ``images``.

    Raises:
        ArgumentError: empty dataset, unknown layers, or ``layer_j`` not computed from ``layer_i``.
    """
    if len(images) == 0:
        raise ArgumentError("cannot correlate activations over an empty dataset")
    if batch_size < 1:
        raise ArgumentError(f"batch size must be positive, got {batch_size}")
    info = analyze(arch)
    for layer in (layer_i, layer_j):
        if layer not in info.shapes or layer == INPUT:
            raise ArgumentError(f"unknown layer {layer!r}")
    if layer_i == layer_j or not _depends_on(arch, layer_j, layer_i):
        raise ArgumentError(f"layer {layer_j!r} is not computed from layer {layer_i!r}")

    first, second = [], []
    for start in range(0, len(images), batch_size):
        batch = images[start : start + batch_size]
        result = forward(arch, params, batch, RoutingPolicy.soft(), record_grads=False)
        for layer, sink in ((layer_i, first), (layer_j, second)):
            if layer not in result.activations:
                raise ArgumentError(f"layer {layer!r} is not evaluated on whole batches")
            sink.append(unit_activations(result.activations[layer].data))
    a, b = np.concatenate(first), np.concatenate(second)

    joint = np.concatenate([a, b], axis=1)
    order = np.lexsort(joint.T[::-1])
    matrix = pearson_matrix(a[order], b[order])
    logger.info("correlated %d × %d units of %s and %s over %d samples",
                matrix.shape[0], matrix.shape[1], layer_i, layer_j, len(images))
    return CorrelationMatrix(matrix, layer_i, layer_j, len(images))


@dataclass
class BlockOrder:
    """
    A co-clustering of the rows and columns of a matrix into ``k`` blocks.

    Attributes:
        row_blocks (np.ndarray): block id of every row.
        col_blocks (np.ndarray): block id of every column; a block may own no column.
        row_perm (np.ndarray): rows in block order, original order inside each block.
        col_perm (np.ndarray): columns in block order.
    """

    row_blocks: np.ndarray
    col_blocks: np.ndarray
    row_perm: np.ndarray = field(init=False)
    col_perm: np.ndarray = field(init=False)

    def __post_init__(self):
        self.row_blocks = np.asarray(self.row_blocks, dtype=np.int64)
        self.col_blocks = np.asarray(self.col_blocks, dtype=np.int64)
        self.row_perm = np.lexsort((np.arange(len(self.row_blocks)), self.row_blocks))
        self.col_perm = np.lexsort((np.arange(len(self.col_blocks)), self.col_blocks))

    @property
    def k(self) -> int:
        return int(max(self.row_blocks.max(initial=-1), self.col_blocks.max(initial=-1))) + 1

    def mask(self) -> np.ndarray:
        """Boolean rows × columns pattern of within-block entries."""
        return self.row_blocks[:, None] == self.col_blocks[None, :]

    def blocks(self) -> List[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
        """Per block, its row indices and column indices."""
        return [
            (
                tuple(np.flatnonzero(self.row_blocks == b).tolist()),
                tuple(np.flatnonzero(self.col_blocks == b).tolist()),
            )
            for b in range(self.k)
        ]

    def rows(self) -> List[Dict[str, Any]]:
        out = [{"axis": "row", "position": p, "unit": int(u), "block": int(self.row_blocks[u])}
               for p, u in enumerate(self.row_perm)]
        out += [{"axis": "column", "position": p, "unit": int(u), "block": int(self.col_blocks[u])}
                for p, u in enumerate(self.col_perm)]
        return out


BLOCK_ORDER_COLUMNS = ("axis", "position", "unit", "block")


def _cosine_distances(profiles: np.ndarray) -> np.ndarray:
    """Condensed ``1 - cos`` distances between rows; an all-zero row is orthogonal to everything."""
    norms = np.sqrt((profiles * profiles).sum(axis=1))
    denom = np.outer(norms, norms)
    similarity = np.divide(profiles @ profiles.T, denom, out=np.zeros(denom.shape), where=denom > 0)
    distances = np.clip(1.0 - similarity, 0.0, None)
    np.fill_diagonal(distances, 0.0)
    return squareform(distances, checks=False)


def _average_linkage_blocks(profiles: np.ndarray, k: int) -> np.ndarray:
    """Cut the average-linkage dendrogram of ``profiles`` into ``k`` clusters, numbered by first member."""
    n = len(profiles)
    if k == 1:
        return np.zeros(n, dtype=np.int64)
    if k == n:
        return np.arange(n, dtype=np.int64)
    tree = linkage(_cosine_distances(profiles), method="average")
    labels = cut_tree(tree, n_clusters=k).ravel()
    _, first = np.unique(labels, return_index=True)
    rank = {labels[i]: r for r, i in enumerate(sorted(first))}
    return np.array([rank[label] for label in labels], dtype=np.int64)


def reorder_block_diagonal(matrix: np.ndarray, k: int) -> BlockOrder:
    """
    Group the rows of ``matrix`` into ``k`` blocks and assign every column to one block,
    so that most of the absolute mass lies inside the blocks.

    Rows are clustered by average-linkage agglomeration on the cosine distance between their
    ``|Λ|`` profiles. Each column joins the block whose rows it is most strongly connected
    to on average. Blocks are numbered by their first row.

    Raises:
        ArgumentError: ``k`` below 1 or above either dimension.
    """
    strength = np.abs(np.asarray(matrix, dtype=np.float64))
    if strength.ndim != 2:
        raise ArgumentError(f"expected a matrix, got shape {strength.shape}")
    if not 1 <= k <= min(strength.shape):
        raise ArgumentError(f"block count {k} must lie in [1, {min(strength.shape)}]")
    row_blocks = _average_linkage_blocks(strength, k)
    affinity = np.stack([strength[row_blocks == b].mean(axis=0) for b in range(k)])
    col_blocks = np.argmax(affinity, axis=0)
    order = BlockOrder(row_blocks, col_blocks)
    logger.debug("reordered a %s matrix into %d blocks", strength.shape, k)
    return order


@dataclass
class ZeroedMatrix:
    """
    Attributes:
        matrix (np.ndarray): the input with every off-block entry set to 0.
        mask (np.ndarray): boolean pattern of kept entries.
        retained (float): within-block ``|Λ|`` mass over total mass; 0 for an all-zero input.
        selections (list): per non-empty block, the row units and column units it connects.
    """

    matrix: np.ndarray
    mask: np.ndarray
    retained: float
    selections: List[Tuple[Tuple[int, ...], Tuple[int, ...]]]


def within_block_mass(matrix: np.ndarray, order: BlockOrder) -> float:
    return float(np.abs(matrix)[order.mask()].sum())


def zero_off_diagonal(matrix: np.ndarray, order: BlockOrder) -> ZeroedMatrix:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (len(order.row_blocks), len(order.col_blocks)):
        raise ShapeError(f"block assignment of {len(order.row_blocks)} × {len(order.col_blocks)} "
                         f"does not fit a {matrix.shape} matrix")
    mask = order.mask()
    total = float(np.abs(matrix).sum())
    retained = within_block_mass(matrix, order) / total if total > 0 else 0.0
    selections = [(rows, cols) for rows, cols in order.blocks() if rows and cols]
    return ZeroedMatrix(np.where(mask, matrix, 0.0), mask, retained, selections)


def routed_perceptron(
    in_features: int,
    selections: Sequence[Tuple[Sequence[int], Sequence[int]]],
    act: ActivationKind = ActivationKind.RELU,
    bias: bool = True,
) -> ArchSpec:
    """
    The perceptron layer that connects only the units paired by ``selections``: per block a
    selection of its input units, a fully-connected transform onto its output units, then a
    concatenation and a final selection restoring the original output order.

    Raises:
        ArgumentError: the blocks do not cover every output unit exactly once.
    """
    outputs = [int(u) for _, cols in selections for u in cols]
    if not selections or sorted(outputs) != list(range(len(outputs))):
        raise ArgumentError("block output units must cover 0..n-1 exactly once")
    nodes: List[NodeSpec] = []
    parts = []
    for b, (rows, cols) in enumerate(selections):
        if not rows:
            raise ArgumentError(f"block {b} has output units but no input units")
        if max(rows) >= in_features or min(rows) < 0:
            raise ArgumentError(f"block {b} selects input units outside [0, {in_features})")
        nodes.append(NodeSpec(id=f"select{b}", kind=NodeKind.SELECTION, inputs=(INPUT,),
                              indices=tuple(int(r) for r in rows), route_tag=(1, b)))
        nodes.append(NodeSpec(id=f"block{b}", kind=NodeKind.FC, inputs=(f"select{b}",), out=len(cols),
                              act=act, bias=bias, route_tag=(1, b)))
        parts.append(f"block{b}")
    nodes.append(NodeSpec(id="blocks", kind=NodeKind.CONCAT, inputs=tuple(parts)))
    position = {unit: p for p, unit in enumerate(outputs)}
    restore = tuple(position[u] for u in range(len(outputs)))
    nodes.append(NodeSpec(id="output", kind=NodeKind.SELECTION, inputs=("blocks",), indices=restore))
    return validate(ArchSpec((in_features,), tuple(nodes), "output", (len(selections),)))


def masked_dense_weights(weights: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """
    Zero the connections of an ``out × (in [+1])`` weight matrix outside ``mask``, an
    ``in × out`` pattern. A trailing bias column is kept.
    """
    weights = np.asarray(weights)
    n_in, n_out = mask.shape
    if weights.shape[0] != n_out or weights.shape[1] not in (n_in, n_in + 1):
        raise ShapeError(f"weights {weights.shape} do not fit a {mask.shape} connection pattern")
    keep = np.ones(weights.shape, dtype=bool)
    keep[:, :n_in] = mask.T
    return np.where(keep, weights, 0.0)


def routed_params(
    weights: np.ndarray,
    selections: Sequence[Tuple[Sequence[int], Sequence[int]]],
    in_features: int,
) -> Dict[str, Param]:
    """Parameters of :func:`routed_perceptron` cut from a dense ``out × (in [+1])`` weight matrix."""
    weights = np.asarray(weights)
    if weights.shape[1] not in (in_features, in_features + 1):
        raise ShapeError(f"weights {weights.shape} do not fit {in_features} inputs")
    bias = weights.shape[1] == in_features + 1
    params: Dict[str, Param] = {}
    for b, (rows, cols) in enumerate(selections):
        block = weights[np.ix_(list(cols), list(rows))]
        if bias:
            block = np.concatenate([block, weights[list(cols), -1:]], axis=1)
        params[f"block{b}"] = Param(f"block{b}", block.copy())
    return params


def structure_from_correlation(
    correlation: CorrelationMatrix, k: int
) -> Tuple[BlockOrder, ZeroedMatrix, Optional[ArchSpec]]:
    """Reorder, zero and, when every block is non-empty, build the implied routed perceptron."""
    order = reorder_block_diagonal(correlation.matrix, k)
    zeroed = zero_off_diagonal(correlation.matrix, order)
    logger.info("%d blocks retain %.1f%% of the correlation mass", k, 100 * zeroed.retained)
    try:
        arch = routed_perceptron(correlation.shape[0], zeroed.selections)
    except ArgumentError as e:
        logger.warning("no routed perceptron for this block pattern: %s", e)
        arch = None
    return order, zeroed, arch
