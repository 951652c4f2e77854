"""
Dense tensors, the layer primitives of conditional networks, and a reverse-mode tape.

Every primitive takes an optional ``tape``. When a tape is given the primitive records one
:class:`TapeEntry` holding the operand ids, the multiply-accumulate count of the work done,
and a vector-Jacobian closure; :func:`backward` replays the entries in reverse order and
accumulates into the ``grad`` of every :class:`Param` the tape has seen.
"""

import contextlib
import enum
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from condnets.errors import (
    ArgumentError,
    ConfigurationError,
    EvaluationError,
    ShapeError,
    StateError,
)

logger = logging.getLogger(__name__)

_tensor_ids = itertools.count()

Padding = Union[str, int]
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class ActivationKind(str, enum.Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"
    IDENTITY = "identity"


class Tensor:
    """
    A dense n-dimensional array carrying activations, weights or gradients.

    Attributes:
        data (np.ndarray): row-major float32 or float64 values.
        tid (int): identifier used by the tape to link producers and consumers.
    """

    __slots__ = ("data", "tid")

    def __init__(self, data, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        if array.ndim == 0:
            array = array.reshape(1)
        self.data: np.ndarray = array
        self.tid: int = next(_tensor_ids)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


class Param:
    """
    A trainable weight tensor and its accumulated gradient.

    Attributes:
        name (str): stable identifier, the id of the node owning the weights.
        value (Tensor): current weights.
        grad (np.ndarray): gradient accumulated by :func:`backward`, same shape as ``value``.
    """

    def __init__(self, name: str, value):
        self.name = name
        tensor = value if isinstance(value, Tensor) else Tensor(value)
        tensor.data = np.ascontiguousarray(tensor.data)
        self.value = tensor
        self.grad = np.zeros_like(tensor.data)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[int, ...]
    output: int
    shape: Tuple[int, ...]
    vjp: Optional[VJP]
    macs: int = 0
    rows: int = 0
    node: Optional[str] = None
    saved: Dict[str, np.ndarray] = field(default_factory=dict)


class Tape:
    """
    Ordered record of primitive applications.

    Entries are appended in evaluation order, so every operand of entry ``k`` is produced by
    an earlier entry, an input, or a watched :class:`Param`. A tape created with
    ``keep_grad=False`` only keeps the bookkeeping (op, node, MACs) and cannot be
    back-propagated; inference uses it to account for conditional computation.
    """

    def __init__(self, keep_grad: bool = True):
        self.keep_grad = keep_grad
        self.entries: List[TapeEntry] = []
        self.params: Dict[int, Param] = {}
        self.output: Optional[Tensor] = None
        self.trainable = True
        self.untrainable_reason: Optional[str] = None
        self._scope: List[str] = []

    def watch(self, param: Param) -> Tensor:
        self.params[param.value.tid] = param
        return param.value

    @contextlib.contextmanager
    def scope(self, node_id: str) -> Iterator[None]:
        self._scope.append(node_id)
        try:
            yield
        finally:
            self._scope.pop()

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        vjp: VJP,
        macs: int = 0,
        **saved: np.ndarray,
    ):
        self.entries.append(
            TapeEntry(
                op=op,
                inputs=tuple(t.tid for t in inputs),
                output=output.tid,
                shape=output.shape,
                vjp=vjp if self.keep_grad else None,
                macs=int(macs),
                rows=output.shape[0],
                node=self._scope[-1] if self._scope else None,
                saved=saved if self.keep_grad else {},
            )
        )
        self.output = output

    def mark_untrainable(self, reason: str):
        self.trainable = False
        self.untrainable_reason = reason

    @property
    def macs(self) -> int:
        return sum(entry.macs for entry in self.entries)

    def macs_by_node(self) -> Dict[str, int]:
        totals: Dict[str, int] = {}
        for entry in self.entries:
            if entry.node is not None:
                totals[entry.node] = totals.get(entry.node, 0) + entry.macs
        return totals

    def nodes_visited(self) -> List[str]:
        seen: Dict[str, None] = {}
        for entry in self.entries:
            if entry.node is not None:
                seen.setdefault(entry.node, None)
        return list(seen)


def _operand(value: Union[Tensor, Param], tape: Optional[Tape]) -> Tensor:
    if isinstance(value, Param):
        return tape.watch(value) if tape is not None else value.value
    return value


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _softmax(x: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _activate(phi: np.ndarray, act: ActivationKind) -> np.ndarray:
    if act is ActivationKind.RELU:
        return np.where(phi > 0, phi, 0).astype(phi.dtype, copy=False)
    if act is ActivationKind.SIGMOID:
        return _sigmoid(phi)
    if act is ActivationKind.SOFTMAX:
        return _softmax(phi, axis=1)
    return phi


def _activation_vjp(g: np.ndarray, phi: np.ndarray, out: np.ndarray, act: ActivationKind) -> np.ndarray:
    if act is ActivationKind.RELU:
        # subgradient at 0 is 0
        return g * (phi > 0)
    if act is ActivationKind.SIGMOID:
        return g * out * (1.0 - out)
    if act is ActivationKind.SOFTMAX:
        return out * (g - np.sum(g * out, axis=1, keepdims=True))
    return g


def activate(x: Tensor, act: ActivationKind, tape: Optional[Tape] = None) -> Tensor:
    act = ActivationKind(act)
    if act is ActivationKind.IDENTITY:
        return x
    out = _activate(x.data, act)
    result = Tensor(out)
    if tape is not None:

        def vjp(g):
            return (_activation_vjp(g, x.data, out, act),)

        tape.record(act.value, [x], result, vjp)
    return result


def relu(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    return activate(x, ActivationKind.RELU, tape)


def sigmoid(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    return activate(x, ActivationKind.SIGMOID, tape)


def softmax(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    return activate(x, ActivationKind.SOFTMAX, tape)


def fc_forward(
    x: Tensor,
    p: Union[Param, Tensor],
    act: ActivationKind = ActivationKind.IDENTITY,
    tape: Optional[Tape] = None,
) -> Tensor:
    """
    Fully-connected projection ``σ(P x)`` for a batch of row vectors.

    A weight with ``m + 1`` columns for an ``m``-feature input carries the bias in its last
    column (homogeneous coordinates: a constant 1 is appended to every input row).

    Parameters:
        x (Tensor): batch × m input.
        p (Param | Tensor): n × m or n × (m + 1) projection.
        act (ActivationKind): nonlinearity applied to ``φ = P x``.
        tape (Tape, optional): records the application when given.

    Returns:
        Tensor: batch × n output.
    """
    act = ActivationKind(act)
    w = _operand(p, tape)
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"fc_forward expects a 2-d input and weight, got {x.shape} and {w.shape}")
    m = x.shape[1]
    n, cols = w.shape
    if cols == m + 1:
        bias = True
    elif cols == m:
        bias = False
    else:
        raise ShapeError(f"fc_forward: input {x.shape} does not match weight {w.shape}")
    weights = w.data[:, :m]
    phi = x.data @ weights.T
    if bias:
        phi = phi + w.data[:, m]
    out = _activate(phi, act)
    result = Tensor(out)
    if tape is not None:

        def vjp(g):
            g_phi = _activation_vjp(g, phi, out, act)
            g_w = np.empty_like(w.data, dtype=g_phi.dtype)
            g_w[:, :m] = g_phi.T @ x.data
            if bias:
                g_w[:, m] = g_phi.sum(axis=0)
            return g_phi @ weights, g_w

        tape.record("fc", [x, w], result, vjp, macs=x.shape[0] * n * cols, phi=phi)
    return result


def resolve_padding(padding: Padding, k_y: int, k_x: int) -> Tuple[int, int, int, int]:
    """Return (top, bottom, left, right) zero-padding for ``"same"``, ``"valid"`` or an int."""
    if padding == "same":
        return (k_y - 1) // 2, k_y - 1 - (k_y - 1) // 2, (k_x - 1) // 2, k_x - 1 - (k_x - 1) // 2
    if padding == "valid":
        return 0, 0, 0, 0
    if isinstance(padding, (int, np.integer)) and not isinstance(padding, bool) and padding >= 0:
        pad = int(padding)
        return pad, pad, pad, pad
    raise ConfigurationError(f"unsupported padding {padding!r}")


def conv_output_hw(height: int, width: int, k_y: int, k_x: int, stride: int, padding: Padding) -> Tuple[int, int]:
    top, bottom, left, right = resolve_padding(padding, k_y, k_x)
    return (height + top + bottom - k_y) // stride + 1, (width + left + right - k_x) // stride + 1


def conv2d_grouped(
    x: Tensor,
    w: Union[Param, Tensor],
    groups: int = 1,
    act: ActivationKind = ActivationKind.IDENTITY,
    stride: int = 1,
    padding: Padding = "same",
    tape: Optional[Tape] = None,
) -> Tensor:
    """
    2-d convolution with filter groups.

    Output channel block ``b`` (``C_out / g`` channels) reads input channel block ``b``
    (``C_in / g`` channels) only; each block is an independent im2col product, so
    perturbing channels of another block never changes it.

    Parameters:
        x (Tensor): batch × C_in × H × W input.
        w (Param | Tensor): C_out × (C_in / g) × k_y × k_x filters.
        groups (int): number of filter groups ``g``.
        act (ActivationKind): nonlinearity applied after the convolution.
        stride (int): spatial stride.
        padding (str | int): ``"same"`` (default), ``"valid"`` or a symmetric pad width.
        tape (Tape, optional): records the application when given.
    """
    act = ActivationKind(act)
    w = _operand(w, tape)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d_grouped expects 4-d input and weight, got {x.shape} and {w.shape}")
    batch, c_in, height, width = x.shape
    c_out, c_group, k_y, k_x = w.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ConfigurationError(f"{groups} groups do not divide {c_in} input and {c_out} output channels")
    if c_group != c_in // groups:
        raise ShapeError(f"conv2d_grouped: input {x.shape} with {groups} groups does not match weight {w.shape}")
    if stride < 1:
        raise ConfigurationError(f"stride must be positive, got {stride}")
    top, bottom, left, right = resolve_padding(padding, k_y, k_x)
    out_h, out_w = conv_output_hw(height, width, k_y, k_x, stride, padding)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d_grouped: kernel {w.shape} does not fit input {x.shape}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    windows = sliding_window_view(padded, (k_y, k_x), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    o_group = c_out // groups
    dtype = np.result_type(x.data, w.data)
    phi = np.empty((batch, c_out, out_h, out_w), dtype=dtype)
    columns = []
    for b in range(groups):
        cols = windows[:, b * c_group : (b + 1) * c_group].transpose(0, 2, 3, 1, 4, 5)
        cols = cols.reshape(batch * out_h * out_w, c_group * k_y * k_x)
        wmat = w.data[b * o_group : (b + 1) * o_group].reshape(o_group, -1)
        block = cols @ wmat.T
        phi[:, b * o_group : (b + 1) * o_group] = block.reshape(batch, out_h, out_w, o_group).transpose(0, 3, 1, 2)
        columns.append(cols)
    out = _activate(phi, act)
    result = Tensor(out)
    if tape is not None:

        def vjp(g):
            g_phi = _activation_vjp(g, phi, out, act)
            g_w = np.empty_like(w.data, dtype=g_phi.dtype)
            g_padded = np.zeros(padded.shape, dtype=g_phi.dtype)
            for b in range(groups):
                o_sl = slice(b * o_group, (b + 1) * o_group)
                c_sl = slice(b * c_group, (b + 1) * c_group)
                g_block = g_phi[:, o_sl].transpose(0, 2, 3, 1).reshape(batch * out_h * out_w, o_group)
                g_w[o_sl] = (g_block.T @ columns[b]).reshape(o_group, c_group, k_y, k_x)
                wmat = w.data[o_sl].reshape(o_group, -1)
                g_cols = (g_block @ wmat).reshape(batch, out_h, out_w, c_group, k_y, k_x)
                for i in range(k_y):
                    for j in range(k_x):
                        rows = slice(i, i + stride * out_h, stride)
                        cols = slice(j, j + stride * out_w, stride)
                        g_padded[:, c_sl, rows, cols] += g_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            return g_padded[:, :, top : top + height, left : left + width], g_w

        macs = batch * c_out * c_group * k_y * k_x * out_h * out_w
        tape.record("conv", [x, w], result, vjp, macs=macs, phi=phi)
    return result


def max_pool(x: Tensor, size: int = 2, stride: Optional[int] = None, tape: Optional[Tape] = None) -> Tensor:
    """Spatial max-pooling; ties send the gradient to the first (row-major) maximum."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool expects a 4-d input, got {x.shape}")
    stride = stride or size
    batch, channels, height, width = x.shape
    out_h, out_w = (height - size) // stride + 1, (width - size) // stride + 1
    if size < 1 or out_h < 1 or out_w < 1:
        raise ShapeError(f"max_pool: window {size} does not fit input {x.shape}")
    windows = sliding_window_view(x.data, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    windows = windows[:, :, :out_h, :out_w]
    flat = windows.reshape(batch, channels, out_h, out_w, size * size)
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    result = Tensor(out)
    if tape is not None:

        def vjp(g):
            g_x = np.zeros(x.shape, dtype=g.dtype)
            b, c, i, j = np.indices(arg.shape)
            rows = i * stride + arg // size
            cols = j * stride + arg % size
            np.add.at(g_x, (b, c, rows, cols), g)
            return (g_x,)

        tape.record("max_pool", [x], result, vjp)
    return result


def global_max_pool(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Per-channel maximum over all spatial positions: batch × C × H × W -> batch × C."""
    if x.ndim != 4:
        raise ShapeError(f"global_max_pool expects a 4-d input, got {x.shape}")
    batch, channels, height, width = x.shape
    if height < 1 or width < 1:
        raise ShapeError(f"global_max_pool: empty spatial extent in {x.shape}")
    flat = x.data.reshape(batch, channels, height * width)
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    result = Tensor(out)
    if tape is not None:

        def vjp(g):
            g_flat = np.zeros(flat.shape, dtype=g.dtype)
            np.put_along_axis(g_flat, arg[..., None], g[..., None], axis=-1)
            return (g_flat.reshape(x.shape),)

        tape.record("global_max_pool", [x], result, vjp)
    return result


def flatten(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    if x.ndim == 2:
        return x
    result = Tensor(x.data.reshape(x.shape[0], -1))
    if tape is not None:
        tape.record("flatten", [x], result, lambda g: (g.reshape(x.shape),))
    return result


def concat(xs: Sequence[Tensor], axis: int = 1, tape: Optional[Tape] = None) -> Tensor:
    """Concatenate along the channel/feature axis, preserving operand order (⊕)."""
    if not xs:
        raise ArgumentError("concat needs at least one operand")
    if len(xs) == 1:
        return xs[0]
    first = xs[0].shape
    for t in xs[1:]:
        if len(t.shape) != len(first) or any(
            a != b for k, (a, b) in enumerate(zip(t.shape, first)) if k != axis
        ):
            raise ShapeError(f"concat: shape {t.shape} does not match {first} outside axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    result = Tensor(np.concatenate([t.data for t in xs], axis=axis))
    if tape is not None:

        def vjp(g):
            return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

        tape.record("concat", xs, result, vjp)
    return result


def select(x: Tensor, indices: Sequence[int], tape: Optional[Tape] = None) -> Tensor:
    """Apply a row-selection matrix S to the channel/feature axis: ``v' = S v``."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= x.shape[1]:
        raise ShapeError(f"select: indices out of range for shape {x.shape}")
    result = Tensor(x.data[:, idx])
    if tape is not None:

        def vjp(g):
            g_x = np.zeros(x.shape, dtype=g.dtype)
            np.add.at(g_x, (slice(None), idx), g)
            return (g_x,)

        tape.record("select", [x], result, vjp)
    return result


def take_rows(x: Tensor, rows: np.ndarray, tape: Optional[Tape] = None) -> Tensor:
    """Gather a sub-batch; used when a route only receives part of the batch."""
    rows = np.asarray(rows, dtype=np.intp)
    result = Tensor(x.data[rows])
    if tape is not None:

        def vjp(g):
            g_x = np.zeros(x.shape, dtype=g.dtype)
            np.add.at(g_x, rows, g)
            return (g_x,)

        tape.record("take_rows", [x], result, vjp)
    return result


def mul(a: Union[Tensor, Param], b: Union[Tensor, Param], tape: Optional[Tape] = None) -> Tensor:
    a, b = _operand(a, tape), _operand(b, tape)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    result = Tensor(a.data * b.data)
    if tape is not None:
        tape.record("mul", [a, b], result, lambda g: (g * b.data, g * a.data), macs=a.data.size)
    return result


def add(a: Union[Tensor, Param], b: Union[Tensor, Param], tape: Optional[Tape] = None) -> Tensor:
    a, b = _operand(a, tape), _operand(b, tape)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    result = Tensor(a.data + b.data)
    if tape is not None:
        tape.record("add", [a, b], result, lambda g: (g, g))
    return result


def route_combine(
    weights: Tensor,
    branches: Sequence[Optional[Tensor]],
    positions: Sequence[Optional[np.ndarray]],
    tape: Optional[Tape] = None,
) -> Tensor:
    """
    Routed combination ``v2 = r V1`` over the visited routes only.

    Parameters:
        weights (Tensor): batch × R route weights r.
        branches (list): per route, the route output for the rows that visited it, or None.
        positions (list): per route, the batch positions of those rows, or None.
    """
    present = [j for j, branch in enumerate(branches) if branch is not None]
    if not present:
        raise ArgumentError("route_combine needs at least one visited route")
    batch = weights.shape[0]
    tail = branches[present[0]].shape[1:]
    dtype = np.result_type(weights.data, *[branches[j].data for j in present])
    out = np.zeros((batch,) + tail, dtype=dtype)
    expand = (slice(None),) + (None,) * len(tail)
    for j in present:
        rows = positions[j]
        out[rows] += weights.data[rows, j][expand] * branches[j].data
    result = Tensor(out)
    if tape is not None:

        def vjp(g):
            g_r = np.zeros(weights.shape, dtype=g.dtype)
            grads = []
            for j in present:
                rows = positions[j]
                g_rows = g[rows]
                g_r[rows, j] = np.sum((g_rows * branches[j].data).reshape(len(rows), -1), axis=1)
                grads.append(weights.data[rows, j][expand] * g_rows)
            return (g_r, *grads)

        tape.record("route_combine", [weights] + [branches[j] for j in present], result, vjp)
    return result


def backward(tape: Tape, loss_grad, output: Optional[Tensor] = None):
    """
    Reverse-mode pass over ``tape``; accumulates into ``Param.grad``.

    Params the tape never reached keep their (zero) gradient.
    """
    if not tape.entries or tape.output is None:
        raise StateError("backward called before a forward pass was recorded")
    if not tape.keep_grad:
        raise StateError("tape was recorded without gradients")
    output = tape.output if output is None else output
    loss_grad = np.asarray(loss_grad)
    if loss_grad.shape != output.shape:
        raise ShapeError(f"loss gradient {loss_grad.shape} does not match output {output.shape}")
    grads: Dict[int, np.ndarray] = {output.tid: loss_grad}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output, None)
        if g is None:
            continue
        for tid, g_in in zip(entry.inputs, entry.vjp(g)):
            if g_in is None:
                continue
            grads[tid] = grads[tid] + g_in if tid in grads else g_in
    for tid, param in tape.params.items():
        g = grads.get(tid)
        if g is not None:
            param.grad += g


ScalarFunction = Callable[[Optional[Tape]], Tuple[float, Optional[Tensor], Optional[np.ndarray]]]


def _finite(value: float) -> float:
    value = float(value)
    if not np.isfinite(value):
        raise EvaluationError(f"function evaluated to a non-finite value {value}")
    return value


def finite_difference_check(
    f: ScalarFunction, params: Sequence[Param], h: float = 1e-3, floor: float = 1e-2
) -> float:
    """
    Compare analytic gradients with central finite differences.

    ``f(tape)`` evaluates the scalar objective; when given a tape it must also return the
    output tensor it recorded and the gradient of the objective with respect to that output
    (``None`` for both if the objective does not depend on the tape).

    Returns:
        float: max over all parameter elements of
        ``|analytic - central| / max(|analytic|, |central|, floor)``.
    """
    for p in params:
        p.zero_grad()
    tape = Tape()
    value, output, output_grad = f(tape)
    _finite(value)
    if output is not None and tape.entries:
        backward(tape, output_grad, output)
    worst = 0.0
    for p in params:
        analytic = p.grad.reshape(-1).copy()
        flat = p.value.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = _finite(f(None)[0])
            flat[i] = original - h
            f_minus = _finite(f(None)[0])
            flat[i] = original
            central = (f_plus - f_minus) / (2.0 * h)
            err = abs(analytic[i] - central) / max(abs(analytic[i]), abs(central), floor)
            worst = max(worst, err)
    logger.debug("finite-difference check over %d params: max relative error %.3e", len(params), worst)
    return worst


class MultiplyCounter:
    """Counts scalar multiplications performed by the reference executors."""

    def __init__(self):
        self.count = 0


def reference_fc(x: np.ndarray, w: np.ndarray, counter: Optional[MultiplyCounter] = None) -> np.ndarray:
    """Scalar-loop projection (homogeneous column when ``w`` is one wider than ``x``)."""
    batch, m = x.shape
    n, cols = w.shape
    out = np.zeros((batch, n))
    for s in range(batch):
        row = list(x[s]) + [1.0] * (cols - m)
        for i in range(n):
            acc = 0.0
            for k in range(cols):
                acc += w[i, k] * row[k]
                if counter is not None:
                    counter.count += 1
            out[s, i] = acc
    return out


def reference_conv2d(
    x: np.ndarray,
    w: np.ndarray,
    groups: int = 1,
    stride: int = 1,
    padding: Padding = "same",
    counter: Optional[MultiplyCounter] = None,
) -> np.ndarray:
    """Scalar-loop grouped convolution; every kernel tap, padded ones included, is one multiply."""
    batch, c_in, height, width = x.shape
    c_out, c_group, k_y, k_x = w.shape
    top, bottom, left, right = resolve_padding(padding, k_y, k_x)
    padded = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    out_h, out_w = conv_output_hw(height, width, k_y, k_x, stride, padding)
    o_group = c_out // groups
    out = np.zeros((batch, c_out, out_h, out_w))
    for s in range(batch):
        for o in range(c_out):
            base = (o // o_group) * c_group
            for i in range(out_h):
                for j in range(out_w):
                    acc = 0.0
                    for c in range(c_group):
                        for u in range(k_y):
                            for v in range(k_x):
                                acc += w[o, c, u, v] * padded[s, base + c, i * stride + u, j * stride + v]
                                if counter is not None:
                                    counter.count += 1
                    out[s, o, i, j] = acc
    return out
