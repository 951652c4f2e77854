"""
Mini-batch SGD training of any :class:`~condnets.graph.ArchSpec`.

Training always routes softly; truncating policies are for inference only.
"""

import enum
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Collection, Dict, List, Mapping, Optional, Tuple

import numpy as np

from condnets.autodiff import Param, Tensor
from condnets.dataset import Dataset
from condnets.errors import (
    ArgumentError,
    ConfigurationError,
    EvaluationError,
    ShapeError,
    TrainingDivergedError,
    ValidationError,
)
from condnets.graph import (
    ArchSpec,
    NodeKind,
    RoutingPolicy,
    analyze,
    backward_routed,
    forward,
    param_shapes,
    run_inference,
)

logger = logging.getLogger(__name__)


class LossKind(str, enum.Enum):
    SQUARED_ERROR = "squared_error"
    SOFTMAX_CROSS_ENTROPY = "softmax_cross_entropy"
    SIGMOID_CROSS_ENTROPY = "sigmoid_cross_entropy"


@dataclass
class TrainConfig:
    """
    Optimization settings.

    Attributes:
        lr0 (float): initial learning rate γ0.
        weight_decay (float): λ, used both as L2 decay and in the γ_t schedule.
        batch_size (int): samples per SGD step.
        max_epochs (int): upper bound on passes over the training split.
        plateau_window (int): iterations without a validation-accuracy gain before the learning
            rate is dropped.
        plateau_tolerance (float): smallest accuracy gain (fraction) that counts as a change.
        drop_factor (float): divisor applied at each schedule drop.
        max_drops (int): schedule drops before training stops at the next plateau.
        momentum (float): heavy-ball momentum.
        seed (int): seeds initialization, shuffling and augmentation.
        loss (LossKind): training loss.
        dtype (str): ``"float64"`` or ``"float32"``.
        mirror (bool): random horizontal flips of image inputs.
        crop (int): zero-pad width for random crops of image inputs (0 = off).
        early_stop (bool): stop at a plateau once every drop is used up.
    """

    lr0: float = 0.01
    weight_decay: float = 5e-4
    batch_size: int = 32
    max_epochs: int = 20
    plateau_window: int = 500
    plateau_tolerance: float = 0.001
    drop_factor: float = 10.0
    max_drops: int = 2
    momentum: float = 0.9
    seed: int = 0
    loss: LossKind = LossKind.SOFTMAX_CROSS_ENTROPY
    dtype: str = "float64"
    mirror: bool = False
    crop: int = 0
    early_stop: bool = True

    def __post_init__(self):
        try:
            self.loss = LossKind(self.loss)
        except ValueError as e:
            raise ConfigurationError(str(e)) from e
        if self.lr0 < 0:
            raise ConfigurationError(f"initial learning rate must be non-negative, got {self.lr0}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight decay must be non-negative, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be at least 1, got {self.batch_size}")
        if self.drop_factor <= 1:
            raise ConfigurationError(f"schedule drop factor must exceed 1, got {self.drop_factor}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.max_epochs < 0 or self.max_drops < 0 or self.plateau_window < 1 or self.crop < 0:
            raise ConfigurationError("epochs, drops and crop must be non-negative and the plateau window positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["loss"] = self.loss.value
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown training settings {sorted(unknown)}")
        return cls(**dict(data))


@dataclass
class SplitSpec:
    """Disjoint train / validation / test index sets covering a dataset."""

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.intp)
        self.validation = np.asarray(self.validation, dtype=np.intp)
        self.test = np.asarray(self.test, dtype=np.intp)

    def check(self, n: int) -> "SplitSpec":
        joined = np.concatenate([self.train, self.validation, self.test])
        if len(np.unique(joined)) != len(joined):
            raise ValidationError("train, validation and test splits overlap")
        if len(joined) != n or (n and (joined.min() < 0 or joined.max() >= n)):
            raise ValidationError(f"splits do not cover the {n} samples of the dataset")
        if len(self.train) == 0:
            raise ValidationError("training split is empty")
        return self


def make_splits(n: int, validation: int, test: int, seed: int = 0) -> SplitSpec:
    """Random disjoint splits; whatever is not validation or test is training data."""
    if validation < 0 or test < 0 or validation + test >= n:
        raise ArgumentError(f"cannot carve {validation} validation and {test} test samples out of {n}")
    order = np.random.default_rng(seed).permutation(n)
    return SplitSpec(
        train=np.sort(order[validation + test :]),
        validation=np.sort(order[:validation]),
        test=np.sort(order[validation : validation + test]),
    ).check(n)


def learning_rate(t: int, cfg: TrainConfig, drops: int = 0) -> float:
    """``γ_t = γ0 / (1 + γ0 λ t)``, divided by ``drop_factor`` once per schedule drop."""
    if t < 0:
        raise ArgumentError(f"iteration must be non-negative, got {t}")
    return cfg.lr0 / (1.0 + cfg.lr0 * cfg.weight_decay * t) / cfg.drop_factor**drops


def _as_targets(target: np.ndarray, like: np.ndarray) -> np.ndarray:
    target = np.asarray(target)
    if target.ndim == 1 and like.ndim == 2 and np.issubdtype(target.dtype, np.integer):
        if target.size and (target.min() < 0 or target.max() >= like.shape[1]):
            raise ShapeError(f"class ids out of range for {like.shape[1]} outputs")
        onehot = np.zeros(like.shape, dtype=like.dtype)
        onehot[np.arange(len(target)), target] = 1
        return onehot
    if target.shape != like.shape:
        raise ShapeError(f"prediction {like.shape} and target {target.shape} shapes differ")
    return target.astype(like.dtype, copy=False)


def loss(y, target, kind: LossKind = LossKind.SQUARED_ERROR) -> Tuple[float, np.ndarray]:
    """
    Batch-averaged loss and its gradient with respect to ``y``.

    ``SQUARED_ERROR`` is ``½‖y − y*‖²``; the cross-entropy kinds read ``y`` as logits.
    Targets are class ids or arrays shaped like ``y``.

    Raises:
        EvaluationError: ``y`` or the target holds NaN/Inf.
    """
    y = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    y2 = y if y.ndim == 2 else y.reshape(1, -1)
    target = np.asarray(target)
    if y.ndim == 1 and target.shape == y.shape:
        target = target.reshape(1, -1)
    t = _as_targets(target, y2)
    if not (np.all(np.isfinite(y2)) and np.all(np.isfinite(t))):
        raise EvaluationError("loss inputs contain NaN or Inf")
    n = y2.shape[0]
    kind = LossKind(kind)
    if kind is LossKind.SQUARED_ERROR:
        diff = y2 - t
        value = 0.5 * float(np.sum(diff * diff)) / n
        grad = diff / n
    elif kind is LossKind.SOFTMAX_CROSS_ENTROPY:
        shifted = y2 - y2.max(axis=1, keepdims=True)
        log_z = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
        log_p = shifted - log_z
        value = -float(np.sum(t * log_p)) / n
        grad = (np.exp(log_p) * t.sum(axis=1, keepdims=True) - t) / n
    else:
        value = float(np.sum(np.maximum(y2, 0) - y2 * t + np.log1p(np.exp(-np.abs(y2))))) / n
        z = np.exp(-np.abs(y2))
        prob = np.where(y2 >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
        grad = (prob - t) / n
    return value, grad.reshape(y.shape)


def init_params(arch: ArchSpec, seed: int = 0, dtype: str = "float64") -> Dict[str, Param]:
    """
    He initialization: every weight ~ N(0, sqrt(2 / fan_in)), bias columns zero.

    Nodes are initialized in topological order from one seeded generator, so equal seeds give
    bit-identical parameters.
    """
    rng = np.random.default_rng(seed)
    info = analyze(arch)
    shapes = param_shapes(arch)
    params: Dict[str, Param] = {}
    for node_id in info.order:
        if node_id not in shapes:
            continue
        node = arch.node(node_id)
        shape = shapes[node_id]
        has_bias = node.kind is NodeKind.ROUTER or (node.kind is NodeKind.FC and node.bias)
        fan_in = int(np.prod(shape[1:])) - int(has_bias)
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        if has_bias:
            w[:, -1] = 0
        params[node_id] = Param(node_id, w.astype(dtype))
    return params


def sgd_step(
    params: Mapping[str, Param],
    velocity: Dict[str, np.ndarray],
    lr: float,
    cfg: TrainConfig,
    frozen: Collection[str] = (),
):
    """One heavy-ball step with L2 weight decay: ``v ← μ v − γ (∇ + λ θ)``, ``θ ← θ + v``."""
    for name, param in params.items():
        if name in frozen:
            continue
        w = param.value.data
        step = param.grad + cfg.weight_decay * w
        v = velocity.get(name)
        v = -lr * step if v is None else cfg.momentum * v - lr * step
        velocity[name] = v
        w += v.astype(w.dtype, copy=False)


def augment(x: np.ndarray, rng: np.random.Generator, cfg: TrainConfig) -> np.ndarray:
    """Random horizontal mirroring and zero-padded random crops of an image batch."""
    if x.ndim != 4 or not (cfg.mirror or cfg.crop):
        return x
    out = x.copy()
    if cfg.mirror:
        flip = rng.random(len(x)) < 0.5
        out[flip] = out[flip][..., ::-1]
    if cfg.crop:
        pad = cfg.crop
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        offsets = rng.integers(0, 2 * pad + 1, size=(len(x), 2))
        h, w = x.shape[2:]
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    return out


def route_entropy(probabilities: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of per-sample route weights."""
    p = np.clip(probabilities, 1e-300, 1.0)
    return float(np.mean(-np.sum(probabilities * np.log(p), axis=1)))


def accuracy(outputs: np.ndarray, targets: np.ndarray, kind: LossKind = LossKind.SOFTMAX_CROSS_ENTROPY) -> float:
    """
    Fraction of correct predictions: argmax against class ids, or thresholded per-unit
    agreement for multi-label targets.
    """
    targets = np.asarray(targets)
    if len(targets) == 0:
        raise ArgumentError("accuracy over an empty set")
    if targets.ndim == 2:
        threshold = 0.0 if LossKind(kind) is LossKind.SIGMOID_CROSS_ENTROPY else 0.5
        return float(np.mean((outputs > threshold) == (targets > 0.5)))
    return float(np.mean(np.argmax(outputs, axis=1) == targets))


def evaluate(
    arch: ArchSpec,
    params: Mapping[str, Param],
    images: np.ndarray,
    targets: np.ndarray,
    policy: Optional[RoutingPolicy] = None,
    kind: LossKind = LossKind.SOFTMAX_CROSS_ENTROPY,
    batch_size: int = 256,
) -> float:
    """Accuracy of ``arch`` on ``images`` under ``policy`` (soft by default)."""
    result = run_inference(arch, params, images, policy, batch_size)
    return accuracy(result.outputs, targets, kind)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    lr: float
    router_entropy: Optional[float]
    drops: int


@dataclass
class TrainResult:
    params: Dict[str, Param]
    history: List[EpochRecord] = field(default_factory=list)
    iterations: int = 0
    drops: int = 0
    stopped_early: bool = False

    def history_rows(self) -> List[Dict[str, Any]]:
        return [asdict(record) for record in self.history]


def fit(
    arch: ArchSpec,
    images: np.ndarray,
    targets: np.ndarray,
    splits: SplitSpec,
    cfg: TrainConfig,
    params: Optional[Dict[str, Param]] = None,
    frozen: Collection[str] = (),
) -> TrainResult:
    """
    Train ``arch`` on ``images`` against ``targets`` (class ids or a samples × outputs array).

    Raises:
        TrainingDivergedError: the loss becomes NaN or infinite.
    """
    splits.check(len(images))
    info = analyze(arch)
    out_shape = info.shapes[arch.output]
    targets = np.asarray(targets)
    if targets.ndim == 2 and targets.shape[1:] != out_shape:
        raise ValidationError(f"targets {targets.shape[1:]} do not match the network output {out_shape}")
    if targets.ndim == 1 and len(out_shape) != 1:
        raise ValidationError(f"class targets need a vector output, network emits {out_shape}")
    if len(targets) != len(images):
        raise ValidationError(f"{len(images)} inputs but {len(targets)} targets")

    rng = np.random.default_rng(cfg.seed)
    params = params if params is not None else init_params(arch, cfg.seed, cfg.dtype)
    velocity: Dict[str, np.ndarray] = {}
    result = TrainResult(params=params)
    val_idx = splits.validation if len(splits.validation) else splits.train
    best_val, last_gain = -math.inf, 0
    t = 0
    lr = learning_rate(0, cfg)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(splits.train)
        losses, correct, seen, entropies = [], 0.0, 0, []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = augment(images[idx].astype(cfg.dtype, copy=False), rng, cfg)
            for p in params.values():
                p.zero_grad()
            out = forward(arch, params, x)
            lr = learning_rate(t, cfg, result.drops)
            try:
                value, grad = loss(out.output, targets[idx], cfg.loss)
            except EvaluationError as e:
                raise TrainingDivergedError(
                    f"loss diverged at epoch {epoch}, iteration {t} (learning rate {lr:.3g})"
                ) from e
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"loss diverged at epoch {epoch}, iteration {t} (learning rate {lr:.3g})"
                )
            backward_routed(out, grad)
            sgd_step(params, velocity, lr, cfg, frozen)
            t += 1
            losses.append(value * len(idx))
            correct += accuracy(out.output.data, targets[idx], cfg.loss) * len(idx)
            seen += len(idx)
            entropies.extend(route_entropy(r.probabilities) for r in out.routed.values())
            logger.debug("epoch %d iteration %d: loss %.6f", epoch, t, value)

        val_acc = evaluate(arch, params, images[val_idx], targets[val_idx], kind=cfg.loss)
        stop = False
        if val_acc > best_val + cfg.plateau_tolerance:
            best_val, last_gain = val_acc, t
        elif t - last_gain >= cfg.plateau_window:
            if result.drops < cfg.max_drops:
                result.drops += 1
                last_gain = t
                logger.info("validation accuracy plateaued at %.4f: learning rate divided by %g (drop %d)",
                            val_acc, cfg.drop_factor, result.drops)
            elif cfg.early_stop:
                stop = True
        record = EpochRecord(
            epoch=epoch,
            train_loss=sum(losses) / seen,
            train_acc=correct / seen,
            val_acc=val_acc,
            lr=lr,
            router_entropy=float(np.mean(entropies)) if entropies else None,
            drops=result.drops,
        )
        result.history.append(record)
        logger.info("epoch %d: loss %.5f, train acc %.4f, val acc %.4f, lr %.3g",
                    epoch, record.train_loss, record.train_acc, val_acc, lr)
        if stop:
            result.stopped_early = True
            logger.info("stopping after epoch %d: plateau persists after %d drops", epoch, result.drops)
            break
    result.iterations = t
    return result


def train(
    arch: ArchSpec,
    dataset: Dataset,
    splits: SplitSpec,
    cfg: TrainConfig,
    params: Optional[Dict[str, Param]] = None,
) -> TrainResult:
    """Train a classifier on ``dataset``; the network output size must equal the class count."""
    out_shape = analyze(arch).shapes[arch.output]
    if out_shape != (dataset.num_classes,):
        raise ValidationError(f"network emits {out_shape} but the dataset has {dataset.num_classes} classes")
    return fit(arch, dataset.images, dataset.labels, splits, cfg, params)
