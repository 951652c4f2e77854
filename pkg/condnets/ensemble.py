"""
Explicitly routed ensembles of frozen expert networks.

A router predicts, per image, whether each expert would classify it correctly. At inference
the cheapest expert always runs; more expensive experts are visited, in increasing cost
order, while the router's best predicted correctness among the visited experts stays below
the operating threshold θ. Visited posteriors are averaged with renormalized router scores.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import yaml

from condnets.autodiff import Param
from condnets.config import load_yaml
from condnets.cost import CurvePoint, classification_error, param_count, static_cost, visited_cost
from condnets.errors import ArgumentError, ConfigurationError, DataError, ValidationError
from condnets.graph import ArchSpec, analyze, forward, run_inference
from condnets.persistence import load_checkpoint
from condnets.trainer import LossKind, SplitSpec, TrainConfig, TrainResult, fit

logger = logging.getLogger(__name__)

OVERSAMPLE_VIEWS = 10
OVERSAMPLE_PAD = 2


def oversample_views(images: np.ndarray, pad: int = OVERSAMPLE_PAD) -> List[np.ndarray]:
    """
    Ten deterministic views of an image batch: five crops (center and four corners) of the
    zero-padded images, each also mirrored. The first view is the unmodified batch.
    """
    if images.ndim != 4:
        raise ConfigurationError("oversampling needs N × C × H × W images")
    h, w = images.shape[2:]
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offsets = [(pad, pad), (0, 0), (0, 2 * pad), (2 * pad, 0), (2 * pad, 2 * pad)]
    views = []
    for dy, dx in offsets:
        crop = padded[:, :, dy : dy + h, dx : dx + w]
        views.append(crop)
        views.append(crop[..., ::-1])
    return views


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class Expert:
    """
    A trained network used as one route of the ensemble.

    Attributes:
        name (str): label used in logs and CSV files.
        arch (ArchSpec): network emitting class logits.
        params (dict of str to Param): its frozen weights.
        oversample (int): 1, or 10 to average posteriors over :func:`oversample_views`.
    """

    name: str
    arch: ArchSpec
    params: Dict[str, Param]
    oversample: int = 1

    def __post_init__(self):
        if self.oversample not in (1, OVERSAMPLE_VIEWS):
            raise ConfigurationError(f"oversampling factor must be 1 or {OVERSAMPLE_VIEWS}, got {self.oversample}")
        if self.oversample > 1 and len(self.arch.input_shape) != 3:
            raise ConfigurationError(f"expert {self.name!r}: oversampling needs image inputs")

    @property
    def cost(self) -> int:
        """Per-image MACs, oversampling included."""
        return static_cost(self.arch).total_macs * self.oversample

    @property
    def size(self) -> int:
        return param_count(self.arch)

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Class posteriors, averaged over the views when oversampling."""
        views = oversample_views(images) if self.oversample > 1 else [images]
        total = None
        for view in views:
            posterior = softmax_rows(run_inference(self.arch, self.params, view, batch_size=batch_size).outputs)
            total = posterior if total is None else total + posterior
        return total / len(views)


@dataclass
class Ensemble:
    """
    Experts sorted by cost and a router emitting one correctness logit per expert.

    With ``shared_prefix`` the router reads the activations of that node of the cheapest
    expert instead of the image, and its cost excludes the shared computation.
    """

    experts: List[Expert]
    router_arch: ArchSpec
    router_params: Dict[str, Param]
    shared_prefix: Optional[str] = None

    def __post_init__(self):
        if len(self.experts) < 2:
            raise ConfigurationError("an ensemble needs at least 2 experts")
        self.experts = sorted(self.experts, key=lambda e: e.cost)
        out = analyze(self.router_arch).shapes[self.router_arch.output]
        if out != (len(self.experts),):
            raise ValidationError(f"router emits {out} but the ensemble has {len(self.experts)} experts")
        if self.shared_prefix is not None:
            cheap = self.experts[0]
            shapes = analyze(cheap.arch).shapes
            if self.shared_prefix not in shapes:
                raise ValidationError(f"expert {cheap.name!r} has no node {self.shared_prefix!r}")
            if tuple(shapes[self.shared_prefix]) != tuple(self.router_arch.input_shape):
                raise ValidationError(
                    f"router input {self.router_arch.input_shape} does not match {self.shared_prefix!r} "
                    f"output {shapes[self.shared_prefix]}"
                )

    @property
    def routes(self) -> int:
        return len(self.experts)

    @property
    def expert_costs(self) -> List[int]:
        return [e.cost for e in self.experts]

    @property
    def router_cost(self) -> int:
        return static_cost(self.router_arch).total_macs

    @property
    def size(self) -> int:
        return sum(e.size for e in self.experts) + param_count(self.router_arch)

    def router_inputs(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        if self.shared_prefix is None:
            return images
        cheap = self.experts[0]
        parts = []
        for start in range(0, len(images), batch_size):
            result = forward(cheap.arch, cheap.params, images[start : start + batch_size], record_grads=False)
            parts.append(result.activations[self.shared_prefix].data)
        return np.concatenate(parts)

    def router_scores(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Predicted per-expert correctness probabilities, samples × R."""
        logits = run_inference(self.router_arch, self.router_params, self.router_inputs(images, batch_size),
                               batch_size=batch_size).outputs
        z = np.exp(-np.abs(logits))
        return np.where(logits >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def correctness_labels(posteriors: Sequence[np.ndarray], labels: np.ndarray) -> np.ndarray:
    """
    samples × R matrix of 0/1 correctness of every expert on every sample.

    Raises:
        DataError: an expert produced no (or non-finite) output for some sample.
    """
    labels = np.asarray(labels)
    columns = []
    for j, posterior in enumerate(posteriors):
        if posterior is None or len(posterior) != len(labels) or not np.all(np.isfinite(posterior)):
            raise DataError(f"expert {j} outputs are missing for some images")
        columns.append(np.argmax(posterior, axis=1) == labels)
    return np.stack(columns, axis=1).astype(np.float64)


def train_router(
    ensemble: Ensemble,
    images: np.ndarray,
    labels: np.ndarray,
    splits: SplitSpec,
    cfg: TrainConfig,
    posteriors: Optional[Sequence[np.ndarray]] = None,
) -> TrainResult:
    """
    Train the router against per-expert correctness with a per-route logistic loss.

    Expert weights are never touched; the router's parameters are updated in place.
    """
    if posteriors is None:
        posteriors = [expert.predict(images) for expert in ensemble.experts]
    targets = correctness_labels(posteriors, labels)
    logger.info("expert accuracies on router training data: %s",
                ", ".join(f"{e.name}={targets[:, j].mean():.4f}" for j, e in enumerate(ensemble.experts)))
    if cfg.loss is not LossKind.SIGMOID_CROSS_ENTROPY:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "loss": LossKind.SIGMOID_CROSS_ENTROPY})
    inputs = ensemble.router_inputs(images)
    return fit(ensemble.router_arch, inputs, targets, splits, cfg, params=ensemble.router_params)


@dataclass
class RoutedPrediction:
    posterior: np.ndarray
    visited: np.ndarray
    weights: np.ndarray
    costs: np.ndarray
    theta: float

    @property
    def amortized_cost(self) -> float:
        return float(self.costs.mean())


@dataclass
class EnsembleOutputs:
    """Expert posteriors and router scores over one dataset, computed once for a sweep."""

    posteriors: List[np.ndarray]
    scores: np.ndarray

    @classmethod
    def compute(cls, ensemble: Ensemble, images: np.ndarray) -> "EnsembleOutputs":
        return cls([expert.predict(images) for expert in ensemble.experts], ensemble.router_scores(images))


def route_and_predict(
    ensemble: Ensemble,
    images: Optional[np.ndarray],
    theta: float,
    outputs: Optional[EnsembleOutputs] = None,
) -> RoutedPrediction:
    """
    Route every image through the ensemble at operating threshold ``theta``.

    ``theta ≤ 0`` runs the cheapest expert alone, without the router. ``theta ≥ 1`` visits
    every expert. In between, expert ``j`` is added while the highest router score among the
    experts visited so far is below ``theta``. Realized cost per image is the router cost
    (when consulted) plus the cost of every visited expert.
    """
    if outputs is None:
        if images is None:
            raise ArgumentError("route_and_predict needs images or precomputed outputs")
        outputs = EnsembleOutputs.compute(ensemble, images)
    scores = outputs.scores
    n, routes = scores.shape
    visited = np.zeros((n, routes), dtype=bool)
    visited[:, 0] = True
    if theta <= 0:
        weights = visited.astype(np.float64)
        fixed = 0
    else:
        for j in range(1, routes):
            confident = np.max(np.where(visited, scores, -np.inf), axis=1)
            visited[:, j] = True if theta >= 1 else confident < theta
        raw = np.where(visited, scores, 0.0)
        total = raw.sum(axis=1, keepdims=True)
        uniform = visited / visited.sum(axis=1, keepdims=True)
        weights = np.divide(raw, total, out=uniform.astype(np.float64), where=total > 0)
        fixed = ensemble.router_cost
    posterior = np.zeros_like(outputs.posteriors[0])
    for j, expert_posterior in enumerate(outputs.posteriors):
        posterior += weights[:, j : j + 1] * expert_posterior
    costs = fixed + visited.astype(np.int64) @ np.asarray(ensemble.expert_costs, dtype=np.int64)
    return RoutedPrediction(posterior, visited, weights, costs, float(theta))


def sweep_curve(
    ensemble: Ensemble,
    images: np.ndarray,
    labels: np.ndarray,
    thetas: Sequence[float],
    outputs: Optional[EnsembleOutputs] = None,
) -> List[CurvePoint]:
    """
    Amortized (error, cost) of the ensemble for every θ in ``thetas``, in grid order.

    Raises:
        ArgumentError: ``thetas`` is empty.
    """
    if not len(thetas):
        raise ArgumentError("θ sweep needs at least one operating point")
    outputs = outputs or EnsembleOutputs.compute(ensemble, images)
    points = []
    for theta in thetas:
        routed = route_and_predict(ensemble, None, theta, outputs)
        fixed = 0 if theta <= 0 else ensemble.router_cost
        cost = visited_cost(ensemble.expert_costs, routed.visited, fixed)
        error = classification_error(routed.posterior, labels)
        points.append(CurvePoint(error, cost, ensemble.size, float(theta)))
        logger.info("θ=%.3f: error %.4f, %.1f MACs/image, route usage %s",
                    theta, error, cost, np.round(routed.visited.mean(axis=0), 3).tolist())
    return points


def expert_point(expert: Expert, images: np.ndarray, labels: np.ndarray) -> CurvePoint:
    return CurvePoint(classification_error(expert.predict(images), labels), float(expert.cost), expert.size)


def baseline_curve(a: CurvePoint, b: CurvePoint, ps: Sequence[float]) -> List[CurvePoint]:
    """
    Random mixing of two networks: with probability ``p`` use ``b``, otherwise ``a``.
    Every point lies on the segment between ``a`` (p = 0) and ``b`` (p = 1).
    """
    points = []
    for p in ps:
        if not 0.0 <= p <= 1.0:
            raise ArgumentError(f"mixing probability must lie in [0, 1], got {p}")
        points.append(
            CurvePoint(
                error=(1 - p) * a.error + p * b.error,
                expected_cost=(1 - p) * a.expected_cost + p * b.expected_cost,
                model_size=a.model_size + b.model_size,
                setting=float(p),
            )
        )
    return points


def baseline_error_at(a: CurvePoint, b: CurvePoint, cost: float) -> float:
    """Error of the random-mixing baseline at average cost ``cost`` (clamped to the segment)."""
    if b.expected_cost == a.expected_cost:
        return min(a.error, b.error)
    p = (cost - a.expected_cost) / (b.expected_cost - a.expected_cost)
    p = min(max(p, 0.0), 1.0)
    return (1 - p) * a.error + p * b.error


PathLike = Union[str, Path]


def load_ensemble(path: PathLike) -> Ensemble:
    """
    Read an ensemble spec: experts referencing checkpoints, the router checkpoint and an
    optional shared prefix. Relative paths resolve against the ensemble file.
    """
    path = Path(path)
    data: Mapping[str, Any] = load_yaml(path)
    base = path.parent
    try:
        expert_entries = data["experts"]
        router_entry = data["router"]
    except KeyError as e:
        raise ValidationError(f"ensemble spec {path} is missing {e}") from e
    experts = []
    for entry in expert_entries:
        ckpt = load_checkpoint(base / entry["checkpoint"])
        experts.append(Expert(entry.get("name", entry["checkpoint"]), ckpt.arch, ckpt.params,
                              int(entry.get("oversample", 1))))
    router = load_checkpoint(base / router_entry["checkpoint"])
    return Ensemble(experts, router.arch, router.params, data.get("shared_prefix"))


@dataclass
class EnsembleSpec:
    experts: List[Dict[str, Any]] = field(default_factory=list)
    router: Dict[str, Any] = field(default_factory=dict)
    shared_prefix: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"experts": self.experts, "router": self.router}
        if self.shared_prefix is not None:
            data["shared_prefix"] = self.shared_prefix
        return data

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)
