"""
Search over per-layer route counts ``R_l = 2^i`` and filter counts ``F_l = F_orig / 2^i``,
ranked by size-normalized accuracy ``α = accuracy / parameter count``.
"""

import enum
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from condnets.autodiff import ActivationKind
from condnets.cost import CostReport, param_count, static_cost
from condnets.dataset import Dataset
from condnets.errors import ArgumentError, ConfigurationError, ValidationError
from condnets.graph import INPUT, ArchSpec, NodeKind, NodeSpec, RoutingPolicy, validate
from condnets.trainer import SplitSpec, TrainConfig, evaluate, train

logger = logging.getLogger(__name__)


class FamilyKind(str, enum.Enum):
    CONV = "conv"
    FC = "fc"


@dataclass(frozen=True)
class NetworkFamily:
    """
    A base network whose ``l``-th hidden layer can be split into ``R_l`` routes and narrowed
    to ``F_l`` filters (or units).

    ``conv``: ``R_l`` becomes the filter-group count of the ``l``-th convolution; the network
    ends in global max-pooling and a classifier. ``fc``: the input of the ``l``-th layer is
    split by selections into ``R_l`` contiguous blocks, each projected to ``F_l / R_l`` units,
    and the blocks are concatenated.
    """

    kind: FamilyKind
    input_shape: Tuple[int, ...]
    widths: Tuple[int, ...]
    classes: int
    kernel: int = 3
    pools: Tuple[bool, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", FamilyKind(self.kind))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "pools", tuple(bool(p) for p in self.pools))
        if self.pools and len(self.pools) != len(self.widths):
            raise ConfigurationError("pools and widths differ in length")

    @property
    def depth(self) -> int:
        return len(self.widths)

    def build(self, routes: Sequence[int], filters: Sequence[int]) -> ArchSpec:
        """
        Raises:
            ConfigurationError: the route counts do not divide the channel counts.
        """
        if len(routes) != self.depth or len(filters) != self.depth:
            raise ConfigurationError(f"need {self.depth} route and filter counts")
        if self.kind is FamilyKind.CONV:
            return self._build_conv(routes, filters)
        return self._build_fc(routes, filters)

    def _build_conv(self, routes: Sequence[int], filters: Sequence[int]) -> ArchSpec:
        nodes: List[NodeSpec] = []
        source = INPUT
        for n, (r, f) in enumerate(zip(routes, filters), start=1):
            pool = self.pools[n - 1] if self.pools else False
            nodes.append(
                NodeSpec(
                    id=f"conv{n}",
                    kind=NodeKind.CONV,
                    inputs=(source,),
                    out=f,
                    kernel=(self.kernel, self.kernel),
                    groups=r,
                    pool=2 if pool else 0,
                    act=ActivationKind.RELU,
                )
            )
            source = f"conv{n}"
        nodes.append(NodeSpec(id="gmp", kind=NodeKind.GLOBAL_MAX_POOL, inputs=(source,)))
        nodes.append(NodeSpec(id="classifier", kind=NodeKind.FC, inputs=("gmp",), out=self.classes))
        return validate(ArchSpec(self.input_shape, tuple(nodes), "classifier", tuple(routes)))

    def _build_fc(self, routes: Sequence[int], filters: Sequence[int]) -> ArchSpec:
        nodes: List[NodeSpec] = []
        source = INPUT
        width = int(np.prod(self.input_shape))
        if len(self.input_shape) != 1:
            nodes.append(NodeSpec(id="flatten", kind=NodeKind.FLATTEN, inputs=(INPUT,)))
            source = "flatten"
        for n, (r, f) in enumerate(zip(routes, filters), start=1):
            if width % r or f % r:
                raise ConfigurationError(f"layer {n}: {r} routes do not divide {width} inputs and {f} units")
            layer = f"layer{n}"
            if r == 1:
                nodes.append(
                    NodeSpec(id=layer, kind=NodeKind.FC, inputs=(source,), out=f, act=ActivationKind.RELU)
                )
            else:
                block = width // r
                parts = []
                for j in range(r):
                    nodes.append(
                        NodeSpec(
                            id=f"{layer}.select{j}",
                            kind=NodeKind.SELECTION,
                            inputs=(source,),
                            indices=tuple(range(j * block, (j + 1) * block)),
                            route_tag=(n, j),
                        )
                    )
                    nodes.append(
                        NodeSpec(
                            id=f"{layer}.route{j}",
                            kind=NodeKind.FC,
                            inputs=(f"{layer}.select{j}",),
                            out=f // r,
                            act=ActivationKind.RELU,
                            route_tag=(n, j),
                        )
                    )
                    parts.append(f"{layer}.route{j}")
                nodes.append(NodeSpec(id=layer, kind=NodeKind.CONCAT, inputs=tuple(parts)))
            source, width = layer, f
        nodes.append(NodeSpec(id="classifier", kind=NodeKind.FC, inputs=(source,), out=self.classes))
        return validate(ArchSpec(self.input_shape, tuple(nodes), "classifier", tuple(routes)))

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "kind": self.kind.value,
            "input_shape": list(self.input_shape),
            "widths": list(self.widths),
            "classes": self.classes,
            "kernel": self.kernel,
        }
        if self.pools:
            data["pools"] = list(self.pools)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "NetworkFamily":
        try:
            return cls(**dict(data))
        except TypeError as e:
            raise ValidationError(f"bad network family: {e}") from e


@dataclass(frozen=True)
class Configuration:
    routes: Tuple[int, ...]
    filters: Tuple[int, ...]


@dataclass
class SearchSpace:
    """
    Per-layer domains of route counts and filter counts over a :class:`NetworkFamily`.
    """

    family: NetworkFamily
    route_domains: Tuple[Tuple[int, ...], ...]
    filter_domains: Tuple[Tuple[int, ...], ...]

    def __post_init__(self):
        self.route_domains = tuple(tuple(int(r) for r in d) for d in self.route_domains)
        self.filter_domains = tuple(tuple(int(f) for f in d) for d in self.filter_domains)
        if len(self.route_domains) != self.family.depth or len(self.filter_domains) != self.family.depth:
            raise ConfigurationError(f"need one route and one filter domain per layer ({self.family.depth})")

    @classmethod
    def from_exponents(
        cls, family: NetworkFamily, route_exponents: Sequence[int], filter_exponents: Sequence[int]
    ) -> "SearchSpace":
        """
        ``R_l ∈ {2^i : 0 ≤ i ≤ route_exponents[l]}`` and
        ``F_l ∈ {F_orig / 2^i : 0 ≤ i ≤ filter_exponents[l]}`` (integral values only).
        """
        routes = tuple(tuple(2**i for i in range(e + 1)) for e in route_exponents)
        filters = tuple(
            tuple(w // 2**i for i in range(e + 1) if w % 2**i == 0)
            for w, e in zip(family.widths, filter_exponents)
        )
        return cls(family, routes, filters)

    def configurations(self) -> Iterator[Tuple[Configuration, ArchSpec]]:
        for routes in itertools.product(*self.route_domains):
            for filters in itertools.product(*self.filter_domains):
                try:
                    arch = self.family.build(routes, filters)
                except ConfigurationError as e:
                    logger.debug("skipping routes=%s filters=%s: %s", routes, filters, e)
                    continue
                yield Configuration(tuple(routes), tuple(filters)), arch

    def size(self) -> int:
        return sum(1 for _ in self.configurations())


def enumerate_space(space: SearchSpace) -> List[Tuple[Configuration, ArchSpec]]:
    """
    Every valid configuration of ``space`` in deterministic (row-major) order.

    Raises:
        ArgumentError: the space holds no valid configuration.
    """
    found = list(space.configurations())
    if not found:
        raise ArgumentError("search space has no valid configuration")
    return found


def alpha(accuracy: float, size: int) -> float:
    """Size-normalized accuracy ``accuracy / size``."""
    if size <= 0:
        raise ArgumentError(f"model size must be positive, got {size}")
    return accuracy / size


@dataclass
class SearchResult:
    config_id: int
    configuration: Configuration
    arch: ArchSpec
    accuracy: float
    params: int
    alpha: float
    cost: CostReport = field(repr=False, default=None)

    @property
    def macs(self) -> int:
        return self.cost.total_macs if self.cost is not None else 0

    def row(self) -> Dict[str, Any]:
        return {
            "config_id": self.config_id,
            "routes": list(self.configuration.routes),
            "filters": list(self.configuration.filters),
            "accuracy": self.accuracy,
            "params": self.params,
            "macs": self.macs,
            "alpha": self.alpha,
        }


SEARCH_LOG_COLUMNS = ("config_id", "routes", "filters", "accuracy", "params", "macs", "alpha")


class Driver:
    def select(self, count: int, budget: Optional[int]) -> List[int]:
        raise NotImplementedError


class ExhaustiveDriver(Driver):
    """Evaluates the whole space."""

    def select(self, count: int, budget: Optional[int]) -> List[int]:
        return list(range(count))


class RandomDriver(Driver):
    """Evaluates ``budget`` distinct configurations drawn with a seeded generator."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def select(self, count: int, budget: Optional[int]) -> List[int]:
        if budget is None or budget > count:
            if budget is not None:
                logger.warning("random search budget %d exceeds the %d configurations; clamping", budget, count)
            budget = count
        if budget < 1:
            raise ArgumentError(f"search budget must be positive, got {budget}")
        rng = np.random.default_rng(self.seed)
        return sorted(int(i) for i in rng.choice(count, size=budget, replace=False))


TrainEval = Callable[[ArchSpec], float]


def search(
    space: SearchSpace,
    train_eval: TrainEval,
    budget: Optional[int] = None,
    driver: Optional[Driver] = None,
    workers: int = 1,
) -> List[SearchResult]:
    """
    Train and score configurations of ``space``; results sorted by α, best first.

    Parameters:
        space (SearchSpace): the candidates.
        train_eval (callable): trains an architecture and returns its accuracy in [0, 1].
        budget (int, optional): configurations to evaluate with a random driver.
        driver (Driver, optional): :class:`ExhaustiveDriver` (default) or :class:`RandomDriver`.
        workers (int): concurrent evaluations.
    """
    driver = driver or ExhaustiveDriver()
    candidates = enumerate_space(space)
    chosen = driver.select(len(candidates), budget)

    def run(index: int) -> SearchResult:
        configuration, arch = candidates[index]
        accuracy = float(train_eval(arch))
        size = param_count(arch)
        result = SearchResult(index, configuration, arch, accuracy, size, alpha(accuracy, size), static_cost(arch))
        logger.info("config %d routes=%s filters=%s: accuracy %.4f, %d params, α=%.4g",
                    index, configuration.routes, configuration.filters, accuracy, size, result.alpha)
        return result

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chosen))
    else:
        results = [run(i) for i in chosen]
    return sorted(results, key=lambda r: (-r.alpha, r.config_id))


def make_train_eval(
    dataset: Dataset,
    splits: SplitSpec,
    cfg: TrainConfig,
    policy: Optional[RoutingPolicy] = None,
) -> TrainEval:
    """A ``train_eval`` that trains on the training split and scores the test split."""
    held_out = splits.test if len(splits.test) else splits.validation

    def train_eval(arch: ArchSpec) -> float:
        trained = train(arch, dataset, splits, cfg)
        return evaluate(arch, trained.params, dataset.images[held_out], dataset.labels[held_out], policy)

    return train_eval
