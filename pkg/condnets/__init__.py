from .version import VERSION, VERSION_SHORT
from .errors import (
    ArgumentError,
    CondNetError,
    ConfigurationError,
    DataError,
    EvaluationError,
    FormatError,
    ShapeError,
    StateError,
    TrainingDivergedError,
    UnsupportedModeError,
    ValidationError,
)
from .autodiff import ActivationKind, Param, Tape, Tensor, backward, finite_difference_check
from .graph import (
    ArchSpec,
    NodeKind,
    NodeSpec,
    RoutingPolicy,
    backward_routed,
    forward,
    run_inference,
    validate,
)
from .dense import equivalent_dense
from .config import dump_arch, load_arch, parse_arch, save_arch
from .cost import CostReport, CurvePoint, amortized_cost, mac_count_conv, mac_count_fc, static_cost
from .trainer import LossKind, TrainConfig, learning_rate, loss, train
from .dataset import Dataset, gen_synthetic, load_cifar10
from .search import NetworkFamily, SearchSpace, alpha, enumerate_space, search
from .ensemble import Ensemble, Expert, route_and_predict, sweep_curve
from .analysis import activation_correlation, reorder_block_diagonal, zero_off_diagonal
