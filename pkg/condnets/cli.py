"""
The ``condnets`` command line.

Every command writes its outputs plus a ``manifest.json`` (a :class:`RunManifest`) into
``--out``. Errors raised by the library exit with status 1 and a one-line diagnostic;
usage errors exit with status 2.
"""

import logging
import os
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click
import numpy as np
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from condnets.analysis import (
    BLOCK_ORDER_COLUMNS,
    CORRELATION_COLUMNS,
    activation_correlation,
    structure_from_correlation,
)
from condnets.architectures import ensemble_router
from condnets.config import load_arch, load_yaml, save_arch
from condnets.cost import CurvePoint, amortized_cost, layer_breakdown, static_cost, tau_curve
from condnets.dataset import DATA_DIR_ENV, SYNTHETIC_KINDS, Dataset, gen_synthetic, load_cifar10
from condnets.ensemble import (
    Ensemble,
    EnsembleOutputs,
    EnsembleSpec,
    Expert,
    baseline_curve,
    expert_point,
    load_ensemble,
    sweep_curve,
    train_router,
)
from condnets.errors import CondNetError, ValidationError
from condnets.graph import ArchSpec, RoutingPolicy, analyze, run_inference
from condnets.persistence import (
    Checkpoint,
    RunManifest,
    load_checkpoint,
    save_checkpoint,
    write_csv,
    write_json,
    write_tensor,
)
from condnets.search import (
    SEARCH_LOG_COLUMNS,
    ExhaustiveDriver,
    NetworkFamily,
    RandomDriver,
    SearchSpace,
    make_train_eval,
    search,
)
from condnets.trainer import SplitSpec, TrainConfig, accuracy, init_params, make_splits, train
from condnets.util import parse_float_list, parse_int_list

logger = logging.getLogger(__name__)

console = Console(stderr=True)

DEFAULT_CIFAR_LIMIT = 7000
CURVE_COLUMNS = ("setting", "error", "expected_cost", "model_size")
HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "val_acc", "lr", "router_entropy", "drops")
COST_COLUMNS = ("node_id", "kind", "macs", "params")
LAYER_COLUMNS = ("layer", "macs", "normalized")


class CondNetsGroup(click.Group):
    """Reports library errors as a one-line diagnostic with exit status 1."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except CondNetError as e:
            logger.debug("command failed", exc_info=True)
            raise click.ClickException(f"{type(e).__name__}: {e}") from e


@click.group(cls=CondNetsGroup, context_settings={"max_content_width": 115})
@click.option("-v", "--verbose", is_flag=True, default=False, help="Log at DEBUG level.")
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True,
              help="Worker threads; 1 is the serial reference mode.")
@click.pass_context
def main(ctx: click.Context, verbose: bool, threads: int):
    """Train, route, cost and analyze conditional networks."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True, show_path=verbose)],
        force=True,
    )
    ctx.obj = {"threads": threads}


def data_options(f):
    f = click.option("--data", type=click.Path(exists=True, path_type=Path), envvar=DATA_DIR_ENV,
                     help=f"CIFAR-10 batch file or directory (default: ${DATA_DIR_ENV}).")(f)
    f = click.option("--synthetic", type=click.Choice(SYNTHETIC_KINDS),
                     help="Generate a synthetic dataset instead of reading CIFAR-10.")(f)
    f = click.option("--samples", type=click.IntRange(min=2), default=1000, show_default=True,
                     help="Synthetic dataset size.")(f)
    f = click.option("--limit", type=click.IntRange(min=1), default=None,
                     help=f"CIFAR-10 records to read [default: {DEFAULT_CIFAR_LIMIT}].")(f)
    f = click.option("--validation", type=click.IntRange(min=0), default=None,
                     help="Validation samples [default: one seventh of the data].")(f)
    f = click.option("--test", "test_size", type=click.IntRange(min=0), default=None,
                     help="Test samples [default: one seventh of the data].")(f)
    return f


def out_option(f):
    return click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True,
                        help="Output directory.")(f)


def seed_option(f):
    return click.option("--seed", type=int, default=0, show_default=True,
                        help="The single source of randomness.")(f)


def load_dataset(data: Optional[Path], synthetic: Optional[str], samples: int, limit: Optional[int],
                 seed: int) -> Dataset:
    if synthetic:
        return gen_synthetic(synthetic, samples, seed)
    if data is None:
        raise click.UsageError(f"give --data, set ${DATA_DIR_ENV}, or use --synthetic")
    return load_cifar10(data, limit or DEFAULT_CIFAR_LIMIT)


def dataset_splits(dataset: Dataset, validation: Optional[int], test: Optional[int], seed: int) -> SplitSpec:
    share = len(dataset) // 7
    return make_splits(
        len(dataset),
        share if validation is None else validation,
        share if test is None else test,
        seed,
    )


def held_out(splits: SplitSpec) -> np.ndarray:
    if len(splits.test):
        return splits.test
    return splits.validation if len(splits.validation) else splits.train


def load_config(path: Optional[Path], seed: int, **overrides) -> TrainConfig:
    data: Dict[str, Any] = load_yaml(path) if path else {}
    data["seed"] = seed
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(data)


def prepare_out(out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    return out


def finish(ctx: click.Context, out: Path, seed: int, outputs: Dict[str, Any], **extra):
    arguments = dict(ctx.params)
    arguments.update(extra)
    manifest = RunManifest.create(ctx.command_path, arguments, seed, outputs)
    manifest.write(out)
    logger.info("wrote %s to %s", ", ".join(sorted(outputs)), out)


def curve_rows(points: Sequence[CurvePoint]) -> List[Dict[str, Any]]:
    return [
        {"setting": p.setting, "error": p.error, "expected_cost": p.expected_cost, "model_size": p.model_size}
        for p in points
    ]


def print_curve(title: str, points: Sequence[CurvePoint]):
    table = Table(title=title)
    for column in CURVE_COLUMNS:
        table.add_column(column, justify="right")
    for p in points:
        table.add_row(f"{p.setting:g}" if p.setting is not None else "", f"{p.error:.4f}",
                      f"{p.expected_cost:.1f}", str(p.model_size))
    console.print(table)


def checkpoint_arch(ckpt: Checkpoint, arch_path: Optional[Path]) -> ArchSpec:
    if arch_path is None:
        return ckpt.arch
    arch = load_arch(arch_path)
    if arch != ckpt.arch:
        raise ValidationError(f"{arch_path} does not describe the checkpointed network")
    return arch


@main.command(name="train")
@click.option("--arch", "arch_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="TrainConfig YAML.")
@click.option("--epochs", type=click.IntRange(min=0), default=None, help="Override max_epochs.")
@click.option("--lr", type=float, default=None, help="Override lr0.")
@data_options
@seed_option
@out_option
@click.pass_context
def train_cmd(ctx, arch_path, config_path, epochs, lr, data, synthetic, samples, limit, validation, test_size,
              seed, out):
    """Train a network and checkpoint it."""
    arch = load_arch(arch_path)
    cfg = load_config(config_path, seed, max_epochs=epochs, lr0=lr)
    dataset = load_dataset(data, synthetic, samples, limit, seed).astype(cfg.dtype)
    splits = dataset_splits(dataset, validation, test_size, seed)
    result = train(arch, dataset, splits, cfg)
    out = prepare_out(out)
    test_idx = held_out(splits)
    inference = run_inference(arch, result.params, dataset.images[test_idx])
    metrics = {
        "test_accuracy": accuracy(inference.outputs, dataset.labels[test_idx]),
        "iterations": result.iterations,
        "drops": result.drops,
        "stopped_early": result.stopped_early,
        "provenance": dataset.provenance,
    }
    save_checkpoint(out / "checkpoint", Checkpoint(arch, result.params, cfg.to_dict(), result.iterations))
    write_csv(out / "history.csv", result.history_rows(), HISTORY_COLUMNS)
    write_json(out / "metrics.json", metrics)
    console.print(f"test accuracy {metrics['test_accuracy']:.4f} after {result.iterations} iterations")
    finish(ctx, out, seed, {"checkpoint": out / "checkpoint", "history": out / "history.csv",
                            "metrics": out / "metrics.json"}, config=cfg.to_dict())


@main.command(name="eval")
@click.option("--ckpt", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--arch", "arch_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--policy", default="soft", show_default=True, help="soft, hard or tau:N.")
@data_options
@seed_option
@out_option
@click.pass_context
def eval_cmd(ctx, ckpt, arch_path, policy, data, synthetic, samples, limit, validation, test_size, seed, out):
    """Accuracy and amortized cost of a checkpoint under a routing policy."""
    checkpoint = load_checkpoint(ckpt)
    arch = checkpoint_arch(checkpoint, arch_path)
    routing = RoutingPolicy.parse(policy)
    dataset = load_dataset(data, synthetic, samples, limit, seed)
    splits = dataset_splits(dataset, validation, test_size, seed)
    idx = held_out(splits)
    result = run_inference(arch, checkpoint.params, dataset.images[idx], routing)
    metrics = {
        "policy": str(routing),
        "accuracy": accuracy(result.outputs, dataset.labels[idx]),
        "amortized_macs": result.amortized_macs,
        "static_macs": static_cost(arch).total_macs,
        "samples": result.samples,
        "route_usage": {k: (v / result.samples).tolist() for k, v in result.route_visits.items()},
    }
    out = prepare_out(out)
    write_json(out / "metrics.json", metrics)
    console.print(f"{routing}: accuracy {metrics['accuracy']:.4f}, {metrics['amortized_macs']:.1f} MACs/sample")
    finish(ctx, out, seed, {"metrics": out / "metrics.json"})


@main.command(name="sweep-tau")
@click.option("--ckpt", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--arch", "arch_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--taus", required=True, help='Route counts, e.g. "1..4".')
@data_options
@seed_option
@out_option
@click.pass_context
def sweep_tau_cmd(ctx, ckpt, arch_path, taus, data, synthetic, samples, limit, validation, test_size, seed, out):
    """Error against amortized cost for each top-τ operating point."""
    checkpoint = load_checkpoint(ckpt)
    arch = checkpoint_arch(checkpoint, arch_path)
    dataset = load_dataset(data, synthetic, samples, limit, seed)
    idx = held_out(dataset_splits(dataset, validation, test_size, seed))
    points = tau_curve(arch, checkpoint.params, dataset.images[idx], dataset.labels[idx], parse_int_list(taus))
    out = prepare_out(out)
    write_csv(out / "tau_curve.csv", curve_rows(points), CURVE_COLUMNS)
    print_curve("τ sweep", points)
    finish(ctx, out, seed, {"curve": out / "tau_curve.csv"})


@main.command(name="cost")
@click.option("--arch", "arch_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--ckpt", type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="With data, also measure the amortized cost under --policy.")
@click.option("--policy", default="soft", show_default=True)
@data_options
@seed_option
@out_option
@click.pass_context
def cost_cmd(ctx, arch_path, ckpt, policy, data, synthetic, samples, limit, validation, test_size, seed, out):
    """Per-node MACs and parameter counts."""
    if arch_path is None and ckpt is None:
        raise click.UsageError("give --arch or --ckpt")
    checkpoint = load_checkpoint(ckpt) if ckpt else None
    arch = checkpoint_arch(checkpoint, arch_path) if checkpoint else load_arch(arch_path)
    if checkpoint and (synthetic or data):
        dataset = load_dataset(data, synthetic, samples, limit, seed)
        idx = held_out(dataset_splits(dataset, validation, test_size, seed))
        report = amortized_cost(arch, checkpoint.params, dataset.images[idx], RoutingPolicy.parse(policy))
    else:
        report = static_cost(arch)
    out = prepare_out(out)
    write_csv(out / "cost.csv", report.rows(), COST_COLUMNS)
    write_csv(out / "layers.csv", [asdict(layer) for layer in layer_breakdown(arch)], LAYER_COLUMNS)
    write_json(out / "cost.json", report.summary())
    console.print(f"{report.total_macs} MACs, {report.total_params} parameters")
    finish(ctx, out, seed, {"cost": out / "cost.csv", "layers": out / "layers.csv", "summary": out / "cost.json"})


@main.command(name="search")
@click.option("--family", "family_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              required=True, help="YAML with family, route_exponents and filter_exponents.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--driver", type=click.Choice(["exhaustive", "random"]), default="exhaustive", show_default=True)
@click.option("--budget", type=click.IntRange(min=1), default=None, help="Configurations for --driver random.")
@data_options
@seed_option
@out_option
@click.pass_context
def search_cmd(ctx, family_path, config_path, driver, budget, data, synthetic, samples, limit, validation,
               test_size, seed, out):
    """Rank route and filter configurations by size-normalized accuracy."""
    spec = load_yaml(family_path)
    family = NetworkFamily.from_dict(spec["family"])
    space = SearchSpace.from_exponents(family, spec["route_exponents"], spec["filter_exponents"])
    cfg = load_config(config_path, seed)
    dataset = load_dataset(data, synthetic, samples, limit, seed).astype(cfg.dtype)
    splits = dataset_splits(dataset, validation, test_size, seed)
    chosen = RandomDriver(seed) if driver == "random" else ExhaustiveDriver()
    results = search(space, make_train_eval(dataset, splits, cfg), budget, chosen, ctx.obj["threads"])
    out = prepare_out(out)
    write_csv(out / "search_log.csv", [r.row() for r in results], SEARCH_LOG_COLUMNS)
    save_arch(results[0].arch, out / "best_arch.yaml")
    best = results[0]
    console.print(f"best: routes={list(best.configuration.routes)} filters={list(best.configuration.filters)} "
                  f"accuracy {best.accuracy:.4f}, {best.params} parameters, α={best.alpha:.4g}")
    finish(ctx, out, seed, {"log": out / "search_log.csv", "best": out / "best_arch.yaml"}, config=cfg.to_dict())


@main.command(name="ensemble-train")
@click.option("--expert", "experts", type=click.Path(exists=True, file_okay=False, path_type=Path),
              multiple=True, required=True, help="Expert checkpoint directory; repeat per expert.")
@click.option("--oversample", type=click.Choice(["1", "10"]), multiple=True,
              help="Views per expert, in --expert order (default 1).")
@click.option("--hidden", default="", help='Router hidden layer widths, e.g. "32,16".')
@click.option("--shared-prefix", default=None, help="Node of the cheapest expert the router reads.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@data_options
@seed_option
@out_option
@click.pass_context
def ensemble_train_cmd(ctx, experts, oversample, hidden, shared_prefix, config_path, data, synthetic, samples,
                       limit, validation, test_size, seed, out):
    """Train a router predicting which experts classify each image correctly."""
    if oversample and len(oversample) != len(experts):
        raise click.UsageError("give --oversample once per --expert or not at all")
    views = [int(v) for v in oversample] or [1] * len(experts)
    members = []
    for path, n_views in zip(experts, views):
        ckpt = load_checkpoint(path)
        name = path.resolve().parent.name if path.name == "checkpoint" else path.name
        members.append(Expert(name, ckpt.arch, ckpt.params, n_views))
    cheapest = min(members, key=lambda e: e.cost)
    if shared_prefix:
        shapes = analyze(cheapest.arch).shapes
        if shared_prefix not in shapes:
            raise click.UsageError(f"expert {cheapest.name!r} has no node {shared_prefix!r}")
        router_shape = shapes[shared_prefix]
    else:
        router_shape = cheapest.arch.input_shape
    widths = tuple(parse_int_list(hidden)) if hidden.strip() else ()
    router_arch = ensemble_router(router_shape, len(members), widths)
    cfg = load_config(config_path, seed)
    ensemble = Ensemble(members, router_arch, init_params(router_arch, seed, cfg.dtype), shared_prefix)
    dataset = load_dataset(data, synthetic, samples, limit, seed).astype(cfg.dtype)
    splits = dataset_splits(dataset, validation, test_size, seed)
    result = train_router(ensemble, dataset.images, dataset.labels, splits, cfg)

    out = prepare_out(out)
    router = Checkpoint(router_arch, ensemble.router_params, cfg.to_dict(), result.iterations)
    save_checkpoint(out / "router", router)
    names = {id(m): p for m, p in zip(members, experts)}
    spec = EnsembleSpec(
        experts=[
            {"name": e.name, "checkpoint": os.path.relpath(names[id(e)].resolve(), out.resolve()),
             "oversample": e.oversample}
            for e in ensemble.experts
        ],
        router={"checkpoint": "router"},
        shared_prefix=shared_prefix,
    )
    (out / "ensemble.yaml").write_text(spec.dump())
    write_csv(out / "history.csv", result.history_rows(), HISTORY_COLUMNS)
    finish(ctx, out, seed, {"ensemble": out / "ensemble.yaml", "router": out / "router",
                            "history": out / "history.csv"}, config=cfg.to_dict())


@main.command(name="ensemble-sweep")
@click.option("--ensemble", "ensemble_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              required=True)
@click.option("--thetas", default="0:1:11", show_default=True, help='Thresholds, "a,b,c" or "start:stop:count".')
@data_options
@seed_option
@out_option
@click.pass_context
def ensemble_sweep_cmd(ctx, ensemble_path, thetas, data, synthetic, samples, limit, validation, test_size,
                       seed, out):
    """Error against amortized cost of a routed ensemble, with expert and random-mixing baselines."""
    ensemble = load_ensemble(ensemble_path)
    dataset = load_dataset(data, synthetic, samples, limit, seed)
    idx = held_out(dataset_splits(dataset, validation, test_size, seed))
    images, labels = dataset.images[idx], dataset.labels[idx]
    grid = parse_float_list(thetas)
    outputs = EnsembleOutputs.compute(ensemble, images)
    points = sweep_curve(ensemble, images, labels, grid, outputs)
    experts = [expert_point(e, images, labels) for e in ensemble.experts]
    mixing = [min(max(t, 0.0), 1.0) for t in grid]
    baseline = baseline_curve(experts[0], experts[-1], mixing)
    out = prepare_out(out)
    write_csv(out / "curve.csv", curve_rows(points), CURVE_COLUMNS)
    write_csv(out / "baseline.csv", curve_rows(baseline), CURVE_COLUMNS)
    write_csv(
        out / "experts.csv",
        [{"name": e.name, **row} for e, row in zip(ensemble.experts, curve_rows(experts))],
        ("name",) + CURVE_COLUMNS,
    )
    print_curve("ensemble θ sweep", points)
    finish(ctx, out, seed, {"curve": out / "curve.csv", "baseline": out / "baseline.csv",
                            "experts": out / "experts.csv"})


@main.command(name="analyze")
@click.option("--ckpt", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--layer-i", required=True, help="Node id of the earlier layer.")
@click.option("--layer-j", required=True, help="Node id of the later layer.")
@click.option("--blocks", type=click.IntRange(min=1), default=3, show_default=True, help="Block count k.")
@data_options
@seed_option
@out_option
@click.pass_context
def analyze_cmd(ctx, ckpt, layer_i, layer_j, blocks, data, synthetic, samples, limit, validation, test_size,
                seed, out):
    """Correlate two layers, reorder the matrix into blocks and derive the routed layer."""
    checkpoint = load_checkpoint(ckpt)
    dataset = load_dataset(data, synthetic, samples, limit, seed)
    splits = dataset_splits(dataset, validation, test_size, seed)
    correlation = activation_correlation(checkpoint.arch, checkpoint.params, dataset.images[splits.train],
                                         layer_i, layer_j)
    order, zeroed, routed = structure_from_correlation(correlation, blocks)
    out = prepare_out(out)
    outputs: Dict[str, Any] = {
        "correlation": out / "correlation.tensor",
        "correlation_csv": out / "correlation.csv",
        "blocks": out / "blocks.csv",
        "zeroed": out / "zeroed.tensor",
        "summary": out / "summary.json",
    }
    write_tensor(outputs["correlation"], correlation.matrix)
    write_csv(outputs["correlation_csv"], correlation.rows(), CORRELATION_COLUMNS)
    write_csv(outputs["blocks"], order.rows(), BLOCK_ORDER_COLUMNS)
    write_tensor(outputs["zeroed"], zeroed.matrix)
    write_json(outputs["summary"], {
        "layer_i": layer_i,
        "layer_j": layer_j,
        "samples": correlation.samples,
        "blocks": blocks,
        "retained_mass": zeroed.retained,
        "selections": [{"inputs": list(rows), "outputs": list(cols)} for rows, cols in zeroed.selections],
    })
    if routed is not None:
        save_arch(routed, out / "routed_layer.yaml")
        outputs["routed_layer"] = out / "routed_layer.yaml"
    console.print(f"{blocks} blocks retain {100 * zeroed.retained:.1f}% of the correlation mass")
    finish(ctx, out, seed, outputs)


if __name__ == "__main__":
    main()
