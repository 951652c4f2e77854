import numpy as np
import pytest

from condnets.architectures import ensemble_router, expert_mlp
from condnets.autodiff import Param
from condnets.cost import CurvePoint
from condnets.dataset import gen_synthetic
from condnets.ensemble import (
    Ensemble,
    EnsembleOutputs,
    EnsembleSpec,
    Expert,
    baseline_curve,
    baseline_error_at,
    correctness_labels,
    expert_point,
    load_ensemble,
    oversample_views,
    route_and_predict,
    sweep_curve,
    train_router,
)
from condnets.errors import ArgumentError, ConfigurationError, DataError, ValidationError
from condnets.persistence import Checkpoint, save_checkpoint
from condnets.trainer import TrainConfig, init_params, make_splits

CHEAP_COST = 6
EXPENSIVE_COST = 64 * 3 + 2 * 65
ROUTER_COST = 6


def cheap_expert() -> Expert:
    """Right exactly on the half-plane x0 > 0 of the routed clusters."""
    arch = expert_mlp(2, 2)
    w = np.array([[0.0, 5.0, 0.0], [0.0, -5.0, 0.0]])
    return Expert("cheap", arch, {"logits": Param("logits", w)})


def expensive_expert() -> Expert:
    """Compares |x0 - x1| with |x0 + x1|: right on every routed-clusters sample."""
    arch = expert_mlp(2, 2, hidden=(64,))
    hidden = np.zeros((64, 3))
    hidden[:4] = [[1.0, 1.0, 0.0], [-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [-1.0, 1.0, 0.0]]
    logits = np.zeros((2, 65))
    logits[0, :2] = 20.0
    logits[1, 2:4] = 20.0
    return Expert("expensive", arch, {"hidden0": Param("hidden0", hidden), "logits": Param("logits", logits)})


def oracle_router():
    arch = ensemble_router((2,), 2)
    w = np.array([[100.0, 0.0, 0.0], [0.0, 0.0, 10.0]])
    return arch, {"scores": Param("scores", w)}


def constant_expert(name: str, label: int) -> Expert:
    """Predicts ``label`` for every input."""
    w = np.zeros((2, 3))
    w[label, 2], w[1 - label, 2] = 5.0, -5.0
    return Expert(name, expert_mlp(2, 2), {"logits": Param("logits", w)})


def trained_ensemble(data, epochs=20) -> Ensemble:
    router = ensemble_router((2,), 2)
    ensemble = Ensemble([expensive_expert(), cheap_expert()], router, init_params(router, seed=0))
    splits = make_splits(len(data), 50, 50, seed=0)
    train_router(ensemble, data.images, data.labels, splits,
                 TrainConfig(lr0=0.1, batch_size=16, max_epochs=epochs, seed=0))
    return ensemble


@pytest.fixture
def data():
    return gen_synthetic("routed_clusters", 400, seed=0)


@pytest.fixture
def ensemble():
    arch, params = oracle_router()
    return Ensemble([expensive_expert(), cheap_expert()], arch, params)


class TestEnsemble:
    def test_experts_sorted_by_cost(self, ensemble):
        assert [e.name for e in ensemble.experts] == ["cheap", "expensive"]
        assert ensemble.expert_costs == [CHEAP_COST, EXPENSIVE_COST]
        assert ensemble.router_cost == ROUTER_COST

    def test_needs_two_experts(self):
        arch, params = oracle_router()
        with pytest.raises(ConfigurationError):
            Ensemble([cheap_expert()], arch, params)

    def test_router_width_must_match(self):
        arch = ensemble_router((2,), 3)
        with pytest.raises(ValidationError):
            Ensemble([cheap_expert(), expensive_expert()], arch, init_params(arch))

    def test_unknown_shared_prefix(self):
        arch, params = oracle_router()
        with pytest.raises(ValidationError):
            Ensemble([cheap_expert(), expensive_expert()], arch, params, shared_prefix="hidden7")

    def test_shared_prefix_feeds_the_router(self, data):
        router = ensemble_router((4,), 2)
        experts = [expert_mlp(2, 2, hidden=(4,)), expert_mlp(2, 2, hidden=(4, 4))]
        ensemble = Ensemble(
            [Expert(f"e{i}", arch, init_params(arch, seed=i)) for i, arch in enumerate(experts)],
            router,
            init_params(router),
            shared_prefix="hidden0",
        )
        assert ensemble.router_inputs(data.images[:5]).shape == (5, 4)


class TestRouting:
    def test_cheap_expert_alone(self, ensemble, data):
        routed = route_and_predict(ensemble, data.images, 0.0)
        assert routed.visited[:, 0].all() and not routed.visited[:, 1].any()
        assert routed.amortized_cost == CHEAP_COST
        error = np.mean(np.argmax(routed.posterior, axis=1) != data.labels)
        assert error == np.mean(data.images[:, 0] < 0)

    def test_every_expert(self, ensemble, data):
        routed = route_and_predict(ensemble, data.images, 1.0)
        assert routed.visited.all()
        assert routed.amortized_cost == ROUTER_COST + CHEAP_COST + EXPENSIVE_COST
        assert np.array_equal(np.argmax(routed.posterior, axis=1), data.labels)

    def test_router_escalates_the_hard_half(self, ensemble, data):
        routed = route_and_predict(ensemble, data.images, 0.5)
        hard = data.images[:, 0] < 0
        assert np.array_equal(routed.visited[:, 1], hard)
        assert np.array_equal(np.argmax(routed.posterior, axis=1), data.labels)
        assert routed.amortized_cost == pytest.approx(ROUTER_COST + CHEAP_COST + EXPENSIVE_COST * hard.mean())
        assert np.allclose(routed.weights.sum(axis=1), 1.0)

    def test_needs_images_or_outputs(self, ensemble):
        with pytest.raises(ArgumentError):
            route_and_predict(ensemble, None, 0.5)


class TestSweep:
    def test_cost_grows_with_theta(self, ensemble, data):
        thetas = np.linspace(0, 1, 11)
        points = sweep_curve(ensemble, data.images, data.labels, thetas)
        costs = [p.expected_cost for p in points]
        assert costs == sorted(costs)
        assert points[0].expected_cost == CHEAP_COST
        assert points[-1].error == 0.0
        assert all(p.model_size == ensemble.size for p in points)

    def test_precomputed_outputs_match(self, ensemble, data):
        outputs = EnsembleOutputs.compute(ensemble, data.images)
        a = sweep_curve(ensemble, data.images, data.labels, [0.3, 0.7])
        b = sweep_curve(ensemble, data.images, data.labels, [0.3, 0.7], outputs)
        assert a == b

    def test_empty_grid(self, ensemble, data):
        with pytest.raises(ArgumentError):
            sweep_curve(ensemble, data.images, data.labels, [])

    def test_routing_beats_random_mixing(self, ensemble, data):
        cheap = expert_point(ensemble.experts[0], data.images, data.labels)
        expensive = expert_point(ensemble.experts[1], data.images, data.labels)
        (point,) = sweep_curve(ensemble, data.images, data.labels, [0.5])
        assert point.error < baseline_error_at(cheap, expensive, point.expected_cost)

    def test_trained_sweep_dominates_mixing(self, data):
        ensemble = trained_ensemble(data)
        cheap = expert_point(ensemble.experts[0], data.images, data.labels)
        best = expert_point(ensemble.experts[1], data.images, data.labels)
        points = sweep_curve(ensemble, data.images, data.labels, np.linspace(0, 1, 11))
        assert (points[0].error, points[0].expected_cost) == (cheap.error, cheap.expected_cost)
        assert points[-1].expected_cost == ROUTER_COST + CHEAP_COST + EXPENSIVE_COST
        for point in points:
            assert point.error <= baseline_error_at(cheap, best, point.expected_cost) + 0.01
        assert any(
            p.error <= best.error + 0.01 and p.expected_cost <= 0.6 * best.expected_cost for p in points[1:-1]
        )


class TestBaseline:
    def test_midpoint(self):
        a = CurvePoint(0.10, 100.0, 10)
        b = CurvePoint(0.06, 300.0, 30)
        (mid,) = baseline_curve(a, b, [0.5])
        assert mid.error == pytest.approx(0.08)
        assert mid.expected_cost == pytest.approx(200.0)
        assert mid.model_size == 40
        assert baseline_error_at(a, b, 200.0) == pytest.approx(0.08)

    def test_clamped(self):
        a = CurvePoint(0.10, 100.0, 10)
        b = CurvePoint(0.06, 300.0, 30)
        assert baseline_error_at(a, b, 1000.0) == pytest.approx(0.06)

    def test_probability_range(self):
        a = CurvePoint(0.10, 100.0, 10)
        with pytest.raises(ArgumentError):
            baseline_curve(a, a, [1.5])


class TestTrainRouter:
    def test_experts_stay_frozen(self, data):
        router = ensemble_router((2,), 2, hidden=(8,))
        router_params = init_params(router, seed=0)
        before = {k: p.value.data.copy() for k, p in router_params.items()}
        ensemble = Ensemble([cheap_expert(), expensive_expert()], router, router_params)
        frozen = [{k: p.value.data.copy() for k, p in e.params.items()} for e in ensemble.experts]
        splits = make_splits(len(data), 50, 50, seed=0)
        result = train_router(ensemble, data.images, data.labels, splits,
                              TrainConfig(lr0=0.1, batch_size=16, max_epochs=3, seed=0))
        for expert, saved in zip(ensemble.experts, frozen):
            assert all(np.array_equal(expert.params[k].value.data, saved[k]) for k in saved)
        assert any(not np.array_equal(router_params[k].value.data, before[k]) for k in before)
        assert len(result.history) == 3

    def test_router_learns_which_expert_is_right(self):
        data = gen_synthetic("two_clusters", 400, seed=2)
        router = ensemble_router((2,), 2)
        ensemble = Ensemble([constant_expert("zero", 0), constant_expert("one", 1)], router, init_params(router))
        splits = make_splits(len(data), 50, 100, seed=2)
        train_router(ensemble, data.images, data.labels, splits,
                     TrainConfig(lr0=0.1, batch_size=16, max_epochs=10, seed=2))
        test = data.subset(splits.test)
        chosen = np.argmax(ensemble.router_scores(test.images), axis=1)
        assert np.mean(chosen == test.labels) >= 0.95
        routed = route_and_predict(ensemble, test.images, 0.5)
        assert np.mean(np.argmax(routed.posterior, axis=1) == test.labels) >= 0.95

    def test_correctness_labels(self):
        posteriors = [np.array([[0.9, 0.1], [0.2, 0.8]]), np.array([[0.4, 0.6], [0.3, 0.7]])]
        labels = correctness_labels(posteriors, np.array([0, 0]))
        assert labels.tolist() == [[1.0, 0.0], [0.0, 0.0]]

    def test_missing_expert_outputs(self):
        with pytest.raises(DataError):
            correctness_labels([np.zeros((1, 2))], np.array([0, 1]))


class TestOversampling:
    def test_views(self, rng):
        images = rng.random((2, 3, 6, 6))
        views = oversample_views(images)
        assert len(views) == 10
        assert np.array_equal(views[0], images)
        assert np.array_equal(views[1], images[..., ::-1])

    def test_factor(self):
        arch = expert_mlp(2, 2)
        with pytest.raises(ConfigurationError):
            Expert("x", arch, init_params(arch), oversample=3)
        with pytest.raises(ConfigurationError):
            Expert("x", arch, init_params(arch), oversample=10)


def test_spec_round_trip(tmp_path, data):
    spec = EnsembleSpec()
    for expert in (cheap_expert(), expensive_expert()):
        save_checkpoint(tmp_path / expert.name, Checkpoint(expert.arch, expert.params))
        spec.experts.append({"name": expert.name, "checkpoint": expert.name})
    arch, params = oracle_router()
    save_checkpoint(tmp_path / "router", Checkpoint(arch, params))
    spec.router = {"checkpoint": "router"}
    (tmp_path / "ensemble.yaml").write_text(spec.dump())
    loaded = load_ensemble(tmp_path / "ensemble.yaml")
    assert [e.name for e in loaded.experts] == ["cheap", "expensive"]
    a = route_and_predict(loaded, data.images, 0.5)
    hard = np.mean(data.images[:, 0] < 0)
    assert a.amortized_cost == pytest.approx(ROUTER_COST + CHEAP_COST + EXPENSIVE_COST * hard)
