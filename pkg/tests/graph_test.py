import numpy as np
import pytest

from condnets.architectures import decision_tree, perceptron_tree, toy_routed_net
from condnets.autodiff import ActivationKind, Param, Tensor, fc_forward, finite_difference_check
from condnets.errors import ConfigurationError, ShapeError, UnsupportedModeError, ValidationError
from condnets.graph import (
    INPUT,
    ArchSpec,
    NodeKind,
    NodeSpec,
    RouterInput,
    RoutingPolicy,
    apply_policy,
    backward_routed,
    forward,
    infer_shapes,
    param_shapes,
    router_forward,
    run_inference,
)
from condnets.trainer import LossKind, init_params, loss


def gradient_error(arch, params, x, target):
    def f(tape):
        result = forward(arch, params, x, record_grads=tape is not None)
        value, grad = loss(result.output, target, LossKind.SQUARED_ERROR)
        if tape is not None:
            backward_routed(result, grad)
        return value, None, None

    return finite_difference_check(f, list(params.values()))


def conv_routed_net(channels: int = 4, routes: int = 2) -> ArchSpec:
    nodes = [
        NodeSpec(id="conv1", kind=NodeKind.CONV, inputs=(INPUT,), out=channels, act=ActivationKind.SIGMOID),
        NodeSpec(id="router", kind=NodeKind.ROUTER, inputs=("conv1",), routes=routes),
    ]
    for j in range(routes):
        nodes.append(
            NodeSpec(id=f"route{j}", kind=NodeKind.CONV, inputs=("conv1",), out=channels, groups=2,
                     act=ActivationKind.SIGMOID)
        )
    branches = tuple(f"route{j}" for j in range(routes))
    nodes += [
        NodeSpec(id="split", kind=NodeKind.COMBINE, inputs=("router",) + branches),
        NodeSpec(id="pool", kind=NodeKind.MAX_POOL, inputs=("split",), pool=2),
        NodeSpec(id="classifier", kind=NodeKind.FC, inputs=("pool",), out=3),
    ]
    return ArchSpec((2, 4, 4), tuple(nodes), "classifier", (routes,))


class TestRouterForward:
    def test_equal_logits_give_uniform_weights(self):
        r = router_forward(Tensor(np.ones((1, 2))), Param("router", np.zeros((3, 3))))
        assert np.allclose(r.data, 1 / 3)

    def test_saturation(self):
        w = np.array([[0.0, 100.0], [0.0, -100.0]])
        r = router_forward(Tensor(np.ones((1, 1))), Param("router", w))
        assert np.allclose(r.data, [[1.0, 0.0]], atol=1e-6)

    def test_hand_evaluated_softmax(self):
        r = router_forward(Tensor(np.ones((1, 1))), Param("router", np.array([[1.0], [0.0]])))
        e = np.e
        assert np.allclose(r.data, [[e / (e + 1), 1 / (e + 1)]])
        assert r.data[0, 0] == pytest.approx(0.7311, abs=1e-4)

    def test_single_route_is_rejected(self):
        with pytest.raises(ConfigurationError):
            router_forward(Tensor(np.ones((1, 2))), Param("router", np.zeros((1, 3))))


class TestApplyPolicy:
    def test_top_two_renormalizes(self):
        weights, visited = apply_policy(np.array([0.5, 0.3, 0.2]), RoutingPolicy.top_tau(2))
        assert np.allclose(weights, [0.625, 0.375, 0.0])
        assert visited.tolist() == [True, True, False]

    def test_tau_equal_to_routes_is_identity(self):
        r = np.array([0.5, 0.3, 0.2])
        weights, visited = apply_policy(r, RoutingPolicy.top_tau(3))
        assert np.array_equal(weights, r)
        assert visited.all()

    def test_hard_is_one_hot(self):
        weights, visited = apply_policy(np.array([0.2, 0.8]), RoutingPolicy.hard())
        assert np.array_equal(weights, [0.0, 1.0])
        assert visited.tolist() == [False, True]

    def test_ties_go_to_lower_index(self):
        _, visited = apply_policy(np.array([[0.4, 0.4, 0.2]]), RoutingPolicy.top_tau(1))
        assert visited.tolist() == [[True, False, False]]

    def test_without_renormalization(self):
        weights, _ = apply_policy(np.array([0.5, 0.3, 0.2]), RoutingPolicy.top_tau(2, renormalize=False))
        assert np.allclose(weights, [0.5, 0.3, 0.0])

    @pytest.mark.parametrize("tau", [0, 4])
    def test_tau_out_of_range(self, tau):
        with pytest.raises(ConfigurationError):
            apply_policy(np.array([0.5, 0.3, 0.2]), RoutingPolicy(mode="tau", tau=tau))

    @pytest.mark.parametrize("text, expected", [("soft", "soft"), ("hard", "hard"), ("tau:3", "tau:3")])
    def test_parse(self, text, expected):
        assert str(RoutingPolicy.parse(text)) == expected

    def test_parse_rejects_unknown(self):
        with pytest.raises(ConfigurationError):
            RoutingPolicy.parse("sometimes")


class TestValidation:
    def test_cycle(self):
        nodes = (
            NodeSpec(id="a", kind=NodeKind.FC, inputs=(INPUT, "b"), out=2),
            NodeSpec(id="b", kind=NodeKind.IDENTITY, inputs=("a",)),
        )
        with pytest.raises(ValidationError):
            forward(ArchSpec((2,), nodes, "b"), {}, np.zeros((1, 2)))

    def test_unknown_input(self):
        nodes = (NodeSpec(id="a", kind=NodeKind.FC, inputs=("ghost",), out=2),)
        with pytest.raises(ValidationError, match="ghost"):
            infer_shapes(ArchSpec((2,), nodes, "a"))

    def test_concat_shape_conflict(self):
        nodes = (
            NodeSpec(id="a", kind=NodeKind.CONV, inputs=(INPUT,), out=2),
            NodeSpec(id="b", kind=NodeKind.CONV, inputs=(INPUT,), out=2, pool=2),
            NodeSpec(id="c", kind=NodeKind.CONCAT, inputs=("a", "b")),
        )
        with pytest.raises(ValidationError):
            infer_shapes(ArchSpec((1, 4, 4), nodes, "c"))

    def test_router_must_feed_combine(self):
        nodes = (
            NodeSpec(id="router", kind=NodeKind.ROUTER, inputs=(INPUT,), routes=2),
            NodeSpec(id="fc", kind=NodeKind.FC, inputs=("router",), out=2),
        )
        with pytest.raises(ValidationError):
            infer_shapes(ArchSpec((3,), nodes, "fc"))

    def test_input_shape_mismatch(self, toy_net):
        arch, params = toy_net
        with pytest.raises(ShapeError):
            forward(arch, params, np.zeros((2, 4)))

    def test_shapes_and_param_shapes(self):
        arch = toy_routed_net(3, 2, routes=3)
        assert infer_shapes(arch)["output"] == (2,)
        shapes = param_shapes(arch)
        assert shapes["router"] == (3, 4)
        assert shapes["route0"] == (2, 4)


class TestForward:
    def test_hard_routing_returns_chosen_route(self, toy_net, rng):
        arch, params = toy_net
        x = rng.normal(size=(6, 3))
        result = forward(arch, params, x, RoutingPolicy.hard())
        r = router_forward(Tensor(x), params["router"]).data
        chosen = np.argmax(r, axis=1)
        for i, j in enumerate(chosen):
            route = fc_forward(Tensor(x[i : i + 1]), params[f"route{j}"], ActivationKind.SIGMOID).data
            assert np.allclose(result.output.data[i], route[0], rtol=0, atol=1e-12)

    def test_identical_routes_with_uniform_weights(self, rng):
        arch = toy_routed_net(3, 2)
        w = rng.normal(size=(2, 4))
        params = {
            "router": Param("router", np.zeros((2, 4))),
            "route0": Param("route0", w.copy()),
            "route1": Param("route1", w.copy()),
        }
        x = rng.normal(size=(4, 3))
        out = forward(arch, params, x).output.data
        assert np.array_equal(out, fc_forward(Tensor(x), params["route0"], ActivationKind.SIGMOID).data)

    def test_soft_routing_matches_all_routes_oracle(self, rng):
        arch = toy_routed_net(4, 3, routes=3)
        params = init_params(arch, seed=11)
        for p in params.values():
            p.value.data[...] = rng.normal(size=p.shape)
        x = rng.normal(size=(5, 4))
        r = router_forward(Tensor(x), params["router"]).data
        expected = sum(
            r[:, j : j + 1] * fc_forward(Tensor(x), params[f"route{j}"], ActivationKind.SIGMOID).data
            for j in range(3)
        )
        assert np.allclose(forward(arch, params, x).output.data, expected, atol=1e-12)

    def test_top_tau_all_routes_equals_soft(self, rng):
        arch = toy_routed_net(4, 3, routes=4)
        params = init_params(arch, seed=2)
        x = rng.normal(size=(7, 4))
        soft = forward(arch, params, x, RoutingPolicy.soft())
        full = forward(arch, params, x, RoutingPolicy.top_tau(4))
        assert np.array_equal(soft.output.data, full.output.data)
        assert soft.macs == full.macs
        assert np.array_equal(soft.routed["output"].visited, full.routed["output"].visited)

    def test_unvisited_routes_record_nothing(self, rng):
        arch = toy_routed_net(3, 2, routes=2)
        params = init_params(arch, seed=0)
        params["router"].value.data[:, :] = 0
        params["router"].value.data[0, -1] = 5.0
        result = forward(arch, params, rng.normal(size=(4, 3)), RoutingPolicy.hard())
        assert "route1" not in result.tape.nodes_visited()
        assert "route1" not in result.visited
        assert result.macs == 4 * 2 * 4 + 4 * 2 * 4

    def test_decision_tree_visits_one_leaf_per_sample(self, rng):
        arch = decision_tree(3, 2, depth=2)
        params = init_params(arch, seed=5)
        x = rng.normal(size=(20, 3))
        result = forward(arch, params, x, RoutingPolicy.hard())
        leaves = [node.id for node in arch.nodes if node.id.startswith("leaf")]
        assert sum(result.visited.get(leaf, 0) for leaf in leaves) == 20
        assert np.allclose(result.output.data.sum(axis=1), 1.0)

    def test_run_inference_accumulates_route_visits(self, rng):
        arch = toy_routed_net(3, 2, routes=2)
        params = init_params(arch, seed=1)
        result = run_inference(arch, params, rng.normal(size=(10, 3)), RoutingPolicy.hard(), batch_size=3)
        assert result.outputs.shape == (10, 2)
        assert result.route_visits["output"].sum() == 10
        assert result.samples == 10


class TestBackwardRouted:
    def test_hard_routing_cannot_be_trained(self, toy_net, rng):
        arch, params = toy_net
        result = forward(arch, params, rng.normal(size=(2, 3)), RoutingPolicy.hard())
        with pytest.raises(UnsupportedModeError):
            backward_routed(result, np.ones((2, 2)))

    def test_identical_routes_give_zero_router_gradient(self, rng):
        arch = toy_routed_net(3, 2)
        w = rng.normal(size=(2, 4))
        params = {
            "router": Param("router", np.zeros((2, 4))),
            "route0": Param("route0", w.copy()),
            "route1": Param("route1", w.copy()),
        }
        result = forward(arch, params, rng.normal(size=(5, 3)))
        backward_routed(result, rng.normal(size=(5, 2)))
        assert np.allclose(params["router"].grad, 0.0, atol=1e-15)

    def test_saturated_route_gets_no_gradient(self, rng):
        arch = toy_routed_net(3, 2)
        params = init_params(arch, seed=4)
        params["router"].value.data[:, :] = 0
        params["router"].value.data[0, -1] = 50.0
        params["router"].value.data[1, -1] = -50.0
        result = forward(arch, params, rng.normal(size=(5, 3)))
        backward_routed(result, rng.normal(size=(5, 2)))
        assert np.max(np.abs(params["route1"].grad)) < 1e-30
        assert np.max(np.abs(params["route0"].grad)) > 1e-6

    def test_toy_net_gradient(self, toy_net, rng):
        arch, params = toy_net
        assert gradient_error(arch, params, rng.normal(size=(4, 3)), rng.normal(size=(4, 2))) <= 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_random_routed_nets(self, seed):
        rng = np.random.default_rng(seed)
        kind = seed % 3
        if kind == 0:
            arch = toy_routed_net(int(rng.integers(2, 6)), int(rng.integers(1, 4)), routes=int(rng.integers(2, 5)))
        elif kind == 1:
            arch = perceptron_tree((int(rng.integers(2, 6)),), 3, routes=int(rng.integers(2, 5)))
        else:
            arch = decision_tree(int(rng.integers(2, 5)), 2, depth=2)
        params = init_params(arch, seed=seed)
        x = rng.normal(size=(3,) + arch.input_shape)
        target = rng.normal(size=(3,) + tuple(infer_shapes(arch)[arch.output]))
        assert gradient_error(arch, params, x, target) <= 1e-4

    def test_convolutional_routed_net(self, rng):
        arch = conv_routed_net()
        params = init_params(arch, seed=9)
        x = rng.normal(size=(2, 2, 4, 4))
        assert gradient_error(arch, params, x, rng.normal(size=(2, 3))) <= 1e-4

    def test_router_reads_pooled_summary(self):
        arch = conv_routed_net()
        assert arch.node("router").router_input is RouterInput.POOLED
        assert param_shapes(arch)["router"] == (2, 5)
