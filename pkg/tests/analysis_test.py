import numpy as np
import pytest

from condnets.analysis import (
    BlockOrder,
    CorrelationMatrix,
    activation_correlation,
    masked_dense_weights,
    pearson_matrix,
    reorder_block_diagonal,
    routed_params,
    routed_perceptron,
    structure_from_correlation,
    unit_activations,
    zero_off_diagonal,
)
from condnets.architectures import expert_mlp, micro_convnet
from condnets.autodiff import ActivationKind, Param
from condnets.dense import equivalent_dense
from condnets.errors import ArgumentError, ShapeError
from condnets.graph import INPUT, ArchSpec, NodeKind, NodeSpec, forward
from condnets.trainer import init_params


def block_matrix(seed, rows=(4, 3, 5), cols=(3, 4, 2), strength=0.8, noise=0.05):
    """A shuffled block-diagonal matrix and the within-block pattern it was built from."""
    rng = np.random.default_rng(seed)
    row_blocks = np.repeat(np.arange(len(rows)), rows)
    col_blocks = np.repeat(np.arange(len(cols)), cols)
    truth = row_blocks[:, None] == col_blocks[None, :]
    matrix = rng.normal(0.0, noise, size=truth.shape)
    signs = rng.choice([-1.0, 1.0], size=truth.shape)
    matrix[truth] = signs[truth] * rng.normal(strength, 0.1, size=truth.sum())
    row_perm, col_perm = rng.permutation(len(row_blocks)), rng.permutation(len(col_blocks))
    return matrix[row_perm][:, col_perm], truth[row_perm][:, col_perm]


class TestPearson:
    def test_identical_streams(self, rng):
        a = rng.normal(size=(50, 3))
        assert np.allclose(np.diag(pearson_matrix(a, a)), 1.0)

    def test_dead_unit(self, rng):
        a = rng.normal(size=(20, 2))
        a[:, 1] = 3.0
        corr = pearson_matrix(a, rng.normal(size=(20, 4)))
        assert np.all(corr[1] == 0.0)

    def test_matches_numpy(self, rng):
        a = rng.normal(size=(100, 4)) * 1e3 + 5e3
        b = rng.normal(size=(100, 3)) + a[:, :3]
        expected = np.corrcoef(a.T, b.T)[:4, 4:]
        assert np.max(np.abs(pearson_matrix(a, b) - expected)) <= 1e-10

    def test_bounded(self, rng):
        a = rng.normal(size=(10, 2))
        assert np.all(np.abs(pearson_matrix(a, -a)) <= 1.0)

    def test_sample_counts_must_agree(self):
        with pytest.raises(ShapeError):
            pearson_matrix(np.zeros((3, 2)), np.zeros((4, 2)))


def test_unit_activations_average_feature_maps():
    values = np.arange(2 * 3 * 2 * 2, dtype=float).reshape(2, 3, 2, 2)
    units = unit_activations(values)
    assert units.shape == (2, 3)
    assert units[0, 0] == 1.5


class TestActivationCorrelation:
    @pytest.fixture
    def mlp(self):
        arch = expert_mlp(4, 3, hidden=(6, 5))
        return arch, init_params(arch, seed=2)

    def test_shape_and_range(self, mlp, rng):
        arch, params = mlp
        corr = activation_correlation(arch, params, rng.normal(size=(64, 4)), "hidden0", "hidden1", batch_size=16)
        assert corr.shape == (6, 5)
        assert corr.samples == 64
        assert np.all(np.abs(corr.matrix) <= 1.0)
        assert len(corr.rows()) == 30

    def test_sample_order_does_not_matter(self, mlp, rng):
        arch, params = mlp
        x = rng.normal(size=(40, 4))
        a = activation_correlation(arch, params, x, "hidden0", "logits")
        b = activation_correlation(arch, params, x[rng.permutation(40)], "hidden0", "logits", batch_size=7)
        assert np.allclose(a.matrix, b.matrix, rtol=0, atol=1e-12)

    def test_dead_unit_correlates_zero(self, mlp, rng):
        arch, params = mlp
        w = params["hidden0"].value.data
        w[2, :-1] = 0.0
        w[2, -1] = -1.0
        corr = activation_correlation(arch, params, rng.normal(size=(30, 4)), "hidden0", "hidden1")
        assert np.all(corr.matrix[2] == 0.0)

    def test_feature_maps(self, rng):
        arch = micro_convnet((3, 8, 8), widths=(4, 8), classes=2)
        corr = activation_correlation(arch, init_params(arch), rng.random((10, 3, 8, 8)), "conv1", "conv2")
        assert corr.shape == (4, 8)

    @pytest.mark.parametrize(
        "layer_i, layer_j",
        [("hidden1", "hidden0"), ("hidden0", "hidden0"), ("hidden0", "nope"), (INPUT, "logits")],
    )
    def test_bad_layers(self, mlp, rng, layer_i, layer_j):
        arch, params = mlp
        with pytest.raises(ArgumentError):
            activation_correlation(arch, params, rng.normal(size=(5, 4)), layer_i, layer_j)

    def test_empty_dataset(self, mlp):
        arch, params = mlp
        with pytest.raises(ArgumentError):
            activation_correlation(arch, params, np.zeros((0, 4)), "hidden0", "hidden1")


class TestReorder:
    def test_interleaved_rows(self):
        profiles = np.array([[1.0, 0.9, 0.0, 0.1], [0.0, 0.1, 1.0, 0.8]])
        matrix = profiles[[0, 1, 0, 1, 0, 1]] * np.array([1.0, -1.0, 0.5, -0.5, 2.0, 1.0])[:, None]
        order = reorder_block_diagonal(matrix, 2)
        assert order.row_blocks.tolist() == [0, 1, 0, 1, 0, 1]
        assert order.col_blocks.tolist() == [0, 0, 1, 1]
        assert order.row_perm.tolist() == [0, 2, 4, 1, 3, 5]

    def test_recovers_planted_blocks(self):
        recovered = 0
        for seed in range(20):
            matrix, truth = block_matrix(seed)
            order = reorder_block_diagonal(matrix, 3)
            recovered += np.array_equal(order.mask(), truth)
        assert recovered >= 19

    def test_permutations_group_blocks(self):
        matrix, _ = block_matrix(0)
        order = reorder_block_diagonal(matrix, 3)
        assert np.all(np.diff(order.row_blocks[order.row_perm]) >= 0)
        assert np.all(np.diff(order.col_blocks[order.col_perm]) >= 0)
        assert order.row_blocks[0] == 0

    def test_single_block(self, rng):
        matrix = rng.normal(size=(4, 6))
        order = reorder_block_diagonal(matrix, 1)
        assert order.mask().all()
        assert zero_off_diagonal(matrix, order).retained == 1.0

    @pytest.mark.parametrize("k", [0, 4])
    def test_block_count_range(self, rng, k):
        with pytest.raises(ArgumentError):
            reorder_block_diagonal(rng.normal(size=(3, 5)), k)

    def test_all_zero(self):
        order = reorder_block_diagonal(np.zeros((4, 4)), 2)
        assert sorted(set(order.row_blocks.tolist())) == [0, 1]
        zeroed = zero_off_diagonal(np.zeros((4, 4)), order)
        assert zeroed.retained == 0.0
        assert np.all(zeroed.matrix == 0.0)


class TestZeroing:
    def test_off_block_entries_vanish(self):
        matrix = np.array([[1.0, 0.1, 0.0], [0.2, 2.0, 0.5], [0.0, -1.0, 0.3]])
        order = BlockOrder([0, 1, 1], [0, 1, 1])
        zeroed = zero_off_diagonal(matrix, order)
        assert np.array_equal(zeroed.matrix, [[1.0, 0.0, 0.0], [0.0, 2.0, 0.5], [0.0, -1.0, 0.3]])
        assert zeroed.retained == pytest.approx(4.8 / 5.1)
        assert zeroed.selections == [((0,), (0,)), ((1, 2), (1, 2))]

    def test_empty_block_is_dropped(self):
        zeroed = zero_off_diagonal(np.ones((2, 2)), BlockOrder([0, 1], [1, 1]))
        assert zeroed.selections == [((1,), (0, 1))]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            zero_off_diagonal(np.ones((2, 3)), BlockOrder([0, 1], [0, 1]))

    def test_block_order_rows(self):
        order = BlockOrder([1, 0, 1], [0, 1])
        assert order.row_perm.tolist() == [1, 0, 2]
        rows = order.rows()
        assert rows[0] == {"axis": "row", "position": 0, "unit": 1, "block": 0}
        assert len(rows) == 5


class TestRoutedPerceptron:
    SELECTIONS = [((0, 1), (2,)), ((2, 3), (0, 1))]

    def mask(self):
        mask = np.zeros((4, 3), dtype=bool)
        mask[np.ix_([0, 1], [2])] = True
        mask[np.ix_([2, 3], [0, 1])] = True
        return mask

    def test_structure(self):
        arch = routed_perceptron(4, self.SELECTIONS)
        assert arch.node("select1").indices == (2, 3)
        assert arch.node("block1").out == 2
        assert arch.node("output").indices == (1, 2, 0)

    def test_equals_masked_dense_layer(self, rng):
        weights = rng.normal(size=(3, 5))
        arch = routed_perceptron(4, self.SELECTIONS)
        params = routed_params(weights, self.SELECTIONS, 4)
        masked = masked_dense_weights(weights, self.mask())
        fc = NodeSpec(id="fc", kind=NodeKind.FC, inputs=(INPUT,), out=3, act=ActivationKind.RELU)
        dense = ArchSpec((4,), (fc,), "fc")
        x = rng.normal(size=(6, 4))
        routed_out = forward(arch, params, x).output.data
        dense_out = forward(dense, {"fc": Param("fc", masked)}, x).output.data
        assert np.allclose(routed_out, dense_out, rtol=0, atol=1e-12)

    def test_dense_equivalent_recovers_the_mask(self, rng):
        weights = rng.normal(size=(3, 5))
        arch = routed_perceptron(4, self.SELECTIONS)
        dense, dense_params = equivalent_dense(arch, routed_params(weights, self.SELECTIONS, 4))
        assert [node.kind for node in dense.nodes] == [NodeKind.FC]
        assert np.allclose(dense_params[dense.output].value.data, masked_dense_weights(weights, self.mask()))

    def test_without_bias(self, rng):
        weights = rng.normal(size=(3, 4))
        params = routed_params(weights, self.SELECTIONS, 4)
        assert params["block0"].shape == (1, 2)

    def test_outputs_must_be_covered(self):
        with pytest.raises(ArgumentError):
            routed_perceptron(4, [((0, 1), (0,)), ((2,), (2,))])
        with pytest.raises(ArgumentError):
            routed_perceptron(4, [((0, 9), (0,))])


def test_structure_from_correlation():
    matrix, truth = block_matrix(3)
    correlation = CorrelationMatrix(matrix, "a", "b", samples=100)
    order, zeroed, arch = structure_from_correlation(correlation, 3)
    assert np.array_equal(zeroed.mask, order.mask())
    assert zeroed.retained > 0.8
    assert arch.route_counts == (len(zeroed.selections),)
    params = routed_params(np.ones((9, 13)), zeroed.selections, 12)
    assert forward(arch, params, np.ones((2, 12))).output.shape == (2, 9)
