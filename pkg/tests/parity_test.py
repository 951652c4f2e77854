import os

import pytest

from condnets.architectures import micro_convnet
from condnets.cost import static_cost
from condnets.dataset import DATA_DIR_ENV, load_cifar10
from condnets.graph import run_inference
from condnets.trainer import TrainConfig, accuracy, make_splits, train

SEED = 7


@pytest.mark.slow
@pytest.mark.skipif(not os.environ.get(DATA_DIR_ENV), reason=f"${DATA_DIR_ENV} is not set")
def test_grouped_micro_convnet_matches_dense():
    dataset = load_cifar10(os.environ[DATA_DIR_ENV], limit=6500).astype("float32")
    splits = make_splits(len(dataset), validation=500, test=1000, seed=SEED)
    cfg = TrainConfig(
        lr0=0.01, momentum=0.9, max_epochs=10, batch_size=64, seed=SEED, dtype="float32", mirror=True
    )
    test_images, test_labels = dataset.images[splits.test], dataset.labels[splits.test]

    scores = {}
    for grouped in (True, False):
        arch = micro_convnet(grouped=grouped)
        result = train(arch, dataset, splits, cfg)
        outputs = run_inference(arch, result.params, test_images).outputs
        scores[grouped] = accuracy(outputs, test_labels), static_cost(arch).total_macs

    (routed_acc, routed_macs), (dense_acc, dense_macs) = scores[True], scores[False]
    assert routed_macs <= 0.6 * dense_macs
    assert routed_acc >= dense_acc - 0.05
