import numpy as np
import pytest

from bnprune.config import SynthSpec
from bnprune.utils.datasets import synth_dataset
from bnprune.utils.netgraph import GraphBuilder


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blobs():
    """Small synthetic set: 2 informative + 2 noise channels, 8x8"""
    spec = SynthSpec(
        num_classes=2,
        samples_per_class=40,
        height=8,
        width=8,
        informative_channels=2,
        noise_channels=2,
        separation=3.0,
        seed=7,
    )
    return synth_dataset(spec).standardize()


@pytest.fixture
def tiny_graph():
    """conv(BN) -> relu -> pool -> conv(BN) -> relu -> dense, for 8x8x4 inputs"""
    builder = GraphBuilder((8, 8), 4)
    (builder
     .conv("conv1", 6, 3).relu("relu1").pool("pool1", 2, 2)
     .conv("conv2", 5, 3).relu("relu2")
     .dense("logits", 2, batchnorm=False)
     .output())
    return builder.build(seed=3, dtype="float64")
