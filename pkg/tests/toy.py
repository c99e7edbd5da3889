"""Small model fixtures shared by the segnet and acceptance tests."""
import numpy as np

from unet_gnn.graph_bottleneck import BottleneckConfig
from unet_gnn.losses_metrics import cross_entropy
from unet_gnn.segnet import ModelConfig, init_params, segment
from unet_gnn.tensor_core import Tensor


def toy_config(variant="unet_gnn"):
    return ModelConfig(in_channels=1, num_classes=2, depth=2, base_channels=2,
                       bottleneck=BottleneckConfig(k=4, num_gnn_layers=2, d_pe=8), variant=variant)


def composite_case(seed, variant="unet_gnn"):
    """Mean cross-entropy of the toy model on random data, as a function of every trainable tensor.

    Biases are moved to small positive values so that ReLU inputs and
    max-pool windows sit away from their kinks, where central differences
    are meaningless.
    """
    cfg = toy_config(variant)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed=seed)
    tensors = list(params.trainable().values())
    for name, t in params.trainable().items():
        if name.endswith("bias"):
            t.data[...] = rng.uniform(0.05, 0.3, size=t.shape)
    x = Tensor(rng.normal(size=(1, 16, 16)))
    targets = rng.integers(0, 2, size=(16, 16))

    def f(*_):
        return cross_entropy(segment(x, params, cfg), targets)

    return f, tensors
