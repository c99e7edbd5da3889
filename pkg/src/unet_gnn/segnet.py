"""UNet-GNN segmentation network and its plain-UNet baseline.

Channel plan for depth ``L`` and base width ``c``: encoder block ``l``
(1-based) outputs ``c * 2**(l-1)`` channels. The skip ``S_l`` is the
pre-pool map of block ``l``. Decoder level ``l`` upsamples to ``S_l``'s
resolution and width, adds ``S_l``, applies ReLU, then two 3x3 conv+ReLU
layers, the second of which narrows to the width of level ``l-1`` (``c``
at level 1). A 1x1 head and channel softmax produce class probabilities.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .graph_bottleneck import BottleneckConfig, GraphBottleneck, GraphConvParams, bottleneck_forward
from .tensor_core import ConvParams, Tensor, conv2d, conv_transpose2, get_dtype, maxpool2, relu, softmax_channels

VARIANTS = ("unet_gnn", "unet_baseline")


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 2
    depth: int = 4
    base_channels: int = 16
    bottleneck: BottleneckConfig = field(default_factory=BottleneckConfig)
    variant: str = "unet_gnn"

    def __post_init__(self):
        if isinstance(self.bottleneck, dict):
            self.bottleneck = BottleneckConfig(**self.bottleneck)
        for name in ("in_channels", "depth", "base_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def width(self, level: int) -> int:
        return self.base_channels * 2 ** (level - 1)

    @property
    def bottleneck_channels(self) -> int:
        return self.width(self.depth)

    def check_input(self, height: int, width: int) -> None:
        m = 2 ** self.depth
        if height % m or width % m:
            raise ConfigError(f"input {height}x{width} is not divisible by 2**depth = {m}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class UNetGnnParams:
    """All learnable tensors, grouped the way the forward pass consumes them."""

    encoder: List[Tuple[ConvParams, ConvParams]]
    bottleneck: Optional[GraphBottleneck]
    baseline_block: Optional[Tuple[ConvParams, ConvParams]]
    decoder: List[Tuple[ConvParams, ConvParams, ConvParams]]  # (up, conv_a, conv_b), index 0 = level 1
    head: ConvParams

    def named_tensors(self) -> "OrderedDict[str, Tensor]":
        """Stable name -> tensor table (checkpoint order)."""
        out: "OrderedDict[str, Tensor]" = OrderedDict()

        def conv(prefix, p):
            out[prefix + ".kernel"] = p.kernel
            out[prefix + ".bias"] = p.bias

        for l, (c1, c2) in enumerate(self.encoder, start=1):
            conv(f"enc{l}.conv1", c1)
            conv(f"enc{l}.conv2", c2)
        if self.bottleneck is not None:
            for t, layer in enumerate(self.bottleneck.layers, start=1):
                out[f"gnn{t}.weight"] = layer.weight
                out[f"gnn{t}.bias"] = layer.bias
            out["gnn.projection"] = self.bottleneck.projection
        if self.baseline_block is not None:
            conv("mid.conv1", self.baseline_block[0])
            conv("mid.conv2", self.baseline_block[1])
        for l, (up, ca, cb) in enumerate(self.decoder, start=1):
            conv(f"dec{l}.up", up)
            conv(f"dec{l}.conv1", ca)
            conv(f"dec{l}.conv2", cb)
        conv("head", self.head)
        return out

    def trainable(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, v) for k, v in self.named_tensors().items() if v.requires_grad)

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.grad = None


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------
def _conv(rng, out_ch, in_ch, ksize, stride=1, padding=0, zero=False):
    fan_in = in_ch * ksize * ksize
    bound = np.sqrt(1.0 / fan_in)
    dtype = get_dtype()
    if zero:
        w = np.zeros((out_ch, in_ch, ksize, ksize), dtype=dtype)
    else:
        w = rng.uniform(-bound, bound, size=(out_ch, in_ch, ksize, ksize)).astype(dtype)
    return ConvParams(Tensor(w, requires_grad=True), Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True),
                      stride=stride, padding=padding)


def init_params(config: ModelConfig, seed: int = 0, zero: bool = False) -> UNetGnnParams:
    """Fan-in uniform kernels (bound ``sqrt(1/fan_in)``), zero biases, zero warp projection.

    Tensors are drawn in a fixed order from one ``default_rng(seed)`` stream.
    The baseline variant consumes the same stream for encoder/decoder/head so
    both variants share those initial values; only the bottleneck differs.
    """
    rng = np.random.default_rng(seed)
    mid_rng = np.random.default_rng([seed, 1])
    L = config.depth
    encoder = []
    prev = config.in_channels
    for l in range(1, L + 1):
        w = config.width(l)
        encoder.append((_conv(rng, w, prev, 3, padding=1, zero=zero), _conv(rng, w, w, 3, padding=1, zero=zero)))
        prev = w
    cl = config.bottleneck_channels
    decoder = [None] * L
    for l in range(L, 0, -1):
        w = config.width(l)
        narrow = config.width(l - 1) if l > 1 else config.base_channels
        decoder[l - 1] = (
            _conv(rng, w, w, 2, stride=2, zero=zero),
            _conv(rng, w, w, 3, padding=1, zero=zero),
            _conv(rng, narrow, w, 3, padding=1, zero=zero),
        )
    head = _conv(rng, config.num_classes, config.base_channels, 1, zero=zero)

    bottleneck = baseline = None
    if config.variant == "unet_gnn":
        from .graph_bottleneck import make_bottleneck

        bottleneck = make_bottleneck(config.bottleneck, cl, mid_rng)
        if zero:
            for layer in bottleneck.layers:
                layer.weight.data[...] = 0
    else:
        baseline = (_conv(mid_rng, cl, cl, 3, padding=1, zero=zero), _conv(mid_rng, cl, cl, 3, padding=1, zero=zero))
    return UNetGnnParams(encoder, bottleneck, baseline, decoder, head)


def count_params(config: ModelConfig) -> int:
    """Closed-form learnable scalar count (the warp projection counts only when learnable)."""
    total = 0
    prev = config.in_channels
    for l in range(1, config.depth + 1):
        w = config.width(l)
        total += (9 * prev + 1) * w + (9 * w + 1) * w
        prev = w
        narrow = config.width(l - 1) if l > 1 else config.base_channels
        total += (4 * w + 1) * w + (9 * w + 1) * w + (9 * w + 1) * narrow
    cl = config.bottleneck_channels
    if config.variant == "unet_gnn":
        bc = config.bottleneck
        total += bc.num_gnn_layers * (cl * cl + cl)
        if bc.learnable_warp:
            total += 2 * bc.d_pe
    else:
        total += 2 * (9 * cl + 1) * cl
    total += (config.base_channels + 1) * config.num_classes
    return total


def enumerate_params(params: UNetGnnParams) -> int:
    return int(sum(t.size for t in params.trainable().values()))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------
def encoder_forward(x: Tensor, params: UNetGnnParams, config: ModelConfig):
    """Conv-ReLU-Conv-ReLU per block, record the pre-pool skip, then 2x2 max pool."""
    config.check_input(*x.shape[-2:])
    if x.shape[-3] != config.in_channels:
        raise ShapeError(f"input has {x.shape[-3]} channels, model expects {config.in_channels}")
    skips = []
    f = x
    for c1, c2 in params.encoder:
        f = relu(conv2d(relu(conv2d(f, c1)), c2))
        skips.append(f)
        f = maxpool2(f)
    return f, skips


def middle_forward(f: Tensor, params: UNetGnnParams, config: ModelConfig) -> Tensor:
    if config.variant == "unet_gnn":
        return bottleneck_forward(f, params.bottleneck)
    c1, c2 = params.baseline_block
    return relu(conv2d(relu(conv2d(f, c1)), c2))


def decoder_forward(f: Tensor, skips, params: UNetGnnParams, config: ModelConfig) -> Tensor:
    """``F'_l = relu(up(F'_{l+1}) + S_l)`` followed by two conv+ReLU layers, deepest level first."""
    if len(skips) != len(params.decoder):
        raise ShapeError(f"decoder has {len(params.decoder)} levels but got {len(skips)} skips")
    for l in range(len(params.decoder), 0, -1):
        up, ca, cb = params.decoder[l - 1]
        u = conv_transpose2(f, up)
        s = skips[l - 1]
        if u.shape != s.shape:
            raise ShapeError(f"decoder level {l}: upsampled {list(u.shape)} vs skip {list(s.shape)}")
        f = relu(u + s)
        f = relu(conv2d(relu(conv2d(f, ca)), cb))
    return f


def logits(x: Tensor, params: UNetGnnParams, config: ModelConfig) -> Tensor:
    f, skips = encoder_forward(x, params, config)
    f = middle_forward(f, params, config)
    f = decoder_forward(f, skips, params, config)
    return conv2d(f, params.head)


def segment(x: Tensor, params: UNetGnnParams, config: ModelConfig) -> Tensor:
    """Per-pixel class distribution ``[C_out,H,W]`` (or ``[N,C_out,H,W]``)."""
    return softmax_channels(logits(x, params, config))


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax over the channel axis; ties go to the lowest class index."""
    return np.argmax(probs, axis=-3)


def param_shapes(params: UNetGnnParams) -> Dict[str, tuple]:
    return {k: tuple(v.shape) for k, v in params.named_tensors().items()}
