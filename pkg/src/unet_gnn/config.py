"""Run configuration and its flat ``dotted.key = value`` text format.

Example file::

    # desk-scale run
    model.depth = 3
    model.base_channels = 8
    train.epochs = 50
    data.train_manifest = data/manifest.tsv
"""

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional

from .errors import ConfigError, FormatError
from .graph_bottleneck import BottleneckConfig
from .segnet import ModelConfig


@dataclass
class RunConfig:
    # model
    in_channels: int = 3
    num_classes: int = 2
    depth: int = 4
    base_channels: int = 16
    variant: str = "unet_gnn"
    k: int = 8
    num_gnn_layers: int = 2
    d_pe: int = 32
    learnable_warp: bool = False
    aggregation: str = "sum"
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # training
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    loss: str = "ce"
    cost_matrix: Optional[str] = None
    image_size: int = 256
    stop_iou: float = 0.0
    # data / output
    train_manifest: Optional[str] = None
    eval_manifest: Optional[str] = None
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self, check_paths: bool = False):
        for name in ("in_channels", "num_classes", "depth", "base_channels", "k", "num_gnn_layers", "d_pe",
                     "epochs", "batch_size", "image_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr < 0 or self.eps <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1):
            raise ConfigError("optimizer settings out of range (lr >= 0, eps > 0, 0 <= beta < 1)")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.loss not in ("ce", "gwd"):
            raise ConfigError(f"loss must be 'ce' or 'gwd', got {self.loss!r}")
        if self.loss == "gwd" and not self.cost_matrix:
            raise ConfigError("loss 'gwd' needs a cost matrix file (train.cost_matrix / --cost-matrix)")
        if self.image_size % (2 ** self.depth):
            raise ConfigError(f"image_size {self.image_size} is not divisible by 2**depth")
        self.model_config()
        if check_paths:
            for name in ("cost_matrix", "train_manifest", "eval_manifest"):
                p = getattr(self, name)
                if p and not Path(p).exists():
                    raise ConfigError(f"{name} path does not exist: {p}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            in_channels=self.in_channels, num_classes=self.num_classes, depth=self.depth,
            base_channels=self.base_channels, variant=self.variant,
            bottleneck=BottleneckConfig(k=self.k, num_gnn_layers=self.num_gnn_layers, d_pe=self.d_pe,
                                        learnable_warp=self.learnable_warp, aggregation=self.aggregation),
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def replace(self, **overrides) -> "RunConfig":
        d = self.to_dict()
        d.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(d)


# dotted key -> RunConfig attribute
KEYS: Dict[str, str] = {
    "model.in_channels": "in_channels", "model.num_classes": "num_classes", "model.depth": "depth",
    "model.base_channels": "base_channels", "model.variant": "variant", "model.k": "k",
    "model.num_gnn_layers": "num_gnn_layers", "model.d_pe": "d_pe", "model.learnable_warp": "learnable_warp",
    "model.aggregation": "aggregation",
    "optim.lr": "lr", "optim.beta1": "beta1", "optim.beta2": "beta2", "optim.eps": "eps",
    "train.epochs": "epochs", "train.batch_size": "batch_size", "train.seed": "seed", "train.loss": "loss",
    "train.cost_matrix": "cost_matrix", "train.image_size": "image_size", "train.stop_iou": "stop_iou",
    "data.train_manifest": "train_manifest", "data.eval_manifest": "eval_manifest", "output.dir": "out_dir",
}
_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(attr: str, raw: str, where: str):
    kind = _TYPES[attr]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        return None if raw.lower() in ("", "none") else raw
    except ValueError:
        raise FormatError(f"{where}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise FormatError(f"{source}:{lineno}: unknown key {key!r}")
        out[KEYS[key]] = _coerce(KEYS[key], val, f"{source}:{lineno}")
    return out


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return RunConfig.from_dict(parse_config_text(path.read_text(), str(path)))


def parse_override(item: str) -> tuple:
    """``"train.epochs=5"`` -> ``("epochs", 5)``."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, val = item.split("=", 1)
    key = key.strip()
    if key not in KEYS:
        raise ConfigError(f"unknown key {key!r}")
    return KEYS[key], _coerce(KEYS[key], val, f"--set {item}")


def dumps_config(cfg: RunConfig) -> str:
    inv = {v: k for k, v in KEYS.items()}
    lines = []
    for attr, val in cfg.to_dict().items():
        lines.append(f"{inv[attr]} = {'none' if val is None else str(val).lower() if isinstance(val, bool) else val}")
    return "\n".join(lines) + "\n"
