"""Training, evaluation, prediction and the fisheye ablation behind the CLI."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig
from .data_pipeline import (DEFAULT_IGNORE, FisheyeParams, Sample, fisheye_warp, load_dataset, load_manifest,
                            read_image, resize_image, synth_shapes, write_gray_png, write_mask_png)
from .errors import ConfigError, DataError, NumericalError, UGNNError
from .losses_metrics import (ConfusionMatrix, accumulate, cross_entropy, gwd_loss, load_cost_matrix, miou,
                             per_class_accuracy, per_class_iou)
from .optim import Adam
from .segnet import UNetGnnParams, init_params, predict_labels, segment
from .tensor_core import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    params: UNetGnnParams
    optimizer: Adam
    history: List[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None


def _stack(samples: Sequence[Sample], dtype):
    x = np.stack([s.image for s in samples]).astype(dtype)
    y = np.stack([s.mask for s in samples])
    return x, y


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Seeded per-epoch shuffle, independent of everything else in the run."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def foreground_miou(conf: ConfusionMatrix) -> float:
    iou = per_class_iou(conf)[1:]
    iou = iou[~np.isnan(iou)]
    return float(iou.mean()) if iou.size else float("nan")


def build_checkpoint(cfg: RunConfig, params: UNetGnnParams, opt: Optional[Adam], epoch: int) -> ckpt_io.Checkpoint:
    tensors = ckpt_io.OrderedDict((k, t.data) for k, t in params.named_tensors().items())
    if opt is None:
        return ckpt_io.Checkpoint(cfg.to_dict(), tensors, epoch=epoch)
    return ckpt_io.Checkpoint(cfg.to_dict(), tensors, opt.state_tensors(), opt.step_count, epoch)


def params_from_checkpoint(ck: ckpt_io.Checkpoint, cfg: Optional[RunConfig] = None):
    """Rebuild params for ``cfg`` (default: the checkpoint's own config) and load tensors into them."""
    cfg = RunConfig.from_dict(ck.config) if cfg is None else cfg
    params = init_params(cfg.model_config(), seed=cfg.seed)
    ckpt_io.restore_tensors(ck.tensors, params.named_tensors())
    return cfg, params


def train(cfg: RunConfig, samples: Optional[Sequence[Sample]] = None, out_dir=None,
          on_epoch: Optional[Callable[[dict], None]] = None, params: Optional[UNetGnnParams] = None,
          write_checkpoints: bool = True) -> TrainResult:
    """Adam on cross-entropy (or one-hot Wasserstein) loss; one log line per epoch.

    ``samples`` defaults to the images of ``cfg.train_manifest``. A truthy
    return from ``on_epoch`` ends training after that epoch.
    """
    mcfg = cfg.model_config()
    ignore = DEFAULT_IGNORE
    if samples is None:
        if not cfg.train_manifest:
            raise ConfigError("no training data: set data.train_manifest or pass samples")
        manifest = load_manifest(cfg.train_manifest)
        if manifest.num_classes != cfg.num_classes:
            raise ConfigError(f"manifest has {manifest.num_classes} classes, config has {cfg.num_classes}")
        ignore = manifest.ignore_index
        samples = load_dataset(manifest, cfg.image_size, cfg.in_channels)
    if not samples:
        raise DataError("training set is empty")
    cost = load_cost_matrix(cfg.cost_matrix) if cfg.loss == "gwd" else None

    params = init_params(mcfg, seed=cfg.seed) if params is None else params
    opt = Adam(params.trainable(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps)
    out = Path(out_dir or cfg.out_dir)
    if write_checkpoints:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.tsv"
        log_path.write_text("epoch\tloss\tmiou\tfg_miou\n")
    result = TrainResult(params, opt)
    dtype = params.head.kernel.dtype

    for epoch in range(1, cfg.epochs + 1):
        order = epoch_order(len(samples), cfg.seed, epoch)
        conf = ConfusionMatrix(cfg.num_classes)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch_ids = order[start:start + cfg.batch_size]
            x, y = _stack([samples[i] for i in batch_ids], dtype)
            probs = segment(Tensor(x, dtype=dtype), params, mcfg)
            if cost is None:
                loss = cross_entropy(probs, y, ignore)
            else:
                loss = gwd_loss(probs, y, cost, ignore)
            value = float(loss.data)
            if not np.isfinite(value):
                ids = [samples[i].id for i in batch_ids]
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch starting {start}: samples {ids}")
            losses.append(value * len(batch_ids))
            conf = accumulate(conf, predict_labels(probs.data), y, ignore)
            opt.zero_grad()
            loss.backward()
            opt.step()
        entry = {"epoch": epoch, "loss": float(np.sum(losses) / len(samples)),
                 "miou": miou(conf), "fg_miou": foreground_miou(conf)}
        result.history.append(entry)
        if write_checkpoints:
            with log_path.open("a") as fh:
                fh.write(f"{epoch}\t{entry['loss']!r}\t{entry['miou']!r}\t{entry['fg_miou']!r}\n")
            ckpt_io.save_checkpoint(build_checkpoint(cfg, params, opt, epoch), out / "last.ugnn")
        log.info("epoch %d loss %.6f miou %.4f fg %.4f", epoch, entry["loss"], entry["miou"], entry["fg_miou"])
        if on_epoch is not None and on_epoch(entry):
            break
        if cfg.stop_iou > 0 and entry["fg_miou"] >= cfg.stop_iou:
            break
    if write_checkpoints:
        result.checkpoint = out / "final.ugnn"
        ckpt_io.save_checkpoint(build_checkpoint(cfg, params, opt, result.history[-1]["epoch"]), result.checkpoint)
    return result


def predict_probs(params: UNetGnnParams, cfg: RunConfig, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    mcfg = cfg.model_config()
    dtype = params.head.kernel.dtype
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            x = Tensor(np.asarray(images[start:start + batch_size], dtype=dtype), dtype=dtype)
            out.append(segment(x, params, mcfg).data)
    return np.concatenate(out) if out else np.zeros((0, cfg.num_classes) + images.shape[2:])


def evaluate(params: UNetGnnParams, cfg: RunConfig, samples: Sequence[Sample],
             ignore_index: Optional[int] = DEFAULT_IGNORE, conf: Optional[ConfusionMatrix] = None) -> ConfusionMatrix:
    conf = ConfusionMatrix(cfg.num_classes) if conf is None else conf
    if not samples:
        return conf
    x = np.stack([s.image for s in samples])
    labels = predict_labels(predict_probs(params, cfg, x))
    for lab, s in zip(labels, samples):
        conf = accumulate(conf, lab, s.mask, ignore_index)
    return conf


def _clean(v):
    return None if v is None or (isinstance(v, float) and np.isnan(v)) else float(v)


def build_report(class_names: Sequence[str], accuracy, iou, pixels=None, conf: Optional[ConfusionMatrix] = None) -> dict:
    """Table-shaped metrics report; NaN (absent) entries become ``None``."""
    acc = np.asarray(accuracy, dtype=np.float64)
    iou = np.asarray(iou, dtype=np.float64)
    rows = []
    for i, name in enumerate(class_names):
        rows.append({"index": i + 1, "class": name, "acc": _clean(acc[i]), "iou": _clean(iou[i]),
                     "pixels": None if pixels is None else int(pixels[i])})
    ok = ~np.isnan(iou)
    macro = float(iou[ok].mean()) if ok.any() else None
    rep = {"classes": rows, "macro_miou": macro,
           "mean_accuracy": float(np.nanmean(acc)) if (~np.isnan(acc)).any() else None}
    if pixels is not None:
        w = np.asarray(pixels, dtype=np.float64)
        rep["fw_miou"] = float((iou[ok] * w[ok]).sum() / w.sum()) if w.sum() > 0 and ok.any() else None
    if conf is not None:
        rep["pixel_accuracy"] = float(np.trace(conf.counts) / conf.total) if conf.total else None
        rep["total_pixels"] = conf.total
        rep["confusion"] = conf.counts.tolist()
    return rep


def report_from_confusion(conf: ConfusionMatrix, class_names: Sequence[str]) -> dict:
    return build_report(class_names, per_class_accuracy(conf), per_class_iou(conf),
                        conf.counts.sum(axis=1), conf)


def render_report(rep: dict, title: str = "model") -> str:
    """Fixed-width text table: one row per class, then mIoU / accuracy summary rows."""
    def f(v):
        return "  -  " if v is None else f"{v:.2f}"

    lines = [f"{'#':>3}  {'Category':<16} {'Acc':>5} {'IoU':>5}   [{title}]"]
    lines.append("-" * len(lines[0]))
    for r in rep["classes"]:
        lines.append(f"{r['index']:>3}  {r['class']:<16} {f(r['acc']):>5} {f(r['iou']):>5}")
    lines.append("-" * len(lines[0]))
    lines.append(f"{'':>3}  {'Average mIoU':<16} {f(rep['macro_miou']):>11}")
    if rep.get("fw_miou") is not None:
        lines.append(f"{'':>3}  {'Freq-weighted mIoU':<16} {f(rep['fw_miou']):>9}")
    acc = rep.get("pixel_accuracy", rep.get("mean_accuracy"))
    lines.append(f"{'':>3}  {'Average Accuracy':<16} {f(acc):>11}")
    return "\n".join(lines) + "\n"


def dumps_report(rep: dict) -> str:
    return json.dumps(rep, indent=2, sort_keys=True) + "\n"


def predict_files(params: UNetGnnParams, cfg: RunConfig, image_paths: Sequence, out_dir, save_probs: bool = False):
    """Write ``<stem>_mask.png`` (and optionally ``<stem>_prob<c>.png``) per image.

    Unreadable inputs are reported in the returned error list and skipped.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written, errors = [], []
    for p in image_paths:
        p = Path(p)
        try:
            img = resize_image(read_image(p, cfg.in_channels), (cfg.image_size, cfg.image_size))
        except UGNNError as exc:
            errors.append((str(p), str(exc)))
            continue
        probs = predict_probs(params, cfg, img[None])[0]
        mask_path = out / f"{p.stem}_mask.png"
        write_mask_png(predict_labels(probs), mask_path)
        written.append(mask_path)
        if save_probs:
            for c in range(probs.shape[0]):
                pp = out / f"{p.stem}_prob{c}.png"
                write_gray_png(probs[c], pp)
                written.append(pp)
    return written, errors


# ---------------------------------------------------------------------------
# fisheye ablation
# ---------------------------------------------------------------------------
@dataclass
class AblationSettings:
    seed: int = 0
    n_train: int = 16
    n_test: int = 8
    size: int = 32
    num_classes: int = 3
    focal: float = 12.0
    depth: int = 2
    base_channels: int = 8
    k: int = 8
    num_gnn_layers: int = 2
    epochs: int = 60
    batch_size: int = 4
    lr: float = 3e-3


def fisheye_benchmark(settings: AblationSettings):
    """Synthetic shapes pushed through the equidistant warp; returns (train, test)."""
    s = settings
    fp = FisheyeParams.centered(s.size, s.size, s.focal)
    raw = synth_shapes(s.seed, s.n_train + s.n_test, s.size, s.num_classes)
    warped = [fisheye_warp(x, fp) for x in raw]
    return warped[:s.n_train], warped[s.n_train:]


def run_ablation(settings: Optional[AblationSettings] = None) -> dict:
    """Train unet_gnn and unet_baseline on identical data/seeds; report both mIoUs and the delta."""
    s = settings or AblationSettings()
    train_set, test_set = fisheye_benchmark(s)
    names = ["background"] + [f"shape{i}" for i in range(1, s.num_classes)]
    rep = {"settings": dict(vars(s)), "variants": {}}
    for variant in ("unet_gnn", "unet_baseline"):
        cfg = RunConfig(in_channels=3, num_classes=s.num_classes, depth=s.depth, base_channels=s.base_channels,
                        variant=variant, k=s.k, num_gnn_layers=s.num_gnn_layers, epochs=s.epochs,
                        batch_size=s.batch_size, seed=s.seed, image_size=s.size, lr=s.lr)
        res = train(cfg, train_set, write_checkpoints=False)
        conf = evaluate(res.params, cfg, test_set)
        rep["variants"][variant] = {
            "final_train_loss": res.history[-1]["loss"],
            "test": report_from_confusion(conf, names),
        }
    g = rep["variants"]["unet_gnn"]["test"]["macro_miou"]
    b = rep["variants"]["unet_baseline"]["test"]["macro_miou"]
    rep["macro_miou_delta_gnn_minus_baseline"] = None if g is None or b is None else g - b
    return rep
