"""Manifests, PNG image/mask I/O, synthetic shapes, and an equidistant fisheye warp.

Manifest format (UTF-8 text, tab separated)::

    @num_classes<TAB>2
    @classes<TAB>background<TAB>shape
    @ignore_index<TAB>255
    # comment
    images/a.png<TAB>masks/a.png[<TAB>sample-id]

Relative paths resolve against the manifest's directory. The sample id
defaults to the image file stem and must be unique.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ConfigError, DataError, FormatError

DEFAULT_IGNORE = 255


@dataclass
class Sample:
    image: np.ndarray  # [C,H,W] float32 in [0,1]
    mask: np.ndarray  # [H,W] int64
    id: str = ""
    shapes: list = field(default_factory=list)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.mask.shape:
            raise DataError(f"sample {self.id!r}: image {list(self.image.shape)} and mask "
                            f"{list(self.mask.shape)} sizes differ")


@dataclass
class ManifestRecord:
    image: str
    mask: str
    id: str
    line: int = 0
    root: Path = Path(".")

    @property
    def image_path(self) -> Path:
        return self.root / self.image

    @property
    def mask_path(self) -> Path:
        return self.root / self.mask


@dataclass
class DatasetManifest:
    records: List[ManifestRecord]
    num_classes: int
    class_names: List[str]
    ignore_index: Optional[int] = DEFAULT_IGNORE

    def __len__(self):
        return len(self.records)

    def dumps(self) -> str:
        lines = [f"@num_classes\t{self.num_classes}", "@classes\t" + "\t".join(self.class_names)]
        if self.ignore_index is not None:
            lines.append(f"@ignore_index\t{self.ignore_index}")
        for r in self.records:
            lines.append(f"{r.image}\t{r.mask}\t{r.id}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    def shard(self, index: int, count: int) -> "DatasetManifest":
        return DatasetManifest(self.records[index::count], self.num_classes, self.class_names, self.ignore_index)


def parse_manifest(text: str, root: Path = Path("."), check_paths: bool = True) -> DatasetManifest:
    num_classes = None
    names = None
    ignore: Optional[int] = DEFAULT_IGNORE
    records: List[ManifestRecord] = []
    seen: Dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if parts[0].startswith("@"):
            key, vals = parts[0][1:], parts[1:]
            try:
                if key == "num_classes":
                    num_classes = int(vals[0])
                elif key == "classes":
                    names = list(vals)
                elif key == "ignore_index":
                    ignore = None if vals[0].lower() == "none" else int(vals[0])
                else:
                    raise FormatError(f"line {lineno}: unknown header key @{key}")
            except (IndexError, ValueError):
                raise FormatError(f"line {lineno}: malformed header {line!r}") from None
            continue
        if len(parts) not in (2, 3) or not all(p.strip() for p in parts):
            raise FormatError(f"line {lineno}: expected 'image<TAB>mask[<TAB>id]', got {line!r}")
        image, mask = parts[0], parts[1]
        sid = parts[2] if len(parts) == 3 else Path(image).stem
        if sid in seen:
            raise FormatError(f"line {lineno}: duplicate sample id {sid!r} (first seen on line {seen[sid]})")
        seen[sid] = lineno
        rec = ManifestRecord(image, mask, sid, lineno, root)
        if check_paths:
            for label, p in (("image", rec.image_path), ("mask", rec.mask_path)):
                if not p.exists():
                    raise FormatError(f"line {lineno}: {label} path does not exist: {p}")
        records.append(rec)
    if num_classes is None:
        raise FormatError("manifest header is missing @num_classes")
    if num_classes < 2:
        raise FormatError(f"@num_classes must be >= 2, got {num_classes}")
    if names is None:
        names = [f"class{i}" for i in range(num_classes)]
    if len(names) != num_classes:
        raise FormatError(f"@classes lists {len(names)} names but @num_classes is {num_classes}")
    return DatasetManifest(records, num_classes, names, ignore)


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"manifest not found: {path}")
    return parse_manifest(path.read_text(encoding="utf-8"), path.parent, check_paths)


# ---------------------------------------------------------------------------
# image I/O and resizing
# ---------------------------------------------------------------------------
def _open(path) -> Image.Image:
    try:
        im = Image.open(path)
        im.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from None
    if im.width == 0 or im.height == 0:
        raise DataError(f"image {path} has zero size")
    return im


def read_image(path, channels: int = 3) -> np.ndarray:
    """Decode to ``[C,H,W]`` float32 in [0,1]."""
    im = _open(path)
    im = im.convert("L" if channels == 1 else "RGB")
    arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1).copy()


def read_mask(path, color_table: Optional[Dict[Tuple[int, int, int], int]] = None) -> np.ndarray:
    """Decode a single-channel index mask (palette or grayscale) to ``[H,W]`` int64."""
    im = _open(path)
    if im.mode in ("P", "L", "I", "I;16"):
        return np.asarray(im).astype(np.int64)
    if color_table is None:
        raise DataError(f"mask {path} is {im.mode}; RGB masks need a color-to-index table")
    rgb = np.asarray(im.convert("RGB")).astype(np.int64)
    code = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
    out = np.full(code.shape, -1, dtype=np.int64)
    for (r, g, b), idx in color_table.items():
        out[code == ((r << 16) | (g << 8) | b)] = idx
    if (out < 0).any():
        raise DataError(f"mask {path} contains colors missing from the color table")
    return out


def resize_image(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of ``[C,H,W]`` floats to ``size = (H, W)``."""
    h, w = size
    if image.shape[1:] == (h, w):
        return image.astype(np.float32, copy=True)
    chans = [np.asarray(Image.fromarray(ch.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR))
             for ch in image]
    return np.clip(np.stack(chans), 0.0, 1.0).astype(np.float32)


def resize_mask(mask: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize; output labels are always a subset of the input's."""
    h, w = size
    if mask.shape == (h, w):
        return mask.copy()
    sh, sw = mask.shape
    rows = np.minimum((np.arange(h) + 0.5) * sh / h, sh - 1).astype(np.int64)
    cols = np.minimum((np.arange(w) + 0.5) * sw / w, sw - 1).astype(np.int64)
    return mask[rows[:, None], cols[None, :]]


def _size(target) -> Tuple[int, int]:
    if isinstance(target, int):
        return target, target
    h, w = target
    return int(h), int(w)


def load_sample(record: ManifestRecord, target_size, channels: int = 3, num_classes: Optional[int] = None,
                ignore_index: Optional[int] = DEFAULT_IGNORE, color_table=None) -> Sample:
    size = _size(target_size)
    image = resize_image(read_image(record.image_path, channels), size)
    mask = resize_mask(read_mask(record.mask_path, color_table), size)
    if num_classes is not None:
        bad = (mask >= num_classes) | (mask < 0)
        if ignore_index is not None:
            bad &= mask != ignore_index
        if bad.any():
            raise DataError(f"{record.mask_path}: labels {sorted(set(mask[bad].tolist()))} outside "
                            f"[0, {num_classes})")
    return Sample(image, mask, record.id)


def load_dataset(manifest: DatasetManifest, target_size, channels: int = 3) -> List[Sample]:
    return [load_sample(r, target_size, channels, manifest.num_classes, manifest.ignore_index)
            for r in manifest.records]


# ---------------------------------------------------------------------------
# PNG writing and class palette
# ---------------------------------------------------------------------------
_BASE_PALETTE = [
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (128, 128, 128),
]


def class_color(index: int) -> Tuple[int, int, int]:
    """Fixed colors for classes 0-9; higher indices get a sha256-derived color."""
    if index < len(_BASE_PALETTE):
        return _BASE_PALETTE[index]
    d = hashlib.sha256(str(index).encode()).digest()
    return d[0], d[1], d[2]


def palette_bytes() -> List[int]:
    flat: List[int] = []
    for i in range(256):
        flat.extend(class_color(i) if i != DEFAULT_IGNORE else (255, 255, 255))
    return flat


def write_mask_png(mask: np.ndarray, path) -> None:
    if mask.min() < 0 or mask.max() > 255:
        raise DataError("paletted PNG masks hold labels 0..255 only")
    im = Image.fromarray(mask.astype(np.uint8), mode="P")
    im.putpalette(palette_bytes())
    im.save(path, format="PNG")


def write_image_png(image: np.ndarray, path) -> None:
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    im = Image.fromarray(arr[0], mode="L") if arr.shape[0] == 1 else Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    im.save(path, format="PNG")


def write_gray_png(values: np.ndarray, path) -> None:
    Image.fromarray(np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8), mode="L").save(path, format="PNG")


def write_dataset(samples: Sequence[Sample], out_dir, num_classes: int, class_names=None,
                  ignore_index: Optional[int] = DEFAULT_IGNORE) -> Path:
    """Write ``images/``, ``masks/`` and ``manifest.tsv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        write_image_png(s.image, out / "images" / f"{s.id}.png")
        write_mask_png(s.mask, out / "masks" / f"{s.id}.png")
        records.append(ManifestRecord(f"images/{s.id}.png", f"masks/{s.id}.png", s.id, 0, out))
    names = class_names or [f"class{i}" for i in range(num_classes)]
    manifest = DatasetManifest(records, num_classes, list(names), ignore_index)
    path = out / "manifest.tsv"
    manifest.save(path)
    return path


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Shape:
    kind: str  # "circle" or "rect"
    label: int
    params: Tuple[float, ...]  # circle: (cx, cy, r); rect: (x0, y0, x1, y1), inclusive

    def contains(self, x, y):
        if self.kind == "circle":
            cx, cy, r = self.params
            return (x - cx) ** 2 + (y - cy) ** 2 <= r * r
        x0, y0, x1, y1 = self.params
        return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)


_CLASS_TINTS = np.array([
    [0.95, 0.85, 0.20], [0.15, 0.55, 0.95], [0.90, 0.20, 0.30], [0.20, 0.85, 0.40],
    [0.80, 0.30, 0.85], [0.95, 0.55, 0.10], [0.10, 0.80, 0.80], [0.60, 0.60, 0.15],
])


def synth_shapes(seed: int, n: int, size: int, num_classes: int = 2, channels: int = 3,
                 max_shapes: int = 3) -> List[Sample]:
    """Filled circles/rectangles on a textured background.

    Foreground classes 1..num_classes-1 each have a tint; pixel (x, y) at its
    integer center is labeled by the last shape that contains it. Intensities
    are quantised to 8 bits so PNG round-trips are exact.
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = []
    for idx in range(n):
        fx, fy, ph = rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0, 2 * np.pi)
        base = 0.25 + 0.08 * np.sin(2 * np.pi * (fx * xx + fy * yy) / size + ph)
        img = np.repeat(base[None], channels, axis=0) + rng.normal(0, 0.03, size=(channels, size, size))
        mask = np.zeros((size, size), dtype=np.int64)
        shapes = []
        for _ in range(int(rng.integers(1, max_shapes + 1))):
            label = int(rng.integers(1, num_classes))
            if rng.random() < 0.5:
                r = rng.uniform(size * 0.08, size * 0.22)
                cx, cy = rng.uniform(r, size - 1 - r, size=2)
                shape = Shape("circle", label, (float(cx), float(cy), float(r)))
            else:
                w, h = rng.uniform(size * 0.15, size * 0.4, size=2)
                x0 = rng.uniform(0, size - 1 - w)
                y0 = rng.uniform(0, size - 1 - h)
                shape = Shape("rect", label, (float(x0), float(y0), float(x0 + w), float(y0 + h)))
            inside = shape.contains(xx, yy)
            tint = _CLASS_TINTS[(label - 1) % len(_CLASS_TINTS)]
            tint = tint[:channels] if channels <= 3 else np.resize(tint, channels)
            if channels == 1:
                tint = np.array([0.55 + 0.4 * ((label - 1) % 2)])
            jitter = rng.uniform(-0.04, 0.04, size=channels)
            for c in range(channels):
                img[c][inside] = tint[c] + jitter[c] + rng.normal(0, 0.02, size=int(inside.sum()))
            mask[inside] = label
            shapes.append(shape)
        img = np.round(np.clip(img, 0, 1) * 255) / 255
        out.append(Sample(img.astype(np.float32), mask, f"synth{seed:04d}_{idx:04d}", shapes))
    return out


# ---------------------------------------------------------------------------
# fisheye
# ---------------------------------------------------------------------------
@dataclass
class FisheyeParams:
    cx: float
    cy: float
    f: float

    def __post_init__(self):
        if not self.f > 0:
            raise ConfigError(f"fisheye focal scale must be > 0, got {self.f}")

    @classmethod
    def centered(cls, height: int, width: int, f: float) -> "FisheyeParams":
        return cls((width - 1) / 2.0, (height - 1) / 2.0, f)


def fisheye_radius(r_src, f):
    """Equidistant model: source radius -> distorted radius ``f * atan(r / f)``."""
    return f * np.arctan(np.asarray(r_src, dtype=np.float64) / f)


def fisheye_source_radius(r_dst, f):
    """Inverse of :func:`fisheye_radius`; NaN where ``r_dst / f >= pi/2``."""
    r = np.asarray(r_dst, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return np.where(r / f < math.pi / 2, f * np.tan(r / f), np.nan)


def fisheye_warp(sample: Sample, params: FisheyeParams, ignore_index: int = DEFAULT_IGNORE) -> Sample:
    """Inverse-map every output pixel through the equidistant model.

    Image values are sampled bilinearly, labels by nearest neighbor. Pixels
    whose source falls outside the input get intensity 0 and ``ignore_index``.
    """
    _, h, w = sample.image.shape
    if not (0 <= params.cx <= w - 1 and 0 <= params.cy <= h - 1):
        raise ConfigError(f"fisheye center ({params.cx}, {params.cy}) lies outside the {w}x{h} image")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - params.cx, yy - params.cy
    r_dst = np.hypot(dx, dy)
    r_src = fisheye_source_radius(r_dst, params.f)
    scale = np.where(r_dst > 0, r_src / np.where(r_dst > 0, r_dst, 1.0), 1.0)
    sx = params.cx + dx * scale
    sy = params.cy + dy * scale
    valid = np.isfinite(sx) & np.isfinite(sy) & (sx >= -0.5) & (sx <= w - 0.5) & (sy >= -0.5) & (sy <= h - 0.5)
    sxc = np.clip(np.nan_to_num(sx), 0, w - 1)
    syc = np.clip(np.nan_to_num(sy), 0, h - 1)
    image = np.stack([ndimage.map_coordinates(ch.astype(np.float64), [syc, sxc], order=1, mode="nearest")
                      for ch in sample.image])
    image = np.where(valid[None], image, 0.0).astype(np.float32)
    ni = np.clip(np.floor(syc + 0.5).astype(np.int64), 0, h - 1)
    nj = np.clip(np.floor(sxc + 0.5).astype(np.int64), 0, w - 1)
    mask = np.where(valid, sample.mask[ni, nj], ignore_index).astype(np.int64)
    return Sample(image, mask, sample.id)
