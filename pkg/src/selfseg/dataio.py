"""Synthetic shapes dataset, directory layout I/O and training-time augmentation.

Directory layout::

    <root>/labels.txt         one line per image: "<id>: <class>,<class>,..."
    <root>/classes.txt        optional; one class name per line, line k -> label k
    <root>/images/<id>.ppm    binary PPM (P6) or PNG, 8-bit RGB
    <root>/masks/<id>.pgm     optional; binary PGM (P5) or PNG, 8-bit, value = label

Mask pixel values are class indices (0 = background, k = k-th entry of
classes.txt).  Image values map to [0, 1] by division by 255.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .numcore import resize_array

DEFAULT_CLASSES = ("circle", "square", "triangle")


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    class_labels: np.ndarray  # multi-hot, length C
    id: str
    gt_mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def present_classes(self) -> frozenset[int]:
        return frozenset(int(i) + 1 for i in np.flatnonzero(self.class_labels))


@dataclass(frozen=True)
class TrainItem:
    """What the training loop may see: no ground-truth mask."""

    id: str
    image: np.ndarray
    class_labels: np.ndarray

    @property
    def present_classes(self) -> frozenset[int]:
        return frozenset(int(i) + 1 for i in np.flatnonzero(self.class_labels))


def training_view(samples: Sequence[Sample]) -> list[TrainItem]:
    return [TrainItem(s.id, s.image, s.class_labels) for s in samples]


def ground_truth_view(samples: Sequence[Sample]) -> dict[str, np.ndarray]:
    return {s.id: s.gt_mask for s in samples if s.gt_mask is not None}


# ---------------------------------------------------------------------------
# synthetic shapes


@dataclass(frozen=True)
class ShapesConfig:
    num_images: int = 500
    image_size: int = 64
    classes: tuple[str, ...] = DEFAULT_CLASSES
    max_shapes: int = 2
    noise: float = 0.04
    seed: int = 0
    min_size: float = 0.14  # shape radius as a fraction of image_size
    max_size: float = 0.24
    # "class_hue": each class draws from its own hue band over a desaturated
    # background; "random": any colour, so only the outline identifies the class
    color_mode: str = "class_hue"
    hue_jitter: float = 0.06


def rasterize(kind: str, cy: float, cx: float, r: float, size: int, angle: float = 0.0) -> np.ndarray:
    """Boolean mask of pixels whose centres fall inside the shape."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "square":
        half = r * 0.85
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if kind == "triangle":
        # equilateral, circumradius r, apex towards -v
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = np.pi / 2 + k * 2 * np.pi / 3
            nx, ny = -np.cos(a), np.sin(a)
            inside &= nx * u + ny * v <= r / 2
        return inside
    raise DatasetError(f"unknown shape kind {kind!r}")


def _texture(rng: np.random.Generator, size: int, noise: float, gray: bool = False) -> np.ndarray:
    base = rng.uniform(0.15, 0.85, size=3)
    if gray:
        base = base.mean() + 0.15 * (base - base.mean())
    coarse = rng.normal(0.0, 1.0, size=(3, 5, 5))
    smooth = resize_array(coarse, size, size).transpose(1, 2, 0)
    img = base + 0.06 * smooth + rng.normal(0.0, noise, size=(size, size, 3))
    return np.clip(img, 0.0, 1.0)


def _distinct_color(rng, used: list[np.ndarray], min_dist: float = 0.35) -> np.ndarray:
    for _ in range(200):
        col = rng.uniform(0.0, 1.0, size=3)
        if all(np.linalg.norm(col - u) >= min_dist for u in used):
            return col
    return col


def _class_color(rng, kind_idx: int, nclass: int, jitter: float, used: list[np.ndarray], min_dist: float = 0.15):
    for _ in range(200):
        hue = (kind_idx / nclass + rng.uniform(-jitter, jitter)) % 1.0
        col = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0)))
        if all(np.linalg.norm(col - u) >= min_dist for u in used):
            return col
    return col


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_shapes_dataset(cfg: ShapesConfig) -> list[Sample]:
    if cfg.image_size < 32:
        raise DatasetError("image_size must be >= 32")
    if cfg.max_shapes < 1 or not cfg.classes:
        raise DatasetError("need at least one class and one shape per image")
    if cfg.color_mode not in ("class_hue", "random"):
        raise DatasetError(f"unknown color_mode {cfg.color_mode!r}")
    hued = cfg.color_mode == "class_hue"
    rng = np.random.default_rng(cfg.seed)
    size, nclass = cfg.image_size, len(cfg.classes)
    samples = []
    width = len(str(cfg.num_images - 1))
    for idx in range(cfg.num_images):
        img = _texture(rng, size, cfg.noise, gray=hued)
        gt = np.zeros((size, size), dtype=np.int64)
        used = [img.mean(axis=(0, 1))]
        count = int(rng.integers(1, cfg.max_shapes + 1))
        for _ in range(count):
            for _attempt in range(20):
                kind_idx = int(rng.integers(nclass))
                r = rng.uniform(cfg.min_size, cfg.max_size) * size
                cy, cx = rng.uniform(r, size - r, size=2)
                angle = rng.uniform(-0.3, 0.3)
                shape = rasterize(cfg.classes[kind_idx], cy, cx, r, size, angle)
                # keep shapes mostly unoccluded so labels stay meaningful
                if shape.sum() > 0 and (gt[shape] > 0).mean() < 0.2:
                    break
            color = _class_color(rng, kind_idx, nclass, cfg.hue_jitter, used) if hued else _distinct_color(rng, used)
            used.append(color)
            shade = color + rng.normal(0.0, cfg.noise, size=(size, size, 3))
            img[shape] = shade[shape]
            gt[shape] = kind_idx + 1
        labels = np.zeros(nclass)
        for c in np.unique(gt):
            if c > 0:
                labels[c - 1] = 1.0
        samples.append(Sample(_quantize(img), labels, f"img{idx:0{width}d}", gt))
    return samples


# ---------------------------------------------------------------------------
# preprocessing


def resize_factor(height: int, width: int, bounds: tuple[int, int]) -> float:
    """Scale making the longer side fit ``bounds = (lower, upper)``; 1 inside the gap."""
    lower, upper = bounds
    longer = max(height, width)
    if longer > upper:
        return upper / longer
    if longer < lower:
        return lower / longer
    return 1.0


def _resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    ys = np.minimum((np.arange(out_h) * h) // out_h, h - 1)
    xs = np.minimum((np.arange(out_w) * w) // out_w, w - 1)
    return mask[ys[:, None], xs[None, :]]


def preprocess_train(
    image: np.ndarray,
    masks: Sequence[np.ndarray],
    crop: int,
    rng: np.random.Generator,
    bounds: tuple[int, int] = (64, 128),
) -> tuple[np.ndarray, list[np.ndarray], bool]:
    """Resize by the longer-side rule, random h-flip, random crop (padding with 0 / background).

    Always draws exactly three values from ``rng`` so the stream does not
    depend on image content.
    """
    h, w = image.shape[:2]
    f = resize_factor(h, w, bounds)
    if f != 1.0:
        nh, nw = max(1, int(round(h * f))), max(1, int(round(w * f)))
        image = np.clip(resize_array(image.transpose(2, 0, 1), nh, nw).transpose(1, 2, 0), 0.0, 1.0)
        masks = [_resize_nearest(m, nh, nw) for m in masks]
        h, w = nh, nw
    flip = bool(rng.random() < 0.5)
    u = rng.random(2)
    if flip:
        image = image[:, ::-1]
        masks = [m[:, ::-1] for m in masks]
    ph, pw = max(0, crop - h), max(0, crop - w)
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)))
        masks = [np.pad(m, ((0, ph), (0, pw))) for m in masks]
        h, w = h + ph, w + pw
    oy = int(u[0] * (h - crop + 1))
    ox = int(u[1] * (w - crop + 1))
    image = np.ascontiguousarray(image[oy : oy + crop, ox : ox + crop])
    masks = [np.ascontiguousarray(m[oy : oy + crop, ox : ox + crop]) for m in masks]
    return image, masks, flip


# ---------------------------------------------------------------------------
# directory layout


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def _read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise DatasetError(f"{path}: mask must be 8-bit single channel, got mode {im.mode}")
        return np.asarray(im, dtype=np.int64)


def _find(directory: Path, stem: str, exts: Sequence[str]) -> Path | None:
    for ext in exts:
        p = directory / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def read_manifest(path: Path) -> list[tuple[str, list[str]]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        ident, sep, rest = line.partition(":")
        if not sep:
            raise DatasetError(f"{path}:{lineno}: expected 'id: class,class'")
        names = [c.strip() for c in rest.split(",") if c.strip()]
        rows.append((ident.strip(), names))
    return rows


def load_dataset_dir(path, classes: Sequence[str] | None = None) -> list[Sample]:
    root = Path(path)
    manifest = root / "labels.txt"
    if not manifest.exists():
        raise DatasetError(f"{root}: missing labels.txt manifest")
    if classes is None:
        cls_file = root / "classes.txt"
        classes = [c.strip() for c in cls_file.read_text().splitlines() if c.strip()] if cls_file.exists() else DEFAULT_CLASSES
    index = {name: k for k, name in enumerate(classes)}
    rows = read_manifest(manifest)
    listed = {ident for ident, _ in rows}
    for img_path in sorted((root / "images").glob("*")):
        if img_path.stem not in listed:
            raise DatasetError(f"image {img_path.stem} has no manifest entry")
    samples = []
    for ident, names in rows:
        img_path = _find(root / "images", ident, (".ppm", ".png"))
        if img_path is None:
            raise DatasetError(f"manifest id {ident!r} has no image file")
        image = _read_image(img_path)
        labels = np.zeros(len(classes))
        for name in names:
            if name not in index:
                raise DatasetError(f"{ident}: unknown class name {name!r}")
            labels[index[name]] = 1.0
        mask = None
        mask_path = _find(root / "masks", ident, (".pgm", ".png"))
        if mask_path is not None:
            mask = _read_mask(mask_path)
            if mask.shape != image.shape[:2]:
                raise DatasetError(f"{ident}: mask extent {mask.shape} != image extent {image.shape[:2]}")
            if mask.max() > len(classes):
                raise DatasetError(f"{ident}: mask label {mask.max()} exceeds {len(classes)} classes")
        samples.append(Sample(image, labels, ident, mask))
    return samples


def save_dataset_dir(samples: Sequence[Sample], path, classes: Sequence[str] = DEFAULT_CLASSES) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("".join(f"{c}\n" for c in classes))
    lines = []
    for s in samples:
        rgb = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(root / "images" / f"{s.id}.ppm")
        if s.gt_mask is not None:
            (root / "masks").mkdir(exist_ok=True)
            Image.fromarray(s.gt_mask.astype(np.uint8), "L").save(root / "masks" / f"{s.id}.pgm")
        names = [classes[i] for i in np.flatnonzero(s.class_labels)]
        lines.append(f"{s.id}: {','.join(names)}\n")
    (root / "labels.txt").write_text("".join(lines))
