"""Datasets: synthetic coloured shapes, image/mask folders and deterministic batching.

Folder layout shared by both paths::

    <root>/images/<name>.png   RGB, 8-bit
    <root>/masks/<name>.png    single channel, pixel value = class id
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetLoadError, MaskError, PreconditionError, ValidationError

BACKGROUND, CIRCLE, SQUARE, TRIANGLE = range(4)
SHAPE_CLASSES = 4
CLASS_NAMES = ("background", "circle", "square", "triangle")
# dominant colour channel per shape class (circle red, square green, triangle blue)
DOMINANT_CHANNEL = {CIRCLE: 0, SQUARE: 1, TRIANGLE: 2}
MIN_SIZE = 16
CELEBA_CLASSES = 19
CELEBA_SIZE = 256


@dataclass(frozen=True)
class Shape:
    kind: int
    cx: float
    cy: float
    r: float

    def contains(self, px, py):
        """Analytic region test for pixel-centre coordinates (arrays broadcast)."""
        dx, dy = px - self.cx, py - self.cy
        if self.kind == CIRCLE:
            return dx * dx + dy * dy <= self.r * self.r
        if self.kind == SQUARE:
            half = 0.85 * self.r
            return (np.abs(dx) <= half) & (np.abs(dy) <= half)
        if self.kind == TRIANGLE:
            # apex up at (0, -r), base at y = r/2 between x = -+ r*sqrt(3)/2
            h = 1.5 * self.r
            half_base = self.r * math.sqrt(3) / 2
            depth = dy + self.r  # 0 at apex, h at base
            return (depth >= 0) & (depth <= h) & (np.abs(dx) <= half_base * depth / h)
        raise ValidationError(f"unknown shape kind {self.kind}")


@dataclass
class ShapesSample:
    image: np.ndarray  # (3, h, w) float32 in [-1, 1]
    mask: np.ndarray  # (h, w) int64 class ids
    shapes: list = field(default_factory=list)
    colors: list = field(default_factory=list)
    background: tuple = (0.0, 0.0, 0.0)


def render(shapes, colors, size, background):
    """Rasterise shapes in painter's order, without anti-aliasing.

    Returns (image (3, size, size), mask (size, size)). A pixel takes the
    colour and class of the last shape whose region holds its centre.
    """
    centers = np.arange(size) + 0.5
    px, py = np.meshgrid(centers, centers)
    image = np.empty((3, size, size), dtype=np.float32)
    image[:] = np.asarray(background, dtype=np.float32)[:, None, None]
    mask = np.zeros((size, size), dtype=np.int64)
    for shape, color in zip(shapes, colors):
        inside = shape.contains(px, py)
        mask[inside] = shape.kind
        image[:, inside] = np.asarray(color, dtype=np.float32)[:, None]
    return image, mask


def _shape_color(rng, kind):
    dominant = rng.uniform(0.5, 1.0)
    color = rng.uniform(-1.0, dominant - 0.5, size=3)
    color[DOMINANT_CHANNEL[kind]] = dominant
    return tuple(float(c) for c in color)


def make_shapes_sample(size, seed, index):
    if size < MIN_SIZE:
        raise ValidationError(f"size {size} is below the generator minimum of {MIN_SIZE}")
    rng = np.random.default_rng([seed, index])
    gray = rng.uniform(-0.5, 0.5)
    background = tuple(float(gray + j) for j in rng.uniform(-0.03, 0.03, size=3))
    shapes, colors = [], []
    for _ in range(int(rng.integers(1, 3))):
        kind = int(rng.integers(1, SHAPE_CLASSES))
        r = rng.uniform(size / 8, size / 4)
        cx, cy = rng.uniform(r, size - r, size=2)
        shapes.append(Shape(kind, float(cx), float(cy), float(r)))
        colors.append(_shape_color(rng, kind))
    image, mask = render(shapes, colors, size, background)
    return ShapesSample(image, mask, shapes, colors, background)


def make_shapes_dataset(n, size, seed):
    """n samples, each deterministic in (seed, index)."""
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    return [make_shapes_sample(size, seed, i) for i in range(n)]


@dataclass
class SemanticMask:
    class_map: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.class_map = np.asarray(self.class_map)
        validate_class_map(self.class_map, self.num_classes)


def validate_class_map(class_map, num_classes, source=None):
    where = f"{source}: " if source else ""
    if not np.issubdtype(np.asarray(class_map).dtype, np.integer):
        raise MaskError(f"{where}class map must hold integer ids")
    if class_map.size and (class_map.min() < 0 or class_map.max() >= num_classes):
        raise MaskError(
            f"{where}class ids must lie in [0, {num_classes}), found [{class_map.min()}, {class_map.max()}]"
        )


def one_hot(class_map, num_classes):
    """(..., h, w) ids -> (..., K, h, w) float32 indicators."""
    class_map = np.asarray(class_map)
    validate_class_map(class_map, num_classes)
    out = np.eye(num_classes, dtype=np.float32)[class_map]
    return np.moveaxis(out, -1, -3)


@dataclass
class PairDataset:
    images: np.ndarray  # (n, 3, s, s) float32 in [-1, 1]
    masks: np.ndarray  # (n, s, s) int64
    num_classes: int
    names: list

    def __len__(self):
        return len(self.names)

    @classmethod
    def from_samples(cls, samples, num_classes=SHAPE_CLASSES):
        images = np.stack([s.image for s in samples])
        masks = np.stack([s.mask for s in samples])
        return cls(images, masks, num_classes, [f"{i:05d}" for i in range(len(samples))])

    def subset(self, idx):
        idx = np.asarray(idx)
        return PairDataset(self.images[idx], self.masks[idx], self.num_classes, [self.names[i] for i in idx])


def to_uint8(image):
    """[-1, 1] float (3, h, w) -> (h, w, 3) uint8."""
    x = np.clip((np.asarray(image, dtype=np.float64) + 1) * 127.5, 0, 255)
    return np.rint(x).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(array):
    return (np.asarray(array, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1).astype(np.float32)


def _palette(num_classes):
    rng = np.random.default_rng(0)
    colors = rng.integers(0, 256, size=(256, 3)).astype(np.uint8)
    colors[:SHAPE_CLASSES] = [(40, 40, 40), (220, 50, 50), (50, 200, 50), (50, 80, 230)]
    return colors.reshape(-1).tolist()


def save_mask_png(class_map, path):
    img = Image.fromarray(np.asarray(class_map, dtype=np.uint8), mode="P")
    img.putpalette(_palette(256))
    img.save(path)


def save_pair_folder(dataset, root):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for name, image, mask in zip(dataset.names, dataset.images, dataset.masks):
        Image.fromarray(to_uint8(image), mode="RGB").save(root / "images" / f"{name}.png")
        save_mask_png(mask, root / "masks" / f"{name}.png")
    return root


@dataclass
class LoadError:
    path: str
    reason: str


@dataclass
class LoadReport:
    loaded: int = 0
    errors: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.errors


def center_crop(img):
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    return img.crop((left, top, left + side, top + side))


def read_mask(path, num_classes, size=None):
    img = Image.open(path)
    if img.mode not in ("P", "L", "I", "I;16"):
        raise MaskError(f"{path}: mask must be a single-channel indexed image, got mode {img.mode}")
    img = center_crop(img)
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.NEAREST)
    arr = np.asarray(img).astype(np.int64)
    validate_class_map(arr, num_classes, source=str(path))
    return arr


def read_image(path, size=None):
    img = center_crop(Image.open(path).convert("RGB"))
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return from_uint8(np.asarray(img))


def load_pair_folder(images_dir, masks_dir, num_classes, size, strict=True):
    """Load matching image/mask pairs, centre-cropped and resized to ``size``.

    Problems (orphans, bad ids, unreadable files) are collected per file. With
    ``strict`` any problem raises :class:`DatasetLoadError`; otherwise bad
    files are skipped. Returns (dataset, report).
    """
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    report = LoadReport()
    imgs = {p.stem: p for p in sorted(images_dir.glob("*.png"))}
    masks = {p.stem: p for p in sorted(masks_dir.glob("*.png"))}
    for stem in sorted(set(imgs) - set(masks)):
        report.errors.append(LoadError(str(imgs[stem]), "no matching mask"))
    for stem in sorted(set(masks) - set(imgs)):
        report.errors.append(LoadError(str(masks[stem]), "no matching image"))
    names, images, maps = [], [], []
    for stem in sorted(set(imgs) & set(masks)):
        try:
            image = read_image(imgs[stem], size)
        except (OSError, ValueError) as exc:
            report.errors.append(LoadError(str(imgs[stem]), f"unreadable image ({exc})"))
            continue
        try:
            mask = read_mask(masks[stem], num_classes, size)
        except MaskError as exc:
            report.errors.append(LoadError(str(masks[stem]), str(exc)))
            continue
        except (OSError, ValueError) as exc:
            report.errors.append(LoadError(str(masks[stem]), f"unreadable mask ({exc})"))
            continue
        names.append(stem)
        images.append(image)
        maps.append(mask)
    report.loaded = len(names)
    if strict and report.errors:
        raise DatasetLoadError(report)
    if not names:
        empty = PairDataset(np.zeros((0, 3, size, size), np.float32), np.zeros((0, size, size), np.int64),
                            num_classes, [])
        return empty, report
    return PairDataset(np.stack(images), np.stack(maps), num_classes, names), report


def epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def batches_per_epoch(n, batch_size):
    return n // batch_size


def batch_indices(n, batch_size, seed, step):
    """Dataset indices of the batch consumed at global ``step`` (drop-last epochs)."""
    if batch_size < 1:
        raise PreconditionError(f"batch_size must be >= 1, got {batch_size}")
    per_epoch = batches_per_epoch(n, batch_size)
    if per_epoch == 0:
        raise ValidationError(f"dataset of {n} samples cannot fill one batch of {batch_size}")
    epoch, i = divmod(step, per_epoch)
    return epoch_order(n, seed, epoch)[i * batch_size:(i + 1) * batch_size]


def batch_iter(dataset, batch_size, seed, epoch):
    """Yield (images, one-hot masks) for one epoch; the short final batch is dropped."""
    if len(dataset) == 0:
        raise ValidationError("cannot batch an empty dataset")
    if batch_size < 1:
        raise PreconditionError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(len(dataset), seed, epoch)
    for i in range(batches_per_epoch(len(dataset), batch_size)):
        idx = order[i * batch_size:(i + 1) * batch_size]
        yield dataset.images[idx], one_hot(dataset.masks[idx], dataset.num_classes)
