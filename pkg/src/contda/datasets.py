"""Labeled image datasets: in-memory container, directory IO, toy generator.

Images are float32 arrays of shape (N, H, W, 3) with values in [0, 1].
On disk a dataset is a tree ``root/<class_name>/<image files>`` with PNG
images (lossless 8-bit).
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetValidationError, InputValidationError

IMAGE_EXTENSIONS = (".png", ".bmp", ".tif", ".tiff")


@dataclasses.dataclass
class ImageDataset:
    """Labeled image set with stable per-image ids.

    ``image_ids`` identify the underlying clean image so that a degraded
    copy of image i can be matched with the original; they survive
    degradation and disk round trips.
    """

    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_names: list[str]
    image_ids: np.ndarray  # (N,) uint64

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.image_ids = np.asarray(self.image_ids, dtype=np.uint64)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise InputValidationError(
                f"images must be (N, H, W, 3), got {self.images.shape}"
            )
        if len(self.labels) != len(self.images) or len(self.image_ids) != len(self.images):
            raise InputValidationError("images, labels and image_ids must align")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def validate_nonempty_classes(self):
        """Every class must hold at least one sample."""
        if len(self) == 0:
            raise DatasetValidationError("dataset is empty")
        present = set(np.unique(self.labels).tolist())
        missing = [n for k, n in enumerate(self.class_names) if k not in present]
        if missing:
            raise DatasetValidationError(f"classes without samples: {missing}")

    def subset(self, indices) -> "ImageDataset":
        idx = np.asarray(indices)
        return ImageDataset(
            self.images[idx], self.labels[idx], list(self.class_names), self.image_ids[idx]
        )


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(images: np.ndarray) -> np.ndarray:
    return (np.asarray(images, dtype=np.float32) / 255.0).astype(np.float32)


def save_dataset(dataset: ImageDataset, root: Path | str):
    """Write ``root/<class_name>/<image_id>.png`` (lossless)."""
    root = Path(root)
    for name in dataset.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    imgs = to_uint8(dataset.images)
    for img, label, image_id in zip(imgs, dataset.labels, dataset.image_ids):
        path = root / dataset.class_names[int(label)] / f"{int(image_id):08d}.png"
        Image.fromarray(img).save(path)


def load_dataset(root: Path | str, class_names: list[str] | None = None) -> ImageDataset:
    """Load a ``root/<class_name>/<image files>`` tree.

    Class names default to the sorted subdirectory names; file stems that
    parse as integers become image ids, otherwise ids are assigned by
    sorted position within the tree.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetValidationError(f"dataset root is not a directory: {root}")
    if class_names is None:
        class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not class_names:
        raise DatasetValidationError(f"no class directories under {root}")

    images, labels, image_ids = [], [], []
    fallback_id = 0
    for k, name in enumerate(class_names):
        class_dir = root / name
        if not class_dir.is_dir():
            raise DatasetValidationError(f"missing class directory: {class_dir}")
        files = sorted(
            p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not files:
            raise DatasetValidationError(f"class directory has no images: {class_dir}")
        for path in files:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"))
            images.append(from_uint8(arr))
            labels.append(k)
            try:
                image_ids.append(int(path.stem))
            except ValueError:
                image_ids.append(fallback_id)
            fallback_id += 1

    return ImageDataset(
        np.stack(images), np.asarray(labels), list(class_names), np.asarray(image_ids)
    )


# ---------------------------------------------------------------------------
# Synthetic 4-class shape dataset used for desk-scale runs and tests.

SHAPE_CLASSES = ["square", "circle", "triangle", "cross"]


def _draw_shape(rng: np.random.Generator, label: int, size: int) -> np.ndarray:
    img = rng.uniform(0.0, 0.12, size=(size, size, 3)).astype(np.float32)
    color = rng.uniform(0.55, 1.0, size=3).astype(np.float32)
    cx = size / 2 + rng.uniform(-0.12, 0.12) * size
    cy = size / 2 + rng.uniform(-0.12, 0.12) * size
    r = rng.uniform(0.26, 0.38) * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dx, dy = xx - cx, yy - cy

    if label == 0:  # square
        mask = (np.abs(dx) <= r * 0.8) & (np.abs(dy) <= r * 0.8)
    elif label == 1:  # circle
        mask = dx**2 + dy**2 <= r**2 * 0.8
    elif label == 2:  # triangle, apex up
        mask = (dy >= -r) & (dy <= r * 0.7) & (np.abs(dx) <= (dy + r) * 0.6)
    else:  # cross
        w = r * 0.33
        mask = ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= w) & (np.abs(dx) <= r)
        )
    img[mask] = color
    return np.clip(img, 0.0, 1.0)


def make_shapes_dataset(
    num_per_class: int, seed: int, image_size: int = 32
) -> ImageDataset:
    """Procedural colored-shape classification set (4 classes)."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label in range(len(SHAPE_CLASSES)):
        for _ in range(num_per_class):
            images.append(_draw_shape(rng, label, image_size))
            labels.append(label)
    n = len(images)
    return ImageDataset(
        np.stack(images), np.asarray(labels), list(SHAPE_CLASSES), np.arange(n)
    )
