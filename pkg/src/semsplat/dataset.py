"""Dataset assembly: frames (RGB + class-ID mask + camera) and splits.

Directory convention consumed here:

    dataset/
      images/         8-bit RGB PNGs
      masks/          8-bit single-channel PNGs, pixel value = class id,
                      255 = ignore
      sparse/0/       COLMAP sparse model (text or binary)
      classes.txt     lines of `id<TAB>name`
"""

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .colmap_io import SparseModel, parse_colmap
from .exceptions import DataError, LabelRangeError
from .projection import Camera
from .scene import ClassTable

IGNORE_LABEL = 255
DEFAULT_HOLDOUT_EVERY = 8


@dataclass
class Frame:
    """One training observation."""

    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) class ids or ignore_label
    camera: Camera
    name: str
    ignore_label: int = IGNORE_LABEL


@dataclass
class DatasetSplit:
    train: list[Frame]
    test: list[Frame]

    @property
    def all_frames(self) -> list[Frame]:
        return self.train + self.test


def load_image_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def load_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "P", "I;16", "I"):
                img = img.convert("L")
            arr = np.asarray(img)
    except OSError as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DataError(f"mask {path} must be single-channel, got shape {arr.shape}")
    return arr.astype(np.int64)


def load_frame(image_path, mask_path, camera: Camera, num_classes: int, name: str | None = None) -> Frame:
    """Read one RGB/mask pair and validate it against the camera and classes.

    Sizes must match the camera exactly (no silent resampling); mask values
    must be valid class ids or the ignore label.
    """
    rgb = load_image_rgb(image_path)
    mask = load_mask(mask_path)
    h, w = rgb.shape[:2]
    if (w, h) != (camera.width, camera.height):
        raise DataError(
            f"image {image_path} is {w}x{h} but camera expects {camera.width}x{camera.height}"
        )
    if mask.shape != (h, w):
        raise DataError(
            f"mask {mask_path} is {mask.shape[1]}x{mask.shape[0]} but image is {w}x{h}"
        )
    bad = (mask != IGNORE_LABEL) & ((mask < 0) | (mask >= num_classes))
    if bad.any():
        ys, xs = np.nonzero(bad)
        raise LabelRangeError(
            f"mask {mask_path} holds label {mask[ys[0], xs[0]]} at pixel "
            f"(x={xs[0]}, y={ys[0]}) but the class table has {num_classes} classes"
        )
    return Frame(rgb=rgb, mask=mask, camera=camera, name=name or Path(image_path).stem)


def split_train_test(frames: list[Frame], holdout_every: int = DEFAULT_HOLDOUT_EVERY) -> DatasetSplit:
    """Deterministic name-sorted split: every holdout_every-th frame tests.

    With fewer frames than holdout_every everything trains and the empty
    test split is flagged with a warning.
    """
    if holdout_every < 2:
        raise DataError(f"holdout_every must be >= 2, got {holdout_every}")
    ordered = sorted(frames, key=lambda f: f.name)
    if len(ordered) < holdout_every:
        if ordered:
            warnings.warn(
                f"only {len(ordered)} frames with holdout_every={holdout_every}: "
                "test split is empty",
                stacklevel=2,
            )
        return DatasetSplit(train=list(ordered), test=[])
    test = [f for i, f in enumerate(ordered) if i % holdout_every == 0]
    train = [f for i, f in enumerate(ordered) if i % holdout_every != 0]
    return DatasetSplit(train=train, test=test)


def camera_from_colmap(model: SparseModel, image_id: int) -> Camera:
    img = model.images[image_id]
    cam = model.cameras[img.camera_id]
    fx, fy, cx, cy = cam.intrinsics
    return Camera(
        fx=fx, fy=fy, cx=cx, cy=cy, width=cam.width, height=cam.height,
        world_to_camera=img.world_to_camera(),
    )


@dataclass
class Dataset:
    root: Path
    classes: ClassTable
    split: DatasetSplit
    sparse: SparseModel

    def scene_extent(self) -> float:
        """Scaling constant for learning rates and thresholds.

        1.1x the radius of the camera-center bounding sphere, matching how
        scene scale is conventionally normalized; falls back to the point
        cloud when there is a single camera.
        """
        centers = np.array([f.camera.center for f in self.split.all_frames])
        if len(centers) >= 2:
            centroid = centers.mean(axis=0)
            radius = float(np.linalg.norm(centers - centroid, axis=1).max())
            if radius > 0:
                return 1.1 * radius
        xyz, _ = self.sparse.point_cloud()
        if len(xyz):
            return max(1e-6, 0.5 * float(np.linalg.norm(xyz.max(0) - xyz.min(0))))
        return 1.0


def load_dataset(root, holdout_every: int = DEFAULT_HOLDOUT_EVERY, colmap_format: str = "auto") -> Dataset:
    """Assemble a dataset from the directory convention above."""
    root = Path(root)
    images_dir = root / "images"
    masks_dir = root / "masks"
    sparse_dir = root / "sparse" / "0"
    classes_path = root / "classes.txt"
    for path, what in [
        (images_dir, "images directory"),
        (masks_dir, "masks directory"),
        (sparse_dir, "COLMAP sparse model directory"),
        (classes_path, "class table file"),
    ]:
        if not path.exists():
            raise DataError(f"dataset is missing its {what}: {path}")

    classes = ClassTable.load(classes_path)
    sparse = parse_colmap(sparse_dir, colmap_format)

    frames = []
    for image_id in sorted(sparse.images):
        img = sparse.images[image_id]
        image_path = images_dir / img.name
        mask_path = masks_dir / (Path(img.name).stem + ".png")
        if not image_path.exists():
            raise DataError(f"missing image file referenced by COLMAP model: {image_path}")
        if not mask_path.exists():
            raise DataError(f"missing mask for frame {img.name}: {mask_path}")
        camera = camera_from_colmap(sparse, image_id)
        frames.append(
            load_frame(image_path, mask_path, camera, classes.num_classes, name=img.name)
        )
    split = split_train_test(frames, holdout_every)
    return Dataset(root=root, classes=classes, split=split, sparse=sparse)


def save_image_rgb(path, rgb: np.ndarray) -> None:
    """Write a float [0,1] HxWx3 array as an 8-bit PNG."""
    data = np.clip(np.asarray(rgb) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def save_mask(path, mask: np.ndarray) -> None:
    data = np.asarray(mask)
    if data.min() < 0 or data.max() > 255:
        raise DataError(f"mask values {data.min()}..{data.max()} do not fit 8-bit storage")
    Image.fromarray(data.astype(np.uint8), mode="L").save(path)
