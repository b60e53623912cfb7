"""Semantics-controlled Gaussian splatting.

Jointly optimizes per-Gaussian appearance and class identity from posed
images plus segmentation masks, edits scenes by removing or extracting whole
semantic classes, and exports the result as reusable PLY assets.
"""

from .scene import ClassTable, GaussianSet, init_from_points
from .projection import Camera
from .raster import RenderOutput, rasterize_forward, rasterize_backward, render_label_map
from .edit import assign_classes, extract_classes, export_ply, import_ply, remove_classes
from .optim import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "ClassTable",
    "GaussianSet",
    "RenderOutput",
    "TrainConfig",
    "assign_classes",
    "export_ply",
    "extract_classes",
    "import_ply",
    "init_from_points",
    "rasterize_backward",
    "rasterize_forward",
    "remove_classes",
    "render_label_map",
    "train",
]
