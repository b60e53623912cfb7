"""Synthetic desk-scale dataset rendered from a known Gaussian set.

Builds a three-class diorama (ground plane, center foliage ball, sky shell),
renders ground-truth views with the package's own forward rasterizer, and
writes a full dataset in the standard directory convention: images, exact
argmax masks, a COLMAP sparse model whose points seed initialization, the
class table, and the ground-truth PLY.
"""

from pathlib import Path

import numpy as np

from . import sh
from .colmap_io import ColmapCamera, ColmapImage, ColmapPoint, SparseModel, write_colmap
from .dataset import save_image_rgb, save_mask
from .edit import export_ply
from .projection import Camera
from .raster import rasterize_forward, render_label_map
from .scene import (
    ClassTable,
    GaussianSet,
    covariance_3d,
    normalize_quaternions,
    opacity_inverse,
    rgb_to_sh_dc,
)

POINTS_PER_BLOB = 3

TOY_CLASSES = ClassTable(names=("ground", "foliage", "sky"))
TOY_BACKGROUND = (0.0, 0.0, 0.0)


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w, x, y, z), w >= 0."""
    m = np.asarray(R, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def look_at_camera(eye, target, width: int, height: int, focal: float) -> Camera:
    """CV-convention camera (x right, y down, z forward) looking at target."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    W = np.eye(4)
    W[:3, :3] = R
    W[:3, 3] = -R @ eye
    return Camera(
        fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
        width=width, height=height, world_to_camera=W,
    )


def _random_unit_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def build_toy_scene(seed: int) -> GaussianSet:
    """The known ground-truth Gaussian set (60 blobs, 3 classes, SH degree 0)."""
    rng = np.random.default_rng(seed)
    counts = {"ground": 25, "foliage": 20, "sky": 15}

    positions, colors, scales, class_ids = [], [], [], []

    n = counts["ground"]
    pos = np.stack(
        [rng.uniform(-2.0, 2.0, n), rng.normal(-0.9, 0.05, n), rng.uniform(-2.0, 2.0, n)],
        axis=1,
    )
    positions.append(pos)
    base = np.array([0.45, 0.33, 0.18])
    colors.append(base + rng.uniform(-0.08, 0.08, (n, 3)))
    scales.append(rng.uniform(0.22, 0.38, (n, 3)))
    class_ids += [0] * n

    n = counts["foliage"]
    theta = rng.uniform(0, 2 * np.pi, n)
    phi = np.arccos(rng.uniform(-1, 1, n))
    r = 0.75 * rng.uniform(0.3, 1.0, n) ** (1 / 3)
    pos = np.stack(
        [r * np.sin(phi) * np.cos(theta), 0.1 + r * np.cos(phi), r * np.sin(phi) * np.sin(theta)],
        axis=1,
    )
    positions.append(pos)
    base = np.array([0.18, 0.52, 0.2])
    colors.append(base + rng.uniform(-0.1, 0.1, (n, 3)))
    scales.append(rng.uniform(0.13, 0.24, (n, 3)))
    class_ids += [1] * n

    n = counts["sky"]
    theta = rng.uniform(0, 2 * np.pi, n)
    pos = np.stack(
        [1.9 * np.cos(theta), rng.uniform(1.1, 1.8, n), 1.9 * np.sin(theta)],
        axis=1,
    )
    positions.append(pos)
    base = np.array([0.45, 0.62, 0.85])
    colors.append(base + rng.uniform(-0.08, 0.08, (n, 3)))
    scales.append(rng.uniform(0.3, 0.5, (n, 3)))
    class_ids += [2] * n

    positions = np.concatenate(positions)
    colors = np.clip(np.concatenate(colors), 0.05, 0.95)
    scales = np.concatenate(scales)
    class_ids = np.array(class_ids)
    total = len(positions)

    coeffs = np.zeros((total, 3, 1))
    coeffs[:, :, 0] = rgb_to_sh_dc(colors)
    logits = np.full((total, TOY_CLASSES.num_classes), -6.0)
    logits[np.arange(total), class_ids] = 6.0

    return GaussianSet(
        positions=positions,
        rotations=_random_unit_quats(rng, total),
        log_scales=np.log(scales),
        opacity_logits=np.full(total, opacity_inverse(0.9)),
        sh_coeffs=coeffs,
        semantic_logits=logits,
        active_sh_degree=0,
    )


def toy_cameras(seed: int, num_views: int = 24, image_size: int = 64) -> list[Camera]:
    rng = np.random.default_rng(seed + 1)
    focal = 1.25 * image_size
    cameras = []
    for k in range(num_views):
        angle = 2 * np.pi * k / num_views
        eye = np.array(
            [5.0 * np.cos(angle), 0.6 + 0.5 * rng.uniform(), 5.0 * np.sin(angle)]
        )
        cameras.append(
            look_at_camera(eye, (0.0, 0.0, 0.0), image_size, image_size, focal)
        )
    return cameras


def sample_sparse_points(gs: GaussianSet, seed: int):
    """Mimic an SfM cloud: a few points sampled inside each blob.

    Returns (positions (P,3), colors (P,3) in [0,1]); denser than one point
    per blob so the k-NN scale initialization resolves individual blobs.
    """
    rng = np.random.default_rng(seed + 2)
    colors = np.clip(gs.sh_coeffs[:, :, 0] * sh.C0 + 0.5, 0.0, 1.0)
    cov = covariance_3d(gs.log_scales, normalize_quaternions(gs.rotations))
    chol = np.linalg.cholesky(cov + 1e-12 * np.eye(3))
    offsets = 0.6 * np.einsum(
        "nij,npj->npi", chol, rng.standard_normal((gs.count, POINTS_PER_BLOB, 3))
    )
    xyz = (gs.positions[:, None, :] + offsets).reshape(-1, 3)
    rgb = np.repeat(colors, POINTS_PER_BLOB, axis=0)
    return xyz, rgb


def make_toy(out_dir, seed: int = 0, num_views: int = 24, image_size: int = 64) -> Path:
    """Generate the synthetic dataset; returns the dataset root."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    gs = build_toy_scene(seed)
    cameras = toy_cameras(seed, num_views, image_size)

    colmap_cam = ColmapCamera(
        camera_id=1,
        model="PINHOLE",
        width=image_size,
        height=image_size,
        params=np.array([cameras[0].fx, cameras[0].fy, cameras[0].cx, cameras[0].cy]),
    )
    model = SparseModel(cameras={1: colmap_cam})
    for k, camera in enumerate(cameras):
        name = f"frame_{k:03d}.png"
        output = rasterize_forward(gs, camera, TOY_BACKGROUND)
        save_image_rgb(out / "images" / name, output.rgb)
        save_mask(out / "masks" / f"frame_{k:03d}.png", render_label_map(output, TOY_CLASSES.ignore_label))
        model.images[k + 1] = ColmapImage(
            image_id=k + 1,
            qvec=rotation_to_quaternion(camera.rotation),
            tvec=camera.translation.copy(),
            camera_id=1,
            name=name,
        )

    xyz, rgb = sample_sparse_points(gs, seed)
    for i, (pos, color) in enumerate(zip(xyz, rgb)):
        model.points[i + 1] = ColmapPoint(
            point_id=i + 1,
            xyz=pos,
            rgb=np.clip(color * 255.0 + 0.5, 0, 255).astype(np.uint8),
            error=0.0,
        )

    write_colmap(model, out / "sparse" / "0", "binary")
    TOY_CLASSES.save(out / "classes.txt")
    export_ply(gs, out / "gt.ply", TOY_CLASSES)
    return out
