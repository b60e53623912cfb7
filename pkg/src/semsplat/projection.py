"""Perspective projection of 3D Gaussians into screen space.

Implements the affine approximation Sigma' = J W Sigma W^T J^T together with
the raster extents (3-sigma square, 16x16 tile range) and frustum culling
used by the tile rasterizer.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidParameterError
from .scene import GaussianSet, covariance_3d, normalize_quaternions, opacity as opacity_map

NEAR_PLANE = 0.01
TILE = 16
# Low-pass dilation added to the projected covariance diagonal (px^2).
COV2D_DILATION = 0.3
# Raster footprint: 3 sigma of the dilated screen-space covariance.
EXTENT_SIGMAS = 3.0
# Camera-space x/z and y/z are clamped to this multiple of the frustum
# tangent before entering the Jacobian, bounding its growth at the border.
FRUSTUM_CLAMP = 1.3


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus a rigid world-to-camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray  # (4, 4)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        W = np.asarray(self.world_to_camera, dtype=np.float64)
        if W.shape != (4, 4):
            raise InvalidParameterError("world_to_camera must be 4x4")
        R = W[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-5):
            raise InvalidParameterError("world_to_camera rotation block is not orthonormal")
        object.__setattr__(self, "world_to_camera", W)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def tan_half_fov(self) -> tuple[float, float]:
        return self.width / (2.0 * self.fx), self.height / (2.0 * self.fy)


@dataclass
class ProjectedGaussian:
    """Screen-space footprint of a single Gaussian."""

    mean2d: np.ndarray  # (2,) pixels
    cov2d: np.ndarray  # (2, 2) undilated Sigma'
    conic: np.ndarray  # (2, 2) inverse of the dilated cov2d
    depth: float
    radius: int


def transform_to_camera(positions: np.ndarray, camera: Camera) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    return pts @ camera.rotation.T + camera.translation


def project_point(position: np.ndarray, camera: Camera):
    """Pixel coordinates and camera-space depth of a world point.

    Accepts (3,) or (N, 3); callers cull on depth themselves.
    """
    single = np.asarray(position).ndim == 1
    p = transform_to_camera(position, camera)
    z = p[:, 2]
    px = camera.fx * p[:, 0] / z + camera.cx
    py = camera.fy * p[:, 1] / z + camera.cy
    pix = np.stack([px, py], axis=1)
    if single:
        return pix[0], float(z[0])
    return pix, z


def _clamped_camera_points(p_cam: np.ndarray, camera: Camera) -> np.ndarray:
    """Camera points with x, y clamped to 1.3x the frustum tangent (times z)."""
    tanx, tany = camera.tan_half_fov
    z = p_cam[:, 2]
    out = p_cam.copy()
    out[:, 0] = np.clip(p_cam[:, 0] / z, -FRUSTUM_CLAMP * tanx, FRUSTUM_CLAMP * tanx) * z
    out[:, 1] = np.clip(p_cam[:, 1] / z, -FRUSTUM_CLAMP * tany, FRUSTUM_CLAMP * tany) * z
    return out


def perspective_jacobian(p_cam: np.ndarray, camera: Camera, clamp: bool = True) -> np.ndarray:
    """(N, 2, 3) Jacobian of the pixel projection at camera-space points."""
    p = np.atleast_2d(np.asarray(p_cam, dtype=np.float64))
    if clamp:
        p = _clamped_camera_points(p, camera)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    J = np.zeros((p.shape[0], 2, 3), dtype=np.float64)
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * x / (z * z)
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * y / (z * z)
    return J


def project_covariance(cov3d: np.ndarray, position: np.ndarray, camera: Camera) -> np.ndarray:
    """Screen-space covariance Sigma' = J W Sigma W^T J^T (undilated).

    position is the Gaussian center in world coordinates; its camera-space
    depth must be beyond the near plane. Supports (3,3)/(3,) single inputs or
    (N,3,3)/(N,3) batches. The result is symmetrized; the +0.3 px^2 diagonal
    dilation is applied downstream, before inversion.
    """
    single = np.asarray(position).ndim == 1
    cov = np.asarray(cov3d, dtype=np.float64)
    cov = cov[None] if cov.ndim == 2 else cov
    p_cam = transform_to_camera(position, camera)
    if np.any(p_cam[:, 2] <= NEAR_PLANE):
        raise InvalidParameterError("project_covariance: point at or behind the near plane")
    J = perspective_jacobian(p_cam, camera)
    M = J @ camera.rotation  # (N, 2, 3)
    out = M @ cov @ np.swapaxes(M, 1, 2)
    out = 0.5 * (out + np.swapaxes(out, 1, 2))
    return out[0] if single else out


def max_eigenvalue_2x2(cov: np.ndarray) -> np.ndarray:
    """Largest eigenvalue of symmetric 2x2 matrices, closed form."""
    c = np.asarray(cov, dtype=np.float64)
    a, b, d = c[..., 0, 0], c[..., 0, 1], c[..., 1, 1]
    mid = 0.5 * (a + d)
    disc = np.sqrt(np.maximum(0.25 * (a - d) ** 2 + b * b, 0.0))
    return mid + disc


def compute_extent(cov2d_dilated: np.ndarray, mean2d: np.ndarray, width: int, height: int):
    """Raster footprint of a projected Gaussian.

    Returns (radius, (tx0, ty0, tx1, ty1)): radius = ceil(3 sqrt(lambda_max))
    in pixels, and the half-open range of 16x16 tiles intersecting the
    axis-aligned square of side 2*radius centered at mean2d, clamped to the
    image. An empty range means the square misses the image entirely.
    """
    radius = int(np.ceil(EXTENT_SIGMAS * np.sqrt(max_eigenvalue_2x2(cov2d_dilated))))
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    mx, my = float(mean2d[0]), float(mean2d[1])
    tx0 = max(0, int(np.floor((mx - radius) / TILE)))
    ty0 = max(0, int(np.floor((my - radius) / TILE)))
    tx1 = min(tiles_x, int(np.floor((mx + radius) / TILE)) + 1)
    ty1 = min(tiles_y, int(np.floor((my + radius) / TILE)) + 1)
    return radius, (tx0, ty0, tx1, ty1)


@dataclass
class ProjectionBatch:
    """Vectorized projection results for the visible subset of a scene.

    indices maps rows back into the originating GaussianSet. cov2d holds the
    undilated Sigma' packed as (a, b, c) = (xx, xy, yy); conic is the packed
    inverse of the dilated covariance.
    """

    indices: np.ndarray  # (V,) int64
    mean2d: np.ndarray  # (V, 2)
    depth: np.ndarray  # (V,)
    cov2d: np.ndarray  # (V, 3)
    conic: np.ndarray  # (V, 3)
    radius: np.ndarray  # (V,) int64
    tile_range: np.ndarray  # (V, 4) int64: tx0, ty0, tx1, ty1
    opacities: np.ndarray  # (V,)
    p_cam: np.ndarray  # (V, 3)


def project_gaussians(gs: GaussianSet, camera: Camera) -> ProjectionBatch:
    """Project every Gaussian and keep the ones that can touch the image.

    Survivors have camera-space depth beyond the near plane and a projected
    mean within the image bounds inflated by their pixel radius.
    """
    n = gs.count
    tiles_x = (camera.width + TILE - 1) // TILE
    tiles_y = (camera.height + TILE - 1) // TILE
    if n == 0:
        return ProjectionBatch(
            indices=np.zeros(0, dtype=np.int64),
            mean2d=np.zeros((0, 2)), depth=np.zeros(0),
            cov2d=np.zeros((0, 3)), conic=np.zeros((0, 3)),
            radius=np.zeros(0, dtype=np.int64), tile_range=np.zeros((0, 4), dtype=np.int64),
            opacities=np.zeros(0), p_cam=np.zeros((0, 3)),
        )

    p_cam = transform_to_camera(gs.positions, camera)
    in_front = p_cam[:, 2] > NEAR_PLANE
    idx = np.nonzero(in_front)[0]
    p_cam = p_cam[idx]
    z = p_cam[:, 2]
    mean2d = np.stack(
        [camera.fx * p_cam[:, 0] / z + camera.cx, camera.fy * p_cam[:, 1] / z + camera.cy],
        axis=1,
    )

    quats = normalize_quaternions(gs.rotations[idx])
    cov3d = covariance_3d(gs.log_scales[idx], quats)
    J = perspective_jacobian(p_cam, camera)
    M = J @ camera.rotation
    cov = M @ cov3d @ np.swapaxes(M, 1, 2)
    a = cov[:, 0, 0] + COV2D_DILATION
    b = 0.5 * (cov[:, 0, 1] + cov[:, 1, 0])
    c = cov[:, 1, 1] + COV2D_DILATION
    det = a * c - b * b

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = np.ceil(EXTENT_SIGMAS * np.sqrt(lam_max)).astype(np.int64)

    on_image = (
        (det > 0)
        & (mean2d[:, 0] >= -radius)
        & (mean2d[:, 0] <= camera.width - 1 + radius)
        & (mean2d[:, 1] >= -radius)
        & (mean2d[:, 1] <= camera.height - 1 + radius)
    )

    tx0 = np.clip(np.floor((mean2d[:, 0] - radius) / TILE).astype(np.int64), 0, tiles_x)
    ty0 = np.clip(np.floor((mean2d[:, 1] - radius) / TILE).astype(np.int64), 0, tiles_y)
    tx1 = np.clip(np.floor((mean2d[:, 0] + radius) / TILE).astype(np.int64) + 1, 0, tiles_x)
    ty1 = np.clip(np.floor((mean2d[:, 1] + radius) / TILE).astype(np.int64) + 1, 0, tiles_y)
    nonempty = (tx1 > tx0) & (ty1 > ty0)

    keep = on_image & nonempty
    inv_det = np.where(det > 0, 1.0 / np.where(det > 0, det, 1.0), 0.0)
    conic = np.stack([c * inv_det, -b * inv_det, a * inv_det], axis=1)

    return ProjectionBatch(
        indices=idx[keep],
        mean2d=mean2d[keep],
        depth=z[keep],
        cov2d=np.stack([cov[:, 0, 0], b, cov[:, 1, 1]], axis=1)[keep],
        conic=conic[keep],
        radius=radius[keep],
        tile_range=np.stack([tx0, ty0, tx1, ty1], axis=1)[keep],
        opacities=opacity_map(gs.opacity_logits[idx])[keep],
        p_cam=p_cam[keep],
    )


def cull_frustum(gs: GaussianSet, camera: Camera) -> np.ndarray:
    """Indices of the Gaussians that survive view culling, ascending."""
    return project_gaussians(gs, camera).indices
