"""Tile-based forward splatting and the hand-derived backward pass.

One fused pass blends both channels: per pixel, contributors sorted by
ascending depth (ties by index) composite front to back with
alpha_i = opacity_i * exp(-0.5 d^T conic d), sharing alpha and transmittance
between the RGB sum and the C-channel semantic sum. Semantics bypass SH
entirely (view independent) and receive no background term, so empty space
keeps zero class mass.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels, sh
from .exceptions import InvalidParameterError, InvalidStateError
from .projection import FRUSTUM_CLAMP, TILE, Camera, ProjectionBatch, project_gaussians
from .scene import GaussianSet, class_probs, normalize_quaternions, quaternion_to_rotation


@dataclass
class _ForwardCache:
    """Intermediates the backward pass re-uses instead of re-projecting."""

    batch: ProjectionBatch
    colors: np.ndarray  # (V, 3) evaluated SH colors, clamped at 0
    color_clamped: np.ndarray  # (V, 3) bool, True where the 0-clamp was active
    probs: np.ndarray  # (V, C)
    basis: np.ndarray  # (V, B) SH basis at the per-Gaussian view directions
    view_dirs: np.ndarray  # (V, 3) unit directions camera center -> Gaussian
    view_dists: np.ndarray  # (V,)
    sorted_slots: np.ndarray
    tile_offsets: np.ndarray
    camera: Camera
    background: np.ndarray
    count: int
    active_degree: int


@dataclass
class RenderOutput:
    """Per-pixel render results plus backward-pass bookkeeping.

    rgb values stay in [0, 1] whenever every Gaussian color and the
    background are in range (SH colors are clamped below only). semantic
    holds soft class mass per channel; per pixel its sum equals alpha when
    every per-Gaussian class vector is on the simplex. last_contributor is
    the index of the final blended Gaussian (-1 where nothing blended).
    """

    rgb: np.ndarray  # (H, W, 3)
    semantic: np.ndarray  # (H, W, C)
    alpha: np.ndarray  # (H, W)
    last_contributor: np.ndarray  # (H, W) int64
    _cache: _ForwardCache | None = None


@dataclass
class GradientBuffers:
    """Gradients mirroring every parameter array, plus densify statistics."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    semantic_logits: np.ndarray
    mean2d_grad_norm: np.ndarray  # (N,) screen-space positional gradient norm
    hits: np.ndarray  # (N,) 1 where the Gaussian survived culling
    skipped_nonfinite: int = 0

    @classmethod
    def zeros(cls, gs: GaussianSet) -> "GradientBuffers":
        return cls(
            positions=np.zeros_like(gs.positions),
            rotations=np.zeros_like(gs.rotations),
            log_scales=np.zeros_like(gs.log_scales),
            opacity_logits=np.zeros_like(gs.opacity_logits),
            sh_coeffs=np.zeros_like(gs.sh_coeffs),
            semantic_logits=np.zeros_like(gs.semantic_logits),
            mean2d_grad_norm=np.zeros(gs.count),
            hits=np.zeros(gs.count, dtype=np.int64),
        )


def _evaluate_colors(gs: GaussianSet, batch: ProjectionBatch, camera: Camera, degree: int):
    """Per-Gaussian RGB from SH at the center view direction, with clamp mask."""
    delta = gs.positions[batch.indices] - camera.center
    dist = np.linalg.norm(delta, axis=1)
    dirs = delta / np.maximum(dist, 1e-12)[:, None]
    basis = sh.eval_basis(dirs, degree) if len(dirs) else np.zeros((0, sh.num_coeffs(degree)))
    raw = np.einsum("ncb,nb->nc", gs.sh_coeffs[batch.indices, :, : basis.shape[1]], basis) + 0.5
    clamped = raw < 0.0
    return np.maximum(raw, 0.0), clamped, basis, dirs, dist


def _build_tile_lists(batch: ProjectionBatch, camera: Camera):
    tiles_x = (camera.width + TILE - 1) // TILE
    tiles_y = (camera.height + TILE - 1) // TILE
    spans = (batch.tile_range[:, 2] - batch.tile_range[:, 0]) * (
        batch.tile_range[:, 3] - batch.tile_range[:, 1]
    )
    total = int(spans.sum())
    pair_tile = np.empty(total, dtype=np.int64)
    pair_slot = np.empty(total, dtype=np.int64)
    kernels.fill_tile_pairs(batch.tile_range, tiles_x, pair_tile, pair_slot)
    # Per tile: ascending depth, ties broken by ascending Gaussian index.
    order = np.lexsort((batch.indices[pair_slot], batch.depth[pair_slot], pair_tile))
    sorted_slots = pair_slot[order]
    sorted_tiles = pair_tile[order]
    tile_offsets = np.searchsorted(sorted_tiles, np.arange(tiles_x * tiles_y + 1))
    return sorted_slots, tile_offsets.astype(np.int64), tiles_x, tiles_y


def rasterize_forward(gs: GaussianSet, camera: Camera, background_rgb) -> RenderOutput:
    """Splat the scene into RGB, semantic, and alpha buffers."""
    background = np.asarray(background_rgb, dtype=np.float64).reshape(-1)
    if background.shape != (3,) or not np.all(np.isfinite(background)):
        raise InvalidParameterError("background must be a finite RGB 3-vector")
    if camera.width <= 0 or camera.height <= 0:
        raise InvalidParameterError("camera image dimensions must be positive")

    h, w, c = camera.height, camera.width, gs.num_classes
    batch = project_gaussians(gs, camera)
    colors, color_clamped, basis, dirs, dists = _evaluate_colors(
        gs, batch, camera, gs.active_sh_degree
    )
    probs = class_probs(gs.semantic_logits[batch.indices]) if len(batch.indices) else np.zeros((0, c))
    sorted_slots, tile_offsets, tiles_x, tiles_y = _build_tile_lists(batch, camera)

    rgb = np.zeros((h, w, 3), dtype=np.float64)
    semantic = np.zeros((h, w, c), dtype=np.float64)
    alpha = np.zeros((h, w), dtype=np.float64)
    last = np.full((h, w), -1, dtype=np.int64)
    kernels.forward_kernel(
        w, h, tiles_x, tiles_y,
        sorted_slots, tile_offsets,
        batch.indices, batch.mean2d, batch.conic,
        batch.radius.astype(np.float64), batch.opacities,
        np.ascontiguousarray(colors), np.ascontiguousarray(probs),
        background, rgb, semantic, alpha, last,
    )
    cache = _ForwardCache(
        batch=batch, colors=colors, color_clamped=color_clamped, probs=probs,
        basis=basis, view_dirs=dirs, view_dists=dists,
        sorted_slots=sorted_slots, tile_offsets=tile_offsets,
        camera=camera, background=background, count=gs.count,
        active_degree=gs.active_sh_degree,
    )
    return RenderOutput(rgb=rgb, semantic=semantic, alpha=alpha, last_contributor=last, _cache=cache)


def _quaternion_rotation_jacobian(q: np.ndarray) -> np.ndarray:
    """(V, 4, 3, 3) partials of the rotation matrix w.r.t. a unit quaternion."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    dw = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1)
    dx = np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1)
    dy = np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1)
    dz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1)
    out = np.stack([dw, dx, dy, dz], axis=1).reshape(-1, 4, 3, 3)
    return 2.0 * out


def rasterize_backward(
    gs: GaussianSet,
    camera: Camera,
    output: RenderOutput,
    d_rgb: np.ndarray,
    d_semantic: np.ndarray,
) -> GradientBuffers:
    """Gradients of a scalar loss w.r.t. every Gaussian parameter.

    d_rgb and d_semantic are the loss gradients w.r.t. the rgb and semantic
    images of `output`, which must come from rasterize_forward on identical
    inputs.
    """
    cache = output._cache
    if cache is None:
        raise InvalidStateError("RenderOutput carries no forward cache")
    if cache.count != gs.count:
        raise InvalidStateError(
            f"stale RenderOutput: forward saw {cache.count} Gaussians, set now has {gs.count}"
        )
    if cache.camera is not camera and not (
        np.allclose(cache.camera.world_to_camera, camera.world_to_camera)
        and (cache.camera.fx, cache.camera.fy, cache.camera.cx, cache.camera.cy)
        == (camera.fx, camera.fy, camera.cx, camera.cy)
    ):
        raise InvalidStateError("RenderOutput was produced with a different camera")
    d_rgb = np.ascontiguousarray(d_rgb, dtype=np.float64)
    d_semantic = np.ascontiguousarray(d_semantic, dtype=np.float64)
    if d_rgb.shape != output.rgb.shape or d_semantic.shape != output.semantic.shape:
        raise InvalidParameterError("gradient image shapes do not match the render output")

    batch = cache.batch
    v = len(batch.indices)
    bufs = GradientBuffers.zeros(gs)
    if v == 0:
        return bufs

    tiles_x = (camera.width + TILE - 1) // TILE
    tiles_y = (camera.height + TILE - 1) // TILE
    grad_color = np.zeros((v, 3))
    grad_probs = np.zeros_like(cache.probs)
    grad_opac = np.zeros(v)
    grad_mean2d = np.zeros((v, 2))
    grad_conic = np.zeros((v, 3))
    kernels.backward_kernel(
        camera.width, camera.height, tiles_x, tiles_y,
        cache.sorted_slots, cache.tile_offsets,
        batch.indices, batch.mean2d, batch.conic,
        batch.radius.astype(np.float64), batch.opacities,
        np.ascontiguousarray(cache.colors), np.ascontiguousarray(cache.probs),
        cache.background, output.alpha, output.last_contributor,
        d_rgb, d_semantic,
        grad_color, grad_probs, grad_opac, grad_mean2d, grad_conic,
    )

    idx = batch.indices

    # Semantic logits: back through the per-Gaussian softmax.
    dot = np.sum(grad_probs * cache.probs, axis=1, keepdims=True)
    bufs.semantic_logits[idx] = cache.probs * (grad_probs - dot)

    # Opacity logits: back through the logistic.
    o = batch.opacities
    bufs.opacity_logits[idx] = grad_opac * o * (1.0 - o)

    # Conic -> dilated 2D covariance (d(A^-1) = -A^-1 dA A^-1).
    Q = np.empty((v, 2, 2))
    Q[:, 0, 0] = batch.conic[:, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = batch.conic[:, 1]
    Q[:, 1, 1] = batch.conic[:, 2]
    G = np.empty((v, 2, 2))
    G[:, 0, 0] = grad_conic[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * grad_conic[:, 1]
    G[:, 1, 1] = grad_conic[:, 2]
    d_cov2d = -Q @ G @ Q  # dilation is additive: same gradient for Sigma'

    # Sigma' = M Sigma M^T with M = J R.
    quats = normalize_quaternions(gs.rotations[idx])
    R3 = quaternion_to_rotation(quats)
    scales = np.exp(gs.log_scales[idx])
    M3 = R3 * scales[:, None, :]
    cov3d = M3 @ np.swapaxes(M3, 1, 2)

    p = batch.p_cam
    tz = p[:, 2]
    tanx, tany = camera.tan_half_fov
    ux = p[:, 0] / tz
    uy = p[:, 1] / tz
    limx, limy = FRUSTUM_CLAMP * tanx, FRUSTUM_CLAMP * tany
    mulx = (np.abs(ux) <= limx).astype(np.float64)
    muly = (np.abs(uy) <= limy).astype(np.float64)
    ux_cl = np.clip(ux, -limx, limx)
    uy_cl = np.clip(uy, -limy, limy)
    J = np.zeros((v, 2, 3))
    J[:, 0, 0] = camera.fx / tz
    J[:, 0, 2] = -camera.fx * ux_cl / tz
    J[:, 1, 1] = camera.fy / tz
    J[:, 1, 2] = -camera.fy * uy_cl / tz

    Rcw = camera.rotation
    M = J @ Rcw
    d_M = 2.0 * d_cov2d @ M @ cov3d
    d_cov3d = np.swapaxes(M, 1, 2) @ d_cov2d @ M
    d_J = d_M @ Rcw.T

    # 3D covariance -> scales and rotation via M3 = R diag(s).
    d_M3 = 2.0 * d_cov3d @ M3
    bufs.log_scales[idx] = np.einsum("vak,vak->vk", d_M3, R3) * scales
    d_R3 = d_M3 * scales[:, None, :]
    dRdq = _quaternion_rotation_jacobian(quats)
    d_qhat = np.einsum("vab,vkab->vk", d_R3, dRdq)
    qnorm = np.linalg.norm(gs.rotations[idx], axis=1, keepdims=True)
    bufs.rotations[idx] = (d_qhat - np.sum(d_qhat * quats, axis=1, keepdims=True) * quats) / qnorm

    # Camera-space point gradient: projection Jacobian of the mean (unclamped)
    # plus the dependence of J itself on the point.
    fx, fy = camera.fx, camera.fy
    d_t = np.zeros((v, 3))
    d_t[:, 0] = grad_mean2d[:, 0] * fx / tz + d_J[:, 0, 2] * (-fx * mulx / tz**2)
    d_t[:, 1] = grad_mean2d[:, 1] * fy / tz + d_J[:, 1, 2] * (-fy * muly / tz**2)
    d_t[:, 2] = (
        -grad_mean2d[:, 0] * fx * p[:, 0] / tz**2
        - grad_mean2d[:, 1] * fy * p[:, 1] / tz**2
        + d_J[:, 0, 0] * (-fx / tz**2)
        + d_J[:, 1, 1] * (-fy / tz**2)
        + d_J[:, 0, 2] * (fx * ux_cl / tz**2 + fx * mulx * p[:, 0] / tz**3)
        + d_J[:, 1, 2] * (fy * uy_cl / tz**2 + fy * muly * p[:, 1] / tz**3)
    )
    d_pos = d_t @ Rcw

    # SH: color = clamp(basis . coeffs + 0.5); clamped channels pass nothing.
    gc = np.where(cache.color_clamped, 0.0, grad_color)
    bufs.sh_coeffs[idx, :, : cache.basis.shape[1]] = gc[:, :, None] * cache.basis[:, None, :]
    basis_jac = sh.eval_basis_jacobian(cache.view_dirs, cache.active_degree)
    coeffs = gs.sh_coeffs[idx, :, : cache.basis.shape[1]]
    d_dir = np.einsum("vc,vcb,vbk->vk", gc, coeffs, basis_jac)
    # dir = u / |u|: project out the radial component.
    radial = np.sum(d_dir * cache.view_dirs, axis=1, keepdims=True)
    d_pos += (d_dir - radial * cache.view_dirs) / cache.view_dists[:, None]

    bufs.positions[idx] = d_pos
    bufs.mean2d_grad_norm[idx] = np.linalg.norm(grad_mean2d, axis=1)
    bufs.hits[idx] = 1
    return bufs


def render_label_map(output: RenderOutput, ignore_label: int = 255) -> np.ndarray:
    """Per-pixel argmax class ids; low-coverage pixels map to the ignore label.

    Ties resolve to the lowest class id; pixels with alpha < 0.5 are treated
    as unobserved.
    """
    labels = np.argmax(output.semantic, axis=2).astype(np.int64)
    labels[output.alpha < 0.5] = ignore_label
    return labels
