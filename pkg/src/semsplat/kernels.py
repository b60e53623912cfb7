"""Compiled per-pixel kernels for the tile rasterizer.

Tiles are traversed in a fixed order and each tile owns a disjoint pixel
block, so both kernels are bit-reproducible. The backward kernel re-walks
each pixel's blend back-to-front, reconstructing intermediate transmittances
from the stored final alpha instead of keeping per-pixel weights.
"""

import math

import numba
import numpy as np

TILE = 16
ALPHA_MAX = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_STOP = 1e-4


@numba.njit(cache=True, nogil=True)
def fill_tile_pairs(tile_range, tiles_x, pair_tile, pair_slot):
    """Expand per-Gaussian tile rectangles into (tile_id, slot) pairs."""
    n = 0
    for s in range(tile_range.shape[0]):
        tx0, ty0, tx1, ty1 = tile_range[s, 0], tile_range[s, 1], tile_range[s, 2], tile_range[s, 3]
        for ty in range(ty0, ty1):
            for tx in range(tx0, tx1):
                pair_tile[n] = ty * tiles_x + tx
                pair_slot[n] = s
                n += 1
    return n


@numba.njit(cache=True, nogil=True)
def forward_kernel(
    width,
    height,
    tiles_x,
    tiles_y,
    sorted_slots,
    tile_offsets,
    gid,
    mean2d,
    conic,
    radius,
    opac,
    color,
    probs,
    background,
    out_rgb,
    out_sem,
    out_alpha,
    out_last,
):
    num_classes = probs.shape[1]
    for tile in range(tiles_x * tiles_y):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        y_end = min((ty + 1) * TILE, height)
        x_end = min((tx + 1) * TILE, width)
        k0 = tile_offsets[tile]
        k1 = tile_offsets[tile + 1]
        for py in range(ty * TILE, y_end):
            for px in range(tx * TILE, x_end):
                T = 1.0
                last = np.int64(-1)
                for k in range(k0, k1):
                    s = sorted_slots[k]
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    r = radius[s]
                    if dx > r or dx < -r or dy > r or dy < -r:
                        continue
                    power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
                    a = opac[s] * math.exp(power)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if a < ALPHA_SKIP:
                        continue
                    w = T * a
                    out_rgb[py, px, 0] += w * color[s, 0]
                    out_rgb[py, px, 1] += w * color[s, 1]
                    out_rgb[py, px, 2] += w * color[s, 2]
                    for c in range(num_classes):
                        out_sem[py, px, c] += w * probs[s, c]
                    T *= 1.0 - a
                    last = gid[s]
                    if T < T_STOP:
                        break
                out_rgb[py, px, 0] += T * background[0]
                out_rgb[py, px, 1] += T * background[1]
                out_rgb[py, px, 2] += T * background[2]
                out_alpha[py, px] = 1.0 - T
                out_last[py, px] = last


@numba.njit(cache=True, nogil=True)
def backward_kernel(
    width,
    height,
    tiles_x,
    tiles_y,
    sorted_slots,
    tile_offsets,
    gid,
    mean2d,
    conic,
    radius,
    opac,
    color,
    probs,
    background,
    out_alpha,
    out_last,
    d_rgb,
    d_sem,
    grad_color,
    grad_probs,
    grad_opac,
    grad_mean2d,
    grad_conic,
):
    """Accumulate screen-space gradients per visible Gaussian.

    grad_opac is w.r.t. the activated opacity, grad_mean2d w.r.t. the pixel
    mean, grad_conic w.r.t. the packed conic (xx, xy-pair, yy). Chaining to
    the raw scene parameters happens vectorized outside the kernel.
    """
    num_classes = probs.shape[1]
    behind_sem = np.empty(num_classes, dtype=np.float64)
    for tile in range(tiles_x * tiles_y):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        y_end = min((ty + 1) * TILE, height)
        x_end = min((tx + 1) * TILE, width)
        k0 = tile_offsets[tile]
        k1 = tile_offsets[tile + 1]
        for py in range(ty * TILE, y_end):
            for px in range(tx * TILE, x_end):
                last = out_last[py, px]
                if last < 0:
                    continue
                T_after = 1.0 - out_alpha[py, px]
                behind_r = background[0]
                behind_g = background[1]
                behind_b = background[2]
                for c in range(num_classes):
                    behind_sem[c] = 0.0
                dr = d_rgb[py, px, 0]
                dg = d_rgb[py, px, 1]
                db = d_rgb[py, px, 2]
                active = False
                for k in range(k1 - 1, k0 - 1, -1):
                    s = sorted_slots[k]
                    if not active:
                        if gid[s] != last:
                            continue
                        active = True
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    r = radius[s]
                    if dx > r or dx < -r or dy > r or dy < -r:
                        continue
                    power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
                    g = math.exp(power)
                    a = opac[s] * g
                    clamped = a > ALPHA_MAX
                    if clamped:
                        a = ALPHA_MAX
                    if a < ALPHA_SKIP:
                        continue
                    T_i = T_after / (1.0 - a)
                    w = T_i * a

                    dL_da = dr * T_i * (color[s, 0] - behind_r)
                    dL_da += dg * T_i * (color[s, 1] - behind_g)
                    dL_da += db * T_i * (color[s, 2] - behind_b)
                    grad_color[s, 0] += w * dr
                    grad_color[s, 1] += w * dg
                    grad_color[s, 2] += w * db
                    for c in range(num_classes):
                        ds = d_sem[py, px, c]
                        dL_da += ds * T_i * (probs[s, c] - behind_sem[c])
                        grad_probs[s, c] += w * ds

                    if not clamped:
                        grad_opac[s] += g * dL_da
                        da = a * dL_da
                        qx = conic[s, 0] * dx + conic[s, 1] * dy
                        qy = conic[s, 1] * dx + conic[s, 2] * dy
                        grad_mean2d[s, 0] += da * qx
                        grad_mean2d[s, 1] += da * qy
                        grad_conic[s, 0] += da * (-0.5 * dx * dx)
                        grad_conic[s, 1] += da * (-dx * dy)
                        grad_conic[s, 2] += da * (-0.5 * dy * dy)

                    behind_r = a * color[s, 0] + (1.0 - a) * behind_r
                    behind_g = a * color[s, 1] + (1.0 - a) * behind_g
                    behind_b = a * color[s, 2] + (1.0 - a) * behind_b
                    for c in range(num_classes):
                        behind_sem[c] = a * probs[s, c] + (1.0 - a) * behind_sem[c]
                    T_after = T_i
