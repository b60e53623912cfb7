"""Training objective: L1 + D-SSIM photometric terms and the semantic
cross-entropy term, each returning the gradient image fed to the rasterizer
backward pass."""

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidParameterError
from .metrics import ssim_with_gradient

CE_EPS = 1e-8

DEFAULT_LAMBDA_SSIM = 0.2
DEFAULT_LAMBDA_SEM = 1.0


@dataclass
class LossReport:
    l1: float
    dssim: float
    ce: float
    total: float
    d_rgb: np.ndarray  # (H, W, 3) gradient of total w.r.t. the rendered rgb
    d_semantic: np.ndarray  # (H, W, C) gradient of total w.r.t. the semantic image


def l1_photometric(render: np.ndarray, target: np.ndarray):
    """Mean absolute difference over pixel-channels, with its gradient."""
    if render.shape != target.shape:
        raise InvalidParameterError(f"shape mismatch: {render.shape} vs {target.shape}")
    diff = render - target
    grad = np.sign(diff) / diff.size
    return float(np.abs(diff).mean()), grad


def dssim(render: np.ndarray, target: np.ndarray):
    """Structural dissimilarity (1 - SSIM) / 2 and its analytic gradient."""
    value, grad = ssim_with_gradient(render, target)
    return (1.0 - value) / 2.0, -grad / 2.0


def semantic_ce(
    semantic: np.ndarray,
    alpha: np.ndarray,
    mask: np.ndarray,
    ignore_label: int = 255,
):
    """Cross entropy between normalized splatted class mass and mask labels.

    Per supervised pixel the prediction is
    s_hat = (semantic + eps) / (sum_c semantic_c + C*eps); pixels labeled
    with the ignore label contribute neither loss nor gradient. Returns the
    mean over supervised pixels and d(total)/d(semantic image).
    """
    h, w, c = semantic.shape
    if mask.shape != (h, w) or alpha.shape != (h, w):
        raise InvalidParameterError("semantic, alpha, and mask shapes are inconsistent")
    supervised = mask != ignore_label
    d_semantic = np.zeros_like(semantic)
    m = int(supervised.sum())
    if m == 0:
        return 0.0, d_semantic

    labels = mask[supervised].astype(np.int64)
    if labels.min() < 0 or labels.max() >= c:
        raise InvalidParameterError(
            f"mask labels outside 0..{c - 1} (found {labels.min()}..{labels.max()})"
        )
    sem = semantic[supervised]  # (M, C)
    denom = sem.sum(axis=1) + c * CE_EPS
    picked = sem[np.arange(m), labels] + CE_EPS
    loss = float(np.mean(np.log(denom) - np.log(picked)))

    grad = np.empty_like(sem)
    grad[:] = (1.0 / denom / m)[:, None]
    grad[np.arange(m), labels] -= 1.0 / picked / m
    d_semantic[supervised] = grad
    return loss, d_semantic


@dataclass
class LossWeights:
    lambda_ssim: float = DEFAULT_LAMBDA_SSIM
    lambda_sem: float = DEFAULT_LAMBDA_SEM


def total_loss(render_output, frame, weights: LossWeights | None = None) -> LossReport:
    """Combine the photometric and semantic terms for one observation.

    total = (1 - lambda_ssim) * L1 + lambda_ssim * DSSIM + lambda_sem * CE.
    """
    weights = weights or LossWeights()
    l1, d_l1 = l1_photometric(render_output.rgb, frame.rgb)
    ds, d_ds = dssim(render_output.rgb, frame.rgb)
    ce, d_ce = semantic_ce(
        render_output.semantic, render_output.alpha, frame.mask, frame.ignore_label
    )
    lam_s, lam_c = weights.lambda_ssim, weights.lambda_sem
    return LossReport(
        l1=l1,
        dssim=ds,
        ce=ce,
        total=(1.0 - lam_s) * l1 + lam_s * ds + lam_c * ce,
        d_rgb=(1.0 - lam_s) * d_l1 + lam_s * d_ds,
        d_semantic=lam_c * d_ce,
    )
