"""Evaluation metrics: PSNR, windowed SSIM, and mIoU.

SSIM uses the 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03 and unit
dynamic range, computed per channel and averaged; borders are handled by
valid-window cropping. The same windowed statistics also power the D-SSIM
training loss, which needs the analytic gradient.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .exceptions import InvalidParameterError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 100.0

_radius = SSIM_WINDOW // 2
_offsets = np.arange(-_radius, _radius + 1, dtype=np.float64)
_KERNEL_1D = np.exp(-(_offsets**2) / (2.0 * SSIM_SIGMA**2))
_KERNEL_1D /= _KERNEL_1D.sum()


def psnr(render: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over all pixel-channels.

    Identical images return the 100 dB cap.
    """
    if render.shape != target.shape:
        raise InvalidParameterError(f"shape mismatch: {render.shape} vs {target.shape}")
    mse = float(np.mean((np.asarray(render, dtype=np.float64) - target) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _window_mean(img: np.ndarray) -> np.ndarray:
    """Windowed weighted mean at every fully-interior pixel ((H-10, W-10))."""
    out = correlate1d(img, _KERNEL_1D, axis=0, mode="constant")
    out = correlate1d(out, _KERNEL_1D, axis=1, mode="constant")
    return out[_radius:-_radius, _radius:-_radius]


def _window_scatter(valid_map: np.ndarray, shape) -> np.ndarray:
    """Adjoint of _window_mean: spread valid-grid values back onto the image."""
    full = np.zeros(shape, dtype=np.float64)
    full[_radius:-_radius, _radius:-_radius] = valid_map
    full = correlate1d(full, _KERNEL_1D, axis=0, mode="constant")
    return correlate1d(full, _KERNEL_1D, axis=1, mode="constant")


def _as_channels(img: np.ndarray) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a[:, :, None]
    if a.ndim == 3:
        return a
    raise InvalidParameterError(f"expected HxW or HxWxC image, got shape {a.shape}")


def ssim_with_gradient(render: np.ndarray, target: np.ndarray):
    """SSIM value plus d(SSIM)/d(render), same shape as render."""
    x3 = _as_channels(render)
    y3 = _as_channels(target)
    if x3.shape != y3.shape:
        raise InvalidParameterError(f"shape mismatch: {x3.shape} vs {y3.shape}")
    h, w, channels = x3.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise InvalidParameterError(
            f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    grad = np.zeros_like(x3)
    total = 0.0
    valid_count = (h - 2 * _radius) * (w - 2 * _radius)
    for ch in range(channels):
        x, y = x3[:, :, ch], y3[:, :, ch]
        mu_x = _window_mean(x)
        mu_y = _window_mean(y)
        sxx = _window_mean(x * x)
        syy = _window_mean(y * y)
        sxy = _window_mean(x * y)
        var_x = sxx - mu_x * mu_x
        var_y = syy - mu_y * mu_y
        cov = sxy - mu_x * mu_y
        a1 = 2 * mu_x * mu_y + c1
        a2 = 2 * cov + c2
        b1 = mu_x * mu_x + mu_y * mu_y + c1
        b2 = var_x + var_y + c2
        ssim_map = (a1 * a2) / (b1 * b2)
        total += float(ssim_map.mean())

        d_mu = 2 * mu_y * (a2 - a1) / (b1 * b2) - 2 * mu_x * ssim_map * (1 / b1 - 1 / b2)
        d_sxx = -ssim_map / b2
        d_sxy = 2 * a1 / (b1 * b2)
        grad[:, :, ch] = (
            _window_scatter(d_mu, (h, w))
            + 2 * x * _window_scatter(d_sxx, (h, w))
            + y * _window_scatter(d_sxy, (h, w))
        ) / valid_count
    value = total / channels
    grad /= channels
    if np.asarray(render).ndim == 2:
        return value, grad[:, :, 0]
    return value, grad


def ssim(render: np.ndarray, target: np.ndarray) -> float:
    value, _ = ssim_with_gradient(render, target)
    return value


def miou(
    pred_labels: np.ndarray,
    gt_labels: np.ndarray,
    num_classes: int,
    ignore_label: int = 255,
    strict: bool = False,
):
    """Per-class IoU and their mean from two label maps.

    Only pixels with a real ground-truth label count. By default classes
    absent from both prediction and ground truth are excluded from the mean;
    strict=True averages over all classes, scoring absent ones 0.
    """
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise InvalidParameterError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    valid = gt != ignore_label
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    # Out-of-range predictions (including the ignore label) fall into a spill
    # bin: never a true positive, never a false positive for a real class.
    p = np.where((p >= 0) & (p < num_classes), p, num_classes)
    conf = np.bincount(
        g * (num_classes + 1) + p, minlength=num_classes * (num_classes + 1)
    ).reshape(num_classes, num_classes + 1)

    tp = np.diagonal(conf[:, :num_classes]).astype(np.float64)
    fn = conf.sum(axis=1) - tp
    fp = conf[:, :num_classes].sum(axis=0) - tp
    denom = tp + fp + fn
    present = denom > 0
    iou = np.zeros(num_classes, dtype=np.float64)
    iou[present] = tp[present] / denom[present]
    if strict:
        mean = float(iou.mean()) if num_classes else 0.0
    else:
        mean = float(iou[present].mean()) if present.any() else 0.0
    per_class = {c: (float(iou[c]) if present[c] else None) for c in range(num_classes)}
    return per_class, mean


@dataclass
class EvalReport:
    """Per-frame image quality plus segmentation IoU for a dataset split."""

    frame_names: list[str] = field(default_factory=list)
    psnr_values: list[float] = field(default_factory=list)
    ssim_values: list[float] = field(default_factory=list)
    per_class_iou: dict[int, float | None] = field(default_factory=dict)
    miou: float = 0.0
    class_names: list[str] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values)) if self.psnr_values else 0.0

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values)) if self.ssim_values else 0.0

    def to_table(self) -> str:
        lines = [f"{'frame':<28} {'psnr':>8} {'ssim':>8}"]
        for name, p, s in zip(self.frame_names, self.psnr_values, self.ssim_values):
            lines.append(f"{name:<28} {p:>8.3f} {s:>8.4f}")
        lines.append(f"{'mean':<28} {self.mean_psnr:>8.3f} {self.mean_ssim:>8.4f}")
        lines.append("")
        lines.append(f"{'class':<28} {'iou':>8}")
        for cid, value in sorted(self.per_class_iou.items()):
            name = self.class_names[cid] if cid < len(self.class_names) else str(cid)
            text = "absent" if value is None else f"{value:.4f}"
            lines.append(f"{name:<28} {text:>8}")
        lines.append(f"{'miou':<28} {self.miou:>8.4f}")
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        lines = []
        for name, p, s in zip(self.frame_names, self.psnr_values, self.ssim_values):
            lines.append(f"psnr.{name} = {p!r}")
            lines.append(f"ssim.{name} = {s!r}")
        lines.append(f"mean.psnr = {self.mean_psnr!r}")
        lines.append(f"mean.ssim = {self.mean_ssim!r}")
        for cid, value in sorted(self.per_class_iou.items()):
            lines.append(f"iou.{cid} = {'absent' if value is None else repr(value)}")
        lines.append(f"miou = {self.miou!r}")
        return "\n".join(lines) + "\n"
