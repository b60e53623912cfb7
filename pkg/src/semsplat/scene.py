"""Optimizable scene state: the Gaussian set and its parameterizations.

Raw optimizer variables (log scales, quaternions, opacity logits, class
logits) are mapped here to the geometric and appearance quantities the
renderer consumes.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import sh
from .exceptions import InsufficientDataError, InvalidParameterError

# Smallest allowed axis scale, as a fraction of the scene extent. Prevents
# covariances from collapsing to singular during optimization.
SCALE_FLOOR_FRACTION = 1e-7

INIT_OPACITY = 0.1


@dataclass(frozen=True)
class ClassTable:
    """Dense class-id -> name mapping with a reserved ignore label."""

    names: tuple[str, ...]
    ignore_label: int = 255

    def __post_init__(self):
        if len(self.names) == 0:
            raise InvalidParameterError("class table must contain at least one class")
        if 0 <= self.ignore_label < len(self.names):
            raise InvalidParameterError(
                f"ignore label {self.ignore_label} collides with class ids 0..{len(self.names) - 1}"
            )

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(
                f"unknown class {name!r}; available: {', '.join(self.names)}"
            ) from None

    @classmethod
    def load(cls, path) -> "ClassTable":
        """Read a class-table file of lines ``id<TAB>name``."""
        entries = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                try:
                    id_text, name = line.split("\t", 1)
                    cid = int(id_text)
                except ValueError:
                    raise InvalidParameterError(
                        f"{path}:{lineno}: expected 'id<TAB>name', got {line!r}"
                    ) from None
                entries[cid] = name
        if sorted(entries) != list(range(len(entries))):
            raise InvalidParameterError(
                f"{path}: class ids must be dense 0..C-1, got {sorted(entries)}"
            )
        return cls(names=tuple(entries[i] for i in range(len(entries))))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for cid, name in enumerate(self.names):
                fh.write(f"{cid}\t{name}\n")


@dataclass
class GaussianSet:
    """Structure-of-arrays scene state.

    positions:       (N, 3) world coordinates
    rotations:       (N, 4) unit quaternions (w, x, y, z)
    log_scales:      (N, 3) log axis scales
    opacity_logits:  (N,)   raw opacities, mapped through the logistic
    sh_coeffs:       (N, 3, (D+1)^2) SH color coefficients
    semantic_logits: (N, C) raw class scores
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    semantic_logits: np.ndarray
    active_sh_degree: int = 0

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def num_classes(self) -> int:
        return self.semantic_logits.shape[1]

    @property
    def max_sh_degree(self) -> int:
        return sh.degree_for_coeffs(self.sh_coeffs.shape[2])

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        """Name -> array view of every optimizable parameter group."""
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "sh_coeffs": self.sh_coeffs,
            "semantic_logits": self.semantic_logits,
        }

    def validate(self) -> None:
        n = self.count
        shapes = {
            "positions": (n, 3),
            "rotations": (n, 4),
            "log_scales": (n, 3),
            "opacity_logits": (n,),
            "semantic_logits": (n, self.num_classes),
        }
        for name, expected in shapes.items():
            arr = getattr(self, name)
            if arr.shape != expected:
                raise InvalidParameterError(f"{name} has shape {arr.shape}, expected {expected}")
        if self.sh_coeffs.shape[:2] != (n, 3):
            raise InvalidParameterError(f"sh_coeffs has shape {self.sh_coeffs.shape}")
        sh.degree_for_coeffs(self.sh_coeffs.shape[2])
        for name, arr in self.parameter_arrays().items():
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"{name} contains non-finite values")
        norms = np.linalg.norm(self.rotations, axis=1)
        if n and not np.allclose(norms, 1.0, atol=1e-6):
            raise InvalidParameterError("rotations are not unit quaternions")

    def take(self, index) -> "GaussianSet":
        """New set keeping only the rows selected by a mask or index array."""
        return GaussianSet(
            positions=self.positions[index].copy(),
            rotations=self.rotations[index].copy(),
            log_scales=self.log_scales[index].copy(),
            opacity_logits=self.opacity_logits[index].copy(),
            sh_coeffs=self.sh_coeffs[index].copy(),
            semantic_logits=self.semantic_logits[index].copy(),
            active_sh_degree=self.active_sh_degree,
        )

    def copy(self) -> "GaussianSet":
        return self.take(slice(None))

    @classmethod
    def empty(cls, num_classes: int, sh_degree: int = 0) -> "GaussianSet":
        b = sh.num_coeffs(sh_degree)
        return cls(
            positions=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            log_scales=np.zeros((0, 3)),
            opacity_logits=np.zeros(0),
            sh_coeffs=np.zeros((0, 3, b)),
            semantic_logits=np.zeros((0, num_classes)),
        )


def quaternion_to_rotation(quats: np.ndarray) -> np.ndarray:
    """(..., 4) unit quaternions (w,x,y,z) -> (..., 3, 3) rotation matrices."""
    q = np.asarray(quats, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def normalize_quaternions(quats: np.ndarray) -> np.ndarray:
    q = np.asarray(quats, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def covariance_3d(log_scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """3D covariance Sigma = R S S^T R^T from log scales and a quaternion.

    Accepts single parameters (shape (3,), (4,)) or batches ((N,3), (N,4)).
    The quaternion is renormalized internally; its norm must already be
    within 1e-3 of one.
    """
    ls = np.asarray(log_scale, dtype=np.float64)
    q = np.asarray(rotation, dtype=np.float64)
    if not (np.all(np.isfinite(ls)) and np.all(np.isfinite(q))):
        raise InvalidParameterError("covariance_3d: non-finite input")
    norms = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise InvalidParameterError("covariance_3d: quaternion norm deviates from 1 by more than 1e-3")
    R = quaternion_to_rotation(q / norms[..., None])
    s = np.exp(ls)
    M = R * s[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def opacity(logit) -> np.ndarray:
    """Logistic map from raw logit to opacity in (0, 1)."""
    x = np.asarray(logit, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def opacity_inverse(value) -> np.ndarray:
    """Logit producing the given opacity: log(p / (1-p))."""
    p = np.asarray(value, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def class_probs(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, stabilized by max subtraction."""
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidParameterError("class_probs: non-finite logits")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sh_to_rgb(sh_coeffs: np.ndarray, view_dir: np.ndarray, degree: int) -> np.ndarray:
    """Color from SH coefficients at a unit view direction.

    sh_coeffs: (3, B) with B >= (degree+1)^2. Returns a length-3 RGB vector,
    offset by +0.5 and clamped at 0 from below.
    """
    coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    stored_degree = sh.degree_for_coeffs(coeffs.shape[-1])
    if degree > stored_degree:
        raise InvalidParameterError(
            f"requested SH degree {degree} exceeds stored degree {stored_degree}"
        )
    basis = sh.eval_basis(view_dir, degree)[0]
    rgb = coeffs[..., : basis.shape[0]] @ basis + 0.5
    return np.maximum(rgb, 0.0)


def rgb_to_sh_dc(rgb: np.ndarray) -> np.ndarray:
    """DC coefficients reproducing the given color at any view direction."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / sh.C0


def mean_knn_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance from each point to its k nearest neighbors (exclusive).

    A KD-tree gives exact results at any scale, so one code path serves both
    small and large clouds.
    """
    pts = np.asarray(points, dtype=np.float64)
    tree = cKDTree(pts)
    dist, _ = tree.query(pts, k=k + 1)
    return dist[:, 1:].mean(axis=1)


def init_from_points(
    points: np.ndarray,
    colors: np.ndarray,
    num_classes: int,
    sh_degree: int = 3,
) -> GaussianSet:
    """Seed one Gaussian per sparse point.

    points: (N, 3) positions; colors: (N, 3) RGB in [0, 1]. Scales are set
    isotropically to the log mean distance to the 3 nearest neighbors,
    rotations to identity, opacity to 0.1, the SH DC band from the color,
    and semantic logits to zero (uniform class belief).
    """
    pts = np.asarray(points, dtype=np.float64)
    cols = np.asarray(colors, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or cols.shape != pts.shape:
        raise InvalidParameterError("init_from_points: points and colors must both be (N, 3)")
    if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(cols))):
        raise InvalidParameterError("init_from_points: non-finite input")
    n = pts.shape[0]
    if n < 4:
        raise InsufficientDataError(f"need at least 4 points to initialize, got {n}")

    extent = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    floor = np.log(SCALE_FLOOR_FRACTION * extent) if extent > 0 else -np.inf
    log_scales = np.log(np.maximum(mean_knn_distance(pts), 1e-300))
    log_scales = np.maximum(log_scales, floor)

    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0

    coeffs = np.zeros((n, 3, sh.num_coeffs(sh_degree)))
    coeffs[:, :, 0] = rgb_to_sh_dc(cols)

    return GaussianSet(
        positions=pts.copy(),
        rotations=rotations,
        log_scales=np.repeat(log_scales[:, None], 3, axis=1),
        opacity_logits=np.full(n, opacity_inverse(INIT_OPACITY)),
        sh_coeffs=coeffs,
        semantic_logits=np.zeros((n, num_classes)),
    )
