"""Training loop: adaptive per-group updates plus the densify / clone /
split / prune / opacity-reset schedule that grows the Gaussian set."""

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataset import DatasetSplit
from .edit import export_ply
from .exceptions import DataError, InvalidStateError, NumericalError
from .losses import LossReport, LossWeights, total_loss
from .raster import GradientBuffers, rasterize_forward, rasterize_backward
from .scene import (
    SCALE_FLOOR_FRACTION,
    ClassTable,
    GaussianSet,
    covariance_3d,
    normalize_quaternions,
    opacity,
    opacity_inverse,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


@dataclass
class TrainConfig:
    iterations: int = 30_000
    position_lr_init: float = 1.6e-4  # scaled by scene extent
    position_lr_final: float = 1.6e-6
    sh_dc_lr: float = 2.5e-3
    sh_rest_lr: float = 1.25e-4
    opacity_lr: float = 5e-2
    scale_lr: float = 5e-3
    rotation_lr: float = 1e-3
    semantic_lr: float = 2.5e-2
    densify_interval: int = 100
    densify_start: int = 500
    densify_stop: int = 15_000
    densify_grad_threshold: float = 2e-4  # tau_pos
    densify_clone_scale_fraction: float = 0.01
    split_scale_factor: float = 1.6
    prune_opacity: float = 0.005
    prune_scale_fraction: float = 0.1
    opacity_reset_interval: int = 3_000
    opacity_reset_value: float = 0.01
    sh_degree: int = 3
    sh_degree_up_interval: int = 1_000
    lambda_ssim: float = 0.2
    lambda_sem: float = 1.0
    seed: int = 0
    checkpoint_interval: int = 1_000  # 0 disables periodic checkpoints
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("densify_interval", "opacity_reset_interval", "sh_degree_up_interval"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")
        for name in ("densify_grad_threshold", "prune_opacity"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")

    def replace(self, **overrides) -> "TrainConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(overrides)
        return TrainConfig(**values)


_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs", "semantic_logits")


@dataclass
class OptimState:
    """Adam moments per parameter group plus densification statistics."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    grad_norm_accum: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hit_count: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    skipped_nonfinite: int = 0

    @classmethod
    def for_set(cls, gs: GaussianSet) -> "OptimState":
        return cls(
            m={g: np.zeros_like(getattr(gs, g)) for g in _GROUPS},
            v={g: np.zeros_like(getattr(gs, g)) for g in _GROUPS},
            grad_norm_accum=np.zeros(gs.count),
            hit_count=np.zeros(gs.count, dtype=np.int64),
        )

    def check_lockstep(self, gs: GaussianSet) -> None:
        for g in _GROUPS:
            if self.m[g].shape != getattr(gs, g).shape:
                raise InvalidStateError(
                    f"optimizer state for {g} has shape {self.m[g].shape}, "
                    f"scene expects {getattr(gs, g).shape}"
                )
        if self.grad_norm_accum.shape[0] != gs.count:
            raise InvalidStateError("densification statistics out of sync with the scene")


def position_lr(config: TrainConfig, step: int, scene_extent: float) -> float:
    """Exponential decay from lr_init to lr_final over the run."""
    t = min(max(step, 0), config.iterations) / max(config.iterations, 1)
    lr = config.position_lr_init * (config.position_lr_final / config.position_lr_init) ** t
    return lr * scene_extent


def _group_lrs(config: TrainConfig, step: int, scene_extent: float) -> dict[str, float | np.ndarray]:
    return {
        "positions": position_lr(config, step, scene_extent),
        "rotations": config.rotation_lr,
        "log_scales": config.scale_lr,
        "opacity_logits": config.opacity_lr,
        "sh_coeffs": None,  # handled per band below
        "semantic_logits": config.semantic_lr,
    }


def optimizer_step(
    gs: GaussianSet,
    grads: GradientBuffers,
    state: OptimState,
    config: TrainConfig,
    scene_extent: float,
) -> None:
    """One Adam update over every parameter group, in place.

    Non-finite gradient entries are skipped (left untouched) and counted.
    Quaternions are renormalized and log scales floored afterwards.
    """
    state.check_lockstep(gs)
    state.step += 1
    t = state.step
    bias1 = 1.0 - ADAM_BETA1**t
    bias2 = 1.0 - ADAM_BETA2**t
    lrs = _group_lrs(config, t, scene_extent)

    for group in _GROUPS:
        param = getattr(gs, group)
        grad = getattr(grads, group)
        finite = np.isfinite(grad)
        all_finite = bool(finite.all())
        if not all_finite:
            state.skipped_nonfinite += int(np.size(grad) - finite.sum())
            grad = np.where(finite, grad, 0.0)
        m = state.m[group]
        v = state.v[group]
        new_m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
        new_v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad * grad
        if all_finite:
            m[:], v[:] = new_m, new_v
        else:  # skipped entries keep their moments untouched
            m[:] = np.where(finite, new_m, m)
            v[:] = np.where(finite, new_v, v)
        update = (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
        if not all_finite:
            update = np.where(finite, update, 0.0)
        if group == "sh_coeffs":
            param[:, :, 0] -= config.sh_dc_lr * update[:, :, 0]
            if param.shape[2] > 1:
                param[:, :, 1:] -= config.sh_rest_lr * update[:, :, 1:]
        else:
            param -= lrs[group] * update

    gs.rotations[:] = normalize_quaternions(gs.rotations)
    if scene_extent > 0:
        gs.log_scales[:] = np.maximum(gs.log_scales, np.log(SCALE_FLOOR_FRACTION * scene_extent))


def accumulate_densify_stats(state: OptimState, grads: GradientBuffers) -> None:
    state.grad_norm_accum += grads.mean2d_grad_norm
    state.hit_count += grads.hits


def _append_rows(state: OptimState, count: int) -> None:
    for g in _GROUPS:
        extra_shape = (count,) + state.m[g].shape[1:]
        state.m[g] = np.concatenate([state.m[g], np.zeros(extra_shape)])
        state.v[g] = np.concatenate([state.v[g], np.zeros(extra_shape)])
    state.grad_norm_accum = np.concatenate([state.grad_norm_accum, np.zeros(count)])
    state.hit_count = np.concatenate([state.hit_count, np.zeros(count, dtype=np.int64)])


def _filter_rows(state: OptimState, keep: np.ndarray) -> None:
    for g in _GROUPS:
        state.m[g] = state.m[g][keep]
        state.v[g] = state.v[g][keep]
    state.grad_norm_accum = state.grad_norm_accum[keep]
    state.hit_count = state.hit_count[keep]


def _sample_within(gs: GaussianSet, rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sample offsets from the selected Gaussians' own distributions."""
    cov = covariance_3d(gs.log_scales[rows], normalize_quaternions(gs.rotations[rows]))
    eps = rng.standard_normal((len(rows), 3))
    chol = np.linalg.cholesky(cov + 1e-12 * np.eye(3))
    return np.einsum("nij,nj->ni", chol, eps)


def densify_and_prune(
    gs: GaussianSet,
    state: OptimState,
    config: TrainConfig,
    scene_extent: float,
    rng: np.random.Generator,
    prune_world_radius: bool = True,
) -> GaussianSet:
    """Clone/split high-gradient Gaussians, then prune weak or bloated ones.

    Clone when the Gaussian is small (copy shifted by an offset sampled from
    its own distribution), split otherwise (two children at sampled
    positions with scales shrunk by the split factor, parent removed).
    Children inherit semantic logits verbatim. Returns the new set; the
    optimizer state is updated in lockstep and the statistics reset.

    prune_world_radius toggles the world-radius rule; the training loop
    enables it only once the first opacity reset has passed, so that
    freshly initialized large Gaussians get a chance to shrink first.
    """
    state.check_lockstep(gs)
    denom = np.maximum(state.hit_count, 1)
    mean_grad = state.grad_norm_accum / denom
    hot = (mean_grad > config.densify_grad_threshold) & (state.hit_count > 0)

    max_scale = np.exp(gs.log_scales).max(axis=1)
    small = max_scale < config.densify_clone_scale_fraction * scene_extent
    clone_rows = np.nonzero(hot & small)[0]
    split_rows = np.nonzero(hot & ~small)[0]

    pieces = [gs]
    if len(clone_rows):
        clones = gs.take(clone_rows)
        clones.positions += _sample_within(gs, clone_rows, rng)
        pieces.append(clones)
    if len(split_rows):
        children = []
        for _ in range(2):
            child = gs.take(split_rows)
            child.positions += _sample_within(gs, split_rows, rng)
            child.log_scales -= np.log(config.split_scale_factor)
            children.append(child)
        pieces.extend(children)

    if len(pieces) > 1:
        merged = GaussianSet(
            positions=np.concatenate([p.positions for p in pieces]),
            rotations=np.concatenate([p.rotations for p in pieces]),
            log_scales=np.concatenate([p.log_scales for p in pieces]),
            opacity_logits=np.concatenate([p.opacity_logits for p in pieces]),
            sh_coeffs=np.concatenate([p.sh_coeffs for p in pieces]),
            semantic_logits=np.concatenate([p.semantic_logits for p in pieces]),
            active_sh_degree=gs.active_sh_degree,
        )
        _append_rows(state, merged.count - gs.count)
    else:
        merged = gs

    # Split parents go away; their clones/children were appended above.
    keep = np.ones(merged.count, dtype=bool)
    keep[split_rows] = False
    keep &= opacity(merged.opacity_logits) >= config.prune_opacity
    if prune_world_radius:
        keep[np.exp(merged.log_scales).max(axis=1) > config.prune_scale_fraction * scene_extent] = False

    result = merged.take(keep)
    _filter_rows(state, keep)
    state.grad_norm_accum[:] = 0.0
    state.hit_count[:] = 0
    return result


def reset_opacity(gs: GaussianSet, reset_value: float = 0.01) -> None:
    """Clamp every opacity to at most reset_value by adjusting logits."""
    ceiling = opacity_inverse(reset_value)
    gs.opacity_logits[:] = np.minimum(gs.opacity_logits, ceiling)


@dataclass
class TrainResult:
    gaussians: GaussianSet
    state: OptimState
    log: list[dict]


def train(
    dataset_split: DatasetSplit,
    gs: GaussianSet,
    config: TrainConfig,
    scene_extent: float,
    class_table: ClassTable | None = None,
    checkpoint_dir=None,
    progress=None,
) -> TrainResult:
    """Optimize the scene against the training split.

    Per iteration: sample a frame (seeded shuffle per epoch), render, compute
    the loss, backpropagate, and step; densify/prune, opacity resets, and SH
    degree increments run on their configured schedules. Divergence (NaN
    total loss) aborts with the last good checkpoint written.
    """
    if not dataset_split.train:
        raise DataError("training split is empty")
    gs = gs.copy()
    gs.active_sh_degree = 0
    state = OptimState.for_set(gs)
    rng = np.random.default_rng(config.seed)
    weights = LossWeights(lambda_ssim=config.lambda_ssim, lambda_sem=config.lambda_sem)
    background = np.asarray(config.background, dtype=np.float64)
    log: list[dict] = []
    order: list[int] = []

    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    def write_checkpoint(tag: str, snapshot: GaussianSet, snap_state: OptimState) -> None:
        if checkpoint_dir is None:
            return
        export_ply(snapshot, checkpoint_dir / f"{tag}.ply", class_table)
        save_optim_state(snap_state, checkpoint_dir / f"{tag}.optim")

    last_good = gs.copy()
    for it in range(1, config.iterations + 1):
        if not order:
            order = list(rng.permutation(len(dataset_split.train)))
        frame = dataset_split.train[order.pop()]

        output = rasterize_forward(gs, frame.camera, background)
        report: LossReport = total_loss(output, frame, weights)
        if not np.isfinite(report.total):
            write_checkpoint("last_good", last_good, state)
            raise NumericalError(
                f"loss diverged at iteration {it} "
                f"(l1={report.l1}, dssim={report.dssim}, ce={report.ce})"
            )
        if it % 50 == 1:
            last_good = gs.copy()
        grads = rasterize_backward(gs, frame.camera, output, report.d_rgb, report.d_semantic)
        optimizer_step(gs, grads, state, config, scene_extent)
        accumulate_densify_stats(state, grads)

        if (
            config.densify_start <= it <= config.densify_stop
            and it % config.densify_interval == 0
        ):
            gs = densify_and_prune(
                gs, state, config, scene_extent, rng,
                prune_world_radius=it > config.opacity_reset_interval,
            )
        if it % config.opacity_reset_interval == 0:
            reset_opacity(gs, config.opacity_reset_value)
            # restart the opacity moments alongside the hard reset
            state.m["opacity_logits"][:] = 0.0
            state.v["opacity_logits"][:] = 0.0
        if it % config.sh_degree_up_interval == 0 and gs.active_sh_degree < min(
            config.sh_degree, gs.max_sh_degree
        ):
            gs.active_sh_degree += 1

        log.append(
            {
                "iteration": it,
                "frame": frame.name,
                "l1": report.l1,
                "dssim": report.dssim,
                "ce": report.ce,
                "total": report.total,
                "count": gs.count,
            }
        )
        if config.checkpoint_interval and it % config.checkpoint_interval == 0:
            write_checkpoint(f"iter_{it:06d}", gs, state)
        if progress is not None:
            progress(it, log[-1])

    return TrainResult(gaussians=gs, state=state, log=log)


OPTIM_MAGIC = b"SEMSPLAT.OPTIM.1"


def save_optim_state(state: OptimState, path) -> None:
    """Sidecar optimizer-state file: magic, step, then per-group moment
    arrays as little-endian float32 with self-describing shapes."""
    with open(path, "wb") as fh:
        fh.write(OPTIM_MAGIC)
        fh.write(struct.pack("<qi", state.step, len(_GROUPS)))
        for g in _GROUPS:
            for arr in (state.m[g], state.v[g]):
                shape = arr.shape
                fh.write(struct.pack("<i", len(shape)))
                fh.write(struct.pack(f"<{len(shape)}q", *shape))
                fh.write(arr.astype("<f4").tobytes())
        for arr, code in ((state.grad_norm_accum, "<f4"), (state.hit_count, "<q")):
            fh.write(struct.pack("<q", arr.shape[0]))
            fh.write(arr.astype(code).tobytes())


def load_optim_state(path) -> OptimState:
    with open(path, "rb") as fh:
        magic = fh.read(len(OPTIM_MAGIC))
        if magic != OPTIM_MAGIC:
            raise DataError(f"{path} is not an optimizer-state file")
        step, ngroups = struct.unpack("<qi", fh.read(12))
        if ngroups != len(_GROUPS):
            raise DataError(f"{path}: expected {len(_GROUPS)} parameter groups, found {ngroups}")
        m: dict[str, np.ndarray] = {}
        v: dict[str, np.ndarray] = {}
        for g in _GROUPS:
            for store in (m, v):
                (ndim,) = struct.unpack("<i", fh.read(4))
                shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
                count = int(np.prod(shape)) if shape else 1
                store[g] = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape).astype(np.float64)
        (n,) = struct.unpack("<q", fh.read(8))
        grad_norm = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(np.float64)
        (n2,) = struct.unpack("<q", fh.read(8))
        hits = np.frombuffer(fh.read(8 * n2), dtype="<q").astype(np.int64)
    return OptimState(m=m, v=v, step=step, grad_norm_accum=grad_norm, hit_count=hits)
