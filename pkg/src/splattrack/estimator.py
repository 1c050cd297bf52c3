"""Pose estimation: coarse hypothesis grid, gradient refiner, frame-to-frame tracking.

The refiner iterates render -> loss -> backward and applies
    R <- R (I + lr_rot [-grad_omega]x)        (re-projected to SO(3))
    t <- t - lr_trans * clamp(grad_t, -trans_clamp, +trans_clamp)
    q <- clamp(q - lr_joint * grad_q, q_min, q_max)
with a plateau LR scheduler (all three rates halved together), windowed early
stopping, and best-iterate return.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    AllCandidatesDivergedError,
    EmptyMaskError,
    JointOutOfRangeError,
    NonFiniteLossError,
)
from .geometry import (
    Intrinsics,
    Pose,
    Rotation,
    apply_rotation_update,
    clamp_vector,
)
from .metrics_io import Trajectory, TrajectoryRecord
from .renderer import (
    Frame,
    LossConfig,
    RenderSettings,
    combined_loss_with_grad,
    pixel_averaged_loss,
    render,
    render_backward,
)
from .tool_model import ToolModel, clamp_joints, jacobian_gaussians, pose_gaussians

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefinerConfig:
    lr_rot: float = 0.3
    lr_trans: float = 3e-4
    trans_clamp: float = 0.02
    lr_joint: float = 1e-3
    scheduler_factor: float = 0.5
    scheduler_patience: int = 20
    early_stop_delta: float = 1e-7
    early_stop_window: int = 10
    max_iters_first_frame: int = 300
    max_iters_tracking: int = 10

    def __post_init__(self):
        if min(self.lr_rot, self.lr_trans, self.lr_joint) <= 0:
            raise ValueError("learning rates must be > 0")
        if not 0.0 < self.scheduler_factor < 1.0:
            raise ValueError("scheduler_factor must be in (0, 1)")
        if self.scheduler_patience < 1 or self.early_stop_window < 1:
            raise ValueError("scheduler_patience and early_stop_window must be >= 1")
        if self.trans_clamp <= 0:
            raise ValueError("trans_clamp must be > 0")
        if self.early_stop_delta < 0:
            raise ValueError("early_stop_delta must be >= 0")
        if self.max_iters_first_frame < 1 or self.max_iters_tracking < 1:
            raise ValueError("iteration caps must be >= 1")


@dataclass(frozen=True)
class CoarseConfig:
    grid_size: int = 3
    grid_extent: float = 0.5  # fraction of mask bbox diagonal, back-projected
    n_rotations: int = 36
    init_depth: float = 0.10
    refine_iters_per_candidate: int = 50

    def __post_init__(self):
        if self.grid_size < 1 or self.n_rotations < 1:
            raise ValueError("grid_size and n_rotations must be >= 1")
        if self.init_depth <= 0:
            raise ValueError("init_depth must be > 0")
        if self.refine_iters_per_candidate < 1:
            raise ValueError("refine_iters_per_candidate must be >= 1")


@dataclass(frozen=True)
class FrameEstimate:
    pose: Pose
    q: np.ndarray
    final_loss: float
    iters_used: int
    stopped_early: bool
    failed: bool = False


@dataclass
class TrackerState:
    previous: FrameEstimate
    frame_index: int


@dataclass(frozen=True)
class IterationRecord:
    """Per-iteration diagnostics emitted to a refine() callback."""

    iteration: int
    loss: float
    lr_rot: float
    lr_trans: float
    lr_joint: float
    grad_omega: np.ndarray | None
    grad_translation: np.ndarray | None
    grad_joints: np.ndarray | None
    pose: Pose
    q: np.ndarray


@dataclass(frozen=True)
class CandidateRecord:
    index: int
    initial_pose: Pose
    pose: Pose
    q: np.ndarray
    loss: float  # pixel-averaged selection loss; +inf when nothing rendered


@dataclass(frozen=True)
class CoarseResult:
    estimate: FrameEstimate
    selected_index: int
    candidates: tuple[CandidateRecord, ...]


def mask_centroid(mask: np.ndarray) -> np.ndarray:
    """Mean (u, v) pixel coordinates of the True pixels."""
    m = np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(m)
    if rows.size == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    return np.array([cols.mean(), rows.mean()])


def _mask_bbox_diagonal(mask: np.ndarray) -> float:
    rows, cols = np.nonzero(np.asarray(mask, dtype=bool))
    h = rows.max() - rows.min() + 1
    w = cols.max() - cols.min() + 1
    return float(np.hypot(h, w))


def generate_candidates(mask: np.ndarray, k: Intrinsics, cfg: CoarseConfig) -> list[Pose]:
    """Initial-pose hypotheses: an in-image-plane grid times in-plane rotations.

    The grid is centered at the back-projection of the mask centroid at
    init_depth and lies parallel to the image plane; each grid point gets
    n_rotations candidates rotated about the camera z axis. Out-of-plane
    rotations and depth are left at nominal for the refiner to resolve.
    """
    u, v = mask_centroid(mask)
    d = cfg.init_depth
    center = np.array([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d])
    extent = cfg.grid_extent * _mask_bbox_diagonal(mask) * d / (0.5 * (k.fx + k.fy))
    if cfg.grid_size > 1:
        offsets = np.linspace(-0.5, 0.5, cfg.grid_size) * extent
    else:
        offsets = np.array([0.0])
    angles = 2.0 * np.pi * np.arange(cfg.n_rotations) / cfg.n_rotations
    rotations = [Rotation.about_z(a) for a in angles]
    candidates = []
    for oy in offsets:
        for ox in offsets:
            t = center + np.array([ox, oy, 0.0])
            for rot in rotations:
                candidates.append(Pose(rot, t))
    return candidates


def refine(
    initial: tuple[Pose, np.ndarray],
    target: Frame,
    model: ToolModel,
    k: Intrinsics,
    cfg: RefinerConfig | None = None,
    loss_cfg: LossConfig | None = None,
    render_settings: RenderSettings | None = None,
    max_iters: int | None = None,
    callback=None,
) -> FrameEstimate:
    """Gradient-descent refinement of (pose, q) against a target frame.

    Returns the best-loss iterate encountered, not the last one; the pose is
    re-projected to SE(3) and q clamped to the limits after every update.
    """
    cfg = cfg or RefinerConfig()
    loss_cfg = loss_cfg or LossConfig()
    render_settings = render_settings or RenderSettings()
    pose, q = initial
    q = np.asarray(q, dtype=float).reshape(3)
    if not model.limits.contains(q):
        raise JointOutOfRangeError(f"initial q {q} outside limits")
    if max_iters is None:
        max_iters = cfg.max_iters_first_frame

    lr_rot, lr_trans, lr_joint = cfg.lr_rot, cfg.lr_trans, cfg.lr_joint
    best_loss = np.inf
    best_pose, best_q = pose, q
    history: list[float] = []
    plateau = 0
    stopped_early = False
    iters_used = 0

    for it in range(1, max_iters + 1):
        posed = pose_gaussians(model, pose, q)
        out = render(posed, k, render_settings)
        loss, dl_dimage = combined_loss_with_grad(out.image, target, loss_cfg)
        if not np.isfinite(loss):
            raise NonFiniteLossError(
                f"loss {loss} at iteration {it} (pose t={pose.translation}, q={q})"
            )
        history.append(loss)
        iters_used = it
        if loss < best_loss:
            best_loss, best_pose, best_q = loss, pose, q
            plateau = 0
        else:
            plateau += 1

        if len(history) > cfg.early_stop_window and (
            abs(history[-1] - history[-1 - cfg.early_stop_window]) < cfg.early_stop_delta
        ):
            stopped_early = True
            if callback is not None:
                callback(
                    IterationRecord(it, loss, lr_rot, lr_trans, lr_joint, None, None, None, pose, q)
                )
            break

        if plateau >= cfg.scheduler_patience:
            lr_rot *= cfg.scheduler_factor
            lr_trans *= cfg.scheduler_factor
            lr_joint *= cfg.scheduler_factor
            plateau = 0

        grads = render_backward(out, dl_dimage, posed, jacobian_gaussians(model, pose, q))
        step_t = lr_trans * clamp_vector(grads.translation, -cfg.trans_clamp, cfg.trans_clamp)
        pose = Pose(
            apply_rotation_update(pose.rotation, -grads.omega, lr_rot),
            pose.translation - step_t,
        )
        q = clamp_joints(q - lr_joint * grads.joints, model.limits)
        if callback is not None:
            callback(
                IterationRecord(
                    it, loss, lr_rot, lr_trans, lr_joint,
                    grads.omega, grads.translation, grads.joints, pose, q,
                )
            )

    return FrameEstimate(best_pose, best_q, float(best_loss), iters_used, stopped_early)


def coarse_estimate(
    first_frame: Frame,
    mask: np.ndarray,
    model: ToolModel,
    k: Intrinsics,
    coarse_cfg: CoarseConfig | None = None,
    refiner_cfg: RefinerConfig | None = None,
    loss_cfg: LossConfig | None = None,
    render_settings: RenderSettings | None = None,
) -> CoarseResult:
    """Refine every grid/rotation hypothesis briefly and keep the best one.

    Selection uses the pixel-averaged loss of the refined candidate so that
    hypotheses closer to the camera gain no advantage from covering more
    pixels. Ties break toward the lower candidate index.
    """
    coarse_cfg = coarse_cfg or CoarseConfig()
    refiner_cfg = refiner_cfg or RefinerConfig()
    loss_cfg = loss_cfg or LossConfig()
    render_settings = render_settings or RenderSettings()
    candidates = generate_candidates(mask, k, coarse_cfg)
    q0 = model.neutral_q

    records: list[CandidateRecord] = []
    for idx, cand in enumerate(candidates):
        est = refine(
            (cand, q0),
            first_frame,
            model,
            k,
            refiner_cfg,
            loss_cfg,
            render_settings,
            max_iters=coarse_cfg.refine_iters_per_candidate,
        )
        out = render(pose_gaussians(model, est.pose, est.q), k, render_settings)
        sel_loss = pixel_averaged_loss(out, first_frame, loss_cfg)
        records.append(CandidateRecord(idx, cand, est.pose, est.q, sel_loss))

    losses = np.array([r.loss for r in records])
    if not np.isfinite(losses).any():
        raise AllCandidatesDivergedError("every candidate rendered an empty image")
    winner = int(np.argmin(losses))
    best = records[winner]
    estimate = FrameEstimate(
        pose=best.pose,
        q=best.q,
        final_loss=float(best.loss),
        iters_used=coarse_cfg.refine_iters_per_candidate,
        stopped_early=False,
    )
    return CoarseResult(estimate, winner, tuple(records))


@dataclass(frozen=True)
class TrackResult:
    trajectory: Trajectory
    estimates: tuple[FrameEstimate, ...]


def track_sequence(
    frames: list[Frame],
    model: ToolModel,
    k: Intrinsics,
    coarse_cfg: CoarseConfig | None = None,
    refiner_cfg: RefinerConfig | None = None,
    loss_cfg: LossConfig | None = None,
    render_settings: RenderSettings | None = None,
) -> TrackResult:
    """Track a sequence: coarse + full refine on frame 0, warm-started short
    refines (max_iters_tracking cap) afterwards.

    The first frame must carry a segmentation mask. A frame whose refinement
    loss turns non-finite keeps the previous estimate and is flagged; other
    per-frame errors propagate with the frame index attached.
    """
    if not frames:
        raise ValueError("need at least one frame")
    refiner_cfg = refiner_cfg or RefinerConfig()

    estimates: list[FrameEstimate] = []
    state: TrackerState | None = None
    for i, frame in enumerate(frames):
        try:
            if state is None:
                if frame.mask is None:
                    raise EmptyMaskError("first frame needs a segmentation mask")
                coarse = coarse_estimate(
                    frame, frame.mask, model, k, coarse_cfg, refiner_cfg, loss_cfg, render_settings
                )
                est = refine(
                    (coarse.estimate.pose, coarse.estimate.q),
                    frame,
                    model,
                    k,
                    refiner_cfg,
                    loss_cfg,
                    render_settings,
                    max_iters=refiner_cfg.max_iters_first_frame,
                )
            else:
                est = refine(
                    (state.previous.pose, state.previous.q),
                    frame,
                    model,
                    k,
                    refiner_cfg,
                    loss_cfg,
                    render_settings,
                    max_iters=refiner_cfg.max_iters_tracking,
                )
        except NonFiniteLossError as e:
            if state is None:
                raise NonFiniteLossError(f"frame {i}: {e}") from e
            log.warning("frame %d: %s; carrying previous estimate forward", i, e)
            est = replace(state.previous, final_loss=float("inf"), iters_used=0, failed=True)
        except (EmptyMaskError, AllCandidatesDivergedError, JointOutOfRangeError) as e:
            raise type(e)(f"frame {i}: {e}") from e
        estimates.append(est)
        state = TrackerState(previous=est, frame_index=i)

    trajectory = Trajectory(
        tuple(
            TrajectoryRecord(frame_index=i, pose=e.pose, q=e.q, loss=e.final_loss)
            for i, e in enumerate(estimates)
        )
    )
    return TrackResult(trajectory, tuple(estimates))
