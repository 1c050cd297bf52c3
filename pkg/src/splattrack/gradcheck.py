"""Finite-difference validation of the analytic (omega, delta_t, q) gradients.

Each trial builds a random scene (random pose, joints, and appearance-jittered
target), evaluates the full combined loss, and compares the analytic gradient
against central differences in the optimizer's own chart. Scenes whose
composited depth order could flip inside the probe step are resampled:
compositing is order-dependent, so a near-tie would put the finite-difference
probes on opposite sides of a genuine discontinuity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, Pose, Rotation, perturb_pose, rotation_from_axis_angle
from .renderer import LossConfig, RenderSettings, combined_loss, combined_loss_with_grad, render, render_backward
from .synthlab import default_intrinsics
from .tool_model import ToolModel, default_tool_model, jacobian_gaussians, pose_gaussians

# cutoff low enough that skip-boundary jumps are far below the comparison
# tolerance; the default 1/255 cutoff is an inference-speed setting
GRADCHECK_RENDER_SETTINGS = RenderSettings(alpha_cutoff=1e-9)
FD_STEP = 1e-5
REL_TOL = 1e-3
ABS_FLOOR = 1e-8
_MIN_DEPTH_GAP = 2e-6  # resample threshold; > max depth shift any probe can cause


@dataclass(frozen=True)
class GradCheckTrial:
    seed: int
    analytic: np.ndarray  # (9,) omega, delta_t, q
    numeric: np.ndarray  # (9,)
    max_abs_diff: float
    passed: bool


def _random_scene(rng: np.random.Generator, model: ToolModel, k: Intrinsics):
    """Random (pose, q, target) whose overlapping splats are depth-separated."""
    lo, hi = model.limits.q_min, model.limits.q_max
    while True:
        omega = rng.uniform(-0.6, 0.6, 3)
        pose = Pose(
            Rotation(rotation_from_axis_angle(omega)),
            np.array([rng.uniform(-0.01, 0.01), rng.uniform(-0.01, 0.01), rng.uniform(0.08, 0.13)]),
        )
        q = rng.uniform(np.maximum(lo, -0.3), np.minimum(hi, 0.9))
        if q[1] + q[2] < 0:
            continue
        posed = pose_gaussians(model, pose, q)
        depths = np.array([g.mean_cam[2] for g in posed])
        if depths.min() <= 1e-3:
            continue
        order = np.argsort(depths)
        gaps = np.diff(depths[order])
        # only consecutive-depth pairs can swap under a small perturbation
        if gaps.size and gaps.min() < _MIN_DEPTH_GAP:
            continue
        return pose, q, posed


def _target_frame(rng, model, k, pose, q, settings):
    """Target = render of a nearby perturbed state, so residuals are nonzero."""
    t_pose = perturb_pose(pose, rng.uniform(-0.03, 0.03, 3), rng.uniform(-0.002, 0.002, 3))
    t_q = np.clip(q + rng.uniform(-0.05, 0.05, 3), model.limits.q_min, model.limits.q_max)
    return render(pose_gaussians(model, t_pose, t_q), k, settings).image


def run_trial(
    seed: int,
    model: ToolModel | None = None,
    k: Intrinsics | None = None,
    loss_cfg: LossConfig | None = None,
    settings: RenderSettings = GRADCHECK_RENDER_SETTINGS,
    step: float = FD_STEP,
) -> GradCheckTrial:
    model = model or default_tool_model()
    k = k or default_intrinsics(64)
    loss_cfg = loss_cfg or LossConfig()
    rng = np.random.default_rng(seed)
    pose, q, posed = _random_scene(rng, model, k)
    target = _target_frame(rng, model, k, pose, q, settings)

    out = render(posed, k, settings)
    _, dl_dimage = combined_loss_with_grad(out.image, target, loss_cfg)
    grads = render_backward(out, dl_dimage, posed, jacobian_gaussians(model, pose, q))
    analytic = np.concatenate([grads.omega, grads.translation, grads.joints])

    def loss_at(omega, delta_t, dq) -> float:
        p = perturb_pose(pose, omega, delta_t)
        image = render(pose_gaussians(model, p, q + dq), k, settings).image
        return combined_loss(image, target, loss_cfg)

    numeric = np.zeros(9)
    for j in range(9):
        e = np.zeros(9)
        e[j] = step
        plus = loss_at(e[0:3], e[3:6], e[6:9])
        minus = loss_at(-e[0:3], -e[3:6], -e[6:9])
        numeric[j] = (plus - minus) / (2.0 * step)

    diff = np.abs(analytic - numeric)
    tol = REL_TOL * np.maximum(np.abs(analytic), np.abs(numeric)) + ABS_FLOOR
    return GradCheckTrial(
        seed=seed,
        analytic=analytic,
        numeric=numeric,
        max_abs_diff=float(diff.max()),
        passed=bool(np.all(diff <= tol)),
    )


def run_gradcheck(seed: int = 0, trials: int = 100, **kwargs) -> list[GradCheckTrial]:
    return [run_trial(seed * 100003 + i, **kwargs) for i in range(trials)]
