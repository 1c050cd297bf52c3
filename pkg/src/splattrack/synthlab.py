"""Synthetic ground-truth lab: multi-view datasets, motion sequences, model fitting.

Everything is deterministic under a fixed seed. Rendered images are the
oracle for closed-loop tests: each emitted record stores the exact pose,
joint vector, and intrinsics used, so any frame can be re-rendered and
compared against the stored file within the declared noise bound.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InsufficientViewsError, TrajectoryParseError
from .geometry import Intrinsics, Pose, Rotation, nearest_rotation, rotation_from_axis_angle
from .image_io import load_mask_pgm, load_png, save_mask_pgm, save_png
from .metrics_io import Trajectory, TrajectoryRecord, save_trajectory
from .renderer import Frame, LossConfig, RenderSettings, backward_to_gaussians, combined_loss_with_grad, render
from .tool_model import (
    GaussianPrimitive,
    ToolModel,
    forward_kinematics,
    pose_gaussians,
    save_tool_model,
)

MASK_ALPHA_SUPPORT = 0.01
QUANTIZATION_BOUND = 0.5 / 255.0  # 8-bit PNG rounding error


def default_intrinsics(resolution: int) -> Intrinsics:
    """Square pinhole camera whose principal point sits on the pixel-grid center."""
    f = 1.2 * resolution
    c = (resolution - 1) / 2.0
    return Intrinsics(fx=f, fy=f, cx=c, cy=c, width=resolution, height=resolution)


@dataclass(frozen=True)
class DatasetSpec:
    n_canonical: int = 500
    n_posed: int = 10000
    views_per_config: int = 12
    azimuth_range: tuple[float, float] = (0.0, 2.0 * np.pi)
    elevation_range: tuple[float, float] = (-np.pi / 3, np.pi / 3)
    distance_range: tuple[float, float] = (0.08, 0.14)
    seed: int = 0
    resolution: int = 128

    def __post_init__(self):
        if min(self.n_canonical, self.n_posed, self.views_per_config) < 1:
            raise ValueError("counts must be >= 1")
        if not 0 < self.distance_range[0] <= self.distance_range[1]:
            raise ValueError("distance range must be positive and ordered")
        if self.resolution < 16:
            raise ValueError("resolution must be >= 16")


@dataclass(frozen=True)
class SequenceSpec:
    n_frames: int = 30
    translation_bound: float = 0.002  # meters per frame
    rotation_bound: float = 0.035  # radians per frame
    joint_bound: float = 0.02  # radians per frame
    noise_std: float = 0.0  # pixel noise, truncated at 5 sigma
    seed: int = 0
    resolution: int = 128
    start_distance: float = 0.10
    smoothing: float = 0.8  # velocity low-pass factor

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if min(self.translation_bound, self.rotation_bound, self.joint_bound) < 0:
            raise ValueError("motion bounds must be >= 0")
        if not 0.0 <= self.noise_std <= 1.0:
            raise ValueError("noise_std must be in [0, 1]")


@dataclass(frozen=True)
class GroundTruthRecord:
    frame_index: int
    pose: Pose
    q: np.ndarray
    camera: Intrinsics
    image_path: str  # relative to the manifest directory
    mask_path: str
    depth_path: str | None = None  # reserved, not emitted


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    records: tuple[GroundTruthRecord, ...]
    noise_bound: float  # per-pixel |re-render - stored| guarantee

    def record_trajectory(self) -> Trajectory:
        return Trajectory(
            tuple(
                TrajectoryRecord(r.frame_index, r.pose, r.q, None) for r in self.records
            )
        )

    def load_frame(self, record: GroundTruthRecord) -> Frame:
        mask = load_mask_pgm(os.path.join(self.root, record.mask_path))
        return load_png(os.path.join(self.root, record.image_path), mask)


def sample_joints(rng: np.random.Generator, model: ToolModel) -> np.ndarray:
    """Uniform in the box limits, constrained so the jaws do not cross (q2 + q3 >= 0)."""
    lo, hi = model.limits.q_min, model.limits.q_max
    while True:
        q = rng.uniform(lo, hi)
        if q[1] + q[2] >= 0.0:
            return q


def sample_camera_pose(rng: np.random.Generator, spec: DatasetSpec) -> Pose:
    """Look-at pose of the tool-base frame in a camera placed on a random sphere point."""
    azimuth = rng.uniform(*spec.azimuth_range)
    elevation = rng.uniform(*spec.elevation_range)
    distance = rng.uniform(*spec.distance_range)
    center = distance * np.array(
        [np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)]
    )
    forward = -center / np.linalg.norm(center)  # camera z: toward the tool
    up_hint = np.array([0.0, 0.0, 1.0])
    x_axis = np.cross(forward, up_hint)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(forward, x_axis)  # points "down" w.r.t. world up
    r_wc = np.column_stack([x_axis, y_axis, forward])
    r_cw = r_wc.T
    return Pose(Rotation(nearest_rotation(r_cw)), -(r_cw @ center))


def _format_record(r: GroundTruthRecord) -> str:
    pose_rt = np.hstack([r.pose.rotation.matrix, r.pose.translation[:, None]])
    fields = [str(r.frame_index)]
    fields += [repr(float(v)) for v in pose_rt.reshape(-1)]
    fields += [repr(float(v)) for v in r.q]
    fields += [
        repr(float(r.camera.fx)),
        repr(float(r.camera.fy)),
        repr(float(r.camera.cx)),
        repr(float(r.camera.cy)),
        str(r.camera.width),
        str(r.camera.height),
    ]
    fields += [r.image_path, r.mask_path, r.depth_path or ""]
    return ",".join(fields)


MANIFEST_COLUMNS = (
    "index,R00,R01,R02,tx,R10,R11,R12,ty,R20,R21,R22,tz,"
    "q1,q2,q3,fx,fy,cx,cy,width,height,image,mask,depth"
)


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# splattrack manifest v1\n")
        f.write(f"# columns: {MANIFEST_COLUMNS}\n")
        f.write("# pose: camera-from-tool [R|t], row-major; depth column reserved (empty)\n")
        f.write(f"# noise_bound: {manifest.noise_bound!r}\n")
        for r in manifest.records:
            f.write(_format_record(r) + "\n")


def load_manifest(path) -> DatasetManifest:
    root = os.path.dirname(os.path.abspath(path))
    records: list[GroundTruthRecord] = []
    noise_bound = QUANTIZATION_BOUND
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                if line.startswith("# noise_bound:"):
                    noise_bound = float(line.split(":", 1)[1])
                continue
            parts = line.split(",")
            if len(parts) != 25:
                raise TrajectoryParseError(ln, f"expected 25 fields, got {len(parts)}")
            try:
                idx = int(parts[0])
                rt = np.array([float(v) for v in parts[1:13]]).reshape(3, 4)
                q = np.array([float(v) for v in parts[13:16]])
                fx, fy, cx, cy = (float(v) for v in parts[16:20])
                width, height = int(parts[20]), int(parts[21])
            except ValueError as e:
                raise TrajectoryParseError(ln, str(e)) from None
            try:
                pose = Pose(Rotation(rt[:, :3]), rt[:, 3])
            except ValueError as e:
                raise TrajectoryParseError(ln, f"invalid rotation: {e}") from None
            cam = Intrinsics(fx, fy, cx, cy, width, height)
            records.append(
                GroundTruthRecord(idx, pose, q, cam, parts[22], parts[23], parts[24] or None)
            )
    if not records:
        raise TrajectoryParseError(1, "manifest has no records")
    return DatasetManifest(root, tuple(records), noise_bound)


def generate_dataset(model: ToolModel, spec: DatasetSpec, out_dir) -> DatasetManifest:
    """Render canonical and randomly articulated configurations from random views.

    Canonical configurations keep the joints at the model's neutral vector;
    articulated ones sample the limits under the jaw non-crossing constraint.
    Emits one image + mask pair per (configuration, view) and a manifest
    listing every record. Deterministic for a fixed spec.
    """
    rng = np.random.default_rng(spec.seed)
    os.makedirs(out_dir, exist_ok=True)
    cam = default_intrinsics(spec.resolution)
    settings = RenderSettings()

    qs = [model.neutral_q for _ in range(spec.n_canonical)]
    qs += [sample_joints(rng, model) for _ in range(spec.n_posed)]

    records: list[GroundTruthRecord] = []
    index = 0
    for q in qs:
        for _ in range(spec.views_per_config):
            pose = sample_camera_pose(rng, spec)
            out = render(pose_gaussians(model, pose, q), cam, settings)
            image_path = f"img_{index:06d}.png"
            mask_path = f"mask_{index:06d}.pgm"
            save_png(out.image, os.path.join(out_dir, image_path))
            save_mask_pgm(out.alpha > MASK_ALPHA_SUPPORT, os.path.join(out_dir, mask_path))
            records.append(GroundTruthRecord(index, pose, q, cam, image_path, mask_path))
            index += 1

    manifest = DatasetManifest(str(out_dir), tuple(records), QUANTIZATION_BOUND)
    save_manifest(manifest, os.path.join(out_dir, "manifest.txt"))
    save_tool_model(model, os.path.join(out_dir, "model.yaml"))
    return manifest


def _step_joints(q: np.ndarray, dq: np.ndarray, model: ToolModel) -> np.ndarray:
    q_new = np.clip(q + dq, model.limits.q_min, model.limits.q_max)
    if q_new[1] + q_new[2] < 0.0:
        shift = -(q_new[1] + q_new[2]) / 2.0
        q_new[1] += shift
        q_new[2] += shift
        q_new = np.clip(q_new, model.limits.q_min, model.limits.q_max)
    return q_new


def generate_sequence(
    model: ToolModel, spec: SequenceSpec, out_dir
) -> tuple[list[Frame], Trajectory]:
    """Bounded smooth random-walk motion with exact ground truth logged.

    Pixel noise is truncated Gaussian (clipped at 5 sigma before adding), so
    |clean re-render - stored image| <= 5*noise_std + PNG quantization holds
    per pixel by construction.
    """
    rng = np.random.default_rng(spec.seed)
    os.makedirs(out_dir, exist_ok=True)
    cam = default_intrinsics(spec.resolution)
    settings = RenderSettings()

    pose = Pose(Rotation.identity(), np.array([0.0, 0.0, spec.start_distance]))
    q = model.neutral_q.copy()
    if model.limits.q_max[1] >= 0.35 and model.limits.q_max[2] >= 0.35:
        q = _step_joints(q, np.array([0.0, 0.3, 0.3]), model)  # start with jaws visibly open

    vel_t = np.zeros(3)
    vel_w = np.zeros(3)
    vel_q = np.zeros(3)

    frames: list[Frame] = []
    records: list[TrajectoryRecord] = []
    gt_records: list[GroundTruthRecord] = []
    for i in range(spec.n_frames):
        out = render(pose_gaussians(model, pose, q), cam, settings)
        clean = out.image.pixels
        if spec.noise_std > 0:
            noise = rng.normal(0.0, spec.noise_std, size=clean.shape)
            noise = np.clip(noise, -5.0 * spec.noise_std, 5.0 * spec.noise_std)
            pixels = np.clip(clean + noise, 0.0, 1.0)
        else:
            pixels = clean
        mask = out.alpha > MASK_ALPHA_SUPPORT
        frame = Frame(pixels, mask)
        frames.append(frame)
        records.append(TrajectoryRecord(i, pose, q.copy(), None))

        image_path = f"frame_{i:06d}.png"
        mask_path = f"mask_{i:06d}.pgm"
        save_png(frame, os.path.join(out_dir, image_path))
        save_mask_pgm(mask, os.path.join(out_dir, mask_path))
        gt_records.append(GroundTruthRecord(i, pose, q.copy(), cam, image_path, mask_path))

        # smoothed bounded random walk
        s = spec.smoothing
        vel_t = s * vel_t + (1 - s) * rng.uniform(-1.0, 1.0, 3) * spec.translation_bound
        norm = np.linalg.norm(vel_t)
        if norm > spec.translation_bound > 0:
            vel_t *= spec.translation_bound / norm
        elif spec.translation_bound == 0:
            vel_t = np.zeros(3)
        vel_w = s * vel_w + (1 - s) * rng.uniform(-1.0, 1.0, 3) * spec.rotation_bound
        norm = np.linalg.norm(vel_w)
        if norm > spec.rotation_bound > 0:
            vel_w *= spec.rotation_bound / norm
        elif spec.rotation_bound == 0:
            vel_w = np.zeros(3)
        vel_q = s * vel_q + (1 - s) * rng.uniform(-1.0, 1.0, 3) * spec.joint_bound
        vel_q = np.clip(vel_q, -spec.joint_bound, spec.joint_bound)
        if spec.joint_bound == 0:
            vel_q = np.zeros(3)

        pose = Pose(
            Rotation(nearest_rotation(pose.rotation.matrix @ rotation_from_axis_angle(vel_w))),
            pose.translation + vel_t,
        )
        q = _step_joints(q, vel_q, model)

    trajectory = Trajectory(tuple(records))
    noise_bound = 5.0 * spec.noise_std + QUANTIZATION_BOUND
    manifest = DatasetManifest(str(out_dir), tuple(gt_records), noise_bound)
    save_manifest(manifest, os.path.join(out_dir, "manifest.txt"))
    save_tool_model(model, os.path.join(out_dir, "model.yaml"))
    save_trajectory(trajectory, os.path.join(out_dir, "ground_truth.csv"))
    return frames, trajectory


@dataclass(frozen=True)
class FitConfig:
    lr_mean: float = 2e-7
    lr_scale: float = 2e-7
    lr_color: float = 0.5
    lr_opacity: float = 0.5
    min_scale: float = 1e-5


def fit_canonical_model(
    init: ToolModel,
    targets: list[tuple[Frame, Pose, Intrinsics]],
    iters: int,
    fit_cfg: FitConfig | None = None,
    loss_cfg: LossConfig | None = None,
    render_settings: RenderSettings | None = None,
) -> ToolModel:
    """Fit gaussian means/scales/opacities/colors to multi-view images at neutral pose.

    Plain gradient descent on the mean combined loss across views; scales and
    opacities are projected back into their valid ranges after every step.
    """
    if len(targets) < 2:
        raise InsufficientViewsError(f"need >= 2 views, got {len(targets)}")
    fit_cfg = fit_cfg or FitConfig()
    loss_cfg = loss_cfg or LossConfig()
    render_settings = render_settings or RenderSettings()

    model = init
    q = init.neutral_q
    link_rot = [p.rotation.matrix for p in forward_kinematics(init, q)]

    for _ in range(iters):
        n = len(model.gaussians)
        g_mean = np.zeros((n, 3))
        g_scale = np.zeros((n, 3))
        g_color = np.zeros((n, 3))
        g_opacity = np.zeros(n)
        for frame, pose, cam in targets:
            posed = pose_gaussians(model, pose, q)
            out = render(posed, cam, render_settings)
            _, dl = combined_loss_with_grad(out.image, frame, loss_cfg)
            gg = backward_to_gaussians(out, dl)
            rp = pose.rotation.matrix
            for gi, prim in enumerate(model.gaussians):
                r_total = rp @ link_rot[prim.link_id]
                g_mean[gi] += r_total.T @ gg.dmean_cam[gi]
                a = r_total @ prim.orient_local.matrix
                g_scale[gi] += 2.0 * prim.scale * np.einsum("ik,ij,jk->k", a, gg.dcov_cam[gi], a)
            g_color += gg.dcolor
            g_opacity += gg.dopacity
        n_views = len(targets)
        g_mean /= n_views
        g_scale /= n_views
        g_color /= n_views
        g_opacity /= n_views

        new_gaussians = []
        for gi, prim in enumerate(model.gaussians):
            new_gaussians.append(
                GaussianPrimitive(
                    link_id=prim.link_id,
                    mean_local=prim.mean_local - fit_cfg.lr_mean * g_mean[gi],
                    scale=np.maximum(prim.scale - fit_cfg.lr_scale * g_scale[gi], fit_cfg.min_scale),
                    orient_local=prim.orient_local,
                    opacity=float(np.clip(prim.opacity - fit_cfg.lr_opacity * g_opacity[gi], 0.0, 1.0)),
                    color=np.clip(prim.color - fit_cfg.lr_color * g_color[gi], 0.0, 1.0),
                )
            )
        model = replace(model, gaussians=tuple(new_gaussians))
    return model


def mean_view_loss(
    model: ToolModel,
    targets: list[tuple[Frame, Pose, Intrinsics]],
    loss_cfg: LossConfig | None = None,
    render_settings: RenderSettings | None = None,
) -> float:
    """Mean combined loss of the model across the given views at neutral q."""
    loss_cfg = loss_cfg or LossConfig()
    render_settings = render_settings or RenderSettings()
    q = model.neutral_q
    total = 0.0
    for frame, pose, cam in targets:
        out = render(pose_gaussians(model, pose, q), cam, render_settings)
        value, _ = combined_loss_with_grad(out.image, frame, loss_cfg)
        total += value
    return total / len(targets)
