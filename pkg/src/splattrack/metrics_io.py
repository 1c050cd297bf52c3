"""Trajectory data model, displacement-error metrics, persistence, and reports.

Positional metrics follow the usual trajectory-evaluation definitions:
ADE is the mean Euclidean distance over all time steps, FDE the distance at
the final step, and the per-axis error the signed mean difference per
Cartesian axis. Standard deviations use the population convention
(divide by T), which the emitted reports state explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyInputError,
    IndexMismatchError,
    LengthMismatchError,
    TrajectoryParseError,
)
from .geometry import Pose, Rotation

CSV_HEADER = "frame,R00,R01,R02,R10,R11,R12,R20,R21,R22,tx,ty,tz,q1,q2,q3,loss"


@dataclass(frozen=True)
class TrajectoryRecord:
    frame_index: int
    pose: Pose
    q: np.ndarray
    loss: float | None = None

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(3)
        q.setflags(write=False)
        object.__setattr__(self, "q", q)


@dataclass(frozen=True)
class Trajectory:
    records: tuple[TrajectoryRecord, ...]

    def __post_init__(self):
        recs = tuple(self.records)
        if not recs:
            raise ValueError("trajectory needs at least one record")
        indices = [r.frame_index for r in recs]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError("frame indices must be strictly increasing")
        object.__setattr__(self, "records", recs)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def positions(self) -> np.ndarray:
        return np.array([r.pose.translation for r in self.records])


def _paired(est: Trajectory, gt: Trajectory):
    if len(est) != len(gt):
        raise LengthMismatchError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    for a, b in zip(est.records, gt.records):
        if a.frame_index != b.frame_index:
            raise IndexMismatchError(f"frame indices differ: {a.frame_index} vs {b.frame_index}")
    return est.positions, gt.positions


def ade(est: Trajectory, gt: Trajectory) -> float:
    """Mean Euclidean distance between estimated and true positions."""
    p_est, p_gt = _paired(est, gt)
    return float(np.mean(np.linalg.norm(p_est - p_gt, axis=1)))


def fde(est: Trajectory, gt: Trajectory) -> float:
    """Euclidean distance between the final estimated and true positions."""
    p_est, p_gt = _paired(est, gt)
    return float(np.linalg.norm(p_est[-1] - p_gt[-1]))


def per_axis_error(est: Trajectory, gt: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Signed mean and population std of the per-axis position difference."""
    p_est, p_gt = _paired(est, gt)
    diff = p_est - p_gt
    return diff.mean(axis=0), diff.std(axis=0)


@dataclass(frozen=True)
class MetricsReport:
    ade: float
    fde: float
    mean_error_xyz: np.ndarray
    std_error_xyz: np.ndarray
    per_frame_errors: np.ndarray  # (T, 4): ex, ey, ez, norm
    mean_rotation_angle: float  # supplementary diagnostic, radians
    mean_joint_abs_error: np.ndarray  # supplementary diagnostic, radians per joint

    def __post_init__(self):
        if self.ade < 0 or self.fde < 0:
            raise ValueError("displacement errors cannot be negative")


def compute_report(est: Trajectory, gt: Trajectory) -> MetricsReport:
    p_est, p_gt = _paired(est, gt)
    diff = p_est - p_gt
    norms = np.linalg.norm(diff, axis=1)
    rot_angles = [
        a.pose.rotation.angle_to(b.pose.rotation) for a, b in zip(est.records, gt.records)
    ]
    joint_err = np.mean(
        [np.abs(a.q - b.q) for a, b in zip(est.records, gt.records)], axis=0
    )
    return MetricsReport(
        ade=float(norms.mean()),
        fde=float(norms[-1]),
        mean_error_xyz=diff.mean(axis=0),
        std_error_xyz=diff.std(axis=0),
        per_frame_errors=np.column_stack([diff, norms]),
        mean_rotation_angle=float(np.mean(rot_angles)),
        mean_joint_abs_error=joint_err,
    )


@dataclass(frozen=True)
class AggregateSummary:
    """Cross-trajectory mean and population std of each positional metric."""

    n_reports: int
    ade_mean: float
    ade_std: float
    fde_mean: float
    fde_std: float
    mean_error_xyz_mean: np.ndarray
    mean_error_xyz_std: np.ndarray


def aggregate_reports(reports: list[MetricsReport]) -> AggregateSummary:
    if not reports:
        raise EmptyInputError("need at least one report to aggregate")
    ades = np.array([r.ade for r in reports])
    fdes = np.array([r.fde for r in reports])
    means = np.array([r.mean_error_xyz for r in reports])
    return AggregateSummary(
        n_reports=len(reports),
        ade_mean=float(ades.mean()),
        ade_std=float(ades.std()),
        fde_mean=float(fdes.mean()),
        fde_std=float(fdes.std()),
        mean_error_xyz_mean=means.mean(axis=0),
        mean_error_xyz_std=means.std(axis=0),
    )


# --- formatting --------------------------------------------------------------


def format_mm_vector(v_meters) -> str:
    """Signed, two-decimal millimetre triple, e.g. ``[-4.64, 0.25, 6.64]``."""
    return "[" + ", ".join(f"{1e3 * float(x):.2f}" for x in v_meters) + "]"


def format_mean_std_mm(mean_m: float, std_m: float) -> str:
    """Millimetre summary in the ``9.7 +/- 2.8`` style."""
    return f"{1e3 * mean_m:.1f} +/- {1e3 * std_m:.1f}"


def render_report(report: MetricsReport, title: str = "trajectory error report") -> str:
    lines = [
        title,
        "=" * len(title),
        "std convention: population (divide by T)",
        f"frames: {report.per_frame_errors.shape[0]}",
        f"ade: {1e3 * report.ade:.3f} mm",
        f"fde: {1e3 * report.fde:.3f} mm",
        f"mean error (x, y, z) mm: {format_mm_vector(report.mean_error_xyz)}",
        f"std error (x, y, z) mm (across frames): {format_mm_vector(report.std_error_xyz)}",
        "",
        "supplementary diagnostics (not part of the displacement metrics):",
        f"mean rotation geodesic error: {np.degrees(report.mean_rotation_angle):.3f} deg",
        "mean abs joint error (q1, q2, q3) rad: "
        + "[" + ", ".join(f"{v:.4f}" for v in report.mean_joint_abs_error) + "]",
    ]
    return "\n".join(lines) + "\n"


def render_aggregate_report(summary: AggregateSummary) -> str:
    title = "aggregate trajectory error report"
    lines = [
        title,
        "=" * len(title),
        "std convention: population (across demonstrations)",
        f"trajectories: {summary.n_reports}",
        f"average ade (mm): {format_mean_std_mm(summary.ade_mean, summary.ade_std)}",
        f"average fde (mm): {format_mean_std_mm(summary.fde_mean, summary.fde_std)}",
        f"mean error (x, y, z) mm: {format_mm_vector(summary.mean_error_xyz_mean)}",
        f"std of mean error (x, y, z) mm (across demonstrations): "
        f"{format_mm_vector(summary.mean_error_xyz_std)}",
    ]
    return "\n".join(lines) + "\n"


# --- persistence --------------------------------------------------------------


def save_trajectory(traj: Trajectory, path) -> None:
    """Write CSV with full-precision (round-trip exact) floats."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(CSV_HEADER + "\n")
        for r in traj.records:
            fields = [str(r.frame_index)]
            fields += [repr(float(v)) for v in r.pose.rotation.matrix.reshape(-1)]
            fields += [repr(float(v)) for v in r.pose.translation]
            fields += [repr(float(v)) for v in r.q]
            fields.append("" if r.loss is None else repr(float(r.loss)))
            f.write(",".join(fields) + "\n")


def load_trajectory(path) -> Trajectory:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise TrajectoryParseError(1, "empty file")
    if lines[0].strip() != CSV_HEADER:
        raise TrajectoryParseError(1, f"bad header (expected {CSV_HEADER!r})")
    records: list[TrajectoryRecord] = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 17:
            raise TrajectoryParseError(ln, f"expected 17 fields, got {len(parts)}")
        try:
            frame = int(parts[0])
            values = [float(p) for p in parts[1:16]]
            loss = None if parts[16] == "" else float(parts[16])
        except ValueError as e:
            raise TrajectoryParseError(ln, str(e)) from None
        rot = np.array(values[0:9]).reshape(3, 3)
        try:
            pose = Pose(Rotation(rot), np.array(values[9:12]))
        except ValueError as e:
            raise TrajectoryParseError(ln, f"invalid rotation: {e}") from None
        records.append(TrajectoryRecord(frame, pose, np.array(values[12:15]), loss))
    if not records:
        raise TrajectoryParseError(len(lines), "no records")
    try:
        return Trajectory(tuple(records))
    except ValueError as e:
        raise TrajectoryParseError(len(lines), str(e)) from None


def save_per_frame_errors(report: MetricsReport, path) -> None:
    """Per-frame error curves as CSV for external plotting."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("frame,ex,ey,ez,norm\n")
        for i, row in enumerate(report.per_frame_errors):
            f.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")
