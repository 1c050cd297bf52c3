"""Rigid-body math, pinhole projection, and tangent-space rotation updates.

All functions are pure and operate on immutable values; rotations are kept
orthonormal by construction (validated wrappers + polar re-projection after
incremental updates).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError

ORTHO_TOL = 1e-9
DEFAULT_Z_MIN = 1e-4


def _as_matrix3(m) -> np.ndarray:
    a = np.array(m, dtype=float)
    if a.shape != (3, 3):
        raise ValueError(f"expected 3x3 matrix, got shape {a.shape}")
    return a


def _as_vector3(v) -> np.ndarray:
    a = np.array(v, dtype=float).reshape(-1)
    if a.shape != (3,):
        raise ValueError(f"expected 3-vector, got shape {a.shape}")
    return a


def hat(omega) -> np.ndarray:
    """Skew-symmetric cross-product matrix of a 3-vector."""
    wx, wy, wz = _as_vector3(omega)
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def rotation_from_axis_angle(axis_angle) -> np.ndarray:
    """Rodrigues formula; the vector's norm is the angle in radians."""
    w = _as_vector3(axis_angle)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        # second-order series keeps the result orthonormal to machine precision
        s = hat(w)
        return np.eye(3) + s + 0.5 * (s @ s)
    s = hat(w / theta)
    return np.eye(3) + np.sin(theta) * s + (1.0 - np.cos(theta)) * (s @ s)


def nearest_rotation(m) -> np.ndarray:
    """Closest rotation in Frobenius norm (polar factor via SVD)."""
    u, _, vt = np.linalg.svd(_as_matrix3(m))
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


@dataclass(frozen=True)
class Rotation:
    """3x3 orthonormal matrix with det +1, validated at construction."""

    matrix: np.ndarray

    def __post_init__(self):
        m = _as_matrix3(self.matrix)
        err = np.linalg.norm(m @ m.T - np.eye(3))
        if err > ORTHO_TOL:
            raise ValueError(f"matrix is not orthonormal (|RR^T - I|_F = {err:.3e})")
        det = np.linalg.det(m)
        if abs(det - 1.0) > ORTHO_TOL:
            raise ValueError(f"matrix determinant {det:.12f} != 1")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.eye(3))

    @staticmethod
    def from_axis_angle(axis_angle) -> "Rotation":
        return Rotation(rotation_from_axis_angle(axis_angle))

    @staticmethod
    def about_z(angle: float) -> "Rotation":
        return Rotation.from_axis_angle([0.0, 0.0, angle])

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.matrix.T

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T.copy())

    def angle_to(self, other: "Rotation") -> float:
        """Geodesic angle (radians) between two rotations."""
        c = 0.5 * (np.trace(self.matrix.T @ other.matrix) - 1.0)
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class Pose:
    """Rigid transform: x_out = R x + t. Used camera-from-tool throughout."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = _as_vector3(self.translation)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(Rotation.identity(), np.zeros(3))

    @staticmethod
    def from_rt(rotation_matrix, translation) -> "Pose":
        return Pose(Rotation(rotation_matrix), translation)

    @property
    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 form, bottom row exactly (0, 0, 0, 1)."""
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.matrix.T + self.translation


def compose(a: Pose, b: Pose) -> Pose:
    """Composition a . b (apply b first, then a)."""
    r = a.rotation.matrix @ b.rotation.matrix
    t = a.rotation.matrix @ b.translation + a.translation
    return Pose(Rotation(r), t)


def invert(p: Pose) -> Pose:
    rt = p.rotation.matrix.T
    return Pose(Rotation(rt.copy()), -(rt @ p.translation))


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera: u = fx*x/z + cx, v = fy*y/z + cy (x right, y down)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width >= 1 and self.height >= 1):
            raise ValueError("image size must be at least 1x1")


@dataclass(frozen=True)
class TangentUpdate:
    """Pose increment: body-frame rotation omega (rad) plus translation delta (m)."""

    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    delta_t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        w = _as_vector3(self.omega)
        d = _as_vector3(self.delta_t)
        if not (np.isfinite(w).all() and np.isfinite(d).all()):
            raise ValueError("tangent update components must be finite")
        w.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "omega", w)
        object.__setattr__(self, "delta_t", d)


def project(point_cam, k: Intrinsics, z_min: float = DEFAULT_Z_MIN) -> np.ndarray:
    """Project a camera-frame point to pixel coordinates (u, v)."""
    x, y, z = _as_vector3(point_cam)
    if z <= z_min:
        raise BehindCameraError(f"point depth {z:.6g} <= z_min {z_min:.6g}")
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])


def projection_jacobian(point_cam, k: Intrinsics, z_min: float = DEFAULT_Z_MIN) -> np.ndarray:
    """d(u, v)/d(x, y, z) of `project` at the given point. Shape (2, 3)."""
    x, y, z = _as_vector3(point_cam)
    if z <= z_min:
        raise BehindCameraError(f"point depth {z:.6g} <= z_min {z_min:.6g}")
    return np.array(
        [
            [k.fx / z, 0.0, -k.fx * x / (z * z)],
            [0.0, k.fy / z, -k.fy * y / (z * z)],
        ]
    )


def apply_rotation_update(r: Rotation, omega, alpha: float) -> Rotation:
    """First-order body-frame rotation step R (I + alpha [omega]x), re-projected to SO(3).

    Re-projection uses the polar factor (nearest rotation), so the result is
    orthonormal after arbitrarily many sequential updates. A zero omega
    returns ``r`` unchanged.
    """
    w = _as_vector3(omega)
    if not np.any(w):
        return r
    m = r.matrix @ (np.eye(3) + alpha * hat(w))
    return Rotation(nearest_rotation(m))


def perturb_pose(pose: Pose, omega, delta_t) -> Pose:
    """Exact exponential perturbation in the same chart the optimizer steps in.

    R' = R exp([omega]x), t' = t + delta_t. Used by finite-difference probes so
    numeric and analytic derivatives share one parameterization.
    """
    r = pose.rotation.matrix @ rotation_from_axis_angle(omega)
    return Pose(Rotation(nearest_rotation(r)), pose.translation + _as_vector3(delta_t))


def clamp_vector(v, lo: float, hi: float) -> np.ndarray:
    if lo > hi:
        raise ValueError(f"clamp range is empty: [{lo}, {hi}]")
    return np.clip(np.asarray(v, dtype=float), lo, hi)
