"""Articulated instrument model: kinematic chain with Gaussians rigidly attached.

Joint vectors are length-3 float arrays ``[pitch, jaw1, jaw2]`` in radians.
The chain is an ordered tree (every parent precedes its children); exactly
three links carry revolute joints and they map to q[0], q[1], q[2] in link
order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import JointOutOfRangeError, ModelValidationError
from .geometry import Pose, Rotation, hat, rotation_from_axis_angle

JOINT_TOL = 1e-9


@dataclass(frozen=True)
class JointLimits:
    """Box limits on the joint vector, componentwise q_min <= q <= q_max."""

    q_min: np.ndarray
    q_max: np.ndarray

    def __post_init__(self):
        lo = np.array(self.q_min, dtype=float).reshape(3)
        hi = np.array(self.q_max, dtype=float).reshape(3)
        if np.any(lo > hi):
            raise ValueError("q_min must be <= q_max componentwise")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "q_min", lo)
        object.__setattr__(self, "q_max", hi)

    def contains(self, q, tol: float = JOINT_TOL) -> bool:
        q = np.asarray(q, dtype=float)
        return bool(np.all(q >= self.q_min - tol) and np.all(q <= self.q_max + tol))


def clamp_joints(q, limits: JointLimits) -> np.ndarray:
    """Componentwise clamp of the joint vector into the box limits."""
    return np.clip(np.asarray(q, dtype=float), limits.q_min, limits.q_max)


@dataclass(frozen=True)
class Link:
    """One chain element: fixed offset from the parent, then an optional revolute joint."""

    name: str
    parent: int | None
    offset: Pose
    joint_kind: str  # "revolute" | "fixed"
    joint_axis: np.ndarray | None = None  # unit vector, link frame (after offset)

    def __post_init__(self):
        if self.joint_kind not in ("revolute", "fixed"):
            raise ValueError(f"unknown joint kind {self.joint_kind!r}")
        if self.joint_kind == "revolute":
            a = np.array(self.joint_axis, dtype=float).reshape(3)
            n = np.linalg.norm(a)
            if abs(n - 1.0) > 1e-9:
                raise ValueError("revolute joint axis must be a unit vector")
            a.setflags(write=False)
            object.__setattr__(self, "joint_axis", a)


@dataclass(frozen=True)
class GaussianPrimitive:
    """One 3D Gaussian rigidly attached to a link.

    scale holds per-axis standard deviations (meters); orient_local rotates
    the principal axes within the link frame.
    """

    link_id: int
    mean_local: np.ndarray
    scale: np.ndarray
    orient_local: Rotation
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean_local, dtype=float).reshape(3)
        scale = np.array(self.scale, dtype=float).reshape(3)
        color = np.array(self.color, dtype=float).reshape(3)
        if np.any(scale <= 0):
            raise ValueError("gaussian scale components must be > 0")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("gaussian opacity must be in [0, 1]")
        if np.any(color < 0) or np.any(color > 1):
            raise ValueError("gaussian color components must be in [0, 1]")
        for name, arr in (("mean_local", mean), ("scale", scale), ("color", color)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class PosedGaussian:
    """Gaussian after articulation + camera pose: camera-frame mean and covariance."""

    mean_cam: np.ndarray
    cov_cam: np.ndarray
    opacity: float
    color: np.ndarray


@dataclass(frozen=True)
class ToolModel:
    """Immutable articulated tool: ordered link tree + attached Gaussians."""

    links: tuple[Link, ...]
    gaussians: tuple[GaussianPrimitive, ...]
    limits: JointLimits
    shaft_length: float = 0.02

    def __post_init__(self):
        links = tuple(self.links)
        gaussians = tuple(self.gaussians)
        if not links:
            raise ModelValidationError("links", "model needs at least one link")
        if links[0].parent is not None:
            raise ModelValidationError("links[0].parent", "root link must have no parent")
        for i, link in enumerate(links):
            if i > 0 and (link.parent is None or not 0 <= link.parent < i):
                raise ModelValidationError(
                    f"links[{i}].parent",
                    "parent must reference an earlier link (ordered tree)",
                )
        n_rev = sum(1 for l in links if l.joint_kind == "revolute")
        if n_rev != 3:
            raise ModelValidationError("links", f"model must have exactly 3 revolute joints, found {n_rev}")
        for gi, g in enumerate(gaussians):
            if not 0 <= g.link_id < len(links):
                raise ModelValidationError(f"gaussians[{gi}].link", f"unknown link id {g.link_id}")
        if self.shaft_length <= 0:
            raise ModelValidationError("shaft_length", "must be > 0")
        object.__setattr__(self, "links", links)
        object.__setattr__(self, "gaussians", gaussians)

    @property
    def joint_links(self) -> tuple[int, ...]:
        """Link indices of the three revolute joints, in q order."""
        return tuple(i for i, l in enumerate(self.links) if l.joint_kind == "revolute")

    @property
    def neutral_q(self) -> np.ndarray:
        return clamp_joints(np.zeros(3), self.limits)

    def joint_index_of_link(self, link_id: int) -> int | None:
        for qi, li in enumerate(self.joint_links):
            if li == link_id:
                return qi
        return None


def _check_q(model: ToolModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(3)
    if not model.limits.contains(q):
        raise JointOutOfRangeError(
            f"q={np.array2string(q, precision=6)} outside limits "
            f"[{model.limits.q_min}, {model.limits.q_max}]"
        )
    return q


def forward_kinematics(model: ToolModel, q) -> list[Pose]:
    """Base-frame pose of every link: parent . fixed_offset . Rot(axis, q_joint)."""
    q = _check_q(model, q)
    joint_of = {li: qi for qi, li in enumerate(model.joint_links)}
    poses: list[Pose] = []
    for i, link in enumerate(model.links):
        local = link.offset
        if link.joint_kind == "revolute":
            rot = Rotation(rotation_from_axis_angle(link.joint_axis * q[joint_of[i]]))
            local = Pose(
                Rotation(local.rotation.matrix @ rot.matrix),
                local.translation,
            )
        if link.parent is None:
            poses.append(local)
        else:
            parent = poses[link.parent]
            poses.append(
                Pose(
                    Rotation(parent.rotation.matrix @ local.rotation.matrix),
                    parent.rotation.matrix @ local.translation + parent.translation,
                )
            )
    return poses


def _local_covariances(model: ToolModel) -> np.ndarray:
    covs = np.empty((len(model.gaussians), 3, 3))
    for i, g in enumerate(model.gaussians):
        o = g.orient_local.matrix
        covs[i] = (o * g.scale**2) @ o.T
    return covs


def pose_gaussians(model: ToolModel, pose: Pose, q) -> list[PosedGaussian]:
    """Articulate the Gaussians with FK, then move them into the camera frame.

    mean_cam = pose . FK_link(q) applied to mean_local;
    cov_cam  = R_total Sigma_local R_total^T with R_total = R_pose R_link R_orient.
    """
    link_poses = forward_kinematics(model, q)
    rp = pose.rotation.matrix
    tp = pose.translation
    out: list[PosedGaussian] = []
    for g in model.gaussians:
        lp = link_poses[g.link_id]
        mean_base = lp.rotation.matrix @ g.mean_local + lp.translation
        r_total = rp @ lp.rotation.matrix @ g.orient_local.matrix
        cov_cam = (r_total * g.scale**2) @ r_total.T
        out.append(
            PosedGaussian(
                mean_cam=rp @ mean_base + tp,
                cov_cam=cov_cam,
                opacity=g.opacity,
                color=g.color,
            )
        )
    return out


@dataclass(frozen=True)
class GaussianJacobians:
    """Per-gaussian derivatives of (mean_cam, cov_cam) w.r.t. (omega, delta_t, q).

    omega is a body-frame rotation tangent at the current pose
    (R' = R exp([omega]x)); delta_t is an additive camera-frame translation.
    dcov/ddelta_t is identically zero and therefore not stored.
    Shapes: dmean_* are (N, 3, 3) mapping parameter -> mean; dcov_* are
    (N, 3, 3, 3) indexed [gaussian, parameter, row, col].
    """

    dmean_domega: np.ndarray
    dmean_ddt: np.ndarray
    dmean_dq: np.ndarray
    dcov_domega: np.ndarray
    dcov_dq: np.ndarray


def jacobian_gaussians(model: ToolModel, pose: Pose, q) -> GaussianJacobians:
    """Analytic Jacobians matching `pose_gaussians` under `perturb_pose` + q offsets."""
    q = _check_q(model, q)
    link_poses = forward_kinematics(model, q)
    rp = pose.rotation.matrix

    # base-frame joint axes/origins and ancestor sets
    joint_axis_base: list[np.ndarray] = []
    joint_origin_base: list[np.ndarray] = []
    for li in model.joint_links:
        link = model.links[li]
        if link.parent is None:
            parent_r, parent_t = np.eye(3), np.zeros(3)
        else:
            pp = link_poses[link.parent]
            parent_r, parent_t = pp.rotation.matrix, pp.translation
        r_pre = parent_r @ link.offset.rotation.matrix
        joint_axis_base.append(r_pre @ link.joint_axis)
        joint_origin_base.append(parent_r @ link.offset.translation + parent_t)

    ancestors: list[set[int]] = []
    for i in range(len(model.links)):
        chain = set()
        j: int | None = i
        while j is not None:
            chain.add(j)
            j = model.links[j].parent
        ancestors.append(chain)

    n = len(model.gaussians)
    dmean_domega = np.zeros((n, 3, 3))
    dmean_ddt = np.tile(np.eye(3), (n, 1, 1))
    dmean_dq = np.zeros((n, 3, 3))
    dcov_domega = np.zeros((n, 3, 3, 3))
    dcov_dq = np.zeros((n, 3, 3, 3))

    eye_hats = [hat(e) for e in np.eye(3)]
    for gi, g in enumerate(model.gaussians):
        lp = link_poses[g.link_id]
        mean_base = lp.rotation.matrix @ g.mean_local + lp.translation
        r_link = lp.rotation.matrix
        cov_base = (r_link @ g.orient_local.matrix * g.scale**2) @ (r_link @ g.orient_local.matrix).T

        dmean_domega[gi] = -rp @ hat(mean_base)
        for k in range(3):
            hk = eye_hats[k]
            dcov_domega[gi, k] = rp @ (hk @ cov_base - cov_base @ hk) @ rp.T

        for qi, li in enumerate(model.joint_links):
            if li not in ancestors[g.link_id]:
                continue
            a = joint_axis_base[qi]
            ha = hat(a)
            dmean_dq[gi, :, qi] = rp @ np.cross(a, mean_base - joint_origin_base[qi])
            dcov_dq[gi, qi] = rp @ (ha @ cov_base - cov_base @ ha) @ rp.T

    return GaussianJacobians(dmean_domega, dmean_ddt, dmean_dq, dcov_domega, dcov_dq)


def default_tool_model() -> ToolModel:
    """Built-in analytic needle-driver stub: short shaft, pitch link, two mirrored jaws.

    Deterministic. Link frames: +z runs from the shaft toward the jaw tips,
    pitch rotates about +x, and the jaws open about mirrored +/-y axes, so
    positive jaw angles open outward and crossing requires q2 + q3 < 0.
    """
    shaft_length = 0.02
    limits = JointLimits(
        q_min=np.array([-np.pi / 2, -0.35, -0.35]),
        q_max=np.array([np.pi / 2, 1.4, 1.4]),
    )
    identity = Pose.identity()
    links = (
        Link("shaft", None, identity, "fixed"),
        Link("wrist", 0, identity, "revolute", np.array([1.0, 0.0, 0.0])),
        Link(
            "jaw_left",
            1,
            Pose(Rotation.identity(), np.array([0.0, 0.0, 0.004])),
            "revolute",
            np.array([0.0, 1.0, 0.0]),
        ),
        Link(
            "jaw_right",
            1,
            Pose(Rotation.identity(), np.array([0.0, 0.0, 0.004])),
            "revolute",
            np.array([0.0, -1.0, 0.0]),
        ),
    )

    gaussians: list[GaussianPrimitive] = []
    rot_i = Rotation.identity()

    def add(link_id, mean, scale, color, opacity=0.9):
        gaussians.append(
            GaussianPrimitive(
                link_id=link_id,
                mean_local=np.array(mean),
                scale=np.array(scale),
                orient_local=rot_i,
                opacity=opacity,
                color=np.array(color),
            )
        )

    shaft_color = (0.62, 0.64, 0.68)
    for z in np.linspace(-shaft_length + 0.001, -0.001, 7):
        add(0, (0.0, 0.0, z), (0.0016, 0.0016, 0.0022), shaft_color, 0.92)
        for dx, dy in ((0.0012, 0.0), (-0.0012, 0.0), (0.0, 0.0012), (0.0, -0.0012)):
            add(0, (dx, dy, z), (0.0013, 0.0013, 0.0020), shaft_color, 0.9)

    wrist_color = (0.45, 0.47, 0.52)
    for z in (0.0008, 0.0021, 0.0034):
        for dx in (0.0009, -0.0009):
            add(1, (dx, 0.0, z), (0.0012, 0.0014, 0.0015), wrist_color, 0.9)
    add(1, (0.0, 0.0009, 0.0021), (0.0012, 0.0012, 0.0016), wrist_color, 0.9)
    add(1, (0.0, -0.0009, 0.0021), (0.0012, 0.0012, 0.0016), wrist_color, 0.9)

    jaw_color = (0.78, 0.79, 0.82)
    tip_color = (0.85, 0.78, 0.55)
    for link_id, side in ((2, 1.0), (3, -1.0)):
        zs = np.linspace(0.001, 0.009, 8)
        for idx, z in enumerate(zs):
            taper = 1.0 - 0.55 * idx / (len(zs) - 1)
            color = tip_color if idx >= len(zs) - 2 else jaw_color
            add(
                link_id,
                (side * 0.0008, 0.0, z),
                (0.0013 * taper, 0.0011 * taper, 0.0016),
                color,
                0.9,
            )
        add(link_id, (side * 0.0008, 0.0007, 0.003), (0.0008, 0.0008, 0.0012), jaw_color, 0.85)
        add(link_id, (side * 0.0008, -0.0007, 0.003), (0.0008, 0.0008, 0.0012), jaw_color, 0.85)

    return ToolModel(tuple(links), tuple(gaussians), limits, shaft_length)


# --- model file I/O ---------------------------------------------------------


def _axis_angle_of(rotation: Rotation) -> list[float]:
    m = rotation.matrix
    cos_t = np.clip(0.5 * (np.trace(m) - 1.0), -1.0, 1.0)
    theta = float(np.arccos(cos_t))
    if theta < 1e-12:
        return [0.0, 0.0, 0.0]
    if abs(np.pi - theta) < 1e-9:
        # axis from the symmetric part; stable at 180 degrees
        b = 0.5 * (m + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(b), 0.0, None))
        k = int(np.argmax(axis))
        axis = b[:, k] / axis[k]
        axis /= np.linalg.norm(axis)
        return list(axis * theta)
    axis = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) / (2.0 * np.sin(theta))
    return list(axis * theta)


def save_tool_model(model: ToolModel, path) -> None:
    doc = {
        "shaft_length": float(model.shaft_length),
        "limits": {
            "min": [float(v) for v in model.limits.q_min],
            "max": [float(v) for v in model.limits.q_max],
        },
        "links": [
            {
                "name": l.name,
                "parent": None if l.parent is None else model.links[l.parent].name,
                "offset": {
                    "translation": [float(v) for v in l.offset.translation],
                    "axis_angle": [float(v) for v in _axis_angle_of(l.offset.rotation)],
                },
                "joint": (
                    "fixed"
                    if l.joint_kind == "fixed"
                    else {"kind": "revolute", "axis": [float(v) for v in l.joint_axis]}
                ),
            }
            for l in model.links
        ],
        "gaussians": [
            {
                "link": model.links[g.link_id].name,
                "mean": [float(v) for v in g.mean_local],
                "scale": [float(v) for v in g.scale],
                "orient_axis_angle": [float(v) for v in _axis_angle_of(g.orient_local)],
                "opacity": float(g.opacity),
                "color": [float(v) for v in g.color],
            }
            for g in model.gaussians
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(doc, f, sort_keys=False)


def _want(doc: dict, key: str, locator: str):
    if key not in doc:
        raise ModelValidationError(f"{locator}.{key}", "missing required field")
    return doc[key]


def _vec3(value, locator: str) -> np.ndarray:
    try:
        a = np.array(value, dtype=float).reshape(3)
    except Exception:
        raise ModelValidationError(locator, "expected a list of 3 numbers") from None
    if not np.isfinite(a).all():
        raise ModelValidationError(locator, "components must be finite")
    return a


def load_tool_model(path) -> ToolModel:
    """Load and validate a tool-model file, reporting the first violation.

    Raises ModelValidationError with a path-like locator such as
    ``links[2].offset.translation``.
    """
    with open(path, "r", encoding="utf-8") as f:
        doc = yaml.safe_load(f)
    if not isinstance(doc, dict):
        raise ModelValidationError("$", "document must be a mapping")

    limits_doc = _want(doc, "limits", "$")
    try:
        limits = JointLimits(
            _vec3(_want(limits_doc, "min", "limits"), "limits.min"),
            _vec3(_want(limits_doc, "max", "limits"), "limits.max"),
        )
    except ValueError as e:
        raise ModelValidationError("limits", str(e)) from None

    links_doc = _want(doc, "links", "$")
    names: dict[str, int] = {}
    links: list[Link] = []
    for i, ld in enumerate(links_doc):
        loc = f"links[{i}]"
        name = _want(ld, "name", loc)
        if name in names:
            raise ModelValidationError(f"{loc}.name", f"duplicate link name {name!r}")
        parent_name = ld.get("parent")
        if parent_name is None:
            parent = None
        elif parent_name in names:
            parent = names[parent_name]
        else:
            raise ModelValidationError(f"{loc}.parent", f"unknown parent {parent_name!r} (must appear earlier)")
        off = _want(ld, "offset", loc)
        trans = _vec3(_want(off, "translation", f"{loc}.offset"), f"{loc}.offset.translation")
        aa = _vec3(_want(off, "axis_angle", f"{loc}.offset"), f"{loc}.offset.axis_angle")
        offset = Pose(Rotation(rotation_from_axis_angle(aa)), trans)
        joint = _want(ld, "joint", loc)
        if joint == "fixed":
            links.append(Link(name, parent, offset, "fixed"))
        else:
            kind = _want(joint, "kind", f"{loc}.joint")
            if kind != "revolute":
                raise ModelValidationError(f"{loc}.joint.kind", f"unknown joint kind {kind!r}")
            axis = _vec3(_want(joint, "axis", f"{loc}.joint"), f"{loc}.joint.axis")
            n = np.linalg.norm(axis)
            if n < 1e-12:
                raise ModelValidationError(f"{loc}.joint.axis", "axis must be nonzero")
            try:
                links.append(Link(name, parent, offset, "revolute", axis / n))
            except ValueError as e:
                raise ModelValidationError(f"{loc}.joint.axis", str(e)) from None
        names[name] = i

    gaussians: list[GaussianPrimitive] = []
    for gi, gd in enumerate(doc.get("gaussians", [])):
        loc = f"gaussians[{gi}]"
        link_name = _want(gd, "link", loc)
        if link_name not in names:
            raise ModelValidationError(f"{loc}.link", f"unknown link {link_name!r}")
        try:
            gaussians.append(
                GaussianPrimitive(
                    link_id=names[link_name],
                    mean_local=_vec3(_want(gd, "mean", loc), f"{loc}.mean"),
                    scale=_vec3(_want(gd, "scale", loc), f"{loc}.scale"),
                    orient_local=Rotation(
                        rotation_from_axis_angle(
                            _vec3(gd.get("orient_axis_angle", [0, 0, 0]), f"{loc}.orient_axis_angle")
                        )
                    ),
                    opacity=float(_want(gd, "opacity", loc)),
                    color=_vec3(_want(gd, "color", loc), f"{loc}.color"),
                )
            )
        except ValueError as e:
            raise ModelValidationError(loc, str(e)) from None

    try:
        return ToolModel(
            tuple(links),
            tuple(gaussians),
            limits,
            float(doc.get("shaft_length", 0.02)),
        )
    except ModelValidationError:
        raise
    except ValueError as e:
        raise ModelValidationError("$", str(e)) from None
