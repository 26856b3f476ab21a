"""Forward kinematics and pointing control for the reference 6-DOF probe arm.

The arm is a standard-DH serial chain (PUMA-like topology): base yaw,
shoulder pitch, elbow pitch, forearm roll, wrist pitch, probe roll. The
gamma probe points along the z-axis of the last frame and its sensing tip
sits at the origin of that frame.

Every routine accepts a leading batch dimension so that a vector of
environments can be stepped with the same arithmetic as a single one.
Reductions are written as explicit elementwise sums over fixed-length axes,
which keeps batched and scalar evaluations bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

N_JOINTS = 6

# Fixed DH topology of the reference arm: twist angles, joint offsets and
# whether each link length enters the chain as a DH ``d`` or an ``a``.
DH_ALPHA = np.array([np.pi / 2, 0.0, np.pi / 2, -np.pi / 2, np.pi / 2, 0.0])
DH_OFFSET = np.array([0.0, np.radians(40.0), np.radians(-20.0), 0.0, np.radians(-20.0), 0.0])
_LENGTH_IS_D = np.array([True, False, False, True, False, True])

DEFAULT_LINK_LENGTHS = (350.0, 300.0, 20.0, 300.0, 10.0, 60.0)
DEFAULT_JOINT_LIMITS = (
    (np.radians(-170.0), np.radians(170.0)),
    (np.radians(-90.0), np.radians(90.0)),
    (np.radians(-110.0), np.radians(60.0)),
    (np.radians(-170.0), np.radians(170.0)),
    (np.radians(-110.0), np.radians(110.0)),
    (np.radians(-170.0), np.radians(170.0)),
)
DEFAULT_INCREMENT_CAP = 0.05  # rad per joint per step


class KinematicsError(ValueError):
    """Base class for kinematic failures."""


class JointLimitError(KinematicsError):
    def __init__(self, joint: int, value: float, limits: tuple[float, float]):
        self.joint = joint
        self.value = value
        self.limits = limits
        super().__init__(
            f"joint {joint} = {value:.6g} rad outside limits [{limits[0]:.6g}, {limits[1]:.6g}]"
        )


class PointingError(KinematicsError):
    """Raised when the pose solver cannot reach the requested pose.

    ``angle_error`` (radians) and ``tip_error`` (mm) describe the best
    iterate found; ``joints`` holds it.
    """

    def __init__(self, message: str, angle_error: float, tip_error: float, joints: "JointState"):
        self.angle_error = angle_error
        self.tip_error = tip_error
        self.joints = joints
        super().__init__(
            f"{message} (best axis error {np.degrees(angle_error):.3f} deg, tip error {tip_error:.3f} mm)"
        )


@dataclass(frozen=True, eq=False)
class ArmModel:
    link_lengths: tuple[float, ...] = DEFAULT_LINK_LENGTHS
    joint_limits: tuple[tuple[float, float], ...] = DEFAULT_JOINT_LIMITS
    base: np.ndarray = field(default_factory=lambda: np.eye(4))
    increment_cap: float = DEFAULT_INCREMENT_CAP

    def __post_init__(self):
        lengths = tuple(float(x) for x in self.link_lengths)
        limits = tuple((float(lo), float(hi)) for lo, hi in self.joint_limits)
        if len(lengths) != N_JOINTS or len(limits) != N_JOINTS:
            raise ValueError("arm needs exactly 6 link lengths and 6 joint-limit pairs")
        if any(not np.isfinite(x) or x <= 0 for x in lengths):
            raise ValueError(f"link lengths must be positive, got {lengths}")
        for i, (lo, hi) in enumerate(limits):
            if not lo < hi:
                raise ValueError(f"joint {i} limits must satisfy min < max, got ({lo}, {hi})")
        base = np.array(self.base, dtype=float)
        if base.shape != (4, 4):
            raise ValueError("base frame must be a 4x4 homogeneous transform")
        if not np.allclose(base[:3, :3] @ base[:3, :3].T, np.eye(3), atol=1e-9) or not np.allclose(
            base[3], [0, 0, 0, 1]
        ):
            raise ValueError("base frame must be a rigid transform")
        if not self.increment_cap > 0:
            raise ValueError("increment cap must be positive")
        base.setflags(write=False)
        object.__setattr__(self, "link_lengths", lengths)
        object.__setattr__(self, "joint_limits", limits)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "increment_cap", float(self.increment_cap))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ArmModel):
            return NotImplemented
        return (
            self.link_lengths == other.link_lengths
            and self.joint_limits == other.joint_limits
            and self.increment_cap == other.increment_cap
            and bool(np.array_equal(self.base, other.base))
        )

    __hash__ = None

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.joint_limits])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.joint_limits])

    @property
    def dh_d(self) -> np.ndarray:
        return np.where(_LENGTH_IS_D, self.link_lengths, 0.0)

    @property
    def dh_a(self) -> np.ndarray:
        return np.where(_LENGTH_IS_D, 0.0, self.link_lengths)


@dataclass(frozen=True, eq=False)
class JointState:
    q: np.ndarray
    qdot: np.ndarray = None

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(N_JOINTS)
        qdot = np.zeros(N_JOINTS) if self.qdot is None else np.array(self.qdot, dtype=float).reshape(N_JOINTS)
        q.setflags(write=False)
        qdot.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qdot", qdot)


@dataclass(frozen=True, eq=False)
class ProbePose:
    tip: np.ndarray
    axis: np.ndarray
    orientation: np.ndarray  # unit quaternion, scalar-last (x, y, z, w)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "ProbePose":
        R = T[:3, :3]
        tip = T[:3, 3].copy()
        axis = R[:, 2].copy()
        quat = Rotation.from_matrix(R).as_quat()
        for a in (tip, axis, quat):
            a.setflags(write=False)
        return cls(tip=tip, axis=axis, orientation=quat)


def check_limits(arm: ArmModel, q: np.ndarray) -> None:
    q = np.asarray(q, dtype=float)
    for i, (lo, hi) in enumerate(arm.joint_limits):
        if not lo <= q[i] <= hi:
            raise JointLimitError(i, float(q[i]), (lo, hi))


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Explicit contraction; matmul may route batched and single inputs
    # through different BLAS kernels.
    return (a[..., :, :, None] * b[..., None, :, :]).sum(axis=-2)


def _dh_matrices(arm: ArmModel, q: np.ndarray) -> np.ndarray:
    theta = q + DH_OFFSET
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(DH_ALPHA), np.sin(DH_ALPHA)
    d, a = arm.dh_d, arm.dh_a
    T = np.zeros(q.shape + (4, 4))
    T[..., 0, 0] = ct
    T[..., 0, 1] = -st * ca
    T[..., 0, 2] = st * sa
    T[..., 0, 3] = a * ct
    T[..., 1, 0] = st
    T[..., 1, 1] = ct * ca
    T[..., 1, 2] = -ct * sa
    T[..., 1, 3] = a * st
    T[..., 2, 1] = np.broadcast_to(sa, theta.shape)
    T[..., 2, 2] = np.broadcast_to(ca, theta.shape)
    T[..., 2, 3] = np.broadcast_to(d, theta.shape)
    T[..., 3, 3] = 1.0
    return T


def chain_frames(arm: ArmModel, q: np.ndarray) -> np.ndarray:
    """World frames of the base and each link, shape ``(..., 7, 4, 4)``."""
    q = np.asarray(q, dtype=float)
    links = _dh_matrices(arm, q)
    frames = np.empty(q.shape[:-1] + (N_JOINTS + 1, 4, 4))
    frames[..., 0, :, :] = arm.base
    for i in range(N_JOINTS):
        frames[..., i + 1, :, :] = _matmul(frames[..., i, :, :], links[..., i, :, :])
    return frames


def tip_and_axis(arm: ArmModel, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched probe tip (mm) and unit forward axis; no limit checking."""
    T = chain_frames(arm, q)[..., -1, :, :]
    return T[..., :3, 3], T[..., :3, 2]


def forward_kinematics(arm: ArmModel, joints: JointState) -> ProbePose:
    check_limits(arm, joints.q)
    T = chain_frames(arm, joints.q)[-1]
    return ProbePose.from_matrix(T)


def home_joints() -> JointState:
    return JointState(np.zeros(N_JOINTS))


def geometric_jacobian(arm: ArmModel, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tip linear-velocity and axis-rate Jacobians, each ``(..., 3, 6)``.

    Also returns the tip positions. The axis Jacobian columns are
    ``z_i x axis``, the rate of change of the probe direction per joint.
    """
    frames = chain_frames(arm, q)
    tip = frames[..., -1, :3, 3]
    axis = frames[..., -1, :3, 2]
    z = frames[..., :-1, :3, 2]  # (..., 6, 3): joint i rotates about z of frame i
    p = frames[..., :-1, :3, 3]
    jv = np.cross(z, tip[..., None, :] - p)
    ja = np.cross(z, axis[..., None, :])
    return np.swapaxes(jv, -1, -2), np.swapaxes(ja, -1, -2), tip


def apply_action(arm: ArmModel, joints: JointState, delta) -> JointState:
    """Incremental joint command: saturate at the increment cap, clamp at limits."""
    delta = np.asarray(delta, dtype=float).reshape(N_JOINTS)
    if not np.all(np.isfinite(delta)):
        raise ValueError(f"non-finite joint increment: {delta}")
    delta = np.clip(delta, -arm.increment_cap, arm.increment_cap)
    q_new = np.clip(joints.q + delta, arm.lower, arm.upper)
    return JointState(q_new, q_new - joints.q)


def _angle_between(u: np.ndarray, v: np.ndarray) -> float:
    # atan2 form stays accurate for tiny angles where arccos loses precision.
    return float(np.arctan2(np.linalg.norm(np.cross(u, v)), np.dot(u, v)))


def solve_pose(
    arm: ArmModel,
    joints: JointState,
    target_tip,
    target_axis,
    *,
    max_iter: int = 200,
    damping: float = 1e-2,
    position_weight: float = 0.02,
    angle_tol: float = np.radians(0.05),
    tip_tol: float = 0.05,
) -> JointState:
    """Damped least-squares solve for a probe pose (tip position + forward axis).

    Roll about the probe axis is left free. Iterates stay clamped to the joint
    limits. When the local solve stalls (typically with the forearm roll
    against a limit) it is retried once from the other wrist branch,
    ``(q4 +- pi, -q5)``, which points the wrist axis the same way. If the pose
    still cannot be reached a :class:`PointingError` carries the best
    residual found.
    """
    kw = dict(max_iter=max_iter, damping=damping, position_weight=position_weight, angle_tol=angle_tol, tip_tol=tip_tol)
    check_limits(arm, joints.q)
    try:
        q = _solve_pose_local(arm, joints.q, target_tip, target_axis, **kw)
    except PointingError as first:
        seed = joints.q.copy()
        seed[3] += -np.pi if seed[3] > 0 else np.pi
        seed[4] = -seed[4]
        if not np.all((seed >= arm.lower) & (seed <= arm.upper)):
            raise
        try:
            q = _solve_pose_local(arm, seed, target_tip, target_axis, **kw)
        except PointingError as second:
            raise first if first.angle_error + first.tip_error <= second.angle_error + second.tip_error else second
    return JointState(q, q - joints.q)


def _solve_pose_local(arm, q0, target_tip, target_axis, *, max_iter, damping, position_weight, angle_tol, tip_tol):
    target_tip = np.asarray(target_tip, dtype=float)
    target_axis = np.asarray(target_axis, dtype=float)
    target_axis = target_axis / np.linalg.norm(target_axis)
    lower, upper = arm.lower, arm.upper

    def residual(q):
        tip, axis = tip_and_axis(arm, q)
        e = np.concatenate([position_weight * (target_tip - tip), target_axis - axis])
        return e, float(e @ e), tip, axis

    q = np.array(q0, dtype=float)
    e, cost, tip, axis = residual(q)
    lam = damping
    stalled = 0
    for _ in range(max_iter):
        ang = _angle_between(axis, target_axis)
        tip_err = float(np.linalg.norm(target_tip - tip))
        if ang <= angle_tol and tip_err <= tip_tol:
            return q
        jv, ja, _ = geometric_jacobian(arm, q)
        J = np.vstack([position_weight * jv, ja])
        while lam < 1e6:
            step = J.T @ np.linalg.solve(J @ J.T + lam * np.eye(6), e)
            # Large rotations are poorly served by the linearisation; cap the step.
            norm = np.linalg.norm(step)
            if norm > 0.3:
                step *= 0.3 / norm
            q_try = np.clip(q + step, lower, upper)
            e_try, cost_try, tip_try, axis_try = residual(q_try)
            if cost_try < cost:
                # stop early once progress stalls against a limit or singularity
                stalled = stalled + 1 if cost - cost_try < 1e-4 * cost else 0
                q, e, cost, tip, axis = q_try, e_try, cost_try, tip_try, axis_try
                lam = max(lam * 0.3, 1e-6)
                break
            lam *= 4.0
        else:
            break
        if stalled >= 8:
            break
    ang = _angle_between(axis, target_axis)
    tip_err = float(np.linalg.norm(target_tip - tip))
    raise PointingError("pose not reached within iteration budget", ang, tip_err, JointState(q))


def solve_pointing(arm: ArmModel, joints: JointState, target_axis, **kwargs) -> JointState:
    """Re-aim the probe along ``target_axis`` while holding its tip in place."""
    pose = forward_kinematics(arm, joints)
    target_axis = np.asarray(target_axis, dtype=float)
    if abs(np.linalg.norm(target_axis) - 1.0) > 1e-6:
        raise ValueError("target_axis must be a unit vector")
    if _angle_between(pose.axis, target_axis) <= kwargs.get("angle_tol", np.radians(0.05)):
        return JointState(joints.q, np.zeros(N_JOINTS))
    return solve_pose(arm, joints, pose.tip, target_axis, **kwargs)
