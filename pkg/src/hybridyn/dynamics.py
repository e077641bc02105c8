"""Serial-chain kinematics and rigid-body dynamics.

Conventions: classic Denavit-Hartenberg rows ``(a, alpha, d, theta_offset)``
with ``T_i = Rz(theta_i + offset) Tz(d) Tx(a) Rx(alpha)``. Link ``i``'s frame
sits at its distal joint; COMs and inertias are given in that frame.
Wrenches are ``[fx, fy, fz, mx, my, mz]`` acting on the end effector.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

from ._backend import core
from .errors import ContractError, SingularMatrixError


def _frozen(a, shape=None, name="array"):
    arr = np.array(a, dtype=float)
    if shape is not None and arr.shape != shape:
        raise ContractError(f"{name}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name}: entries must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RobotModel:
    dh_rows: np.ndarray
    link_mass: np.ndarray
    link_com: np.ndarray
    link_inertia: np.ndarray
    joint_limits: np.ndarray
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    wrist_lump_mass: float = 0.0
    name: str = "robot"

    def __post_init__(self):
        n = len(np.asarray(self.dh_rows))
        set_ = object.__setattr__
        set_(self, "dh_rows", _frozen(self.dh_rows, (n, 4), "dh_rows"))
        set_(self, "link_mass", _frozen(self.link_mass, (n,), "link_mass"))
        set_(self, "link_com", _frozen(self.link_com, (n, 3), "link_com"))
        set_(self, "link_inertia", _frozen(self.link_inertia, (n, 3, 3), "link_inertia"))
        set_(self, "joint_limits", _frozen(self.joint_limits, (n, 2), "joint_limits"))
        set_(self, "gravity", _frozen(self.gravity, (3,), "gravity"))
        if np.any(self.link_mass < 0) or self.wrist_lump_mass < 0:
            raise ContractError("masses must be non-negative")
        for i, I in enumerate(self.link_inertia):
            if not np.allclose(I, I.T, atol=1e-12):
                raise ContractError(f"link {i + 1} inertia is not symmetric")
            if np.linalg.eigvalsh(I).min() < -1e-12:
                raise ContractError(f"link {i + 1} inertia is not positive semi-definite")
        if np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise ContractError("joint limits need min < max")
        # contiguous arrays handed to the kernels
        set_(self, "_k", (np.ascontiguousarray(self.dh_rows),
                          np.ascontiguousarray(self.link_mass),
                          np.ascontiguousarray(self.link_com),
                          np.ascontiguousarray(self.link_inertia.reshape(n, 9))))

    @property
    def n_joints(self) -> int:
        return self.dh_rows.shape[0]

    def with_gravity(self, gravity) -> "RobotModel":
        return RobotModel(self.dh_rows, self.link_mass, self.link_com, self.link_inertia,
                          self.joint_limits, gravity, self.wrist_lump_mass, self.name)

    def lumped_arm(self) -> "RobotModel":
        """First three links with ``wrist_lump_mass`` as a point mass at the third frame."""
        mass = self.link_mass[:3].copy()
        com = self.link_com[:3].copy()
        inertia = self.link_inertia[:3].copy()
        m3, mw = mass[2], self.wrist_lump_mass
        c3 = com[2]
        total = m3 + mw
        new_c = (m3 * c3) / total if total > 0 else c3
        # parallel-axis shift of link 3 to the combined COM, plus the point mass
        for m, p in ((m3, c3 - new_c), (mw, -new_c)):
            inertia[2] += m * (p @ p * np.eye(3) - np.outer(p, p))
        mass[2] = total
        com[2] = new_c
        return RobotModel(self.dh_rows[:3], mass, com, inertia, self.joint_limits[:3],
                          self.gravity, 0.0, self.name + "-lumped")


def _inertia_matrix(entry):
    v = np.asarray(entry, dtype=float)
    if v.shape == (3, 3):
        return v
    if v.shape == (6,):
        ixx, iyy, izz, ixy, ixz, iyz = v
        return np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])
    raise ContractError(f"inertia entry must be 3x3 or 6 values, got shape {v.shape}")


def robot_from_dict(cfg: dict) -> RobotModel:
    """Build a model from the config schema (angles in degrees)."""
    try:
        dh = np.array(cfg["dh"], dtype=float)
        dh[:, 1] = np.deg2rad(dh[:, 1])
        dh[:, 3] = np.deg2rad(dh[:, 3])
        return RobotModel(
            dh_rows=dh,
            link_mass=cfg["mass"],
            link_com=cfg["com"],
            link_inertia=[_inertia_matrix(e) for e in cfg["inertia"]],
            joint_limits=np.deg2rad(np.array(cfg["limits"], dtype=float)),
            gravity=cfg.get("gravity", [0.0, 0.0, -9.81]),
            wrist_lump_mass=float(cfg.get("wrist_lump_mass", 0.0)),
            name=str(cfg.get("name", "robot")),
        )
    except KeyError as exc:
        raise ContractError(f"robot config missing key {exc}") from None


def load_robot(path) -> RobotModel:
    with open(path) as fh:
        return robot_from_dict(yaml.safe_load(fh))


def reference_robot() -> RobotModel:
    """The bundled 6-DOF reference arm."""
    text = resources.files("hybridyn").joinpath("data/reference_robot.yaml").read_text()
    return robot_from_dict(yaml.safe_load(text))


@dataclass(frozen=True, eq=False)
class JointState:
    theta: np.ndarray
    theta_dot: np.ndarray
    theta_ddot: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.theta).shape
        for name in ("theta", "theta_dot", "theta_ddot"):
            object.__setattr__(self, name, _frozen(getattr(self, name), n, name))
        if len(n) != 1:
            raise ContractError("joint state vectors must be 1-D")

    @classmethod
    def at_rest(cls, theta):
        theta = np.asarray(theta, dtype=float)
        return cls(theta, np.zeros_like(theta), np.zeros_like(theta))


@dataclass(frozen=True, eq=False)
class LossParams:
    b_m: np.ndarray
    c_m: np.ndarray
    f_c: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.b_m).shape
        for name in ("b_m", "c_m", "f_c"):
            object.__setattr__(self, name, _frozen(getattr(self, name), n, name))
        if np.any(self.c_m < 0) or np.any(self.f_c < 0):
            raise ContractError("c_m and f_c must be non-negative")

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))

    def to_dict(self):
        return {"b_m": self.b_m.tolist(), "c_m": self.c_m.tolist(), "f_c": self.f_c.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["b_m"], d["c_m"], d["f_c"])


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3), "rotation")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ContractError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", _frozen(self.translation, (3,), "translation"))

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T


def _check_theta(model, theta, name="theta"):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.n_joints,):
        raise ContractError(f"{name}: expected {model.n_joints} joints, got shape {theta.shape}")
    return theta


def _dh_matrix(a, alpha, d, th):
    ct, st, ca, sa = np.cos(th), np.sin(th), np.cos(alpha), np.sin(alpha)
    return np.array([[ct, -st * ca, st * sa, a * ct],
                     [st, ct * ca, -ct * sa, a * st],
                     [0.0, sa, ca, d],
                     [0.0, 0.0, 0.0, 1.0]])


def link_transforms(model: RobotModel, theta) -> list[np.ndarray]:
    """Homogeneous transforms of frames 0..n in the base frame (frame 0 = base)."""
    theta = _check_theta(model, theta)
    T = np.eye(4)
    out = [T]
    for (a, alpha, d, off), q in zip(model.dh_rows, theta):
        T = T @ _dh_matrix(a, alpha, d, q + off)
        out.append(T)
    return out


def forward_kinematics(model: RobotModel, theta, tool=None) -> Pose:
    """End-effector pose; ``tool`` is an optional point offset in the last frame."""
    theta = _check_theta(model, theta)
    lo, hi = model.joint_limits[:, 0], model.joint_limits[:, 1]
    if np.any(theta < lo - 1e-12) or np.any(theta > hi + 1e-12):
        warnings.warn("joint angles outside joint limits", RuntimeWarning, stacklevel=2)
    T = link_transforms(model, theta)[-1]
    p = T[:3, 3] if tool is None else T[:3, 3] + T[:3, :3] @ np.asarray(tool, dtype=float)
    return Pose(T[:3, :3], p)


def geometric_jacobian(model: RobotModel, theta, tool=None, frame: str = "base") -> np.ndarray:
    """6 x n Jacobian mapping joint rates to [linear; angular] end-effector velocity.

    With ``frame="ee"`` both blocks are expressed in the end-effector axes.
    Force-domain use: ``tau = J.T @ wrench`` with the wrench in the same frame.
    """
    Ts = link_transforms(model, _check_theta(model, theta))
    Tn = Ts[-1]
    p_e = Tn[:3, 3] if tool is None else Tn[:3, 3] + Tn[:3, :3] @ np.asarray(tool, dtype=float)
    n = model.n_joints
    J = np.empty((6, n))
    for i in range(n):
        z = Ts[i][:3, 2]
        J[:3, i] = np.cross(z, p_e - Ts[i][:3, 3])
        J[3:, i] = z
    if frame == "ee":
        R = Tn[:3, :3]
        J = np.vstack([R.T @ J[:3], R.T @ J[3:]])
    elif frame != "base":
        raise ContractError(f"unknown frame {frame!r}")
    return J


def _state_arrays(model, state):
    n = model.n_joints
    if state.theta.shape != (n,):
        raise ContractError(f"state has {state.theta.shape[0]} joints, model has {n}")
    return state.theta, state.theta_dot, state.theta_ddot


def inverse_dynamics(model: RobotModel, state: JointState) -> np.ndarray:
    """Lossless joint torque M(q) qdd + C(q, qd) qd + G(q) by recursive Newton-Euler."""
    q, qd, qdd = _state_arrays(model, state)
    return core.rnea(*model._k, model.gravity, q, qd, qdd)


def inverse_dynamics_batch(model: RobotModel, Q, QD, QDD) -> np.ndarray:
    """Row-wise inverse dynamics for (N, n) arrays."""
    arrs = [np.ascontiguousarray(np.atleast_2d(a), dtype=float) for a in (Q, QD, QDD)]
    if any(a.shape[1] != model.n_joints for a in arrs) or len({a.shape for a in arrs}) != 1:
        raise ContractError("batch arrays must share shape (N, n_joints)")
    return core.rnea_batch(*model._k, model.gravity, *arrs)


def mass_matrix(model: RobotModel, theta) -> np.ndarray:
    return core.mass_matrix(*model._k, _check_theta(model, theta))


def gravity_torque(model: RobotModel, theta) -> np.ndarray:
    z = np.zeros(model.n_joints)
    return core.rnea(*model._k, model.gravity, _check_theta(model, theta), z, z)


def coriolis_product(model: RobotModel, theta, theta_dot) -> np.ndarray:
    """C(q, qd) qd (velocity-product terms only, no gravity)."""
    z = np.zeros(model.n_joints)
    return core.rnea(*model._k, np.zeros(3), _check_theta(model, theta),
                     _check_theta(model, theta_dot, "theta_dot"), z)


def loss_torque(params: LossParams, state: JointState) -> np.ndarray:
    """Joint losses ``b_m qdd + c_m qd + f_c sign(qd)`` with sign(0) = 0."""
    return loss_torque_arrays(params, state.theta_dot, state.theta_ddot)


def loss_torque_arrays(params: LossParams, theta_dot, theta_ddot) -> np.ndarray:
    """Array form of :func:`loss_torque`; broadcasts over leading sample axes."""
    qd = np.asarray(theta_dot, dtype=float)
    qdd = np.asarray(theta_ddot, dtype=float)
    return params.b_m * qdd + params.c_m * qd + params.f_c * np.sign(qd)


def forward_dynamics(model: RobotModel, theta, theta_dot, applied_torque,
                     loss: LossParams | None = None) -> np.ndarray:
    """Joint accelerations under ``applied_torque``.

    The ``b_m qdd`` loss is folded into the mass matrix, so the solve is
    ``(M + diag(b_m)) qdd = tau - C qd - G - c_m qd - f_c sign(qd)``.
    """
    q = _check_theta(model, theta)
    qd = _check_theta(model, theta_dot, "theta_dot")
    tau = _check_theta(model, applied_torque, "applied_torque")
    loss = loss or LossParams.zeros(model.n_joints)
    try:
        return core.forward_dynamics(*model._k, model.gravity, q, qd, tau,
                                     np.ascontiguousarray(loss.b_m), np.ascontiguousarray(loss.c_m),
                                     np.ascontiguousarray(loss.f_c))
    except np.linalg.LinAlgError:
        M = mass_matrix(model, q) + np.diag(loss.b_m)
        raise SingularMatrixError("effective mass matrix is singular", np.linalg.cond(M)) from None


def mechanical_energy(model: RobotModel, theta, theta_dot) -> tuple[float, float]:
    """(kinetic, potential) energy in J; potential is zero at base height."""
    q = _check_theta(model, theta)
    qd = _check_theta(model, theta_dot, "theta_dot")
    kinetic = 0.5 * qd @ mass_matrix(model, q) @ qd
    potential = 0.0
    for T, m, c in zip(link_transforms(model, q)[1:], model.link_mass, model.link_com):
        potential -= m * model.gravity @ (T[:3, :3] @ c + T[:3, 3])
    return float(kinetic), float(potential)
