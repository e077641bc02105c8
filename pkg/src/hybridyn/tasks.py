"""Contact tasks driven by the virtual force sensor: discrete impedance
corrections, the peg-in-hole state machine with a quasi-static peg/hole
scene, and constant-force wiping.

Task frame: origin at the hole mouth centre, z up out of the surface, the
hole is the cylinder ``x^2 + y^2 < R_h^2, -depth < z < 0``. Peg pose is its
tip centre plus small tilts about x and y; wrenches act on the peg and
moments are taken about the tip.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics as dyn
from .errors import ContractError
from .observer import ObserverState


# --------------------------------------------------------------- impedance

@dataclass(frozen=True)
class ImpedanceParams:
    m: float = 1.0
    b: float = 10.0
    k_tau: float = 0.01
    k_v: float = 0.001
    dt: float = 0.008

    def __post_init__(self):
        if self.m <= 0 or self.b <= 0 or self.dt <= 0:
            raise ContractError("m, b and dt must be positive")
        if self.k_tau < 0 or self.k_v < 0:
            raise ContractError("impedance gains must be non-negative")


def impedance_displacement(p: ImpedanceParams, error):
    """``(k_tau e + k_v e / dt) / (m / dt^2 + b / dt)``, elementwise in ``error``."""
    e = np.asarray(error, dtype=float)
    out = (p.k_tau * e + p.k_v * e / p.dt) / (p.m / p.dt**2 + p.b / p.dt)
    return float(out) if out.ndim == 0 else out


# ----------------------------------------------------------- contact states

class ContactState(enum.Enum):
    APPROACH = "Approach"
    STUCK_OUTSIDE = "StuckOutside"
    STUCK_INSIDE = "StuckInside"
    INSERTED = "Inserted"


S = ContactState
ALLOWED = {
    S.APPROACH: {S.APPROACH, S.STUCK_OUTSIDE, S.STUCK_INSIDE, S.INSERTED},
    S.STUCK_OUTSIDE: {S.STUCK_OUTSIDE, S.APPROACH},
    S.STUCK_INSIDE: {S.STUCK_INSIDE, S.APPROACH, S.INSERTED},
    S.INSERTED: {S.INSERTED},
}


@dataclass(frozen=True)
class Wrench:
    f_z: float
    m_x: float
    m_y: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.f_z, self.m_x, self.m_y)):
            raise ContractError("wrench must be finite")

    @property
    def moment(self) -> float:
        return math.hypot(self.m_x, self.m_y)


@dataclass(frozen=True)
class ContactThresholds:
    f_contact: float = 10.0         # N
    m_contact: float = 0.12         # N m
    depth_entry: float = 0.002      # m, tip depth that counts as "in the hole"
    hole_depth: float = 0.030       # m
    tolerance: float = 0.001        # m


def classify_contact(w: Wrench, depth: float, th: ContactThresholds) -> ContactState:
    """Contact regime from the sensed wrench and the tip depth below the surface."""
    if depth >= th.hole_depth - th.tolerance:
        return S.INSERTED
    if abs(w.f_z) < th.f_contact and w.moment < th.m_contact:
        return S.APPROACH
    if depth < th.depth_entry:
        return S.STUCK_OUTSIDE if abs(w.f_z) >= th.f_contact else S.APPROACH
    return S.STUCK_INSIDE if w.moment >= th.m_contact else S.APPROACH


def next_state(prev: ContactState, proposed: ContactState) -> ContactState:
    """Follow the transition graph; a disallowed jump goes through Approach."""
    if proposed in ALLOWED[prev]:
        return proposed
    return S.APPROACH if S.APPROACH in ALLOWED[prev] else prev


# ------------------------------------------------------------------- scene

@dataclass(frozen=True)
class PegHoleScene:
    hole_depth: float = 0.030
    hole_diameter: float = 0.0218
    peg_length: float = 0.048
    peg_diameter: float = 0.0214
    friction_coeff: float = 0.3
    contact_stiffness: float = 2.0e5     # N/m over the whole peg face
    offset: tuple = (0.0, 0.0)           # m, initial tip offset from the hole axis
    tilt: tuple = (0.0, 0.0)             # rad, initial tilt about x and y
    start_height: float = 0.003          # m, initial tip height above the surface

    def __post_init__(self):
        if not 0 < self.peg_diameter < self.hole_diameter:
            raise ContractError("peg diameter must be positive and below the hole diameter")
        if min(self.hole_depth, self.peg_length, self.contact_stiffness) <= 0:
            raise ContractError("depths, lengths and stiffness must be positive")
        if self.friction_coeff < 0:
            raise ContractError("friction coefficient must be non-negative")

    @property
    def clearance(self) -> float:
        return 0.5 * (self.hole_diameter - self.peg_diameter)


def random_scene(base: PegHoleScene, rng, max_offset=0.002, max_tilt=math.radians(2.0)) -> PegHoleScene:
    """Uniform offset inside a disc of ``max_offset`` and tilts within ``max_tilt`` per axis."""
    r = max_offset * math.sqrt(rng.uniform())
    phi = rng.uniform(0, 2 * math.pi)
    tilt = rng.uniform(-max_tilt, max_tilt, size=2)
    return replace(base, offset=(r * math.cos(phi), r * math.sin(phi)), tilt=(float(tilt[0]), float(tilt[1])))


@dataclass(frozen=True)
class PegPose:
    tip: tuple
    tilt: tuple = (0.0, 0.0)

    @property
    def depth(self) -> float:
        return -float(self.tip[2])

    def moved(self, d_pos, d_rot) -> "PegPose":
        return PegPose(tuple(np.add(self.tip, d_pos).tolist()), tuple(np.add(self.tilt, d_rot).tolist()))

    def rotation(self) -> np.ndarray:
        ax, ay = self.tilt
        cx, sx, cy, sy = math.cos(ax), math.sin(ax), math.cos(ay), math.sin(ay)
        Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        return Rx @ Ry


def _peg_points(scene: PegHoleScene, n_ring=24, n_radial=4, n_height=25):
    """Surface samples in the peg frame (tip at origin, axis +z) with area weights
    normalised so the bottom face sums to one."""
    R = 0.5 * scene.peg_diameter
    phi = np.linspace(0, 2 * np.pi, n_ring, endpoint=False)
    pts, wts = [np.zeros(3)], [1.0]
    for i in range(1, n_radial + 1):
        r = R * i / n_radial
        for a in phi:
            pts.append([r * math.cos(a), r * math.sin(a), 0.0])
            wts.append(2 * i)
    face_w = np.asarray(wts, dtype=float)
    face_w /= face_w.sum()
    side = [[R * math.cos(a), R * math.sin(a), s]
            for s in np.linspace(0.0, scene.peg_length, n_height + 1)[1:] for a in phi]
    # the face edge is already sampled, so the rings start one step above it;
    # side weights are area relative to the face
    side_w = np.full(len(side), (2 * np.pi * R * scene.peg_length) / (np.pi * R * R) / len(side))
    return np.vstack([np.asarray(pts), np.asarray(side)]), np.concatenate([face_w, side_w])


@dataclass
class ContactResult:
    wrench: np.ndarray          # [fx, fy, fz, mx, my, mz] on the peg, moments about the tip
    surface: str                # "none", "top", "wall", "bottom" or a "+"-joined mix
    max_penetration: float


class PegHoleSim:
    """Quasi-static penalty contact between a rigid peg and a block with a
    plain cylindrical hole (no chamfer). Each peg surface sample in the solid
    is pushed out along its shortest escape direction (up through the top,
    into the hole through the wall, or up from the bottom) with force
    ``stiffness * weight * penetration``; Coulomb friction up to ``mu * N``
    opposes the sample's commanded motion."""

    def __init__(self, scene: PegHoleScene):
        self.scene = scene
        self.local, self.weight = _peg_points(scene)

    def contact(self, pose: PegPose, motion=None) -> ContactResult:
        sc = self.scene
        R = pose.rotation()
        tip = np.asarray(pose.tip, dtype=float)
        rel = self.local @ R.T
        P = tip + rel
        x, y, z = P[:, 0], P[:, 1], P[:, 2]
        rho = np.hypot(x, y)
        Rh, H = 0.5 * sc.hole_diameter, sc.hole_depth
        in_bore = rho < Rh
        pen = np.zeros(len(P))
        normal = np.zeros((len(P), 3))
        kind = np.zeros(len(P), dtype=int)           # 1 top, 2 wall, 3 bottom

        bottom = in_bore & (z <= -H)
        pen[bottom] = -H - z[bottom]
        normal[bottom] = [0.0, 0.0, 1.0]
        kind[bottom] = 3

        solid = ~in_bore & (z < 0)
        d_top = -z
        d_wall = np.where(z > -H, rho - Rh, np.inf)
        top = solid & (d_top <= d_wall)
        wall = solid & ~top
        pen[top] = d_top[top]
        normal[top] = [0.0, 0.0, 1.0]
        kind[top] = 1
        pen[wall] = d_wall[wall]
        safe = np.where(rho > 0, rho, 1.0)
        normal[wall] = np.column_stack([-x / safe, -y / safe, np.zeros_like(x)])[wall]
        kind[wall] = 2

        if not pen.any():
            return ContactResult(np.zeros(6), "none", 0.0)
        fn = sc.contact_stiffness * self.weight * pen
        F = fn[:, None] * normal
        if motion is not None and sc.friction_coeff > 0:
            d_pos, d_rot = motion
            # omega = (wx, wy, 0), v = d_pos + omega x rel
            wx, wy = d_rot
            v = np.column_stack([wy * rel[:, 2], -wx * rel[:, 2], wx * rel[:, 1] - wy * rel[:, 0]])
            v += np.asarray(d_pos, dtype=float)
            vt = v - np.sum(v * normal, axis=1)[:, None] * normal
            speed = np.linalg.norm(vt, axis=1)
            moving = (fn > 0) & (speed > 1e-12)
            F[moving] -= (sc.friction_coeff * fn[moving] / speed[moving])[:, None] * vt[moving]
        force = F.sum(axis=0)
        moment = np.cross(rel, F).sum(axis=0)
        touched = set(np.unique(kind[fn > 0]).tolist())
        names = [n for k, n in ((1, "top"), (2, "wall"), (3, "bottom")) if k in touched]
        return ContactResult(np.concatenate([force, moment]), "+".join(names) or "none", float(pen.max()))


def geometric_state(result: ContactResult, pose: PegPose, th: ContactThresholds) -> ContactState:
    """Ground-truth regime from the scene geometry (used only to check the
    classifier): which surfaces the peg touches and how deep its tip is."""
    if pose.depth >= th.hole_depth - th.tolerance:
        return S.INSERTED
    if result.surface == "none":
        return S.APPROACH
    return S.STUCK_OUTSIDE if pose.depth < th.depth_entry else S.STUCK_INSIDE


# ----------------------------------------------------------- virtual sensor

class JointSpaceSensor:
    """Virtual wrench sensor seen through the robot: the true task-frame wrench
    becomes joint torques ``J^T w`` at a fixed working pose, picks up torque
    noise, goes through per-joint Kalman filters and is mapped back with the
    pseudo-inverse. Only ``(F_Z, M_X, M_Y)`` leave this object."""

    def __init__(self, model: dyn.RobotModel, pose, torque_noise: float, q: float, r: float,
                 rng, tool=None):
        J = dyn.geometric_jacobian(model, np.asarray(pose, dtype=float), tool, frame="ee")
        Rw = dyn.forward_kinematics(model, np.asarray(pose, dtype=float), tool).rotation
        # task axes are the base axes; wrenches are expressed in EE axes for J
        self._to_ee = np.kron(np.eye(2), Rw.T)
        self._JT = J.T
        self._JT_pinv = np.linalg.pinv(J.T)
        self._from_ee = np.kron(np.eye(2), Rw)
        self.noise = float(torque_noise)
        self.rng = rng
        n = J.shape[1]
        init = ObserverState.initial(np.full(n, q), np.full(n, r), tau0=np.zeros(n))
        # plain arrays in the loop; same update as kalman_step
        self._tau, self._p, self._q, self._r = (np.array(a) for a in (init.tau_hat, init.p, init.q, init.r))
        self._map = self._from_ee @ self._JT_pinv
        self.tare = np.zeros(6)

    def _filter(self, tau):
        p_pred = self._p + self._q
        k = p_pred / (p_pred + self._r)
        self._tau = self._tau + k * (tau - self._tau)
        self._p = (1.0 - k) * p_pred
        return self._map @ self._tau

    def read(self, wrench_true) -> Wrench:
        tau = self._JT @ (self._to_ee @ np.asarray(wrench_true, dtype=float))
        tau = tau + self.noise * self.rng.standard_normal(tau.shape[0])
        w = self._filter(tau) - self.tare
        return Wrench(float(w[2]), float(w[3]), float(w[4]))

    def zero(self, samples: int = 100):
        """Average the reading in free space and subtract it from now on."""
        acc = np.zeros(6)
        for _ in range(samples):
            tau = self.noise * self.rng.standard_normal(self._JT.shape[0])
            acc += self._filter(tau)
        self.tare = acc / samples


def sensor_from_config(model: dyn.RobotModel, scfg: dict, rng) -> JointSpaceSensor:
    """Sensor from a config section with ``pose``, ``tool``, ``torque_noise``
    and ``q_ratio`` (process variance as a fraction of the measurement variance)."""
    r = float(scfg["torque_noise"]) ** 2
    return JointSpaceSensor(model, scfg["pose"], float(scfg["torque_noise"]), r * float(scfg["q_ratio"]), r,
                            rng, scfg.get("tool"))


# -------------------------------------------------------------- controller

@dataclass(frozen=True)
class PegControlParams:
    approach_speed: float = 0.004       # m/s along -z while nothing is felt
    retreat: float = 0.0003             # m, backward step when stuck outside
    inside_lateral_scale: float = 0.3   # share of the lateral correction kept when stuck inside
    max_lateral_step: float = 0.0005    # m per decision
    max_rotation_step: float = math.radians(0.5)
    # moment error (N m) -> lateral displacement (m) and -> rotation (rad)
    lateral: ImpedanceParams = field(default_factory=lambda: ImpedanceParams(1.0, 10.0, 1.0, 0.26))
    rotation: ImpedanceParams = field(default_factory=lambda: ImpedanceParams(1.0, 10.0, 2.0, 0.5))


@dataclass(frozen=True)
class Command:
    kind: str                     # "advance", "retreat+rotate+lateral", "rotate+lateral", "stop"
    d_pos: tuple = (0.0, 0.0, 0.0)
    d_rot: tuple = (0.0, 0.0)


def _clip(v, limit):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    return v if n <= limit or n == 0 else v * (limit / n)


def peg_step(state: ContactState, w: Wrench, p: PegControlParams, dt: float = 0.008) -> Command:
    """Motion for one control period given the (already updated) contact state.

    Lateral corrections move away from the contact side indicated by the
    moment, ``(dx, dy) ~ (M_Y, -M_X)``; rotations comply with the moment,
    ``(d_ax, d_ay) ~ (M_X, M_Y)``, which levels a peg resting on one edge.
    Both go through the impedance law with the moment as the error signal.
    """
    if state is S.INSERTED:
        return Command("stop")
    if state is S.APPROACH:
        return Command("advance", (0.0, 0.0, -p.approach_speed * dt))
    lat = impedance_displacement(p.lateral, np.array([w.m_y, -w.m_x]))
    rot = impedance_displacement(p.rotation, np.array([w.m_x, w.m_y]))
    rot = _clip(rot, p.max_rotation_step)
    if state is S.STUCK_OUTSIDE:
        lat = _clip(lat, p.max_lateral_step)
        return Command("retreat+rotate+lateral", (lat[0], lat[1], p.retreat), tuple(rot.tolist()))
    lat = _clip(p.inside_lateral_scale * lat, p.max_lateral_step)
    return Command("rotate+lateral", (lat[0], lat[1], 0.0), tuple(rot.tolist()))


class PegController:
    """Stateful wrapper: sensed wrench + own tip depth -> command. It never
    sees the scene; the depth comes from the robot's own kinematics."""

    def __init__(self, thresholds: ContactThresholds, params: PegControlParams, dt: float = 0.008):
        self.th = thresholds
        self.p = params
        self.dt = dt
        self.state = S.APPROACH

    def step(self, sensed: Wrench, depth: float) -> Command:
        self.state = next_state(self.state, classify_contact(sensed, depth, self.th))
        return peg_step(self.state, sensed, self.p, self.dt)


def peg_setup_from_config(pcfg: dict):
    """``(base scene, thresholds, control params)`` from the ``peg`` config section."""
    scene = PegHoleScene(**pcfg["scene"])
    th = ContactThresholds(hole_depth=scene.hole_depth, **pcfg["thresholds"])
    c = dict(pcfg["control"])
    c["max_rotation_step"] = math.radians(c.pop("max_rotation_step_deg"))
    return scene, th, PegControlParams(**c)


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    max_force: float
    max_moment: float
    rows: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"success": self.success, "steps": self.steps,
                "max_force": self.max_force, "max_moment": self.max_moment}

    def to_csv(self, path):
        head = "t,command,state,est_fz,est_mx,est_my,true_fz,true_mx,true_my,x,y,z,tilt_x,tilt_y"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(head + "\n")
            for r in self.rows:
                fh.write(",".join(str(v) for v in r) + "\n")


def run_peg_episode(scene: PegHoleScene, sensor: JointSpaceSensor, thresholds: ContactThresholds,
                    params: PegControlParams, max_steps: int = 5000, dt: float = 0.008,
                    keep_rows: bool = False) -> EpisodeResult:
    """Closed loop, one decision per sample period, until Inserted or the step budget runs out."""
    sim = PegHoleSim(scene)
    ctrl = PegController(thresholds, params, dt)
    pose = PegPose((scene.offset[0], scene.offset[1], scene.start_height), scene.tilt)
    sensor.zero()
    motion = None
    max_f = max_m = 0.0
    rows = []
    for k in range(max_steps):
        res = sim.contact(pose, motion)
        w = res.wrench
        max_f = max(max_f, abs(w[2]))
        max_m = max(max_m, math.hypot(w[3], w[4]))
        sensed = sensor.read(w)
        cmd = ctrl.step(sensed, pose.depth)
        if keep_rows:
            rows.append([k * dt, cmd.kind, ctrl.state.value, sensed.f_z, sensed.m_x,
                         sensed.m_y, w[2], w[3], w[4], *pose.tip, *pose.tilt])
        if cmd.kind == "stop":
            return EpisodeResult(True, k + 1, max_f, max_m, rows)
        motion = (cmd.d_pos, cmd.d_rot)
        pose = pose.moved(cmd.d_pos, cmd.d_rot)
    return EpisodeResult(False, max_steps, max_f, max_m, rows)


# ------------------------------------------------------------------- wiping

def wipe_controller(target_fz: float, estimate: Wrench, gain: float) -> float:
    """Vertical position correction ``-gain * (target - F_Z estimate)``; negative is down."""
    if target_fz <= 0:
        raise ContractError("target force must be positive")
    return -gain * (target_fz - estimate.f_z)


@dataclass(frozen=True)
class WipeScene:
    stiffness: float = 1.0e5            # N/m
    ramp_height: float = 0.0            # m, surface rise over the ramp
    ramp_start: float = 0.1             # m along x
    ramp_length: float = 0.05           # m

    def surface_height(self, x: float) -> float:
        if self.ramp_height == 0.0:
            return 0.0
        u = min(max((x - self.ramp_start) / self.ramp_length, 0.0), 1.0)
        return self.ramp_height * u

    def normal_force(self, x: float, z: float) -> float:
        """Force pushing the tool up (positive), zero out of contact."""
        return self.stiffness * max(self.surface_height(x) - z, 0.0)


@dataclass
class WipeResult:
    times: np.ndarray
    true_fz: np.ndarray
    est_fz: np.ndarray
    z: np.ndarray

    def steady_mae(self, target: float, settle: float) -> float:
        sel = self.times >= settle
        return float(np.mean(np.abs(self.true_fz[sel] - target)))


def run_wipe(scene: WipeScene, sensor: JointSpaceSensor, target_fz: float, gain: float,
             speed: float, duration: float, dt: float = 0.008, z0: float = 0.002) -> WipeResult:
    """Slide along +x at ``speed`` while the force loop adjusts tool height."""
    n = int(round(duration / dt))
    sensor.zero()
    t = dt * np.arange(n)
    true_f, est_f, zs = np.empty(n), np.empty(n), np.empty(n)
    z = z0
    for k in range(n):
        x = speed * t[k]
        f = scene.normal_force(x, z)
        # contact force pushes the tool up, i.e. along +z of the task frame
        est = sensor.read([0.0, 0.0, f, 0.0, 0.0, 0.0])
        true_f[k], est_f[k], zs[k] = f, est.f_z, z
        z += wipe_controller(target_fz, est, gain)
    return WipeResult(t, true_f, est_f, zs)
