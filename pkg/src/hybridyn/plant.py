"""Synthetic ground-truth robot.

The plant integrates the rigid-body model plus its true joint losses, a set
of un-modelled residual torques and an optional end-effector wrench, while a
computed-torque PD controller (built on the nominal model only) tracks a
sampled reference. The log records what a torque-reporting robot would
report: joint states and commanded torque with sensor noise.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import dynamics as dyn
from ._backend import core
from .dynamics import LossParams, RobotModel
from .errors import ContractError, TrackingDivergence


@dataclass(frozen=True, eq=False)
class ResidualSpec:
    """Un-modelled joint torques (all per joint except ``load_dependent_loss_coeff``).

    ``coulomb_asymmetry`` is the fraction by which reverse-direction Coulomb
    friction is weaker than forward friction.
    """
    stribeck_magnitude: np.ndarray
    stribeck_velocity: np.ndarray
    coulomb_asymmetry: np.ndarray
    torque_ripple_amplitude: np.ndarray
    ripple_harmonic: np.ndarray
    load_dependent_loss_coeff: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.stribeck_magnitude).shape
        for name in ("stribeck_magnitude", "stribeck_velocity", "coulomb_asymmetry",
                     "torque_ripple_amplitude", "ripple_harmonic"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != n:
                raise ContractError(f"{name}: expected shape {n}")
            if np.any(arr < 0):
                raise ContractError(f"{name} must be non-negative")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.coulomb_asymmetry >= 1):
            raise ContractError("coulomb_asymmetry must be < 1")
        if self.load_dependent_loss_coeff < 0:
            raise ContractError("load_dependent_loss_coeff must be non-negative")

    @classmethod
    def zeros(cls, n):
        z = np.zeros(n)
        return cls(z, z, z, z, z, 0.0)

    def packed(self) -> np.ndarray:
        n = self.stribeck_magnitude.shape[0]
        return np.ascontiguousarray(np.column_stack([
            self.stribeck_magnitude, self.stribeck_velocity, self.coulomb_asymmetry,
            self.torque_ripple_amplitude, self.ripple_harmonic,
            np.full(n, float(self.load_dependent_loss_coeff))]))

    @classmethod
    def from_dict(cls, d):
        return cls(d["stribeck_magnitude"], d["stribeck_velocity"], d["coulomb_asymmetry"],
                   d["torque_ripple_amplitude"], d["ripple_harmonic"],
                   float(d.get("load_dependent_loss_coeff", 0.0)))


def residual_torque(spec: ResidualSpec, state: dyn.JointState, transmitted,
                    coulomb=None) -> np.ndarray:
    """Un-modelled torque consumed by the joints.

    Sum of a Stribeck bump ``s exp(-(qd/v_s)^2) sign(qd)``, the reverse-motion
    Coulomb reduction ``asym * coulomb`` (applied while ``qd < 0``), ripple
    ``A sin(h q)`` and gear loss ``coeff |transmitted| sign(qd)``.
    """
    q, qd = state.theta, state.theta_dot
    coulomb = np.zeros_like(q) if coulomb is None else np.asarray(coulomb, dtype=float)
    return core.residual(spec.packed(), np.ascontiguousarray(coulomb),
                         np.ascontiguousarray(q), np.ascontiguousarray(qd),
                         np.ascontiguousarray(transmitted, dtype=float))


@dataclass(frozen=True, eq=False)
class PlantConfig:
    model: RobotModel
    true_loss: LossParams
    residual: ResidualSpec
    sample_period: float = 0.008
    torque_noise_std: np.ndarray = None
    kp: np.ndarray = None
    kd: np.ndarray = None
    substeps: int = 4
    divergence_limit: float = 0.5

    def __post_init__(self):
        n = self.model.n_joints
        if self.sample_period <= 0:
            raise ContractError("sample_period must be positive")
        defaults = {"torque_noise_std": 0.0, "kp": 400.0, "kd": 40.0}
        for name, dflt in defaults.items():
            v = getattr(self, name)
            arr = np.full(n, dflt) if v is None else np.broadcast_to(np.asarray(v, float), (n,)).copy()
            if np.any(arr < 0):
                raise ContractError(f"{name} must be non-negative")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def with_(self, **kw) -> "PlantConfig":
        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class WrenchProfile:
    """Piecewise-constant end-effector wrenches, ``[fx, fy, fz, mx, my, mz]`` in the EE frame.

    Each interval is half-open, ``t_start <= t < t_end``.
    """
    schedule: tuple = ()

    def __post_init__(self):
        items = sorted(((float(a), float(b), np.asarray(w, dtype=float)) for a, b, w in self.schedule),
                       key=lambda x: x[0])
        for a, b, w in items:
            if not a < b:
                raise ContractError("wrench interval needs t_start < t_end")
            if w.shape != (6,):
                raise ContractError("wrench must be a 6-vector")
        for (a0, b0, _), (a1, b1, _) in zip(items, items[1:]):
            if a1 < b0:
                raise ContractError("wrench intervals overlap")
        object.__setattr__(self, "schedule", tuple(items))

    def at(self, t: float) -> np.ndarray:
        for a, b, w in self.schedule:
            if a <= t < b:
                return w
        return np.zeros(6)

    def check_within(self, t0, t1):
        for a, b, _ in self.schedule:
            if a < t0 - 1e-12 or b > t1 + 1e-9:
                raise ContractError(f"wrench interval [{a}, {b}) outside log span [{t0}, {t1}]")


def _frozen_series(a, name, n_rows, width):
    arr = np.array(a, dtype=float)
    if arr.shape != (n_rows, width):
        raise ContractError(f"{name}: expected shape {(n_rows, width)}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TrajectoryLog:
    """Uniformly sampled joint data; torque columns may be NaN for pure references."""
    times: np.ndarray
    theta: np.ndarray
    theta_dot: np.ndarray
    theta_ddot: np.ndarray
    tau_measured: np.ndarray = None
    tau_external_true: np.ndarray = None
    wrench_true: np.ndarray = None

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        if t.ndim != 1 or t.size == 0:
            raise ContractError("times must be a non-empty 1-D array")
        N = t.size
        n = np.asarray(self.theta).shape[1]
        if N > 1:
            dt = np.diff(t)
            step = (t[-1] - t[0]) / (N - 1)
            if np.any(dt <= 0) or np.abs(dt - step).max() > 1e-12 * max(1.0, abs(t[-1])):
                raise ContractError("times must be strictly increasing with a constant step")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)
        for name in ("theta", "theta_dot", "theta_ddot"):
            object.__setattr__(self, name, _frozen_series(getattr(self, name), name, N, n))
        for name, width in (("tau_measured", n), ("tau_external_true", n), ("wrench_true", 6)):
            v = getattr(self, name)
            v = np.full((N, width), np.nan) if v is None else v
            object.__setattr__(self, name, _frozen_series(v, name, N, width))

    @property
    def n_samples(self) -> int:
        return self.times.size

    @property
    def n_joints(self) -> int:
        return self.theta.shape[1]

    @property
    def sample_period(self) -> float:
        if self.n_samples < 2:
            return float("nan")
        return (self.times[-1] - self.times[0]) / (self.n_samples - 1)

    def slice(self, start=None, stop=None) -> "TrajectoryLog":
        s = np.s_[start:stop]
        return TrajectoryLog(self.times[s], self.theta[s], self.theta_dot[s], self.theta_ddot[s],
                             self.tau_measured[s], self.tau_external_true[s], self.wrench_true[s])

    def shifted(self, offset: float) -> "TrajectoryLog":
        return replace(self, times=self.times + offset)

    def with_(self, **kw) -> "TrajectoryLog":
        return replace(self, **kw)

    @staticmethod
    def header(n: int) -> list[str]:
        cols = ["t"]
        for prefix in ("theta", "thetad", "thetadd", "tau", "tauext"):
            cols += [f"{prefix}_{i + 1}" for i in range(n)]
        return cols + ["fx", "fy", "fz", "mx", "my", "mz"]

    def to_csv(self, path) -> None:
        data = np.column_stack([self.times, self.theta, self.theta_dot, self.theta_ddot,
                                self.tau_measured, self.tau_external_true, self.wrench_true])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.header(self.n_joints))
            for row in data:
                w.writerow(["" if np.isnan(v) else repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "TrajectoryLog":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        head = rows[0]
        n = (len(head) - 7) // 5
        if head != cls.header(n):
            raise ContractError(f"{path}: unexpected trajectory header")
        data = np.array([[float(v) if v != "" else np.nan for v in r] for r in rows[1:]])
        if data.size == 0:
            raise ContractError(f"{path}: no samples")
        cut = np.cumsum([1, n, n, n, n, n])
        t, q, qd, qdd, tau, tex, wr = np.split(data, cut, axis=1)
        return cls(t[:, 0], q, qd, qdd, tau, tex, wr)


def concat_logs(logs) -> TrajectoryLog:
    """Join logs end to end, re-timing so the result keeps a constant step."""
    logs = list(logs)
    dt = next((lg.sample_period for lg in logs if lg.n_samples > 1), 1.0)
    parts = {k: np.concatenate([getattr(lg, k) for lg in logs]) for k in
             ("theta", "theta_dot", "theta_ddot", "tau_measured", "tau_external_true", "wrench_true")}
    N = parts["theta"].shape[0]
    return TrajectoryLog(logs[0].times[0] + dt * np.arange(N), **parts)


def _ee_torque(model, q, wrench_ee):
    return dyn.geometric_jacobian(model, q, frame="ee").T @ wrench_ee


def simulate_tracking(plant: PlantConfig, reference: TrajectoryLog,
                      wrench: WrenchProfile | None = None, seed: int = 0) -> TrajectoryLog:
    """Run the closed loop over ``reference`` and log what the robot reports.

    Per sample: the controller computes ``tau_cmd`` from the nominal model
    (rigid body + configured loss) with PD feedback; the plant feels
    ``tau_cmd``, its true loss, the residual torques and ``J^T wrench``
    (held over the sample period). The logged acceleration is the plant's
    true one at the sampled state; ``tau_measured = tau_cmd + noise``.
    """
    model = plant.model
    n = model.n_joints
    if reference.n_joints != n:
        raise ContractError("reference and model disagree on joint count")
    N = reference.n_samples
    if N > 1 and abs(reference.sample_period - plant.sample_period) > 1e-9:
        raise ContractError(f"reference sampled at {reference.sample_period}, plant at {plant.sample_period}")
    if wrench is not None:
        wrench.check_within(reference.times[0], reference.times[-1] + plant.sample_period)
    rng = np.random.default_rng(seed)
    loss = plant.true_loss
    bm, cm, fc = (np.ascontiguousarray(a) for a in (loss.b_m, loss.c_m, loss.f_c))
    res = plant.residual.packed()
    k = model._k
    grav = model.gravity
    kp, kd = plant.kp, plant.kd
    dt = plant.sample_period

    q = reference.theta[0].copy()
    qd = reference.theta_dot[0].copy()
    out_q = np.empty((N, n))
    out_qd = np.empty((N, n))
    out_qdd = np.empty((N, n))
    out_tau = np.empty((N, n))
    out_ext = np.zeros((N, n))
    out_w = np.zeros((N, 6))
    zero_ext = np.zeros(n)
    for i in range(N):
        err = reference.theta[i] - q
        worst = int(np.argmax(np.abs(err)))
        if abs(err[worst]) > plant.divergence_limit:
            raise TrackingDivergence(
                f"joint {worst + 1} off its reference by {err[worst]:+.3f} rad at t={reference.times[i]:.3f} s")
        qdd_cmd = reference.theta_ddot[i] + kp * err + kd * (reference.theta_dot[i] - qd)
        tau_cmd = core.rnea(*k, grav, q, qd, qdd_cmd) + bm * qdd_cmd + cm * qd + fc * np.sign(qd)
        w = wrench.at(reference.times[i]) if wrench is not None else None
        if w is not None and np.any(w):
            tau_ext = _ee_torque(model, q, w)
            out_w[i] = w
            out_ext[i] = tau_ext
        else:
            tau_ext = zero_ext
        out_q[i] = q
        out_qd[i] = qd
        out_qdd[i] = core.plant_accel(*k, grav, bm, cm, fc, res, q, qd, tau_cmd, tau_ext)
        out_tau[i] = tau_cmd + rng.normal(0.0, 1.0, n) * plant.torque_noise_std
        q, qd = core.plant_step(*k, grav, bm, cm, fc, res, q, qd, tau_cmd, tau_ext, dt, plant.substeps)
    return TrajectoryLog(reference.times.copy(), out_q, out_qd, out_qdd, out_tau, out_ext, out_w)


def estimate_acceleration(log: TrajectoryLog, smooth: int = 5) -> TrajectoryLog:
    """Replace logged accelerations by central differences of velocity plus a
    zero-phase moving average of width ``smooth`` samples."""
    dt = log.sample_period
    acc = np.gradient(log.theta_dot, dt, axis=0)
    if smooth > 1:
        kernel = np.ones(smooth) / smooth
        pad = smooth // 2
        padded = np.pad(acc, ((pad, smooth - 1 - pad), (0, 0)), mode="edge")
        acc = np.column_stack([np.convolve(padded[:, j], kernel, mode="valid") for j in range(acc.shape[1])])
    return log.with_(theta_ddot=acc)


def plant_from_dict(model: RobotModel, cfg: dict) -> PlantConfig:
    return PlantConfig(
        model=model,
        true_loss=LossParams.from_dict(cfg["true_loss"]),
        residual=ResidualSpec.from_dict(cfg["residual"]) if cfg.get("residual") else ResidualSpec.zeros(model.n_joints),
        sample_period=float(cfg.get("sample_period", 0.008)),
        torque_noise_std=cfg.get("torque_noise_std", 0.0),
        kp=cfg.get("kp", 400.0),
        kd=cfg.get("kd", 40.0),
        substeps=int(cfg.get("substeps", 4)),
        divergence_limit=float(cfg.get("divergence_limit", 0.5)),
    )
