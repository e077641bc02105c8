"""External-torque observer and a three-axis virtual force sensor.

Sign convention: ``tau_ext_raw = tau_free_predicted - tau_measured``. It is
positive when the environment pushes the joint in its positive direction
(the motors then supply less torque than free motion needs), and it equals
``J^T w`` for an end-effector wrench ``w`` applied by the environment.

Each joint gets its own scalar Kalman filter with a random-walk prediction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dynamics as dyn
from .errors import ContractError, SingularMatrixError
from .gbt import GbtEnsemble, GbtHyperParams, fit_gbt
from .learn import HybridModel, window_features
from .plant import TrajectoryLog, WrenchProfile

# wrench axes the virtual sensor estimates and the joints whose filtered
# external torque feeds each of them (0-based)
AXES = ("f_z", "m_x", "m_y")
AXIS_JOINTS = {"f_z": (0, 1, 2), "m_x": (4,), "m_y": (3,)}
# position of each axis in a [fx, fy, fz, mx, my, mz] wrench
AXIS_INDEX = {"f_z": 2, "m_x": 3, "m_y": 4}


@dataclass(frozen=True, eq=False)
class ObserverState:
    """Per-joint scalar filter state (all fields are n-vectors)."""
    tau_hat: np.ndarray
    p: np.ndarray
    q: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        arrs = [np.array(getattr(self, k), dtype=float, ndmin=1) for k in ("tau_hat", "p", "q", "r")]
        n = max(a.shape[0] for a in arrs)
        arrs = [np.broadcast_to(a, (n,)).copy() for a in arrs]
        tau, p, q, r = arrs
        if not np.all(np.isfinite(tau)):
            raise ContractError("tau_hat must be finite")
        if np.any(p <= 0) or np.any(q <= 0) or np.any(r <= 0):
            raise ContractError("p, q and r must be positive")
        for k, a in zip(("tau_hat", "p", "q", "r"), arrs):
            a.setflags(write=False)
            object.__setattr__(self, k, a)

    @classmethod
    def initial(cls, q, r, tau0=0.0, p0=None) -> "ObserverState":
        """Start at ``tau0``; the default covariance ``r`` trusts the first sample about as much as the prior."""
        r = np.asarray(r, dtype=float)
        return cls(tau0, r if p0 is None else p0, q, r)


def kalman_step(state: ObserverState, measurement) -> ObserverState:
    p_pred = state.p + state.q
    k = p_pred / (p_pred + state.r)
    tau = state.tau_hat + k * (np.asarray(measurement, dtype=float) - state.tau_hat)
    return ObserverState(tau, (1.0 - k) * p_pred, state.q, state.r)


def steady_state_gain(q, r):
    """Limit gain of the random-walk filter: ``p- = (q + sqrt(q^2 + 4qr)) / 2``, ``k = p- / (p- + r)``."""
    q = np.asarray(q, dtype=float)
    r = np.asarray(r, dtype=float)
    p_pred = 0.5 * (q + np.sqrt(q * q + 4.0 * q * r))
    return p_pred / (p_pred + r)


def steps_to_fraction(gain, fraction: float) -> int:
    """Samples after which a constant-gain filter has closed ``fraction`` of a step:
    the smallest n with ``1 - (1 - k)^n >= fraction``."""
    k = float(np.min(gain))
    if not 0 < k <= 1 or not 0 < fraction < 1:
        raise ContractError("need 0 < gain <= 1 and 0 < fraction < 1")
    if k == 1.0:
        return 1
    return int(math.ceil(math.log(1.0 - fraction) / math.log(1.0 - k)))


def kalman_filter(raw, q, r, tau0=None, p0=None) -> np.ndarray:
    """Filter a ``(N, n)`` series; NaN rows (no model output yet) pass through
    as NaN and leave the state untouched. Starts at the first finite row."""
    raw = np.asarray(raw, dtype=float)
    out = np.full_like(raw, np.nan)
    state = None
    for i, z in enumerate(raw):
        if not np.all(np.isfinite(z)):
            continue
        if state is None:
            state = ObserverState.initial(q, r, z if tau0 is None else tau0, p0)
            if tau0 is None:
                out[i] = z
                continue
        state = kalman_step(state, z)
        out[i] = state.tau_hat
    return out


def external_torque_raw(log: TrajectoryLog, hybrid: HybridModel) -> np.ndarray:
    """``tau_free_predicted - tau_measured`` per sample, NaN where the model has no output."""
    if log.n_joints != hybrid.n_joints:
        raise ContractError(f"log has {log.n_joints} joints, model {hybrid.n_joints}")
    if not np.all(np.isfinite(log.tau_measured)):
        raise ContractError("log carries no measured torque")
    return hybrid.predict(log) - log.tau_measured


def noise_variance(raw) -> np.ndarray:
    """Per-joint sample variance of a raw external-torque series (finite rows only)."""
    raw = np.asarray(raw, dtype=float)
    ok = np.all(np.isfinite(raw), axis=1)
    if ok.sum() < 2:
        raise ContractError("need at least two finite rows")
    return raw[ok].var(axis=0, ddof=1)


def wrench_from_jacobian(model: dyn.RobotModel, theta, tau_ext, tool=None, rcond: float = 1e-10):
    """Minimum-norm end-effector wrench ``w`` (EE frame, ``[f; m]``) with ``J^T w = tau_ext``.

    Returns ``(wrench, condition_number)``. Raises SingularMatrixError when
    ``J^T`` loses rank; the message lists a wrench direction it cannot see.
    """
    J = dyn.geometric_jacobian(model, theta, tool, frame="ee")
    tau = np.asarray(tau_ext, dtype=float)
    if tau.shape != (J.shape[1],):
        raise ContractError(f"tau_ext must have {J.shape[1]} entries")
    U, s, Vt = np.linalg.svd(J.T)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else math.inf
    if J.shape[1] < 6 or s[-1] <= rcond * s[0]:
        null = Vt[-1]
        raise SingularMatrixError(
            f"J^T is rank deficient; unobservable wrench direction {np.round(null, 4).tolist()}", cond)
    w, *_ = np.linalg.lstsq(J.T, tau, rcond=None)
    return w, cond


def wrench_series(model, theta, tau_ext, tool=None) -> np.ndarray:
    """Analytic wrench for every row; NaN rows stay NaN."""
    out = np.full((len(theta), 6), np.nan)
    for i, (q, t) in enumerate(zip(theta, tau_ext)):
        if np.all(np.isfinite(t)):
            out[i] = wrench_from_jacobian(model, q, t, tool)[0]
    return out


@dataclass
class ObserverOutput:
    times: np.ndarray
    tau_ext_raw: np.ndarray
    tau_ext_hat: np.ndarray
    wrench: np.ndarray

    def to_csv(self, path):
        n = self.tau_ext_raw.shape[1]
        cols = (["t"] + [f"tau_ext_raw_{j + 1}" for j in range(n)] + [f"tau_ext_hat_{j + 1}" for j in range(n)]
                + ["fx", "fy", "fz", "mx", "my", "mz"])
        data = np.column_stack([self.times, self.tau_ext_raw, self.tau_ext_hat, self.wrench])
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")


def observe(log: TrajectoryLog, hybrid: HybridModel, q, r, model: dyn.RobotModel | None = None) -> ObserverOutput:
    """Stream a log through model subtraction, filtering and the Jacobian map."""
    raw = external_torque_raw(log, hybrid)
    hat = kalman_filter(raw, q, r)
    model = model if model is not None else hybrid.physics
    if model is None:
        raise ContractError("the analytic wrench needs a robot model")
    return ObserverOutput(log.times.copy(), raw, hat, wrench_series(model, log.theta, hat))


def random_wrench_profile(duration: float, rng, f_range=(0.0, 75.0), m_max: float = 1.5,
                          hold=(1.0, 3.0), idle_fraction: float = 0.25) -> WrenchProfile:
    """Piecewise-constant EE wrenches: ``f_z`` uniform in ``f_range``, ``m_x`` and
    ``m_y`` uniform in ``[-m_max, m_max]``, other axes zero. Each piece lasts
    ``U(hold)`` seconds and is wrench-free with probability ``idle_fraction``."""
    items, t = [], 0.0
    while t < duration:
        dur = min(float(rng.uniform(*hold)), duration - t)
        fz = rng.uniform(*f_range)
        mx, my = rng.uniform(-m_max, m_max, size=2)
        if rng.uniform() >= idle_fraction and dur > 0:
            items.append((t, t + dur, [0.0, 0.0, fz, mx, my, 0.0]))
        t += dur
    return WrenchProfile(tuple(items))


def wrench_features(theta, tau_hat, axis: str, window_len: int) -> np.ndarray:
    """All six angles plus the designated filtered external torques, windowed
    oldest first (``window_len = 1`` gives instantaneous features)."""
    if axis not in AXIS_JOINTS:
        raise ContractError(f"unknown axis {axis!r}")
    S = np.column_stack([np.asarray(theta), np.asarray(tau_hat)[:, list(AXIS_JOINTS[axis])]])
    if window_len < 1 or S.shape[0] < window_len:
        raise ContractError("log shorter than the feature window")
    win = np.lib.stride_tricks.sliding_window_view(S, window_len, axis=0)
    return np.ascontiguousarray(win.transpose(0, 2, 1).reshape(S.shape[0] - window_len + 1, -1))


class VirtualWrenchModel:
    """Learned maps (angles, filtered external torques) -> (F_Z, M_X, M_Y)."""

    def __init__(self, maps: dict, window_len: int):
        if set(maps) != set(AXES):
            raise ContractError(f"need one map per axis {AXES}")
        self.maps = dict(maps)
        self.window_len = int(window_len)

    def predict(self, theta, tau_hat) -> np.ndarray:
        """``(N, 3)`` columns ``[f_z, m_x, m_y]``; NaN before a full window or
        where the filtered torque is undefined."""
        theta = np.asarray(theta, dtype=float)
        tau_hat = np.asarray(tau_hat, dtype=float)
        N, w = theta.shape[0], self.window_len
        out = np.full((N, 3), np.nan)
        ok = np.all(np.isfinite(tau_hat), axis=1)
        start = int(np.argmax(ok)) if ok.any() else N
        if N - start < w or not np.all(ok[start:]):
            if N - start >= w:
                raise ContractError("filtered torque has gaps after its first finite row")
            return out
        for c, axis in enumerate(AXES):
            X = wrench_features(theta[start:], tau_hat[start:], axis, w)
            out[start + w - 1:, c] = self.maps[axis].predict(X)
        return out

    def to_dict(self) -> dict:
        return {"window_len": self.window_len, "maps": {a: m.to_dict() for a, m in self.maps.items()}}

    @classmethod
    def from_dict(cls, d) -> "VirtualWrenchModel":
        return cls({a: GbtEnsemble.from_dict(m) for a, m in d["maps"].items()}, d["window_len"])


def wrench_dataset(theta, tau_hat, wrench_true, axis: str, window_len: int):
    """Rows with a full window of finite filtered torque, labelled by the true
    wrench component at the newest sample."""
    theta = np.asarray(theta, dtype=float)
    tau_hat = np.asarray(tau_hat, dtype=float)
    ok = np.all(np.isfinite(tau_hat), axis=1)
    start = int(np.argmax(ok))
    if not ok.any() or not np.all(ok[start:]):
        raise ContractError("filtered torque must be finite from its first valid row on")
    X = wrench_features(theta[start:], tau_hat[start:], axis, window_len)
    y = np.asarray(wrench_true, dtype=float)[start + window_len - 1:, AXIS_INDEX[axis]]
    return X, y


def train_wrench_maps(thetas, tau_hats, wrenches, params: GbtHyperParams | None = None,
                      window_len: int = 10) -> VirtualWrenchModel:
    """Fit one tree ensemble per axis on several runs (lists of per-run arrays)."""
    params = params or GbtHyperParams()
    maps = {}
    for axis in AXES:
        parts = [wrench_dataset(th, th_hat, w, axis, window_len)
                 for th, th_hat, w in zip(thetas, tau_hats, wrenches)]
        if not parts:
            raise ContractError("no training runs")
        X = np.concatenate([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
        maps[axis] = fit_gbt(X, y, params)
    return VirtualWrenchModel(maps, window_len)
