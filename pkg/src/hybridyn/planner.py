"""Time optimisation of start-via-end trajectories against predicted torque.

Each segment is a rest-to-rest quintic. The search scales segment durations
by ``alpha_k`` in ``(0, 1]`` (never below the velocity/acceleration floor)
with a cross-entropy method and scores candidates with a piecewise reward:
``b * T_reduction`` when every joint stays within its limit, otherwise
``a * sum(|tau_limit - tau_peak|)`` over the violating joints.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

from .errors import ContractError
from .learn import HybridModel
from .plant import TrajectoryLog
from .trajgen import quintic_duration, quintic_samples


@dataclass(frozen=True, eq=False)
class ViaTrajectory:
    waypoints: np.ndarray           # (3, n) start, via, end joint angles (rad)
    segment_durations: np.ndarray   # (2,) s
    name: str = ""

    def __post_init__(self):
        wp = np.array(self.waypoints, dtype=float)
        d = np.array(self.segment_durations, dtype=float).reshape(-1)
        if wp.ndim != 2 or wp.shape[0] != 3:
            raise ContractError("waypoints must be a (3, n) array: start, via, end")
        if d.shape != (2,) or np.any(~np.isfinite(d)) or np.any(d <= 0):
            raise ContractError("need two positive segment durations")
        if not np.all(np.isfinite(wp)):
            raise ContractError("waypoints must be finite")
        wp.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "waypoints", wp)
        object.__setattr__(self, "segment_durations", d)

    @property
    def elapsed(self) -> float:
        return float(self.segment_durations.sum())

    def scaled(self, alphas) -> "ViaTrajectory":
        return ViaTrajectory(self.waypoints, self.segment_durations * np.asarray(alphas, dtype=float), self.name)

    def on_grid(self, sample_period: float) -> "ViaTrajectory":
        """Durations rounded up to whole sample periods (at least two each)."""
        K = np.maximum(np.ceil(self.segment_durations / sample_period - 1e-9), 2)
        return ViaTrajectory(self.waypoints, K * sample_period, self.name)

    def sample(self, sample_period: float) -> TrajectoryLog:
        """Both segments on the sample grid, joined at the via point (shared sample kept once)."""
        g = self.on_grid(sample_period)
        a = quintic_samples(g.waypoints[0], g.waypoints[1], g.segment_durations[0], sample_period)
        b = quintic_samples(g.waypoints[1], g.waypoints[2], g.segment_durations[1], sample_period)
        n0 = a.times.size
        times = sample_period * np.arange(n0 + b.times.size - 1)
        return TrajectoryLog(times, np.vstack([a.theta, b.theta[1:]]), np.vstack([a.theta_dot, b.theta_dot[1:]]),
                             np.vstack([a.theta_ddot, b.theta_ddot[1:]]))

    def duration_floor(self, v_max, a_max) -> np.ndarray:
        """Shortest feasible duration per segment under the joint speed and acceleration caps."""
        return np.array([quintic_duration(self.waypoints[k + 1] - self.waypoints[k], 1.0, v_max, a_max)
                         for k in range(2)])

    def to_dict(self) -> dict:
        return {"name": self.name, "waypoints": self.waypoints.tolist(),
                "segment_durations": self.segment_durations.tolist()}

    @classmethod
    def from_dict(cls, d) -> "ViaTrajectory":
        try:
            return cls(d["waypoints"], d["segment_durations"], d.get("name", ""))
        except (KeyError, TypeError) as exc:
            raise ContractError(f"bad trajectory entry: {exc}") from None


@dataclass(frozen=True, eq=False)
class RewardConfig:
    a: float                  # penalty gain, negative
    b: float                  # reward per second saved, above 100
    tau_limit: np.ndarray     # N m per joint

    def __post_init__(self):
        lim = np.array(self.tau_limit, dtype=float).reshape(-1)
        if not self.a < 0:
            raise ContractError("penalty gain a must be negative")
        if not self.b > 100:
            raise ContractError("reward gain b must exceed 100")
        if lim.size == 0 or np.any(~(lim > 0)):
            raise ContractError("torque limits must be positive")
        lim.setflags(write=False)
        object.__setattr__(self, "tau_limit", lim)


def peak_torque(model: HybridModel, traj: ViaTrajectory, sample_period: float = 0.008) -> np.ndarray:
    """Per-joint max |predicted torque| along the sampled trajectory.

    The arm is taken to rest at the start for one feature window beforehand,
    so windowed models produce a value for every trajectory sample.
    """
    log = traj.sample(sample_period)
    pad = max(int(getattr(model, "window_len", 1)) - 1, 0) if model.has_trees else 0
    if pad:
        n = log.n_joints
        z = np.zeros((pad, n))
        log = TrajectoryLog(sample_period * np.arange(pad + log.n_samples),
                            np.vstack([np.tile(log.theta[0], (pad, 1)), log.theta]),
                            np.vstack([z, log.theta_dot]), np.vstack([z, log.theta_ddot]))
    tau = model.predict(log)[pad:]
    if not np.all(np.isfinite(tau)):
        bad = [j + 1 for j in range(tau.shape[1]) if not np.all(np.isfinite(tau[:, j]))]
        raise ContractError(f"model gives no torque for joint(s) {bad}")
    return np.abs(tau).max(axis=0)


def violations(peaks, cfg: RewardConfig) -> np.ndarray:
    """Amount by which each joint exceeds its limit (zero where within)."""
    return np.maximum(np.asarray(peaks, dtype=float) - cfg.tau_limit, 0.0)


def reward(peaks, cfg: RewardConfig, baseline_elapsed: float, elapsed: float) -> float:
    """``a * sum |limit - peak|`` over violating joints, else ``b * (baseline - elapsed)``.

    The two branches do not meet at the limit: a peak just above it scores
    close to zero from below, while one just under it earns the full time
    reward.
    """
    peaks = np.asarray(peaks, dtype=float)
    over = peaks > cfg.tau_limit
    if over.any():
        return float(cfg.a * np.abs(cfg.tau_limit[over] - peaks[over]).sum())
    return float(cfg.b * (baseline_elapsed - elapsed))


@dataclass
class PlanResult:
    trajectory: ViaTrajectory
    baseline: ViaTrajectory
    elapsed_before: float
    elapsed_after: float
    peaks_before: np.ndarray
    peaks_after: np.ndarray
    reward_trace: list = field(default_factory=list)
    n_evaluations: int = 0
    success: bool = False

    @property
    def reduction(self) -> float:
        """Fractional elapsed-time reduction."""
        return (self.elapsed_before - self.elapsed_after) / self.elapsed_before

    def to_dict(self) -> dict:
        return {"name": self.baseline.name,
                "durations_before": self.baseline.segment_durations.tolist(),
                "durations_after": self.trajectory.segment_durations.tolist(),
                "elapsed_before": self.elapsed_before, "elapsed_after": self.elapsed_after,
                "reduction": self.reduction,
                "peaks_before": self.peaks_before.tolist(), "peaks_after": self.peaks_after.tolist(),
                "reward_trace": list(self.reward_trace), "n_evaluations": self.n_evaluations,
                "success": self.success}


@dataclass(frozen=True)
class CemParams:
    population: int = 16
    elite: int = 4
    init_std: float = 0.3
    min_std: float = 0.01
    smoothing: float = 0.7      # weight of the new elite statistics


def optimize_speed(model: HybridModel, traj: ViaTrajectory, cfg: RewardConfig, budget: int = 160,
                   seed: int = 0, sample_period: float = 0.008, v_max=None, a_max=None,
                   cem: CemParams | None = None) -> PlanResult:
    """Cross-entropy search over per-segment duration scalings.

    Scalings live in ``[floor_k / T_k, 1]``; without caps the floor is two
    sample periods. The best feasible candidate (no limit violation) is kept,
    so the reward trace is non-decreasing and the output never violates a
    limit. Candidates are evaluated on the sample grid, which is also how
    their elapsed time is counted.
    """
    cem = cem or CemParams()
    if budget < 1:
        raise ContractError("budget must be at least one evaluation")
    if cfg.tau_limit.size != traj.waypoints.shape[1]:
        raise ContractError("tau_limit length differs from the joint count")
    base = traj.on_grid(sample_period)
    T0 = base.segment_durations
    peaks0 = peak_torque(model, base, sample_period)
    if violations(peaks0, cfg).any():
        raise ContractError(f"baseline exceeds torque limits on joints "
                            f"{(np.flatnonzero(violations(peaks0, cfg)) + 1).tolist()}")
    if v_max is not None and a_max is not None:
        floor = base.duration_floor(v_max, a_max)
    else:
        floor = np.zeros(2)
    lo = np.minimum(np.maximum(floor, 2 * sample_period) / T0, 1.0)

    rng = np.random.default_rng(seed)
    best = (0.0, base, peaks0)
    trace = [0.0]
    n_eval = 1
    mean, std = np.ones(2), np.full(2, cem.init_std)
    cache = {}
    while n_eval < budget:
        pop = min(cem.population, budget - n_eval)
        alphas = np.clip(mean + std * rng.standard_normal((pop, 2)), lo, 1.0)
        scores = np.empty(pop)
        for i, a in enumerate(alphas):
            cand = base.scaled(a).on_grid(sample_period)
            key = tuple(np.round(cand.segment_durations / sample_period).astype(int).tolist())
            if key not in cache:
                pk = peak_torque(model, cand, sample_period)
                cache[key] = (reward(pk, cfg, base.elapsed, cand.elapsed), pk)
            n_eval += 1
            r, pk = cache[key]
            scores[i] = r
            if not violations(pk, cfg).any() and r > best[0]:
                best = (r, cand, pk)
        trace.append(best[0])
        if pop < cem.elite:
            break
        order = np.argsort(-scores, kind="stable")[: cem.elite]
        elite = alphas[order]
        mean = cem.smoothing * elite.mean(axis=0) + (1 - cem.smoothing) * mean
        std = np.maximum(cem.smoothing * elite.std(axis=0) + (1 - cem.smoothing) * std, cem.min_std)

    _, plan, peaks = best
    # independent post-check of the accepted plan
    check = peak_torque(model, plan, sample_period)
    if violations(check, cfg).any():
        raise AssertionError("accepted plan violates a torque limit")
    return PlanResult(plan, base, base.elapsed, plan.elapsed, peaks0, check, trace, n_eval,
                      success=plan.elapsed < base.elapsed)


def report_table(results) -> str:
    """Original / optimized elapsed time and improvement per trajectory."""
    lines = [f"{'trajectory':<14}{'original (s)':>14}{'optimized (s)':>15}{'improvement':>13}"]
    for r in results:
        lines.append(f"{r.baseline.name:<14}{r.elapsed_before:>14.3f}{r.elapsed_after:>15.3f}"
                     f"{100 * r.reduction:>12.1f}%")
    if results:
        mean = 100 * float(np.mean([r.reduction for r in results]))
        lines.append(f"{'mean':<14}{'':>14}{'':>15}{mean:>12.1f}%")
    return "\n".join(lines)


def load_benchmark(data: dict):
    """``(trajectories, RewardConfig)`` from a benchmark mapping."""
    try:
        trajs = [ViaTrajectory.from_dict(t) for t in data["trajectories"]]
        r = data["reward"]
        return trajs, RewardConfig(float(r["a"]), float(r["b"]), r["tau_limit"])
    except (KeyError, TypeError) as exc:
        raise ContractError(f"bad benchmark file: {exc}") from None


def bundled_benchmark():
    text = resources.files("hybridyn").joinpath("data", "plan_benchmark.yaml").read_text(encoding="utf-8")
    return load_benchmark(yaml.safe_load(text))


def scale_law_check(traj: ViaTrajectory, alpha: float, sample_period: float = 0.008):
    """Velocity and acceleration peak ratios after scaling every duration by ``alpha``."""
    a = traj.sample(sample_period)
    b = traj.scaled([alpha, alpha]).sample(sample_period * alpha)
    return (np.abs(b.theta_dot).max() / np.abs(a.theta_dot).max(),
            np.abs(b.theta_ddot).max() / np.abs(a.theta_ddot).max())

