"""Training-trajectory generation.

Joint ranges are digitised into a configuration grid, colliding
configurations are dropped with an oriented-bounding-box separating-axis
test, and the survivors are chained pairwise into one continuous motion
that is replayed at several speeds. Each leg is a rest-to-rest quintic.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import dynamics as dyn
from .errors import ContractError, InfeasibleTrajectory
from .plant import TrajectoryLog

# peak |s'| and |s''| of s(u) = 10u^3 - 15u^4 + 6u^5 on [0, 1]
QUINTIC_PEAK_VEL = 1.875
QUINTIC_PEAK_ACC = 10.0 / math.sqrt(3.0)


@dataclass(frozen=True, eq=False)
class GridSpec:
    per_joint_angles: tuple
    speeds: tuple

    def __post_init__(self):
        angles = tuple(np.asarray(a, dtype=float) for a in self.per_joint_angles)
        for a in angles:
            if a.size < 2 or np.any(np.diff(a) <= 0):
                raise ContractError("each joint grid needs >= 2 strictly increasing angles")
        if not self.speeds or any(s <= 0 for s in self.speeds):
            raise ContractError("speeds must be positive")
        object.__setattr__(self, "per_joint_angles", angles)
        object.__setattr__(self, "speeds", tuple(float(s) for s in self.speeds))

    @classmethod
    def from_limits(cls, limits, segments_per_joint, speeds) -> "GridSpec":
        limits = np.asarray(limits, dtype=float)
        segs = np.broadcast_to(np.asarray(segments_per_joint), (limits.shape[0],))
        if np.any(segs < 1):
            raise ContractError("segments per joint must be >= 1")
        return cls(tuple(np.linspace(lo, hi, int(s) + 1) for (lo, hi), s in zip(limits, segs)), speeds)

    def check_within(self, model: dyn.RobotModel):
        for a, (lo, hi) in zip(self.per_joint_angles, model.joint_limits):
            if a[0] < lo - 1e-12 or a[-1] > hi + 1e-12:
                raise ContractError("grid angles exceed joint limits")

    def configurations(self, cap: int = 10**6) -> np.ndarray:
        count = math.prod(a.size for a in self.per_joint_angles)
        if count > cap:
            raise ContractError(f"{count} configurations exceed the cap of {cap}")
        return np.array(list(itertools.product(*self.per_joint_angles)))


def digitize(limits, segments_per_joint, cap: int = 10**6) -> np.ndarray:
    """Cartesian grid over joint ranges, both range ends included.

    Returns a ``(prod(N_i + 1), n)`` array in lexicographic order.
    """
    return GridSpec.from_limits(limits, segments_per_joint, (1.0,)).configurations(cap)


@dataclass(frozen=True, eq=False)
class Obb:
    center: np.ndarray
    half_extents: np.ndarray
    orientation: np.ndarray = None

    def __post_init__(self):
        c = np.array(self.center, dtype=float)
        h = np.array(self.half_extents, dtype=float)
        R = np.eye(3) if self.orientation is None else np.array(self.orientation, dtype=float)
        if c.shape != (3,) or h.shape != (3,) or R.shape != (3, 3):
            raise ContractError("Obb needs 3-vectors and a 3x3 orientation")
        if np.any(h <= 0):
            raise ContractError("half extents must be positive")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise ContractError("orientation must be orthonormal")
        for name, v in (("center", c), ("half_extents", h), ("orientation", R)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    def transformed(self, T: np.ndarray) -> "Obb":
        return Obb(T[:3, :3] @ self.center + T[:3, 3], self.half_extents, T[:3, :3] @ self.orientation)

    def contains(self, points: np.ndarray) -> np.ndarray:
        local = (np.atleast_2d(points) - self.center) @ self.orientation
        return np.all(np.abs(local) <= self.half_extents, axis=1)


def obb_overlap(a: Obb, b: Obb) -> bool:
    """Separating-axis test over the 15 candidate axes (touching counts as overlap)."""
    A, B = a.orientation, b.orientation
    d = b.center - a.center
    axes = [A[:, i] for i in range(3)] + [B[:, j] for j in range(3)]
    for i in range(3):
        for j in range(3):
            c = np.cross(A[:, i], B[:, j])
            norm = np.linalg.norm(c)
            if norm >= 1e-12:
                axes.append(c / norm)
    for L in axes:
        ra = np.sum(a.half_extents * np.abs(L @ A))
        rb = np.sum(b.half_extents * np.abs(L @ B))
        if abs(d @ L) > ra + rb:
            return False
    return True


@dataclass(frozen=True)
class LinkBox:
    """An OBB template rigidly attached to DH frame ``frame`` (0 = base)."""
    frame: int
    box: Obb


def placed_boxes(model: dyn.RobotModel, theta, link_boxes) -> list[Obb]:
    Ts = dyn.link_transforms(model, theta)
    return [lb.box.transformed(Ts[lb.frame]) for lb in link_boxes]


def collision_free(model: dyn.RobotModel, theta, link_boxes, obstacles=(),
                   ignore_pairs=()) -> bool:
    """True iff no non-adjacent link pair and no link/obstacle pair overlaps.

    Boxes on frames whose indices differ by at most one are adjacent and are
    never tested against each other; ``ignore_pairs`` lists extra frame pairs
    to skip.
    """
    placed = placed_boxes(model, theta, link_boxes)
    skip = {frozenset(p) for p in ignore_pairs}
    for (i, a), (j, b) in itertools.combinations(enumerate(placed), 2):
        fi, fj = link_boxes[i].frame, link_boxes[j].frame
        if abs(fi - fj) <= 1 or frozenset((fi, fj)) in skip:
            continue
        if obb_overlap(a, b):
            return False
    for box in placed:
        for obs in obstacles:
            if obb_overlap(box, obs):
                return False
    return True


@dataclass(frozen=True, eq=False)
class Leg:
    start: np.ndarray
    end: np.ndarray
    speed: float
    pair: tuple = ()
    transit: bool = False


@dataclass(frozen=True, eq=False)
class SampledLeg:
    times: np.ndarray
    theta: np.ndarray
    theta_dot: np.ndarray
    theta_ddot: np.ndarray

    @property
    def duration(self) -> float:
        return float(self.times[-1])


def _euler_circuit(M: int) -> list[tuple[int, int]]:
    """Circuit through every ordered pair (i != j) once; smallest unused successor first."""
    unused = {i: [j for j in range(M) if j != i] for i in range(M)}
    stack, circuit = [0], []
    while stack:
        v = stack[-1]
        if unused[v]:
            stack.append(unused[v].pop(0))
        else:
            circuit.append(stack.pop())
    circuit.reverse()
    return list(zip(circuit, circuit[1:]))


def _unordered_chain(M: int) -> list[tuple[int, int, bool]]:
    """Each unordered pair once, with transit legs inserted where the chain breaks."""
    remaining = {frozenset(p) for p in itertools.combinations(range(M), 2)}
    out, v = [], 0
    while remaining:
        nxt = sorted(next(iter(e - {v})) for e in remaining if v in e)
        if nxt:
            j = nxt[0]
            remaining.discard(frozenset((v, j)))
            out.append((v, j, False))
            v = j
        else:
            j = min(min(e) for e in remaining)
            out.append((v, j, True))
            v = j
    return out


@dataclass(frozen=True, eq=False)
class TrajectorySet:
    legs: tuple

    def __post_init__(self):
        for a, b in zip(self.legs, self.legs[1:]):
            if not np.array_equal(a.end, b.start):
                raise ContractError("consecutive legs must share endpoints")

    def __len__(self):
        return len(self.legs)

    def sample(self, v_max, a_max, sample_period) -> list[SampledLeg]:
        return [time_parameterize(lg.start, lg.end, lg.speed, v_max, a_max, sample_period)
                for lg in self.legs]

    def reference(self, v_max, a_max, sample_period, max_samples=None) -> TrajectoryLog:
        """One continuous sampled reference (duplicate junction samples dropped).

        With ``max_samples`` the run is cut after that many samples and the
        remaining legs are never sampled.
        """
        parts, total = [], 0
        for lg in self.legs:
            if max_samples is not None and total >= max_samples:
                break
            parts.append(time_parameterize(lg.start, lg.end, lg.speed, v_max, a_max, sample_period))
            total += len(parts[-1].times) - (1 if len(parts) > 1 else 0)
        keys = ("theta", "theta_dot", "theta_ddot")
        data = {k: np.concatenate([getattr(p, k)[(0 if i == 0 else 1):] for i, p in enumerate(parts)])
                for k in keys}
        if max_samples is not None:
            if max_samples < 2:
                raise ContractError("max_samples must be >= 2")
            data = {k: v[:max_samples] for k, v in data.items()}
        N = data["theta"].shape[0]
        return TrajectoryLog(sample_period * np.arange(N), **data)


def enumerate_legs(configs, speeds, ordered: bool = True) -> TrajectorySet:
    """Chain configuration pairs into one continuous leg list, repeated per speed.

    The circuit is traversed once per speed. Speeds rotate from leg to leg
    (pass ``p`` runs step ``k`` at ``speeds[(k + p) % S]``), so every pair
    meets every speed exactly once and any stretch of the run mixes speeds.

    Ordered mode visits all M(M-1) ordered pairs along an Euler circuit, so
    every leg ends where the next begins. Unordered mode visits the M(M-1)/2
    pairs once each and inserts ``transit`` legs to keep the chain connected.
    """
    configs = np.asarray(configs, dtype=float)
    M = configs.shape[0]
    if M < 2:
        raise ContractError("need at least two configurations")
    if ordered:
        steps = [(i, j, False) for i, j in _euler_circuit(M)]
    else:
        steps = _unordered_chain(M)
        if steps[-1][1] != steps[0][0]:
            steps.append((steps[-1][1], steps[0][0], True))
    speeds = [float(v) for v in speeds]
    S = len(speeds)
    legs = []
    for p in range(S):
        for k, (i, j, transit) in enumerate(steps):
            legs.append(Leg(configs[i], configs[j], speeds[(k + p) % S], (i, j), transit))
    return TrajectorySet(tuple(legs))


def quintic_duration(delta, speed, v_max, a_max) -> float:
    """Shortest rest-to-rest quintic duration with peak speed ``min(speed, 1) * v_max``
    and peak acceleration at most ``a_max`` on every joint."""
    delta = np.abs(np.asarray(delta, dtype=float))
    v = np.minimum(float(speed), 1.0) * np.asarray(v_max, dtype=float)
    t_vel = QUINTIC_PEAK_VEL * delta / v
    t_acc = np.sqrt(QUINTIC_PEAK_ACC * delta / np.asarray(a_max, dtype=float))
    return float(max(t_vel.max(), t_acc.max()))


def quintic_samples(start, end, duration: float, sample_period: float) -> SampledLeg:
    """Rest-to-rest quintic sampled at ``k * sample_period``, ``duration`` a multiple of it."""
    start = np.asarray(start, dtype=float)
    delta = np.asarray(end, dtype=float) - start
    K = int(round(duration / sample_period))
    t = sample_period * np.arange(K + 1)
    T = K * sample_period
    u = (t / T)[:, None]
    s = u**3 * (10 - 15 * u + 6 * u**2)
    sd = 30 * u**2 * (1 - u) ** 2 / T
    sdd = 60 * u * (1 - u) * (1 - 2 * u) / T**2
    return SampledLeg(t, start + s * delta, sd * delta, sdd * delta)


def time_parameterize(start, end, speed, v_max, a_max, sample_period) -> SampledLeg:
    """Quintic leg whose duration (rounded up to the sample grid) respects the caps."""
    T = quintic_duration(np.asarray(end) - np.asarray(start), speed, v_max, a_max)
    K = math.ceil(T / sample_period - 1e-9)
    if K < 2:
        raise InfeasibleTrajectory(
            f"leg needs {T:.3g} s, below two sample periods ({2 * sample_period:.3g} s)")
    return quintic_samples(start, end, K * sample_period, sample_period)


def linkboxes_from_config(items) -> list[LinkBox]:
    out = []
    for it in items:
        R = None
        if "rpy_deg" in it:
            r, p, y = np.deg2rad(it["rpy_deg"])
            cr, sr, cp, sp, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
            R = np.array([[cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
                          [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
                          [-sp, cp * sr, cp * cr]])
        out.append(LinkBox(int(it["frame"]), Obb(it["center"], it["half_extents"], R)))
    return out


def obstacles_from_config(items) -> list[Obb]:
    return [lb.box for lb in linkboxes_from_config([dict(it, frame=0) for it in items])]


def surviving_configs(model: dyn.RobotModel, grid: GridSpec, link_boxes, obstacles=(),
                      ignore_pairs=(), cap: int = 10**6) -> np.ndarray:
    grid.check_within(model)
    configs = grid.configurations(cap)
    keep = [collision_free(model, q, link_boxes, obstacles, ignore_pairs) for q in configs]
    return configs[np.asarray(keep, dtype=bool)]


def collection_plan(model: dyn.RobotModel, tcfg: dict, seed: int = 0):
    """Grid, collision filter and seeded selection of ``max_configs`` survivors,
    chained into legs. Returns ``(configs, TrajectorySet)``."""
    grid = GridSpec.from_limits(np.deg2rad(tcfg["grid_limits_deg"]), tcfg["segments_per_joint"],
                                tcfg["speeds"])
    survivors = surviving_configs(model, grid, linkboxes_from_config(tcfg["link_boxes"]),
                                  obstacles_from_config(tcfg.get("obstacles") or []),
                                  tcfg.get("ignore_pairs") or [], int(tcfg.get("config_cap", 10**6)))
    M = int(tcfg["max_configs"])
    if survivors.shape[0] < 2:
        raise ContractError(f"only {survivors.shape[0]} collision-free configurations survive")
    if survivors.shape[0] > M:
        pick = np.sort(np.random.default_rng(seed).choice(survivors.shape[0], M, replace=False))
        survivors = survivors[pick]
    return survivors, enumerate_legs(survivors, grid.speeds, ordered=bool(tcfg.get("ordered_pairs", True)))


def collection_reference(model: dyn.RobotModel, tcfg: dict, sample_period: float,
                         seed: int = 0) -> TrajectoryLog:
    """Sampled reference of one collection run, capped at ``tcfg["max_samples"]``."""
    _, ts = collection_plan(model, tcfg, seed)
    cap = tcfg.get("max_samples")
    return ts.reference(tcfg["v_max"], tcfg["a_max"], sample_period,
                        None if cap is None else int(cap))


def wander_reference(center, spread, n_moves: int, move_time: float, dwell: float,
                     sample_period: float, rng) -> TrajectoryLog:
    """Holds and quintic moves between random poses ``center + U(-spread, spread)``.

    Each move takes ``move_time`` and is followed by a ``dwell`` hold; used
    for contact data where the arm works around one pose.
    """
    center = np.asarray(center, dtype=float)
    spread = np.broadcast_to(np.asarray(spread, dtype=float), center.shape)
    if n_moves < 1 or move_time < 2 * sample_period or dwell < 0:
        raise ContractError("need n_moves >= 1, move_time >= two samples and dwell >= 0")
    K_dwell = int(round(dwell / sample_period))
    q = center.copy()
    th, thd, thdd = [q[None, :]], [np.zeros((1, q.size))], [np.zeros((1, q.size))]
    for _ in range(n_moves):
        nxt = center + rng.uniform(-1.0, 1.0, size=q.size) * spread
        leg = quintic_samples(q, nxt, move_time, sample_period)
        th += [leg.theta[1:], np.tile(nxt, (K_dwell, 1))]
        thd += [leg.theta_dot[1:], np.zeros((K_dwell, q.size))]
        thdd += [leg.theta_ddot[1:], np.zeros((K_dwell, q.size))]
        q = nxt
    theta = np.vstack(th)
    return TrajectoryLog(sample_period * np.arange(theta.shape[0]), theta, np.vstack(thd), np.vstack(thdd))
