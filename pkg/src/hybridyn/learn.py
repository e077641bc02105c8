"""Torque models: windowed features, loss identification, hybrid compositions,
metrics and coordinate grid search.

A hybrid model adds up to three parts per joint: the rigid-body equation of
motion, the joint loss model and a boosted-tree residual. Which parts are
present is fixed by the composition name:

    P1  physics            P2  physics + loss        D   trees
    H1  physics + loss + trees   H2  physics + trees   H3  loss + trees

Each tree is trained on what its composition's other parts leave unexplained.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics as dyn
from .dynamics import LossParams, RobotModel
from .errors import ContractError, RankDeficientError
from .gbt import GbtEnsemble, GbtHyperParams, fit_gbt, presort
from .plant import TrajectoryLog

FORMAT_VERSION = 1

# joints (0-based) whose torque each feature group predicts
GROUPS = {"joints123": (0, 1, 2), "joint4": (3,), "joint5": (4,)}
CHANNEL_GROUP = {0: "joints123", 1: "joints123", 2: "joints123", 3: "joint4", 4: "joint5"}

COMPOSITIONS = {
    # name: (physics, loss, trees)
    "P1": (True, False, False),
    "P2": (True, True, False),
    "D": (False, False, True),
    "H1": (True, True, True),
    "H2": (True, False, True),
    "H3": (False, True, True),
}


def feature_names(group: str, n_joints: int = 6) -> list[str]:
    """Per-timestamp feature order of a group."""
    if group == "joints123":
        return [f"{s}_{j + 1}" for j in range(3) for s in ("theta", "thetad", "thetadd")]
    if group in GROUPS:
        j = GROUPS[group][0] + 1
        return [f"theta_{i + 1}" for i in range(n_joints)] + [f"thetad_{j}", f"thetadd_{j}"]
    raise ContractError(f"unknown feature group '{group}'")


def _state_columns(theta, theta_dot, theta_ddot, group):
    if group == "joints123":
        cols = []
        for j in range(3):
            cols += [theta[:, j], theta_dot[:, j], theta_ddot[:, j]]
        return np.column_stack(cols)
    if group in GROUPS:
        j = GROUPS[group][0]
        return np.column_stack([theta, theta_dot[:, j], theta_ddot[:, j]])
    raise ContractError(f"unknown feature group '{group}'")


def window_features(theta, theta_dot, theta_ddot, group: str, window_len: int) -> np.ndarray:
    """Flattened windows, oldest timestamp first; one row per index k >= window_len - 1."""
    S = _state_columns(np.asarray(theta), np.asarray(theta_dot), np.asarray(theta_ddot), group)
    N = S.shape[0]
    if window_len < 1:
        raise ContractError("window_len must be >= 1")
    if N < window_len:
        raise ContractError(f"log has {N} samples, shorter than the window of {window_len}")
    win = np.lib.stride_tricks.sliding_window_view(S, window_len, axis=0)   # (rows, cols, w)
    return np.ascontiguousarray(win.transpose(0, 2, 1).reshape(N - window_len + 1, -1))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature rows and the torque labels of one feature group.

    ``labels[:, c]`` belongs to joint ``channels[c]``; ``norm`` holds the
    z-score ``(mean, std)`` of the feature columns when normalised.
    """
    features: np.ndarray
    labels: np.ndarray
    group: str
    window_len: int
    channels: tuple
    norm: tuple | None = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        Y = np.asarray(self.labels, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.shape[0] != Y.shape[0] or Y.shape[1] != len(self.channels):
            raise ContractError("features and labels do not align")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ContractError("dataset contains NaN or inf")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", Y)
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    def label(self, joint: int) -> np.ndarray:
        return self.labels[:, self.channels.index(joint)]

    def with_(self, **kw) -> "Dataset":
        return replace(self, **kw)


def build_features(log: TrajectoryLog, group: str, window_len: int = 10, labels=None) -> Dataset:
    """Windowed dataset of one log. Labels default to the measured torques of
    the group's joints at the newest timestamp of each window."""
    X = window_features(log.theta, log.theta_dot, log.theta_ddot, group, window_len)
    ch = GROUPS[group]
    src = log.tau_measured if labels is None else np.asarray(labels)
    return Dataset(X, src[window_len - 1:, list(ch)], group, window_len, ch)


def concat_datasets(parts) -> Dataset:
    parts = list(parts)
    first = parts[0]
    for p in parts[1:]:
        if (p.group, p.window_len, p.channels, p.norm) != (first.group, first.window_len, first.channels, first.norm):
            raise ContractError("datasets are not compatible")
    return first.with_(features=np.concatenate([p.features for p in parts]),
                       labels=np.concatenate([p.labels for p in parts]))


def normalize(ds: Dataset) -> Dataset:
    """Z-score feature columns; constant columns pass through unscaled."""
    if ds.norm is not None:
        raise ContractError("dataset is already normalised")
    mean = ds.features.mean(axis=0)
    std = ds.features.std(axis=0)
    flat = std <= 1e-12
    if flat.any():
        warnings.warn(f"{int(flat.sum())} constant feature columns left unscaled", RuntimeWarning, stacklevel=2)
        mean = np.where(flat, 0.0, mean)
        std = np.where(flat, 1.0, std)
    return ds.with_(features=(ds.features - mean) / std, norm=(mean, std))


def apply_norm(X, norm):
    if norm is None:
        return X
    mean, std = norm
    return (X - mean) / std


def denormalize(ds: Dataset) -> Dataset:
    if ds.norm is None:
        return ds
    mean, std = ds.norm
    return ds.with_(features=ds.features * std + mean, norm=None)


def block_split(logs, train_fraction: float = 0.8):
    """Cut every log into a leading training block and a trailing validation block."""
    if not 0 < train_fraction < 1:
        raise ContractError("train_fraction must lie in (0, 1)")
    train, val = [], []
    for lg in logs:
        cut = int(round(train_fraction * lg.n_samples))
        train.append(lg.slice(0, cut))
        val.append(lg.slice(cut, None))
    return train, val


def row_split(ds: Dataset, train_fraction: float = 0.8, seed: int = 0):
    """Shuffled row split. Overlapping windows leak between the halves, so
    this only suits in-sample diagnostics."""
    perm = np.random.default_rng(seed).permutation(ds.n_rows)
    cut = int(round(train_fraction * ds.n_rows))
    a, b = np.sort(perm[:cut]), np.sort(perm[cut:])
    return (ds.with_(features=ds.features[a], labels=ds.labels[a]),
            ds.with_(features=ds.features[b], labels=ds.labels[b]))


def identify_loss_params(logs, model: RobotModel) -> LossParams:
    """Per-joint least squares of ``tau_measured - inverse_dynamics`` on
    ``[theta_ddot, theta_dot, sign(theta_dot)]``; coefficients clipped at 0."""
    logs = [logs] if isinstance(logs, TrajectoryLog) else list(logs)
    Q = np.concatenate([lg.theta for lg in logs])
    QD = np.concatenate([lg.theta_dot for lg in logs])
    QDD = np.concatenate([lg.theta_ddot for lg in logs])
    tau = np.concatenate([lg.tau_measured for lg in logs])
    if not np.all(np.isfinite(tau)):
        raise ContractError("logs carry no measured torque")
    r = tau - dyn.inverse_dynamics_batch(model, Q, QD, QDD)
    n = model.n_joints
    coef = np.zeros((n, 3))
    for j in range(n):
        A = np.column_stack([QDD[:, j], QD[:, j], np.sign(QD[:, j])])
        s = np.linalg.svd(A, compute_uv=False)
        if s[-1] <= 1e-10 * max(s[0], 1e-300) or not (np.any(QD[:, j] > 0) and np.any(QD[:, j] < 0)):
            raise RankDeficientError(
                f"joint {j + 1}: loss regressors are rank deficient (needs motion in both directions)")
        coef[j] = np.linalg.lstsq(A, r[:, j], rcond=None)[0]
    coef = np.maximum(coef, 0.0)
    return LossParams(coef[:, 0], coef[:, 1], coef[:, 2])


def _base_parts(composition, physics, loss, Q, QD, QDD):
    """Physics and loss contribution of a composition at every sample."""
    use_phys, use_loss, _ = COMPOSITIONS[composition]
    out = np.zeros_like(Q)
    if use_phys:
        out = out + dyn.inverse_dynamics_batch(physics, Q, QD, QDD)
    if use_loss:
        out = out + dyn.loss_torque_arrays(loss, QD, QDD)
    return out


class HybridModel:
    """A composed torque predictor covering every joint of one robot."""

    def __init__(self, composition: str, physics: RobotModel | None = None, loss: LossParams | None = None,
                 trees: dict | None = None, window_len: int = 10, norms: dict | None = None,
                 n_joints: int | None = None):
        if composition not in COMPOSITIONS:
            raise ContractError(f"unknown composition '{composition}'")
        use_phys, use_loss, use_trees = COMPOSITIONS[composition]
        if use_phys and physics is None:
            raise ContractError(f"{composition} needs a physics model")
        if use_loss and loss is None:
            raise ContractError(f"{composition} needs loss parameters")
        if use_trees and not trees:
            raise ContractError(f"{composition} needs residual trees")
        if not use_trees and trees:
            raise ContractError(f"{composition} has no tree part")
        self.composition = composition
        self.physics = physics if use_phys else None
        self.loss = loss if use_loss else None
        self.trees = {int(k): v for k, v in (trees or {}).items()}
        self.window_len = int(window_len)
        self.norms = dict(norms or {})
        self.n_joints = n_joints or (physics.n_joints if physics is not None else
                                     loss.b_m.shape[0] if loss is not None else 6)

    @property
    def has_trees(self) -> bool:
        return bool(self.trees)

    def base_torque(self, Q, QD, QDD) -> np.ndarray:
        return _base_parts(self.composition, self.physics, self.loss, Q, QD, QDD)

    def tree_torque(self, log: TrajectoryLog) -> np.ndarray:
        """Tree output per sample; NaN before a full window and on joints without a tree."""
        out = np.full((log.n_samples, self.n_joints), np.nan)
        w = self.window_len
        cache = {}
        for j, ens in self.trees.items():
            group = CHANNEL_GROUP[j]
            if group not in cache:
                X = window_features(log.theta, log.theta_dot, log.theta_ddot, group, w)
                cache[group] = apply_norm(X, self.norms.get(group))
            out[w - 1:, j] = ens.predict(cache[group])
        return out

    def predict(self, log: TrajectoryLog) -> np.ndarray:
        """Predicted joint torques ``(N, n)``.

        With trees, the first ``window_len - 1`` rows are NaN. Joints without a
        tree keep the physics/loss part; for the pure tree model they are NaN.
        """
        base = self.base_torque(log.theta, log.theta_dot, log.theta_ddot)
        if not self.has_trees:
            return base
        tt = self.tree_torque(log)
        w = self.window_len
        out = base.copy()
        out[: w - 1] = np.nan
        for j in range(self.n_joints):
            if j in self.trees:
                out[w - 1:, j] += tt[w - 1:, j]
            elif self.composition == "D":
                out[:, j] = np.nan
        return out

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "composition": self.composition,
            "n_joints": self.n_joints,
            "window_len": self.window_len,
            "loss_params": self.loss.to_dict() if self.loss is not None else None,
            "uses_physics": self.physics is not None,
            "robot": self.physics.name if self.physics is not None else None,
            "normalization": {g: {"mean": m.tolist(), "std": s.tolist()} for g, (m, s) in self.norms.items()},
            "trees": {str(j): e.to_dict() for j, e in sorted(self.trees.items())},
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, d, physics: RobotModel | None = None) -> "HybridModel":
        if d.get("format_version") != FORMAT_VERSION:
            raise ContractError(f"unsupported model format {d.get('format_version')}")
        if d["uses_physics"] and physics is None:
            raise ContractError("this model needs the robot model it was trained with")
        norms = {g: (np.asarray(v["mean"]), np.asarray(v["std"])) for g, v in d["normalization"].items()}
        return cls(d["composition"], physics if d["uses_physics"] else None,
                   LossParams.from_dict(d["loss_params"]) if d["loss_params"] else None,
                   {int(j): GbtEnsemble.from_dict(e) for j, e in d["trees"].items()},
                   d["window_len"], norms, d["n_joints"])

    @classmethod
    def load(cls, path, physics: RobotModel | None = None) -> "HybridModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), physics)


def predict_torque(model: HybridModel, log: TrajectoryLog) -> np.ndarray:
    return model.predict(log)


def residual_datasets(composition, logs, physics, loss, window_len=10, joints=(0, 1, 2, 3, 4)):
    """Per-group datasets whose labels are the torque left over by the
    composition's physics/loss part."""
    logs = [logs] if isinstance(logs, TrajectoryLog) else list(logs)
    out = {}
    for group in dict.fromkeys(CHANNEL_GROUP[j] for j in joints):
        parts = []
        for lg in logs:
            r = lg.tau_measured - _base_parts(composition, physics, loss, lg.theta, lg.theta_dot, lg.theta_ddot)
            parts.append(build_features(lg, group, window_len, labels=r))
        out[group] = concat_datasets(parts)
    return out


def fit_hybrid(composition: str, logs, physics: RobotModel | None = None, loss: LossParams | None = None,
               params: GbtHyperParams | dict | None = None, window_len: int = 10,
               joints=(0, 1, 2, 3, 4), normalize_features: bool = False) -> HybridModel:
    """Build a composition; trees (if any) fit the residual of the other parts.

    ``params`` is one hyperparameter set or a ``{joint: params}`` mapping.
    """
    logs = [logs] if isinstance(logs, TrajectoryLog) else list(logs)
    if not COMPOSITIONS[composition][2]:
        return HybridModel(composition, physics, loss, window_len=window_len)
    datasets = residual_datasets(composition, logs, physics, loss, window_len, joints)
    norms, trees = {}, {}
    for group, ds in datasets.items():
        if normalize_features:
            ds = normalize(ds)
            norms[group] = ds.norm
        presorted = None
        for j in ds.channels:
            if j not in joints:
                continue
            p = params.get(j, GbtHyperParams()) if isinstance(params, dict) else (params or GbtHyperParams())
            if presorted is None:
                presorted = presort(ds.features)
            trees[j] = fit_gbt(ds.features, ds.label(j), p, presorted=presorted)
    return HybridModel(composition, physics, loss, trees, window_len, norms, logs[0].n_joints)


def _pair(pred, actual):
    p = np.asarray(pred, dtype=float).ravel()
    a = np.asarray(actual, dtype=float).ravel()
    if p.shape != a.shape:
        raise ContractError("prediction and reference lengths differ")
    if p.size == 0:
        raise ContractError("metrics need at least one value")
    return p - a


def metric_mse(pred, actual) -> float:
    e = _pair(pred, actual)
    return float(np.mean(e * e))


def metric_rmse(pred, actual) -> float:
    return math.sqrt(metric_mse(pred, actual))


def metric_mae(pred, actual) -> float:
    return float(np.mean(np.abs(_pair(pred, actual))))


@dataclass
class ModelStats:
    name: str
    per_trajectory: list
    mean: float
    std: float
    max: float
    min: float


def evaluate_models(models: dict, test_logs, joints=(0, 1, 2, 3, 4), window_len: int = 10) -> list[ModelStats]:
    """Per-trajectory RMSE over the given joints, then mean/std/max/min across trajectories.

    All models are scored on the same samples (those with a full window).
    """
    test_logs = [test_logs] if isinstance(test_logs, TrajectoryLog) else list(test_logs)
    if not test_logs:
        raise ContractError("need at least one test trajectory")
    j = list(joints)
    out = []
    for name, m in models.items():
        vals = []
        for lg in test_logs:
            pred = m.predict(lg)[window_len - 1:, j]
            vals.append(metric_rmse(pred, lg.tau_measured[window_len - 1:, j]))
        v = np.asarray(vals)
        out.append(ModelStats(name, vals, float(v.mean()), float(v.std()), float(v.max()), float(v.min())))
    return out


def format_report(stats, path_csv=None) -> str:
    lines = [f"{'model':<10}{'mean':>10}{'std':>10}{'max':>10}{'min':>10}"]
    for s in stats:
        lines.append(f"{s.name:<10}{s.mean:>10.4f}{s.std:>10.4f}{s.max:>10.4f}{s.min:>10.4f}")
    if path_csv is not None:
        with open(path_csv, "w", encoding="utf-8") as fh:
            fh.write("model,mean_rmse,std_rmse,max_rmse,min_rmse\n")
            for s in stats:
                fh.write(f"{s.name},{s.mean!r},{s.std!r},{s.max!r},{s.min!r}\n")
    return "\n".join(lines)


@dataclass(frozen=True)
class HyperSpace:
    names: tuple
    candidates: tuple
    passes: int = 3

    def __post_init__(self):
        names = tuple(self.names)
        cands = tuple(tuple(c) for c in self.candidates)
        if len(set(names)) != len(names):
            raise ContractError("hyperparameter names must be unique")
        if len(names) != len(cands) or any(len(c) == 0 for c in cands):
            raise ContractError("every hyperparameter needs a non-empty candidate list")
        if self.passes < 1:
            raise ContractError("passes must be >= 1")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "candidates", cands)

    @classmethod
    def from_dict(cls, space: dict, passes: int = 3) -> "HyperSpace":
        return cls(tuple(space), tuple(space.values()), passes)


class ObjectiveError(RuntimeError):
    """The search objective raised; ``params`` holds the offending point."""

    def __init__(self, params, cause):
        super().__init__(f"objective failed at {params}: {cause!r}")
        self.params = params


@dataclass
class SearchResult:
    best: object
    best_score: float
    initial_score: float
    trace: list = field(default_factory=list)

    @property
    def n_evaluations(self) -> int:
        return len(self.trace)


def coordinate_grid_search(space: HyperSpace, objective, initial) -> SearchResult:
    """One-parameter-at-a-time sweeps with immediate write-back (minimisation).

    ``initial`` is a ``GbtHyperParams`` or a plain dict. The objective is
    called ``passes * sum(len(list))`` times; when a starting value is not on
    its candidate list one extra call scores the starting point so the result
    can never be worse than it.
    """
    is_hp = isinstance(initial, GbtHyperParams)
    current = initial.to_dict() if is_hp else dict(initial)

    def build(d):
        return GbtHyperParams.from_dict(d) if is_hp else dict(d)

    def call(d):
        try:
            return float(objective(build(d)))
        except Exception as exc:          # propagate with the point attached
            raise ObjectiveError(dict(d), exc) from exc

    trace = []
    on_grid = all(current.get(n) in c for n, c in zip(space.names, space.candidates))
    best_score, initial_score = math.inf, math.nan
    if not on_grid:
        initial_score = best_score = call(current)
        trace.append({"pass": -1, "param": None, "value": None, "score": best_score})
    best = dict(current)
    for p in range(space.passes):
        for name, cands in zip(space.names, space.candidates):
            for v in cands:
                trial = dict(best)
                trial[name] = v
                s = call(trial)
                trace.append({"pass": p, "param": name, "value": v, "score": s})
                if trial == current and math.isnan(initial_score):
                    initial_score = s
                if s < best_score:
                    best_score, best = s, trial
    return SearchResult(build(best), best_score, initial_score, trace)
