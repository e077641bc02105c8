"""Config-driven experiment steps shared by the command line and the
end-to-end checks. Nothing here touches the file system."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dynamics as dyn
from .errors import ContractError
from .gbt import GbtHyperParams
from .learn import (COMPOSITIONS, HybridModel, block_split, evaluate_models, fit_hybrid,
                    identify_loss_params)
from .observer import (external_torque_raw, kalman_filter, noise_variance, random_wrench_profile,
                       train_wrench_maps, wrench_series)
from .plant import TrajectoryLog, plant_from_dict, simulate_tracking
from .planner import CemParams, RewardConfig, optimize_speed
from .tasks import (WipeScene, peg_setup_from_config, random_scene, run_peg_episode, run_wipe,
                    sensor_from_config)
from .trajgen import collection_plan, collection_reference, wander_reference


def robot_from_config(cfg: dict) -> dyn.RobotModel:
    path = (cfg.get("robot") or {}).get("path")
    return dyn.reference_robot() if path is None else dyn.load_robot(path)


def gbt_params(cfg: dict) -> GbtHyperParams:
    return GbtHyperParams.from_dict(cfg["learn"]["gbt"])


# ------------------------------------------------------------ model learning

def collect(cfg: dict, model: dyn.RobotModel, seed: int) -> TrajectoryLog:
    """One data-collection run of the plant along the seeded trajectory set."""
    plant = plant_from_dict(model, cfg["plant"])
    ref = collection_reference(model, cfg["trajgen"], plant.sample_period, seed)
    return simulate_tracking(plant, ref, seed=seed)


def collection_summary(cfg: dict, model: dyn.RobotModel, seed: int) -> dict:
    configs, legs = collection_plan(model, cfg["trajgen"], seed)
    return {"n_configs": int(configs.shape[0]), "n_legs": len(legs)}


def training_prefix(cfg: dict, log: TrajectoryLog) -> TrajectoryLog:
    n = cfg["learn"].get("train_samples")
    return log if n is None else log.slice(0, int(n))


def test_slices(cfg: dict, logs) -> list[TrajectoryLog]:
    n = int(cfg["learn"]["test_slice"])
    out = [lg.slice(i, i + n) for lg in logs for i in range(0, lg.n_samples - n + 1, n)]
    if not out:
        raise ContractError(f"test runs are shorter than one {n}-sample slice")
    return out


def train_models(cfg: dict, model: dyn.RobotModel, train: TrajectoryLog, loss, compositions=None) -> dict:
    lc = cfg["learn"]
    out = {}
    for comp in compositions or lc["compositions"]:
        if comp not in COMPOSITIONS:
            raise ContractError(f"unknown composition {comp!r}")
        phys, use_loss, _ = COMPOSITIONS[comp]
        out[comp] = fit_hybrid(comp, [train], model if phys else None, loss if use_loss else None,
                               gbt_params(cfg), int(lc["window_len"]),
                               normalize_features=bool(lc.get("normalize", False)))
    return out


def grid_objective(cfg: dict, model: dyn.RobotModel, train: TrajectoryLog, loss):
    """Validation RMSE of the configured composition on a contiguous block split."""
    lc = cfg["learn"]
    comp = lc["grid"]["composition"]
    phys, use_loss, _ = COMPOSITIONS[comp]
    fit_part, val_part = block_split([train], float(lc["train_fraction"]))
    w = int(lc["window_len"])

    def objective(params):
        m = fit_hybrid(comp, fit_part, model if phys else None, loss if use_loss else None, params, w,
                       normalize_features=bool(lc.get("normalize", False)))
        return evaluate_models({comp: m}, val_part, window_len=w)[0].mean
    return objective


# ---------------------------------------------------------------- observer

def contact_run(cfg: dict, model: dyn.RobotModel, seed: int, with_wrench: bool = True) -> TrajectoryLog:
    """Plant run wandering around ``observer.center`` under a random wrench schedule."""
    oc = cfg["observer"]
    plant = plant_from_dict(model, cfg["plant"])
    rng = np.random.default_rng(seed)
    ref = wander_reference(oc["center"], oc["spread"], int(oc["n_moves"]), float(oc["move_time"]),
                           float(oc["dwell"]), plant.sample_period, rng)
    w = random_wrench_profile(float(ref.times[-1]), rng, (0.0, float(oc["force_max"])),
                              float(oc["moment_max"])) if with_wrench else None
    return simulate_tracking(plant, ref, w, seed=seed)


def observer_noise(cfg: dict, model: dyn.RobotModel, hybrid: HybridModel, seed: int):
    """``(q, r)`` per joint: r from the config or from a zero-wrench run, q = q_ratio * r."""
    oc = cfg["observer"]
    if oc.get("r") is not None:
        r = np.broadcast_to(np.asarray(oc["r"], dtype=float), (model.n_joints,)).copy()
    else:
        r = noise_variance(external_torque_raw(contact_run(cfg, model, seed, with_wrench=False), hybrid))
    return float(oc["q_ratio"]) * r, r


def filtered_torque(log: TrajectoryLog, hybrid: HybridModel, q, r) -> np.ndarray:
    return kalman_filter(external_torque_raw(log, hybrid), q, r)


@dataclass
class WrenchReport:
    mae_windowed: np.ndarray        # [f_z, m_x, m_y]
    mae_instant: np.ndarray
    mae_analytic_fz: float
    force_range: float
    models: tuple = ()

    def to_dict(self) -> dict:
        return {"mae_windowed": self.mae_windowed.tolist(), "mae_instant": self.mae_instant.tolist(),
                "mae_analytic_fz": self.mae_analytic_fz, "force_range": self.force_range}


def _paired_mae(models, logs, hats) -> list[np.ndarray]:
    """MAE per axis for each model, all scored on the rows every model covers."""
    errs = [[] for _ in models]
    for lg, h in zip(logs, hats):
        preds = [vw.predict(lg.theta, h) for vw in models]
        ok = np.logical_and.reduce([np.all(np.isfinite(p), axis=1) for p in preds])
        for e, p in zip(errs, preds):
            e.append(np.abs(p[ok] - lg.wrench_true[ok][:, [2, 3, 4]]))
    return [np.vstack(e).mean(axis=0) for e in errs]


def wrench_experiment(cfg: dict, model: dyn.RobotModel, hybrid: HybridModel, params: GbtHyperParams,
                      seed: int = 0) -> WrenchReport:
    """Train windowed and instantaneous wrench maps on seeded contact runs and
    score both, plus the analytic Jacobian path, on held-out runs."""
    oc = cfg["observer"]
    q, r = observer_noise(cfg, model, hybrid, 10_000 * seed + 999)
    n_tr, n_te = int(oc["train_runs"]), int(oc["test_runs"])
    logs = [contact_run(cfg, model, 10_000 * seed + i) for i in range(n_tr + n_te)]
    hats = [filtered_torque(lg, hybrid, q, r) for lg in logs]
    tr, te = slice(0, n_tr), slice(n_tr, n_tr + n_te)
    th_tr, h_tr, w_tr = [lg.theta for lg in logs[tr]], hats[tr], [lg.wrench_true for lg in logs[tr]]
    windowed = train_wrench_maps(th_tr, h_tr, w_tr, params, int(oc["window_len"]))
    instant = train_wrench_maps(th_tr, h_tr, w_tr, params, 1)
    an = []
    for lg, h in zip(logs[te], hats[te]):
        w = wrench_series(model, lg.theta, h)
        ok = np.isfinite(w[:, 2])
        an.append(np.abs(w[ok, 2] - lg.wrench_true[ok, 2]))
    mae_w, mae_i = _paired_mae((windowed, instant), logs[te], hats[te])
    return WrenchReport(mae_w, mae_i, float(np.concatenate(an).mean()), float(oc["force_max"]), (windowed, instant))


# ------------------------------------------------------------------ tasks

def peg_batch(cfg: dict, model: dyn.RobotModel, keep_rows=()):
    """Seeded peg episodes; returns the list of EpisodeResult."""
    pc = cfg["peg"]
    base, th, params = peg_setup_from_config(pc)
    out = []
    for i in range(int(pc["episodes"])):
        rng = np.random.default_rng([int(cfg["seed"]), i])
        scene = random_scene(base, rng, float(pc["max_offset"]), math.radians(float(pc["max_tilt_deg"])))
        sensor = sensor_from_config(model, cfg["sensor"], rng)
        out.append(run_peg_episode(scene, sensor, th, params, int(pc["max_steps"]), float(pc["dt"]),
                                   keep_rows=i in keep_rows))
    return out


def wipe_run(cfg: dict, model: dyn.RobotModel, ramp_height=None):
    wc = cfg["wipe"]
    scene = WipeScene(float(wc["stiffness"]), float(wc["ramp_height"] if ramp_height is None else ramp_height),
                      float(wc["ramp_start"]), float(wc["ramp_length"]))
    sensor = sensor_from_config(model, cfg["sensor"], np.random.default_rng(int(cfg["seed"])))
    return run_wipe(scene, sensor, float(wc["target_fz"]), float(wc["gain"]), float(wc["speed"]),
                    float(wc["duration"]), float(cfg["plant"]["sample_period"]), float(wc["z0"]))


# ---------------------------------------------------------------- planning

def plan_all(cfg: dict, hybrid: HybridModel, trajectories, reward_cfg: RewardConfig):
    pc = cfg["planner"]
    caps = (cfg["trajgen"]["v_max"], cfg["trajgen"]["a_max"]) if pc.get("use_caps", True) else (None, None)
    cem = CemParams(population=int(pc["population"]), elite=int(pc["elite"]))
    return [optimize_speed(hybrid, t, reward_cfg, int(pc["budget"]), int(cfg["seed"]),
                           float(cfg["plant"]["sample_period"]), caps[0], caps[1], cem)
            for t in trajectories]


def identify(cfg: dict, model: dyn.RobotModel, train: TrajectoryLog):
    return identify_loss_params([training_prefix(cfg, train)], model)

