import json
import math

import numpy as np
import pytest

from hybridyn import dynamics as dyn
from hybridyn.dynamics import LossParams
from hybridyn.errors import ContractError, RankDeficientError
from hybridyn.gbt import GbtEnsemble, GbtHyperParams
from hybridyn.learn import (HybridModel, HyperSpace, ObjectiveError, block_split, build_features,
                            coordinate_grid_search, denormalize, evaluate_models, feature_names,
                            fit_hybrid, identify_loss_params, metric_mae, metric_mse, metric_rmse,
                            normalize, window_features)
from hybridyn.plant import PlantConfig, ResidualSpec, TrajectoryLog, simulate_tracking
from hybridyn.trajgen import quintic_samples

LOSS = LossParams([0.9, 0.9, 0.5, 0.2, 0.2, 0.1], [4, 4, 2.5, 1, 1, 0.5], [3.5, 3.5, 2, 0.9, 0.9, 0.5])
RES = ResidualSpec([3, 3, 1.8, 0.8, 0.8, 0.4], [0.08] * 6, [0.3] * 6,
                   [1.2, 1.2, 0.7, 0.3, 0.3, 0.15], [4, 5, 6, 4, 5, 6], 0.04)
SMALL = GbtHyperParams(max_depth=3, n_estimators=5)


def back_and_forth(amplitudes_deg, T=1.2, repeats=1, dt=0.008):
    """Rest-to-rest swings 0 -> +a -> -a -> 0 so every joint moves both ways."""
    a = np.deg2rad(amplitudes_deg)
    waypoints = [np.zeros(6)] + [a, -a] * repeats + [np.zeros(6)]
    th, thd, thdd = [], [], []
    for k, (p, q) in enumerate(zip(waypoints, waypoints[1:])):
        leg = quintic_samples(p, q, T, dt)
        s = 0 if k == 0 else 1
        th.append(leg.theta[s:]); thd.append(leg.theta_dot[s:]); thdd.append(leg.theta_ddot[s:])
    th = np.concatenate(th)
    return TrajectoryLog(dt * np.arange(th.shape[0]), th, np.concatenate(thd), np.concatenate(thdd))


@pytest.fixture(scope="module")
def swing():
    return back_and_forth([40, 30, 45, 60, 50, 70])


@pytest.fixture(scope="module")
def noisy_log(robot, swing):
    return simulate_tracking(PlantConfig(robot, LOSS, RES, torque_noise_std=0.15), swing, seed=3)


def test_window_of_ten_samples_gives_one_row():
    N = 10
    t = np.arange(N, dtype=float)[:, None]
    j = np.arange(1, 7, dtype=float)[None, :]
    theta, thetad, thetadd = 100 * t + j, 100 * t + j + 0.1, 100 * t + j + 0.2
    X = window_features(theta, thetad, thetadd, "joints123", 10)
    assert X.shape == (1, 90)
    # oldest first, (theta, thetad, thetadd) interleaved per joint
    assert X[0, :9].tolist() == [1, 1.1, 1.2, 2, 2.1, 2.2, 3, 3.1, 3.2]
    assert X[0, 81:].tolist() == [901, 901.1, 901.2, 902, 902.1, 902.2, 903, 903.1, 903.2]
    X4 = window_features(theta, thetad, thetadd, "joint4", 10)
    assert X4.shape == (1, 80)
    assert X4[0, :8].tolist() == [1, 2, 3, 4, 5, 6, 4.1, 4.2]
    assert window_features(theta, thetad, thetadd, "joint5", 10)[0, 6:8].tolist() == [5.1, 5.2]
    assert len(feature_names("joints123")) == 9 and len(feature_names("joint5")) == 8


def test_window_rows_and_labels_align(swing):
    log = swing.with_(tau_measured=np.tile(np.arange(swing.n_samples, dtype=float)[:, None], (1, 6)))
    ds = build_features(log, "joint4", 10)
    assert ds.n_rows == swing.n_samples - 9
    assert ds.label(3)[0] == 9.0
    np.testing.assert_array_equal(ds.features[5, -8:-2], swing.theta[14])


def test_constant_log_gives_identical_rows():
    N = 30
    q = np.tile([0.1, -0.2, 0.3, 0.0, 0.5, -0.1], (N, 1))
    X = window_features(q, np.zeros_like(q), np.zeros_like(q), "joints123", 10)
    assert X.shape == (21, 90)
    assert np.all(X == X[0])


def test_short_log_and_bad_window():
    q = np.zeros((5, 6))
    with pytest.raises(ContractError):
        window_features(q, q, q, "joints123", 10)
    with pytest.raises(ContractError):
        window_features(q, q, q, "joints123", 0)
    with pytest.raises(ContractError):
        window_features(q, q, q, "joint9", 2)


def test_loss_identification_exact_without_residual(robot, swing):
    log = simulate_tracking(PlantConfig(robot, LOSS, ResidualSpec.zeros(6)), swing)
    got = identify_loss_params(log, robot)
    for name in ("b_m", "c_m", "f_c"):
        assert np.abs(getattr(got, name) - getattr(LOSS, name)).max() < 1e-6


def test_loss_identification_zero_loss(robot, swing):
    zero = LossParams(np.zeros(6), np.zeros(6), np.zeros(6))
    log = simulate_tracking(PlantConfig(robot, zero, ResidualSpec.zeros(6)), swing)
    got = identify_loss_params(log, robot)
    for name in ("b_m", "c_m", "f_c"):
        assert np.abs(getattr(got, name)).max() < 1e-8


def test_loss_identification_with_noise(robot):
    ref = back_and_forth([60, 40, 60, 80, 70, 90], T=1.5, repeats=17)
    assert ref.n_samples >= 6000
    logs = [simulate_tracking(PlantConfig(robot, LOSS, ResidualSpec.zeros(6), torque_noise_std=0.1),
                              ref, seed=s) for s in range(8)]
    assert sum(lg.n_samples for lg in logs) >= 50_000
    got = identify_loss_params(logs, robot)
    for name in ("b_m", "c_m", "f_c"):
        true = getattr(LOSS, name)
        assert np.all(np.abs(getattr(got, name) - true) <= 0.05 * true)


def test_rank_deficient_names_the_joint(robot, noisy_log):
    still = np.array([1, 1, 0, 1, 1, 1])
    th = noisy_log.theta.copy()
    th[:, 2] = 0.3
    log = noisy_log.with_(theta=th, theta_dot=noisy_log.theta_dot * still,
                          theta_ddot=noisy_log.theta_ddot * still)
    with pytest.raises(RankDeficientError, match="joint 3"):
        identify_loss_params(log, robot)


def zero_tree(d):
    return GbtEnsemble(0.0, [-1], [0.0], [-1], [-1], [0.0], [0], d, GbtHyperParams())


def test_zero_trees_reduce_to_physics_plus_loss(robot, noisy_log):
    trees = {0: zero_tree(90), 1: zero_tree(90), 2: zero_tree(90), 3: zero_tree(80), 4: zero_tree(80)}
    h1 = HybridModel("H1", robot, LOSS, trees)
    p2 = HybridModel("P2", robot, LOSS)
    a, b = h1.predict(noisy_log), p2.predict(noisy_log)
    assert np.all(np.isnan(a[:9]))
    np.testing.assert_array_equal(a[9:], b[9:])


def test_hybrid_is_base_plus_tree(robot, noisy_log):
    h1 = fit_hybrid("H1", noisy_log, robot, LOSS, SMALL)
    p2 = fit_hybrid("P2", noisy_log, robot, LOSS)
    diff = h1.predict(noisy_log) - h1.tree_torque(noisy_log)
    assert np.abs(diff[9:, :5] - p2.predict(noisy_log)[9:, :5]).max() < 1e-12
    # joint 6 has no tree: base part only for hybrids, NaN for the pure tree model
    np.testing.assert_array_equal(h1.predict(noisy_log)[9:, 5], p2.predict(noisy_log)[9:, 5])
    d = fit_hybrid("D", noisy_log, params=SMALL)
    assert np.all(np.isnan(d.predict(noisy_log)[:, 5]))
    assert np.all(np.isfinite(d.predict(noisy_log)[9:, :5]))


def test_physics_only_on_static_log_is_gravity(robot):
    q = np.deg2rad([10, -20, 35, 5, 15, -40])
    N = 12
    log = TrajectoryLog(0.008 * np.arange(N), np.tile(q, (N, 1)), np.zeros((N, 6)), np.zeros((N, 6)))
    pred = HybridModel("P1", robot).predict(log)
    assert np.abs(pred - dyn.gravity_torque(robot, q)).max() < 1e-12


def test_composition_contracts(robot):
    with pytest.raises(ContractError):
        HybridModel("H1", robot, LOSS)
    with pytest.raises(ContractError):
        HybridModel("P2", robot)
    with pytest.raises(ContractError):
        HybridModel("Q7", robot)


def test_metric_examples():
    assert metric_mse([0, 0], [0, 4]) == 8.0
    assert metric_rmse([0, 0], [0, 4]) == pytest.approx(math.sqrt(8), abs=1e-15)
    assert metric_mae([0, 0], [0, 4]) == 2.0
    with pytest.raises(ContractError):
        metric_rmse([], [])
    with pytest.raises(ContractError):
        metric_mae([1, 2], [1])


def test_evaluate_single_trajectory(robot, noisy_log):
    stats = evaluate_models({"P2": HybridModel("P2", robot, LOSS)}, [noisy_log])
    s = stats[0]
    assert s.std == 0.0 and s.mean == s.max == s.min
    err = HybridModel("P2", robot, LOSS).predict(noisy_log)[9:, :5] - noisy_log.tau_measured[9:, :5]
    assert s.mean == pytest.approx(np.sqrt(np.mean(err**2)), rel=1e-12)


def test_grid_search_separable_objective():
    space = HyperSpace(("a", "b"), ((0, 1, 2), (0, 1, 2, 3)), passes=3)
    calls = []

    def obj(p):
        calls.append(dict(p))
        return (p["a"] - 2) ** 2 + (p["b"] - 1) ** 2

    res = coordinate_grid_search(space, obj, {"a": 0, "b": 3})
    assert len(calls) == 21 == res.n_evaluations
    assert res.best == {"a": 2, "b": 1} and res.best_score == 0.0
    assert res.initial_score == 8.0
    best_so_far = np.minimum.accumulate([t["score"] for t in res.trace])
    assert np.all(np.diff(best_so_far) <= 0) and best_so_far[-1] == res.best_score


def test_grid_search_off_grid_start_scored_once():
    space = HyperSpace(("a",), ((1, 2),), passes=2)
    res = coordinate_grid_search(space, lambda p: abs(p["a"] - 1.5) + 0.1, {"a": 1.5})
    assert res.n_evaluations == 5
    assert res.initial_score == pytest.approx(0.1)
    assert res.best == {"a": 1.5} and res.best_score <= res.initial_score


def test_grid_search_wraps_errors():
    def obj(p):
        if p["a"] == 2:
            raise ValueError("boom")
        return p["a"]

    with pytest.raises(ObjectiveError) as info:
        coordinate_grid_search(HyperSpace(("a",), ((1, 2, 3),)), obj, {"a": 1})
    assert info.value.params == {"a": 2}


def test_grid_search_with_hyperparams():
    space = HyperSpace.from_dict({"max_depth": [1, 2, 3]}, passes=1)
    res = coordinate_grid_search(space, lambda p: -p.max_depth, GbtHyperParams(max_depth=2))
    assert isinstance(res.best, GbtHyperParams) and res.best.max_depth == 3


def test_normalize_examples(swing):
    ds = build_features(swing.slice(0, 12), "joint5", 3, labels=np.zeros((12, 6)))
    X = ds.features.copy()
    X[:, 0] = [1, 2, 3] * 3 + [1]
    X[:, 1] = 7.0
    ds = ds.with_(features=X)
    with pytest.warns(RuntimeWarning, match="1 constant"):
        nd = normalize(ds)
    m, s = nd.norm
    assert m[0] == pytest.approx(1.9) and s[0] == pytest.approx(np.std(X[:, 0]))
    col = X[:, 0]
    assert nd.features[:, 0] == pytest.approx((col - col.mean()) / col.std())
    assert np.all(nd.features[:, 1] == 7.0)
    assert np.abs(denormalize(nd).features - X).max() < 1e-12
    with pytest.raises(ContractError):
        normalize(nd)


def test_model_json_round_trip(robot, noisy_log, tmp_path):
    m = fit_hybrid("H1", noisy_log, robot, LOSS, SMALL, normalize_features=True)
    path = tmp_path / "h1.json"
    m.save(path)
    back = HybridModel.load(path, robot)
    a, b = m.predict(noisy_log), back.predict(noisy_log)
    assert np.nanmax(np.abs(a - b)) <= 1e-12
    assert back.composition == "H1" and json.loads(path.read_text())["format_version"] == 1
    with pytest.raises(ContractError):
        HybridModel.load(path)


def test_predictions_ignore_time_offset(robot, noisy_log):
    m = fit_hybrid("H1", noisy_log, robot, LOSS, SMALL)
    a = m.predict(noisy_log)
    b = m.predict(noisy_log.shifted(123.4))
    np.testing.assert_array_equal(a[9:], b[9:])


def test_block_split_keeps_order(swing):
    train, val = block_split([swing])
    cut = int(round(0.8 * swing.n_samples))
    assert train[0].n_samples == cut and val[0].n_samples == swing.n_samples - cut
    np.testing.assert_array_equal(val[0].theta[0], swing.theta[cut])
