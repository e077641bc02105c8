import numpy as np
import pytest

from hybridyn import dynamics as dyn
from hybridyn.dynamics import LossParams
from hybridyn.errors import ContractError
from hybridyn.learn import HybridModel
from hybridyn.planner import (RewardConfig, ViaTrajectory, bundled_benchmark, optimize_speed, peak_torque,
                              report_table, reward, scale_law_check)

from conftest import planar_arm

LOSS = LossParams([0.9, 0.9, 0.5, 0.2, 0.2, 0.1], [4, 4, 2.5, 1, 1, 0.5], [3.5, 3.5, 2, 0.9, 0.9, 0.5])
V_MAX = [3.14, 3.14, 3.14, 3.93, 3.93, 3.93]
A_MAX = [8.0, 8.0, 8.0, 12.0, 12.0, 12.0]
WP = [[0.0, -0.3, 0.6, 0.0, 0.5, 0.0], [0.8, 0.2, 1.2, 0.5, -0.3, 0.4], [1.5, -0.2, 0.4, -0.4, 0.6, -0.5]]


@pytest.fixture(scope="module")
def p2(robot):
    return HybridModel("P2", robot, LOSS)


def test_trajectory_validation():
    with pytest.raises(ContractError):
        ViaTrajectory(np.zeros((2, 6)), [1, 1])
    with pytest.raises(ContractError):
        ViaTrajectory(np.zeros((3, 6)), [1, 0])
    with pytest.raises(ContractError):
        RewardConfig(1.0, 200.0, [1.0])
    with pytest.raises(ContractError):
        RewardConfig(-1.0, 100.0, [1.0])
    with pytest.raises(ContractError):
        RewardConfig(-1.0, 200.0, [0.0])


def test_sampled_trajectory_rests_at_waypoints():
    tr = ViaTrajectory(WP, [1.0, 0.8])
    log = tr.sample(0.008)
    k_via = 125
    assert log.n_samples == 125 + 100 + 1
    for k, q in ((0, WP[0]), (k_via, WP[1]), (-1, WP[2])):
        assert np.allclose(log.theta[k], q, atol=1e-12)
        assert np.abs(log.theta_dot[k]).max() < 1e-12 and np.abs(log.theta_ddot[k]).max() < 1e-12


def test_stationary_peak_is_gravity(robot):
    q = np.array([0.2, -0.4, 0.9, 0.1, 0.3, -0.2])
    tr = ViaTrajectory([q, q, q], [0.5, 0.5])
    g = dyn.gravity_torque(robot, q)
    assert np.allclose(peak_torque(HybridModel("P1", robot), tr), np.abs(g), atol=1e-12)


def test_halving_durations_quadruples_peaks_without_gravity():
    arm = planar_arm([0.5, 0.4], gravity=(0.0, 0.0, 0.0))
    model = HybridModel("P1", arm)
    tr = ViaTrajectory([[0.0, 0.0], [1.0, -0.8], [0.2, 0.6]], [1.2, 1.0])
    slow = peak_torque(model, tr, 0.004)
    fast = peak_torque(model, tr.scaled([0.5, 0.5]), 0.002)
    assert np.all(fast > slow)
    assert np.allclose(fast, 4.0 * slow, rtol=1e-9)


def test_time_scaling_law():
    tr = ViaTrajectory([[0.0, 0.0], [1.0, -0.8], [0.2, 0.6]], [1.2, 1.0])
    for alpha in (0.5, 0.8, 2.0):
        v, a = scale_law_check(tr, alpha, 0.004)
        assert v == pytest.approx(1 / alpha, rel=1e-9) and a == pytest.approx(1 / alpha**2, rel=1e-9)


def test_reward_examples():
    cfg = RewardConfig(-10.0, 200.0, [10.0, 10.0])
    assert reward([5.0, 5.0], cfg, 2.38, 2.0) == pytest.approx(76.0)
    assert reward([15.0, 5.0], cfg, 2.38, 2.0) == pytest.approx(-50.0)
    assert reward([5.0, 5.0], cfg, 2.0, 2.0) == 0.0
    assert reward([12.0, 13.0], cfg, 2.38, 2.0) == pytest.approx(-50.0)   # summed over joints


def test_reward_jumps_at_the_limit():
    cfg = RewardConfig(-10.0, 200.0, [10.0])
    assert reward([10.0], cfg, 3.0, 2.0) == pytest.approx(200.0)
    assert reward([10.0 + 1e-9], cfg, 3.0, 2.0) == pytest.approx(0.0, abs=1e-7)


def test_unbounded_limits_reach_the_profile_floor(p2):
    tr = ViaTrajectory(WP, [1.8, 1.8])
    res = optimize_speed(p2, tr, RewardConfig(-10.0, 200.0, np.full(6, 1e6)), 200, 0, 0.008, V_MAX, A_MAX)
    floor = np.ceil(tr.duration_floor(V_MAX, A_MAX) / 0.008 - 1e-9) * 0.008
    assert res.success
    assert np.all(res.trajectory.segment_durations <= floor + 2 * 0.008 + 1e-12)
    assert np.all(res.trajectory.segment_durations >= floor - 1e-12)


def test_limits_at_baseline_peaks_leave_no_headroom(p2):
    tr = ViaTrajectory(WP, [1.8, 1.8])
    peaks = peak_torque(p2, tr)
    res = optimize_speed(p2, tr, RewardConfig(-10.0, 200.0, peaks), 120, 0, 0.008, V_MAX, A_MAX)
    assert res.reduction < 0.01
    assert np.all(res.peaks_after <= peaks)


def test_plan_invariants_and_determinism(p2):
    trajs, cfg = bundled_benchmark()
    a = optimize_speed(p2, trajs[0], cfg, 96, 3, 0.008, V_MAX, A_MAX)
    b = optimize_speed(p2, trajs[0], cfg, 96, 3, 0.008, V_MAX, A_MAX)
    assert a.to_dict() == b.to_dict()
    assert np.all(np.diff(a.reward_trace) >= 0)
    assert np.all(a.peaks_after <= cfg.tau_limit)
    assert np.allclose(peak_torque(p2, a.trajectory), a.peaks_after)
    assert a.elapsed_after <= a.elapsed_before and a.n_evaluations == 96


def test_infeasible_baseline_is_rejected(p2):
    tr = ViaTrajectory(WP, [1.8, 1.8])
    with pytest.raises(ContractError, match="baseline exceeds"):
        optimize_speed(p2, tr, RewardConfig(-10.0, 200.0, np.full(6, 0.5)), 10)


def test_no_improvement_returns_baseline(p2):
    tr = ViaTrajectory(WP, [1.8, 1.8])
    res = optimize_speed(p2, tr, RewardConfig(-10.0, 200.0, np.full(6, 1e6)), 1)
    assert not res.success and res.reduction == 0.0
    assert np.array_equal(res.trajectory.segment_durations, res.baseline.segment_durations)


def test_benchmark_and_report(p2):
    trajs, cfg = bundled_benchmark()
    assert len(trajs) == 3 and cfg.tau_limit.size == 6
    res = [optimize_speed(p2, t, cfg, 64, 0, 0.008, V_MAX, A_MAX) for t in trajs]
    text = report_table(res)
    assert text.splitlines()[0].split()[0] == "trajectory" and "mean" in text
