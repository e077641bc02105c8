import math

import numpy as np
import pytest

from hybridyn.errors import ContractError
from hybridyn.observer import steady_state_gain, steps_to_fraction
from hybridyn.tasks import (ALLOWED, ContactResult, ContactState, ContactThresholds, ImpedanceParams,
                            JointSpaceSensor, PegControlParams, PegController, PegHoleScene, PegHoleSim,
                            PegPose, WipeScene, Wrench, classify_contact, geometric_state,
                            impedance_displacement, next_state, peg_step, random_scene, run_peg_episode,
                            run_wipe, wipe_controller)

S = ContactState
POSE = [0.0, 0.5, 1.0, 0.0, -1.5, 0.0]
TOOL = [0.0, 0.0, 0.1]
NOISE = 0.15
TH = ContactThresholds()


def make_sensor(robot, rng, noise=NOISE):
    r = max(noise, 1e-6) ** 2
    return JointSpaceSensor(robot, POSE, noise, 0.01 * r, r, rng, TOOL)


def test_impedance_worked_example():
    p = ImpedanceParams(1.0, 10.0, 0.01, 0.001, 0.008)
    assert impedance_displacement(p, 2.0) == pytest.approx(2 * 0.135 / 16875, rel=1e-12)
    assert impedance_displacement(p, 0.0) == 0.0


def test_impedance_linear_and_continuous():
    p = ImpedanceParams(1.0, 10.0, 0.3, 0.02, 0.008)
    e = np.array([0.3, -1.2, 4.0])
    assert np.allclose(impedance_displacement(p, 2 * e), 2 * impedance_displacement(p, e), rtol=1e-14)
    assert np.allclose(impedance_displacement(p, e + 1.0),
                       impedance_displacement(p, e) + impedance_displacement(p, 1.0), rtol=1e-14)
    near = ImpedanceParams(1.0 + 1e-9, 10.0, 0.3, 0.02, 0.008)
    assert impedance_displacement(near, 1.0) == pytest.approx(impedance_displacement(p, 1.0), rel=1e-8)


def test_impedance_param_validation():
    with pytest.raises(ContractError):
        ImpedanceParams(m=0.0)
    with pytest.raises(ContractError):
        ImpedanceParams(k_v=-1.0)


def test_classifier_examples():
    assert classify_contact(Wrench(0.0, 0.0, 0.0), 0.0, TH) is S.APPROACH
    assert classify_contact(Wrench(50.0, 0.0, 0.0), 0.0, TH) is S.STUCK_OUTSIDE
    assert classify_contact(Wrench(-50.0, 0.0, 0.0), 0.0, TH) is S.STUCK_OUTSIDE
    assert classify_contact(Wrench(3.0, 0.5, 0.0), 0.01, TH) is S.STUCK_INSIDE
    assert classify_contact(Wrench(50.0, 0.5, 0.0), TH.hole_depth, TH) is S.INSERTED


def test_transition_graph_invariants():
    assert S.INSERTED not in ALLOWED[S.STUCK_OUTSIDE]
    assert ALLOWED[S.INSERTED] == {S.INSERTED}
    for a in S:
        for b in S:
            nxt = next_state(a, b)
            assert nxt in ALLOWED[a]
    assert next_state(S.STUCK_OUTSIDE, S.INSERTED) is S.APPROACH
    assert next_state(S.STUCK_OUTSIDE, S.STUCK_INSIDE) is S.APPROACH


def test_wrench_must_be_finite():
    with pytest.raises(ContractError):
        Wrench(float("nan"), 0.0, 0.0)


def test_scene_validation():
    with pytest.raises(ContractError):
        PegHoleScene(peg_diameter=0.03)
    with pytest.raises(ContractError):
        PegHoleScene(hole_depth=0.0)


def test_no_penetration_gives_zero_wrench():
    sim = PegHoleSim(PegHoleScene())
    for pose in (PegPose((0.0, 0.0, 0.01)), PegPose((0.0, 0.0, -0.01)), PegPose((0.003, 0.0, 0.001), (0.02, 0.0))):
        res = sim.contact(pose)
        assert res.surface == "none" and np.all(res.wrench == 0.0)


def test_axial_bottom_contact_is_stiffness_times_depth():
    sc = PegHoleScene()
    sim = PegHoleSim(sc)
    for delta in (1e-5, 1e-4, 4e-4):
        res = sim.contact(PegPose((0.0, 0.0, -sc.hole_depth - delta)))
        assert res.surface == "bottom"
        assert res.wrench[2] == pytest.approx(sc.contact_stiffness * delta, rel=1e-9)
        assert np.abs(res.wrench[[0, 1, 3, 4, 5]]).max() < 1e-9


def test_tilted_peg_moment_sign_follows_tilt():
    # a peg leaning in the bore is pushed back by the wall: the moment about
    # the tip has the opposite sign to the tilt on the same axis
    sc = PegHoleScene()
    sim = PegHoleSim(sc)
    rng = np.random.default_rng(11)
    for _ in range(100):
        axis = rng.integers(2)
        a = rng.choice([-1, 1]) * rng.uniform(0.04, 0.1)
        tilt = (a, 0.0) if axis == 0 else (0.0, a)
        res = sim.contact(PegPose((0.0, 0.0, -rng.uniform(0.01, 0.025)), tilt))
        assert "wall" in res.surface
        assert np.sign(res.wrench[3 + axis]) == -np.sign(a)


def _bisect(f, lo, hi, target, it=30):
    for _ in range(it):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if f(mid) < target else (lo, mid)
    return hi


def _snapshot(rng):
    """One labelled quasi-static scene: free, pressed on the rim, or jammed inside."""
    sc = random_scene(PegHoleScene(), rng)
    sim = PegHoleSim(sc)
    kind = rng.integers(3)
    if kind == 0:
        pose = PegPose((sc.offset[0], sc.offset[1], rng.uniform(0.0005, 0.003)), sc.tilt)
    elif kind == 1:
        phi, r = rng.uniform(0, 2 * np.pi), rng.uniform(0.0015, 0.004)
        xy = (r * math.cos(phi), r * math.sin(phi))
        force = rng.uniform(15.0, 60.0)
        f = lambda d: abs(sim.contact(PegPose((*xy, -d), sc.tilt)).wrench[2])
        if f(0.0015) < force:
            return None
        pose = PegPose((*xy, -_bisect(f, 0.0, 0.0015, force)), sc.tilt)
    else:
        depth = rng.uniform(TH.depth_entry + 0.002, TH.hole_depth - TH.tolerance - 0.003)
        phi = rng.uniform(0, 2 * np.pi)
        u = np.array([math.cos(phi), math.sin(phi)])
        moment = rng.uniform(0.2, 1.0)
        f = lambda t: np.linalg.norm(sim.contact(PegPose((0.0, 0.0, -depth), tuple(t * u))).wrench[3:5])
        if f(0.1) < moment:
            return None
        pose = PegPose((0.0, 0.0, -depth), tuple(_bisect(f, 0.0, 0.1, moment) * u))
    res = sim.contact(pose)
    return res, pose, geometric_state(res, pose, TH)


def test_classifier_agrees_with_geometry_on_snapshots(robot):
    rng = np.random.default_rng(7)
    sensor = make_sensor(robot, rng)
    sensor.zero()
    settle = steps_to_fraction(steady_state_gain(0.01, 1.0), 0.999)
    agree, labels = 0, []
    while len(labels) < 1000:
        snap = _snapshot(rng)
        if snap is None:
            continue
        res, pose, label = snap
        for _ in range(settle):
            sensed = sensor.read(res.wrench)
        agree += classify_contact(sensed, pose.depth, TH) is label
        labels.append(label)
    assert {S.APPROACH, S.STUCK_OUTSIDE, S.STUCK_INSIDE} <= set(labels)
    assert agree >= 950


def test_peg_step_commands():
    p = PegControlParams()
    assert peg_step(S.INSERTED, Wrench(0, 0, 0), p).kind == "stop"
    adv = peg_step(S.APPROACH, Wrench(0, 0, 0), p)
    assert adv.kind == "advance" and adv.d_pos[2] < 0 and adv.d_pos[:2] == (0.0, 0.0)
    out = peg_step(S.STUCK_OUTSIDE, Wrench(20.0, 0.05, 0.0), p)
    assert out.kind == "retreat+rotate+lateral" and out.d_pos[2] == p.retreat
    assert math.hypot(*out.d_pos[:2]) <= p.max_lateral_step + 1e-15


def test_stuck_inside_signs():
    p = PegControlParams()
    cmd = peg_step(S.STUCK_INSIDE, Wrench(2.0, 0.3, 0.0), p)
    assert cmd.kind == "rotate+lateral" and cmd.d_pos[2] == 0.0
    # lateral motion opposes M_X; the rotation turns the peg along the wall's
    # restoring moment, which undoes the tilt that produced it
    assert cmd.d_pos[1] < 0 and cmd.d_pos[0] == 0.0
    assert cmd.d_rot[0] > 0 and cmd.d_rot[1] == 0.0
    sim = PegHoleSim(PegHoleScene())
    pose = PegPose((0.0, 0.0, -0.015), (-0.05, 0.0))
    before = sim.contact(pose).wrench[3]
    assert before > 0
    after = sim.contact(pose.moved((0.0, 0.0, 0.0), cmd.d_rot)).wrench[3]
    assert abs(after) < abs(before)


def test_corrections_go_through_impedance():
    p = PegControlParams(max_lateral_step=1.0, max_rotation_step=1.0, inside_lateral_scale=1.0)
    w = Wrench(0.0, 0.02, -0.01)
    cmd = peg_step(S.STUCK_INSIDE, w, p)
    assert cmd.d_pos[:2] == pytest.approx(tuple(impedance_displacement(p.lateral, np.array([w.m_y, -w.m_x]))))
    assert cmd.d_rot == pytest.approx(tuple(impedance_displacement(p.rotation, np.array([w.m_x, w.m_y]))))


def _episode(robot, seed, **kw):
    rng = np.random.default_rng(seed)
    scene = random_scene(PegHoleScene(), rng)
    return run_peg_episode(scene, make_sensor(robot, rng), TH, PegControlParams(), keep_rows=True, **kw)


def test_episode_reproducible_and_succeeds(robot):
    a = _episode(robot, 3)
    b = _episode(robot, 3)
    assert a.success and a.steps < 5000
    assert a.rows == b.rows


def test_budget_exhaustion_is_a_result(robot):
    res = _episode(robot, 3, max_steps=50)
    assert not res.success and res.steps == 50


def test_controller_ignores_ground_truth_channels(robot, monkeypatch):
    ref = _episode(robot, 5)
    original = PegHoleSim.contact

    def corrupted(self, pose, motion=None):
        res = original(self, pose, motion)
        return ContactResult(res.wrench, "corrupted", float("nan"))

    monkeypatch.setattr(PegHoleSim, "contact", corrupted)
    again = _episode(robot, 5)
    assert [r[1:6] for r in again.rows] == [r[1:6] for r in ref.rows]
    # replaying the sensed stream alone reproduces every command
    ctrl = PegController(TH, PegControlParams())
    for row in ref.rows:
        sensed = Wrench(row[3], row[4], row[5])
        ctrl.step(sensed, -row[11])
        assert ctrl.state.value == row[2]


def test_episode_csv(robot, tmp_path):
    res = _episode(robot, 1, max_steps=20)
    path = tmp_path / "peg.csv"
    res.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("t,command,state,est_fz") and len(lines) == 21
    assert set(res.summary()) == {"success", "steps", "max_force", "max_moment"}


def test_wipe_controller_examples():
    assert wipe_controller(60.0, Wrench(60.0, 0.0, 0.0), 1e-5) == 0.0
    assert wipe_controller(60.0, Wrench(50.0, 0.0, 0.0), 1e-5) < 0      # too light: move down
    assert wipe_controller(60.0, Wrench(70.0, 0.0, 0.0), 1e-5) > 0
    with pytest.raises(ContractError):
        wipe_controller(0.0, Wrench(0.0, 0.0, 0.0), 1e-5)


@pytest.mark.parametrize("ramp", [0.0, 0.002])
def test_wipe_holds_force(robot, ramp):
    sensor = make_sensor(robot, np.random.default_rng(2))
    res = run_wipe(WipeScene(ramp_height=ramp), sensor, 60.0, 3e-6, 0.02, 10.0)
    assert res.steady_mae(60.0, 2.0) < 0.1 * 60.0
    # after the ramp ends the force is back inside the band
    after = res.times * 0.02 > 0.1 + 0.05 + 0.02
    assert np.all(np.abs(res.true_fz[after] - 60.0) < 0.1 * 60.0)


def test_sensor_reads_back_a_held_wrench(robot):
    sensor = make_sensor(robot, np.random.default_rng(0), noise=0.0)
    w = np.array([0.0, 0.0, 30.0, 0.2, -0.1, 0.0])
    for _ in range(2000):
        out = sensor.read(w)
    assert (out.f_z, out.m_x, out.m_y) == pytest.approx((30.0, 0.2, -0.1), abs=1e-6)
