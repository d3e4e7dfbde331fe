import math

import numpy as np
import pytest
from scipy.optimize import brentq

from pneutilt.controller import FFvIController, FFvIParams
from pneutilt.errors import ModelFormatError
from pneutilt.experiments import (G, GAIN_SCENARIOS, LoadingMechanism, StepSchedule, StepSpec,
                                  StiffnessSchedule, Trajectory, compute_metrics,
                                  cross_correlation_lag, overshoot_deg, run_dynamic_load)
from pneutilt.plant import PlantParams

DT = 0.01


def _traj(t, meas_x, ref_x, meas_y=None):
    n = len(t)
    meas_y = np.zeros(n) if meas_y is None else meas_y
    return Trajectory(np.asarray(t), np.column_stack([ref_x, np.zeros(n)]),
                      np.column_stack([meas_x, meas_y]), np.zeros((n, 3)), np.zeros((n, 2)))


def _second_order(zeta, wn):
    wd = wn * math.sqrt(1 - zeta * zeta)
    phi = math.acos(zeta)

    def y(t):
        return 1.0 - math.exp(-zeta * wn * t) / math.sqrt(1 - zeta * zeta) * math.sin(wd * t + phi)

    return y, wd


def _step_traj(y_fn, t_step=2.0, initial=-3.0, final=5.0, t_end=20.0):
    t = np.round(np.arange(0.0, t_end + DT / 2, DT), 10)
    s = np.where(t >= t_step, np.array([y_fn(max(v - t_step, 0.0)) for v in t]), 0.0)
    meas = initial + (final - initial) * s
    ref = np.where(t >= t_step, final, initial)
    return _traj(t, meas, ref), StepSpec(0, t_step, initial, final)


def test_ideal_step_metrics():
    traj, spec = _step_traj(lambda t: 1.0)
    m = compute_metrics(traj, spec)
    assert m.rise_time == 0.0 and m.settling_time_5pct == 0.0
    assert m.overshoot_pct == 0.0 and m.first_maximum_time is None
    assert m.max_total_error == 0.0


@pytest.mark.parametrize("zeta, wn", [(0.3, 3.0), (0.5, 2.0), (0.7, 5.0)])
def test_second_order_metrics_match_closed_form(zeta, wn):
    y, wd = _second_order(zeta, wn)
    traj, spec = _step_traj(y)
    m = compute_metrics(traj, spec)
    tp = math.pi / wd
    os_pct = 100.0 * math.exp(-math.pi * zeta / math.sqrt(1 - zeta * zeta))
    t10 = brentq(lambda t: y(t) - 0.1, 0.0, tp)
    t90 = brentq(lambda t: y(t) - 0.9, 0.0, tp)
    # last exit from the 5 % band: scan densely, then refine the final crossing
    ts = np.linspace(0.0, 15.0, 150001)
    ys = np.array([y(v) for v in ts])
    last = np.flatnonzero(np.abs(ys - 1.0) > 0.05)[-1]
    side = 1.0 + 0.05 * np.sign(ys[last] - 1.0)
    ts_exact = brentq(lambda t: y(t) - side, ts[last], ts[last + 1])
    assert abs(m.rise_time - (t90 - t10)) <= DT
    assert abs(m.first_maximum_time - tp) <= DT
    assert abs(m.settling_time_5pct - ts_exact) <= DT
    assert m.overshoot_pct == pytest.approx(os_pct, abs=0.05)
    assert m.settling_time_5pct >= m.rise_time


def test_overshoot_in_degrees():
    y, _ = _second_order(0.3, 3.0)
    traj, spec = _step_traj(y)
    m = compute_metrics(traj, spec)
    assert overshoot_deg(traj, spec) == pytest.approx(m.overshoot_pct / 100.0 * 8.0, rel=1e-12)
    down = StepSpec(0, spec.t_step, 5.0, -3.0)
    flipped = _traj(traj.t, 2.0 - traj.measured[:, 0], 2.0 - traj.ref[:, 0])
    assert overshoot_deg(flipped, down) == pytest.approx(overshoot_deg(traj, spec), rel=1e-12)


def test_unsettled_and_unreached():
    traj, spec = _step_traj(lambda t: 0.5)
    m = compute_metrics(traj, spec)
    assert m.settling_time_5pct is None and m.rise_time is None


def test_constant_trajectory_has_zero_error():
    t = np.arange(0, 5, DT)
    traj = _traj(t, np.full(len(t), 2.0), np.full(len(t), 2.0))
    m = compute_metrics(traj, StepSpec(0, 1.0, 2.0, 2.0))
    assert m.max_total_error == 0.0 and m.mean_total_error == 0.0 and m.overshoot_pct == 0.0


def test_metrics_shift_and_trailing_invariance():
    y, _ = _second_order(0.4, 2.5)
    traj, spec = _step_traj(y)
    base = compute_metrics(traj, spec)
    shifted = Trajectory(traj.t + 100.0, traj.ref, traj.measured, traj.commanded, traj.moment)
    m = compute_metrics(shifted, StepSpec(0, spec.t_step + 100.0, spec.initial, spec.final))
    for a, b in zip(base.to_dict().values(), m.to_dict().values()):
        assert a == pytest.approx(b, abs=1e-9)
    extra = np.round(traj.t[-1] + DT * np.arange(1, 301), 10)
    longer = _traj(np.concatenate([traj.t, extra]),
                   np.concatenate([traj.measured[:, 0], np.full(300, traj.measured[-1, 0])]),
                   np.concatenate([traj.ref[:, 0], np.full(300, spec.final)]))
    m = compute_metrics(longer, spec)
    for key in ("rise_time", "settling_time_5pct", "first_maximum_time", "overshoot_pct", "max_total_error"):
        assert getattr(m, key) == pytest.approx(getattr(base, key), abs=1e-12)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        _traj([0.0, 0.0], [0.0, 0.0], [0.0, 0.0])


def test_trajectory_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    n = 50
    traj = Trajectory(np.arange(n) * DT, rng.normal(size=(n, 2)), rng.normal(size=(n, 2)),
                      rng.uniform(0, 5, (n, 3)), rng.normal(size=(n, 2)))
    path = tmp_path / "t.csv"
    traj.to_csv(path)
    back = Trajectory.from_csv(path)
    for name in ("t", "ref", "measured", "commanded", "moment"):
        assert np.array_equal(getattr(back, name), getattr(traj, name))
    assert path.read_text().splitlines()[0] == "t_s,ref_x_deg,ref_y_deg,meas_x_deg,meas_y_deg,p1_bar,p2_bar,p3_bar,mx_Nmm,my_Nmm"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ModelFormatError):
        Trajectory.from_csv(path)


def test_cross_correlation_lag_recovers_delay():
    t = np.arange(0, 30, DT)
    for delay in (0.0, 0.3, 0.7):
        lag = cross_correlation_lag(t, np.sin(t), np.sin(t - delay))
        assert abs(lag - delay) <= DT + 1e-12


def test_step_schedule():
    s = StepSchedule()
    assert s.reference(0.0) == (-8.0, 10.0)
    assert s.reference(5.0) == (8.0, 10.0)
    assert s.reference(s.duration) == (-8.0, 10.0)
    specs = s.step_specs()
    assert [sp.axis for sp in specs] == [0, 1, 0, 1]
    assert [(sp.initial, sp.final) for sp in specs] == [(-8.0, 8.0), (10.0, -10.0), (8.0, -8.0), (-10.0, 10.0)]


def test_stiffness_schedule_ramp():
    s = StiffnessSchedule(ramp=2.0)
    assert s.p_agr(0.0) == 3.6
    assert s.p_agr(8.0) == 3.6
    assert s.p_agr(9.0) == pytest.approx(4.8)
    assert s.p_agr(10.5) == 6.0
    assert StiffnessSchedule().p_agr(8.0) == 6.0
    assert s.duration == 40.0


def test_gain_scenarios():
    assert [g.name for g in GAIN_SCENARIOS] == ["a", "b", "c"]
    for g in GAIN_SCENARIOS:
        assert g.reference(0.0) == g.start and g.reference(g.t_step) == g.target
        assert g.disturbance(0.0) == (0.0, 0.0)


def test_loading_position_profile():
    mech = LoadingMechanism(speed=70.0)
    assert mech.position(0.0) == 0.0
    assert mech.position(1.0) == pytest.approx(70.0)
    assert mech.position(165.0 / 70.0) == pytest.approx(165.0)
    assert mech.position(2 * 165.0 / 70.0) == pytest.approx(0.0, abs=1e-9)
    assert mech.position(3 * 165.0 / 70.0) == pytest.approx(-165.0)
    period = 4 * 165.0 / 70.0
    ts = np.linspace(0, 3 * period, 3001)
    pos = np.array([mech.position(v) for v in ts])
    assert np.max(np.abs(pos)) <= 165.0 + 1e-9
    assert np.max(np.abs(np.diff(pos))) <= 70.0 * (ts[1] - ts[0]) + 1e-9
    with pytest.raises(ValueError):
        LoadingMechanism(travel=400.0)


def test_loading_moment_level_plate():
    mech = LoadingMechanism()
    for t in (0.5, 1.7, 4.0):
        u = mech.position(t)
        mx, my = mech.moment(t)
        assert mx == pytest.approx(-G * mech.weight_mass * u, rel=1e-12)
        assert my == pytest.approx(G * (mech.axis_mass + mech.weight_mass) * u, rel=1e-12)


def _height(tilt_rad, p):
    a, b = tilt_rad
    # z row of R_x(a) R_y(b)
    row = np.array([-math.cos(a) * math.sin(b), math.sin(a), math.cos(a) * math.cos(b)])
    return float(row @ p)


def test_loading_moment_is_potential_gradient():
    mech = LoadingMechanism()
    tilt = (6.0, -4.0)
    t = 1.3
    u = mech.position(t)
    pz = mech.plate_offset + mech.height
    masses = [(mech.axis_mass, np.array([u, 0.0, pz])), (mech.weight_mass, np.array([u, u, pz]))]

    def potential(x):
        return sum(G * m * _height(x, p) for m, p in masses)

    x = np.radians(tilt)
    h = 1e-6
    grad = [(potential(x + e) - potential(x - e)) / (2 * h) for e in (np.array([h, 0]), np.array([0, h]))]
    assert np.allclose(mech.moment(t, tilt), -np.array(grad), rtol=1e-6)


def test_moment_series_independent_of_controller(ffmodel):
    params = PlantParams()
    mech = LoadingMechanism(speed=50.0)
    a = run_dynamic_load(FFvIController(ffmodel), params, ffmodel, mech, 9.0, duration=2.0)
    b = run_dynamic_load(FFvIController(ffmodel, params=FFvIParams(i_enabled=False)), params, ffmodel,
                         mech, 9.0, duration=2.0)
    assert np.array_equal(a.moment, b.moment)
    assert not np.array_equal(a.measured, b.measured)
