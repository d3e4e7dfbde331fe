"""Closed-loop scenario harness and step-response metrics.

Every scenario runs a controller against the simulated platform at a
fixed loop rate with zero-order hold on the pressure commands.  Plant
sub-steps advance the physics between control samples.  Disturbance
moments are precomputed from time alone so paired runs with different
controllers see identical loads.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import plant as pl
from .calibration import FFModel, feedforward
from .errors import ModelFormatError

G = 9.81  # m/s^2
TRAJECTORY_HEADER = ("t_s", "ref_x_deg", "ref_y_deg", "meas_x_deg", "meas_y_deg",
                     "p1_bar", "p2_bar", "p3_bar", "mx_Nmm", "my_Nmm")


@dataclass
class Trajectory:
    t: np.ndarray              # (N,) s
    ref: np.ndarray            # (N, 2) deg
    measured: np.ndarray       # (N, 2) deg
    commanded: np.ndarray      # (N, 3) bar
    moment: np.ndarray         # (N, 2) N mm
    p_agr: Optional[np.ndarray] = None
    stiffness: Optional[np.ndarray] = None   # (N, 3) N/mm, not serialized

    def __post_init__(self):
        if len(self.t) > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.t)

    @property
    def error(self) -> np.ndarray:
        return self.ref - self.measured

    @property
    def total_error(self) -> np.ndarray:
        e = self.error
        return np.hypot(e[:, 0], e[:, 1])

    def window(self, t0: float, t1: float = math.inf) -> "Trajectory":
        m = (self.t >= t0 - 1e-12) & (self.t <= t1 + 1e-12)
        pick = lambda a: None if a is None else a[m]
        return Trajectory(self.t[m], self.ref[m], self.measured[m], self.commanded[m], self.moment[m],
                          pick(self.p_agr), pick(self.stiffness))

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        data = np.column_stack([self.t, self.ref, self.measured, self.commanded, self.moment])
        for row in data:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv_text())

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != TRAJECTORY_HEADER:
            raise ModelFormatError(f"{path}: expected header {','.join(TRAJECTORY_HEADER)}")
        try:
            data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, 10)
        except ValueError as exc:
            raise ModelFormatError(f"{path}: {exc}") from None
        return cls(data[:, 0], data[:, 1:3], data[:, 3:5], data[:, 5:8], data[:, 8:10])


# --------------------------------------------------------------------------- metrics

@dataclass(frozen=True)
class StepSpec:
    axis: int                 # 0 for alpha_x, 1 for alpha_y
    t_step: float             # s
    initial: float            # deg
    final: float              # deg
    t_end: float = math.inf


@dataclass(frozen=True)
class Metrics:
    rise_time: Optional[float]
    settling_time_5pct: Optional[float]
    first_maximum_time: Optional[float]
    overshoot_pct: float
    max_total_error: float
    mean_total_error: float

    def to_dict(self) -> dict:
        return asdict(self)


def _first_crossing(t, y, level):
    # y is normalised so the step goes upward; returns an interpolated time
    idx = np.flatnonzero(y >= level)
    if len(idx) == 0:
        return None
    i = int(idx[0])
    if i == 0:
        return float(t[0])
    y0, y1 = y[i - 1], y[i]
    frac = (level - y0) / (y1 - y0) if y1 != y0 else 1.0
    return float(t[i - 1] + frac * (t[i] - t[i - 1]))


def compute_metrics(traj: Trajectory, spec: StepSpec) -> Metrics:
    """Step-response metrics of one axis over ``[t_step, t_end]``.

    Rise is the 10 to 90 percent crossing interval, settling the last
    exit from the 5 percent band around the final value, both measured
    from ``t_step``.  The first maximum is the first local extremum beyond
    the final value; overshoot is the largest excursion beyond it as a
    percentage of the step size.  Total-error statistics cover the same
    window.
    """
    w = traj.window(spec.t_step, spec.t_end)
    if len(w) < 2:
        raise ValueError("trajectory does not span the step")
    span = spec.final - spec.initial
    et = w.total_error
    if span == 0:
        return Metrics(None, None, None, 0.0, float(et.max()), float(et.mean()))
    t = w.t - spec.t_step
    y = (w.measured[:, spec.axis] - spec.initial) / span     # 0 -> 1 normalised

    t10 = _first_crossing(t, y, 0.1)
    t90 = _first_crossing(t, y, 0.9)
    rise = None if t10 is None or t90 is None else t90 - t10

    outside = np.flatnonzero(np.abs(y - 1.0) > 0.05)
    if len(outside) == 0:
        settle = 0.0
    elif outside[-1] == len(y) - 1:
        settle = None
    else:
        settle = float(t[outside[-1] + 1])

    peak = float(y.max())
    overshoot = max(peak - 1.0, 0.0) * 100.0
    first_max = None
    if overshoot > 0:
        above = y > 1.0
        for i in range(1, len(y) - 1):
            if above[i] and y[i] >= y[i - 1] and y[i] > y[i + 1]:
                first_max = float(t[i])
                break
        else:
            first_max = float(t[int(np.argmax(y))])
    return Metrics(rise, settle, first_max, overshoot, float(et.max()), float(et.mean()))


def overshoot_deg(traj: Trajectory, spec: StepSpec) -> float:
    """Largest excursion beyond the final value in degrees (0 if none)."""
    w = traj.window(spec.t_step, spec.t_end)
    s = math.copysign(1.0, spec.final - spec.initial)
    return max(float(np.max(s * (w.measured[:, spec.axis] - spec.final))), 0.0)


def cross_correlation_lag(t, ref, meas, max_lag: float = 2.0) -> float:
    """Delay in seconds of ``meas`` behind ``ref`` maximising their correlation."""
    dt = float(t[1] - t[0])
    r = ref - ref.mean()
    m = meas - meas.mean()
    n = len(r)
    best, best_lag = -math.inf, 0
    for k in range(0, int(round(max_lag / dt)) + 1):
        c = float(np.dot(r[:n - k], m[k:])) / (n - k)
        if c > best:
            best, best_lag = c, k
    return best_lag * dt


# --------------------------------------------------------------------------- simulation loop

@dataclass(frozen=True)
class LoopConfig:
    dt: float = 0.01           # control period, s
    substeps: int = 2          # plant steps per control period


def simulate(controller, params: pl.PlantParams, ref_fn: Callable, duration: float,
             initial: pl.PlantState, loop: LoopConfig = LoopConfig(),
             moment_fn: Optional[Callable] = None, p_agr_fn: Optional[Callable] = None,
             record_stiffness: bool = False) -> Trajectory:
    """Run ``controller`` against the plant for ``duration`` seconds.

    ``ref_fn``, ``moment_fn`` and ``p_agr_fn`` are functions of time only.
    Commands are held constant over each control period.
    """
    n = int(round(duration / loop.dt))
    t = np.arange(n + 1) * loop.dt
    ref = np.array([ref_fn(ti) for ti in t], dtype=float).reshape(-1, 2)
    mom = np.zeros((n + 1, 2)) if moment_fn is None else np.array([moment_fn(ti) for ti in t], float)
    agr = None if p_agr_fn is None else np.array([p_agr_fn(ti) for ti in t], float)
    meas = np.empty((n + 1, 2))
    cmd = np.empty((n + 1, 3))
    stiff = np.empty((n + 1, 3)) if record_stiffness else None
    h = loop.dt / loop.substeps
    state = initial
    for i in range(n + 1):
        meas[i] = state.tilt
        if stiff is not None:
            stiff[i] = pl.stiffness_at(state, params)
        if agr is not None:
            controller.set_p_agr(agr[i])
        cmd[i] = controller(tuple(ref[i]), state.tilt, loop.dt)
        if i == n:
            break
        for _ in range(loop.substeps):
            state = pl.step(state, cmd[i], mom[i], h, params)
    return Trajectory(t, ref, meas, cmd, mom, agr, stiff)


def settled_start(model: FFModel, ref, p_agr: float, params: pl.PlantParams,
                  moment=(0.0, 0.0)) -> pl.PlantState:
    """Static plant equilibrium under the feed-forward pressures for ``ref``."""
    p = feedforward(ref, p_agr, model)
    return pl.equilibrium_state(p, params, moment)


# --------------------------------------------------------------------------- scenarios

STEP_START = (-8.0, 10.0)
STEP_PHASES = ((8.0, 10.0), (8.0, -10.0), (-8.0, -10.0), (-8.0, 10.0))


@dataclass(frozen=True)
class StepSchedule:
    start: tuple = STEP_START
    phases: tuple = STEP_PHASES
    hold: float = 5.0           # s before the first phase
    phase_time: float = 12.0    # s per phase

    def phase_times(self):
        return [self.hold + i * self.phase_time for i in range(len(self.phases))]

    def reference(self, t: float):
        if t < self.hold:
            return self.start
        i = min(int((t - self.hold) // self.phase_time), len(self.phases) - 1)
        return self.phases[i]

    @property
    def duration(self) -> float:
        return self.hold + len(self.phases) * self.phase_time

    def step_specs(self):
        """(StepSpec of the axis that changes) for every phase."""
        specs = []
        prev = self.start
        for t0, nxt in zip(self.phase_times(), self.phases):
            axis = 0 if nxt[0] != prev[0] else 1
            specs.append(StepSpec(axis, t0, prev[axis], nxt[axis], t0 + self.phase_time - 1e-6))
            prev = nxt
        return specs


def run_step_alternation(controller, params: pl.PlantParams, model: FFModel, p_agr: float = 9.0,
                         schedule: StepSchedule = StepSchedule(), loop: LoopConfig = LoopConfig()) -> Trajectory:
    """Four-phase alternation; the plant starts settled at the first setpoint."""
    controller.reset()
    init = settled_start(model, schedule.start, p_agr, params)
    return simulate(controller, params, schedule.reference, schedule.duration, init, loop)


def step_alternation_metrics(traj: Trajectory, schedule: StepSchedule = StepSchedule()):
    """Per-phase metrics plus the worst overshoot in degrees on either axis."""
    out = []
    for spec in schedule.step_specs():
        m = compute_metrics(traj, spec)
        w = traj.window(spec.t_step, spec.t_end - 1e-6)
        other = 1 - spec.axis
        # the held axis must not stray more than the allowed overshoot either
        held = float(np.max(np.abs(w.measured[:, other] - w.ref[:, other])))
        out.append({"axis": "xy"[spec.axis], "t_step": spec.t_step, "metrics": m.to_dict(),
                    "overshoot_deg": overshoot_deg(traj, spec), "held_axis_deviation_deg": held})
    return out


@dataclass(frozen=True)
class SineSchedule:
    amplitude: float = 10.0
    omega: float = 1.0          # rad/s, period 2 pi s
    phase_x: float = 0.0
    phase_y: float = math.pi / 2
    bias: float = 0.0
    warmup_periods: int = 1
    periods: int = 3

    def reference(self, t: float):
        return (self.bias + self.amplitude * math.sin(self.omega * t + self.phase_x),
                self.bias + self.amplitude * math.sin(self.omega * t + self.phase_y))

    @property
    def period(self) -> float:
        return 2 * math.pi / self.omega

    @property
    def duration(self) -> float:
        return (self.warmup_periods + self.periods) * self.period


def run_sine_tracking(controller, params: pl.PlantParams, model: FFModel, p_agr: float = 9.0,
                      schedule: SineSchedule = SineSchedule(), loop: LoopConfig = LoopConfig()) -> Trajectory:
    controller.reset()
    init = settled_start(model, schedule.reference(0.0), p_agr, params)
    return simulate(controller, params, schedule.reference, schedule.duration, init, loop)


def sine_metrics(traj: Trajectory, schedule: SineSchedule = SineSchedule(), max_lag: float = 2.0) -> dict:
    w = traj.window(schedule.warmup_periods * schedule.period)
    env = abs(schedule.bias) + schedule.amplitude
    beyond = np.maximum(np.abs(w.measured - schedule.bias) - env, 0.0)
    err = w.error
    lags = [cross_correlation_lag(w.t, w.ref[:, a], w.measured[:, a], max_lag) for a in (0, 1)]
    return {"max_beyond_envelope_deg": float(beyond.max()),
            "rms_error_deg": float(np.sqrt(np.mean(err ** 2))),
            "lag_s": float(np.mean(lags)), "lag_x_s": lags[0], "lag_y_s": lags[1],
            "max_total_error": float(w.total_error.max())}


@dataclass(frozen=True)
class StiffnessSchedule:
    ref: tuple = (10.0, 5.0)
    levels: tuple = (3.6, 6.0, 9.0, 12.0, 15.0)
    plateau: float = 8.0         # s per level
    ramp: float = 0.0            # s, 0 for a stepped change

    def p_agr(self, t: float) -> float:
        i = min(int(t // self.plateau), len(self.levels) - 1)
        if i == 0 or self.ramp <= 0:
            return self.levels[i]
        dt = t - i * self.plateau
        if dt >= self.ramp:
            return self.levels[i]
        lo, hi = self.levels[i - 1], self.levels[i]
        return lo + (hi - lo) * dt / self.ramp

    @property
    def duration(self) -> float:
        return self.plateau * len(self.levels)


def run_stiffness_change(controller, params: pl.PlantParams, model: FFModel,
                         schedule: StiffnessSchedule = StiffnessSchedule(),
                         loop: LoopConfig = LoopConfig()) -> Trajectory:
    controller.reset()
    init = settled_start(model, schedule.ref, schedule.levels[0], params)
    return simulate(controller, params, lambda t: schedule.ref, schedule.duration, init, loop,
                    p_agr_fn=schedule.p_agr, record_stiffness=True)


def stiffness_metrics(traj: Trajectory, schedule: StiffnessSchedule = StiffnessSchedule(),
                      tol: float = 0.2) -> dict:
    out = {"plateaus": []}
    for i, level in enumerate(schedule.levels):
        t0 = i * schedule.plateau
        w = traj.window(t0, t0 + schedule.plateau - 1e-9)
        et = w.total_error
        tail = w.window(t0 + 0.5 * schedule.plateau)
        entry = {"p_agr": level, "max_deviation_deg": float(et.max()),
                 "final_error_deg": float(et[-1]),
                 "reconverged": bool(et[-1] <= tol),
                 "mean_kp_N_per_mm": float(np.mean(tail.stiffness)) if tail.stiffness is not None else None}
        out["plateaus"].append(entry)
    trans = [p["max_deviation_deg"] for p in out["plateaus"][1:]]
    out["max_transient_deg"] = float(max(trans))
    return out


@dataclass(frozen=True)
class LoadingMechanism:
    axis_mass: float = 2.467        # kg, the top linear axis carried by the bottom one
    weight_mass: float = 1.802      # kg
    travel: float = 330.0           # mm, centred on the module axis
    speed: float = 70.0             # mm/s
    height: float = 50.0            # mm above the top plate
    plate_offset: float = 60.0      # mm from the joint centre to the top plate

    def __post_init__(self):
        if not 0 < self.travel <= 330.0:
            raise ValueError("travel must be in (0, 330] mm")
        if self.speed <= 0:
            raise ValueError("speed must be positive")

    def position(self, t: float) -> float:
        """Carriage offset from centre in mm: constant-speed sweep centre -> +end -> -end -> ..."""
        half = 0.5 * self.travel
        s = (self.speed * t) % (4.0 * half)
        if s < half:
            return s
        if s < 3.0 * half:
            return 2.0 * half - s
        return s - 4.0 * half

    def moment(self, t: float, tilt=(0.0, 0.0)):
        """Gravity moment (about x, about y) in N mm at carriage offsets u = w = position(t).

        The bottom axis runs along x and carries the top axis plus the weight;
        the top axis runs along y and carries the weight only.  Lever arms are
        evaluated at ``tilt`` (the reference tilt), so the series does not
        depend on the controller.
        """
        u = w = self.position(t)
        ax, ay = math.radians(tilt[0]), math.radians(tilt[1])
        cx, sx, cy, sy = math.cos(ax), math.sin(ax), math.cos(ay), math.sin(ay)
        pz = self.plate_offset + self.height

        def dz(px, py):
            # partials of the base-frame height of R_x R_y (px, py, pz)
            return cx * py - sx * (-sy * px + cy * pz), -cx * (cy * px + sy * pz)

        gx1, gy1 = dz(u, 0.0)
        gx2, gy2 = dz(u, w)
        mx = -G * (self.axis_mass * gx1 + self.weight_mass * gx2)
        my = -G * (self.axis_mass * gy1 + self.weight_mass * gy2)
        return (mx, my)


DYNLOAD_SPEEDS = (10.0, 30.0, 50.0, 70.0)
DYNLOAD_PRESSURES = (6.0, 9.0, 12.0, 15.0)


def run_dynamic_load(controller, params: pl.PlantParams, model: FFModel, mech: LoadingMechanism,
                     p_agr: float, duration: float = 30.0, ref=(0.0, 0.0),
                     loop: LoopConfig = LoopConfig()) -> Trajectory:
    controller.reset()
    init = settled_start(model, ref, p_agr, params, mech.moment(0.0, ref))
    return simulate(controller, params, lambda t: ref, duration, init, loop,
                    moment_fn=lambda t: mech.moment(t, ref))


@dataclass(frozen=True)
class GainScenario:
    """Step from a settled start with a constant disturbance switched on at the step."""

    name: str
    target: tuple
    moment: tuple = (0.0, 0.0)      # N mm
    start: tuple = (0.0, 0.0)
    t_step: float = 1.0
    duration: float = 12.0

    def reference(self, t: float):
        return self.start if t < self.t_step else self.target

    def disturbance(self, t: float):
        return (0.0, 0.0) if t < self.t_step else self.moment


GAIN_SCENARIOS = (
    GainScenario("a", target=(8.0, 6.0), moment=(-1200.0, -1500.0)),
    GainScenario("b", target=(8.0, 6.0)),
    GainScenario("c", target=(2.0, 1.0), moment=(-3000.0, -3500.0)),
)


def run_gain_scenario(controller, params: pl.PlantParams, model: FFModel, scenario: GainScenario,
                      p_agr: float = 9.0, loop: LoopConfig = LoopConfig()) -> Trajectory:
    controller.reset()
    init = settled_start(model, scenario.start, p_agr, params)
    return simulate(controller, params, scenario.reference, scenario.duration, init, loop,
                    moment_fn=scenario.disturbance)


def gain_scenario_metrics(traj: Trajectory, scenario: GainScenario) -> dict:
    """Worst-axis settling and overshoot of a two-axis step."""
    settle, over, over_deg = [], [], []
    for axis in (0, 1):
        spec = StepSpec(axis, scenario.t_step, scenario.start[axis], scenario.target[axis])
        m = compute_metrics(traj, spec)
        settle.append(math.inf if m.settling_time_5pct is None else m.settling_time_5pct)
        over.append(m.overshoot_pct)
        over_deg.append(overshoot_deg(traj, spec))
    return {"settling_time_5pct": max(settle), "overshoot_pct": max(over),
            "overshoot_deg": max(over_deg), "final_error_deg": float(traj.total_error[-1])}
