"""Tilt controllers: FFvI (feed-forward + variable-gain I), constant-gain I and PID.

The integral correction of the FFvI loop is applied as an offset on the
reference tilt handed to the feed-forward model, so the correction always
respects the calibrated pressure coupling and the aggregate-pressure
setpoint.  Gains are in the controller's own units; ``correction_scale``
converts ``gain * deg * s`` into degrees of reference offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bellows import _ze_mm, pressure_for_length
from .calibration import FFModel, feedforward
from .kinematics import PlatformGeometry, _lengths

DEG = math.pi / 180.0


def total_error(e_x: float, e_y: float) -> float:
    return math.hypot(e_x, e_y)


@dataclass(frozen=True)
class VariableGainLaw:
    """``K(e) = clamp(a * e + b, floor, cap)``; defaults pass through K(1)=350, K(5)=75."""

    a: float = -68.75
    b: float = 418.75
    floor: float = 75.0
    cap: float = 350.0

    def __post_init__(self):
        if self.a > 0:
            raise ValueError("gain law slope must be non-positive")
        if self.floor > self.cap:
            raise ValueError("gain floor above cap")

    @classmethod
    def constant(cls, k: float) -> "VariableGainLaw":
        return cls(a=0.0, b=k, floor=k, cap=k)

    def __call__(self, e_t: float) -> float:
        return gain(e_t, self)


def gain(e_t: float, law: VariableGainLaw) -> float:
    return min(max(law.a * e_t + law.b, law.floor), law.cap)


@dataclass(frozen=True)
class FFvIState:
    integral_x: float = 0.0          # deg s
    integral_y: float = 0.0
    last_gain: float = 0.0
    p_agr_setpoint: float = 9.0      # bar
    shaped_ref: tuple = None         # deg, expected feed-forward response; None before the first sample


@dataclass(frozen=True)
class FFvIParams:
    correction_scale: float = 0.004  # deg of reference offset per (gain * deg * s)
    max_correction: float = 8.0      # deg, anti-windup bound per axis
    i_enabled: bool = True
    form: str = "scheduled"          # "scheduled" or "product"
    relax_aggregate: bool = True     # lower an infeasible stiffness request instead of clipping
    response_time: float = 0.1       # s, lag of the shaped reference the integral tracks; 0 tracks ref

    def __post_init__(self):
        if self.form not in ("scheduled", "product"):
            raise ValueError(f"unknown integral form {self.form!r}")
        if self.correction_scale < 0 or self.max_correction <= 0:
            raise ValueError("correction_scale >= 0 and max_correction > 0 required")
        if self.response_time < 0:
            raise ValueError("response_time must be non-negative")


def ffvi_step(ref, measured, state: FFvIState, model: FFModel, law: VariableGainLaw, dt: float,
              params: FFvIParams = FFvIParams()):
    """One control period. Returns ``(pressures (3,), new_state)``.

    Per-axis tilt errors are integrated and the gain, scheduled on the
    total error, scales the integral into a reference-tilt offset.  With
    ``params.form == "scheduled"`` the gain weights each increment
    instead of the whole accumulated integral, so a gain rise near the
    target does not re-amplify error collected during the transient.
    Integration on an axis is frozen once its correction reaches
    ``params.max_correction``; output pressures are clamped to [0, 5] bar
    by the feed-forward evaluation.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    p_agr = state.p_agr_setpoint
    if not params.i_enabled:
        return feedforward(ref, p_agr, model), state
    k = gain(total_error(ref[0] - measured[0], ref[1] - measured[1]), law)
    shaped = _shape(ref, state.shaped_ref, params.response_time, dt)
    ex = shaped[0] - measured[0]
    ey = shaped[1] - measured[1]
    if params.form == "scheduled":
        # integral already carries the gain; the offset scale is constant
        inc, scale = k * dt, params.correction_scale
    else:
        inc, scale = dt, params.correction_scale * k
    bound = params.max_correction
    ix = state.integral_x + ex * inc
    iy = state.integral_y + ey * inc
    # conditional integration: an axis whose correction sits at the bound stops growing
    if abs(scale * ix) > bound and abs(ix) > abs(state.integral_x):
        ix = math.copysign(max(abs(state.integral_x), min(abs(ix), bound / scale)), ix)
    if abs(scale * iy) > bound and abs(iy) > abs(state.integral_y):
        iy = math.copysign(max(abs(state.integral_y), min(abs(iy), bound / scale)), iy)
    corrected = (ref[0] + scale * ix, ref[1] + scale * iy)
    if params.relax_aggregate:
        p_agr = feasible_aggregate(corrected, p_agr, model)
    out = feedforward(corrected, p_agr, model)
    return out, replace(state, integral_x=ix, integral_y=iy, last_gain=k, shaped_ref=shaped)


def _shape(ref, prev, tau: float, dt: float):
    # first-order lag toward ref; the feed-forward alone removes this part of the error
    if prev is None or tau == 0.0:
        return (float(ref[0]), float(ref[1]))
    w = 1.0 - math.exp(-dt / tau)
    return (prev[0] + w * (ref[0] - prev[0]), prev[1] + w * (ref[1] - prev[1]))


def feasible_aggregate(ref, p_agr: float, model: FFModel, tol: float = 1e-3) -> float:
    """Largest aggregate pressure up to ``p_agr`` whose feed-forward output stays at or below 5 bar.

    Holding a tilt with all bellows below the upper limit caps the
    achievable stiffness; relaxing the stiffness request keeps the tilt
    instead of clipping a bellows.  Returns ``p_agr`` unchanged when it is
    already feasible and the lower end of the model range when nothing is.
    """
    lo, hi = model.agr_range
    p = min(max(p_agr, lo), hi)
    if np.max(model.raw(ref, p)) <= 5.0:
        return p_agr
    if np.max(model.raw(ref, lo)) > 5.0:
        return lo
    a, b = lo, p
    while b - a > tol:
        mid = 0.5 * (a + b)
        if np.max(model.raw(ref, mid)) <= 5.0:
            a = mid
        else:
            b = mid
    return a


def constant_i_step(ref, measured, state: FFvIState, model: FFModel, k: float, dt: float,
                    params: FFvIParams = FFvIParams()):
    """FFvI step with a fixed integral gain ``k``."""
    return ffvi_step(ref, measured, state, model, VariableGainLaw.constant(k), dt, params)


@dataclass(frozen=True)
class PIDGains:
    kp: float = 40.0
    ki: float = 240.0
    kd: float = 5.0
    output_scale: float = 0.004   # mm of equilibrium-length command per unit of PID output
    base_pressure: float = 3.0    # bar, operating point all three loops work around
    reference_feed: bool = False  # add the reference extension to the length command


@dataclass(frozen=True)
class PIDState:
    integral: tuple = (0.0, 0.0, 0.0)       # mm s
    prev_error: tuple = None                 # mm, None before the first sample


def pid_step(ref, measured, state: PIDState, gains: PIDGains, geom: PlatformGeometry, dt: float):
    """Three independent PID loops on bellows-length error.

    Reference and measured tilts are mapped to lengths with the inverse
    kinematics.  The commanded equilibrium length is the base-pressure
    free length shifted by the reference extension and the loop output,
    and is converted to a pressure through the inverse of the
    equilibrium-length polynomial.  Returns ``(pressures (3,), new_state)``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    l_ref = _lengths(ref[0] * DEG, ref[1] * DEG, geom)
    l_meas = _lengths(measured[0] * DEG, measured[1] * DEG, geom)
    err = l_ref - l_meas
    prev = err if state.prev_error is None else np.asarray(state.prev_error)
    deriv = (err - prev) / dt
    integ = np.asarray(state.integral, dtype=float)
    z_ref = np.full(3, _ze_mm(gains.base_pressure))
    if gains.reference_feed:
        z_ref = z_ref + (l_ref - geom.neutral_length)
    out = np.empty(3)
    new_int = integ.copy()
    for i in range(3):
        trial = integ[i] + err[i] * dt
        u = gains.kp * err[i] + gains.ki * trial + gains.kd * deriv[i]
        p = pressure_for_length(z_ref[i] + gains.output_scale * u)
        if (p <= 0.0 and err[i] < 0) or (p >= 5.0 and err[i] > 0):
            # saturated and still pushing: keep the old integral
            trial = integ[i]
            u = gains.kp * err[i] + gains.ki * trial + gains.kd * deriv[i]
            p = pressure_for_length(z_ref[i] + gains.output_scale * u)
        new_int[i] = trial
        out[i] = min(max(p, 0.0), 5.0)
    return out, PIDState(tuple(float(v) for v in new_int), tuple(float(v) for v in err))


class FFvIController:
    """Stateful wrapper used by the experiment harness."""

    name = "ffvi"

    def __init__(self, model: FFModel, law: VariableGainLaw = VariableGainLaw(), p_agr: float = 9.0,
                 params: FFvIParams = FFvIParams()):
        self.model = model
        self.law = law
        self.params = params
        self.p_agr = p_agr
        self.reset()

    def reset(self):
        self.state = FFvIState(p_agr_setpoint=self.p_agr)

    def set_p_agr(self, p_agr: float):
        self.state = replace(self.state, p_agr_setpoint=p_agr)

    def __call__(self, ref, measured, dt):
        out, self.state = ffvi_step(ref, measured, self.state, self.model, self.law, dt, self.params)
        return out


class PIDController:
    name = "pid"

    def __init__(self, geom: PlatformGeometry, gains: PIDGains = PIDGains()):
        self.geom = geom
        self.gains = gains
        self.reset()

    def reset(self):
        self.state = PIDState()

    def set_p_agr(self, p_agr: float):
        pass

    def __call__(self, ref, measured, dt):
        out, self.state = pid_step(ref, measured, self.state, self.gains, self.geom, dt)
        return out
