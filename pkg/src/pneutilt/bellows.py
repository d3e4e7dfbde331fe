"""Single pneumatic bellows: equilibrium length, stiffness and step dynamics.

Pressures at the public surface are gauge pressures in bar, lengths in mm,
forces in N.  Internally pressures are converted to N/mm^2 (1 bar = 0.1).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .errors import NoRootInRange, PressureOutOfRange

BAR = 0.1  # N/mm^2 per bar
ZE_COEFFS = (0.45, 5.6, 23.0, 1200.0)  # cubic in gauge bar, highest power first
ZE_UNIT_MM = 0.1  # equilibrium-length polynomial is in tenths of a millimetre
ZE_PRESSURE_RANGE = (0.0, 7.0)


def equilibrium_length(pressure: float) -> float:
    """Free length of the bellows at a gauge pressure, in polynomial units (0.1 mm)."""
    p = float(pressure)
    lo, hi = ZE_PRESSURE_RANGE
    if not (lo <= p <= hi):
        raise PressureOutOfRange(f"pressure {p} bar outside [{lo}, {hi}]")
    a, b, c, d = ZE_COEFFS
    return ((a * p + b) * p + c) * p + d


def equilibrium_length_mm(pressure: float) -> float:
    return equilibrium_length(pressure) * ZE_UNIT_MM


def _ze_mm(p):
    # unchecked, vectorised
    a, b, c, d = ZE_COEFFS
    return (((a * p + b) * p + c) * p + d) * ZE_UNIT_MM


def _dze_mm(p):
    a, b, c, _ = ZE_COEFFS
    return ((3.0 * a * p + 2.0 * b) * p + c) * ZE_UNIT_MM


def pressure_for_length(length_mm: float, tol: float = 1e-10) -> float:
    """Inverse of :func:`equilibrium_length_mm`, clipped to the 0-7 bar range."""
    lo, hi = ZE_PRESSURE_RANGE
    if length_mm <= _ze_mm(lo):
        return lo
    if length_mm >= _ze_mm(hi):
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _ze_mm(mid) < length_mm:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class EffectiveArea:
    """Piecewise-linear effective area A(l) in mm^2 over bellows length l in mm.

    Constant outside the knot range.  A single knot gives a constant area.
    """

    def __init__(self, lengths: Sequence[float], areas: Sequence[float]):
        self.lengths = np.asarray(lengths, dtype=float)
        self.areas = np.asarray(areas, dtype=float)
        if self.lengths.shape != self.areas.shape or self.lengths.ndim != 1 or len(self.lengths) == 0:
            raise ValueError("lengths and areas must be equal-length 1-D sequences")
        if np.any(np.diff(self.lengths) <= 0):
            raise ValueError("area knots must be strictly increasing in length")
        if np.any(self.areas <= 0):
            raise ValueError("effective area must be strictly positive")
        # cumulative volume at each knot, measured from l = 0
        seg = 0.5 * (self.areas[1:] + self.areas[:-1]) * np.diff(self.lengths)
        self._vol_knots = self.areas[0] * self.lengths[0] + np.concatenate([[0.0], np.cumsum(seg)])

    def __eq__(self, other):
        if not isinstance(other, EffectiveArea):
            return NotImplemented
        return np.array_equal(self.lengths, other.lengths) and np.array_equal(self.areas, other.areas)

    def __hash__(self):
        return hash((self.lengths.tobytes(), self.areas.tobytes()))

    @classmethod
    def constant(cls, area: float) -> "EffectiveArea":
        return cls([0.0], [area])

    @classmethod
    def from_diameter(cls, diameter_mm: float) -> "EffectiveArea":
        return cls.constant(math.pi * diameter_mm ** 2 / 4.0)

    def area(self, length):
        if len(self.lengths) == 1:
            return np.full_like(np.asarray(length, dtype=float), self.areas[0])
        return np.interp(length, self.lengths, self.areas)

    def slope(self, length):
        """dA/dl; zero outside the knots and on constant segments."""
        if len(self.lengths) == 1:
            return np.zeros_like(np.asarray(length, dtype=float))
        slopes = np.diff(self.areas) / np.diff(self.lengths)
        idx = np.searchsorted(self.lengths, length, side="right") - 1
        inside = (idx >= 0) & (idx < len(slopes))
        return np.where(inside, slopes[np.clip(idx, 0, len(slopes) - 1)], 0.0)

    def volume(self, length):
        """Integral of A from 0 to ``length``."""
        length = np.asarray(length, dtype=float)
        if len(self.lengths) == 1:
            return self.areas[0] * length
        idx = np.clip(np.searchsorted(self.lengths, length, side="right") - 1, 0, len(self.lengths) - 1)
        l0 = self.lengths[idx]
        a0 = self.areas[idx]
        below = length < self.lengths[0]
        dl = length - l0
        a1 = self.area(length)
        vol = self._vol_knots[idx] + 0.5 * (a0 + a1) * dl
        return np.where(below, self.areas[0] * length, vol)

    def to_dict(self) -> dict:
        return {"lengths": self.lengths.tolist(), "areas": self.areas.tolist()}


# Dunlop 2 3/4 x 3: nominal 2.75 in bore
DEFAULT_AREA_DIAMETER_MM = 69.85


@dataclass(frozen=True)
class BellowsParams:
    effective_area: EffectiveArea = field(
        default_factory=lambda: EffectiveArea.from_diameter(DEFAULT_AREA_DIAMETER_MM))
    dead_volume: float = 3.0e5            # mm^3, tubing + converter + end caps
    moving_mass: float = 0.5              # kg
    damping: float = 0.9                  # N s / mm
    polytropic_n: float = 1.0
    ambient_pressure: float = 1.01325     # bar absolute
    fill_time_constant: float = 0.01      # s
    exhaust_ratio: float = 10.0           # exhaust time constant / fill time constant
    vent_crack_pressure: float = 0.7      # bar, relief seat closes below this
    leak_time_constant: float = 40.0      # s, bleed below the crack pressure
    min_length: float = 80.0              # mm, mechanical stops
    max_length: float = 170.0

    def __post_init__(self):
        if self.dead_volume < 0 or self.moving_mass <= 0 or self.damping < 0:
            raise ValueError("dead_volume >= 0, moving_mass > 0 and damping >= 0 required")
        if self.polytropic_n <= 0 or self.ambient_pressure <= 0:
            raise ValueError("polytropic_n and ambient_pressure must be positive")
        if self.fill_time_constant <= 0 or self.exhaust_ratio <= 0 or self.leak_time_constant <= 0:
            raise ValueError("converter time constants must be positive")
        if self.vent_crack_pressure < 0:
            raise ValueError("vent_crack_pressure must be non-negative")
        if not self.min_length < self.max_length:
            raise ValueError("min_length must be below max_length")

    @property
    def exhaust_time_constant(self) -> float:
        return self.fill_time_constant * self.exhaust_ratio


class BellowsState(NamedTuple):
    length: float                 # mm
    velocity: float               # mm/s
    internal_pressure: float      # bar gauge


def _stiffness(p_gauge, length, params: BellowsParams):
    area = params.effective_area
    a = area.area(length)
    vol = area.volume(length) + params.dead_volume
    p_abs = (p_gauge + params.ambient_pressure) * BAR
    # dA/dl is taken along extension; a growing area softens the spring
    return p_abs * params.polytropic_n * a * a / vol - p_gauge * BAR * area.slope(length)


def pneumatic_stiffness(state: BellowsState, params: BellowsParams) -> float:
    """Stiffness k_p in N/mm at the current length and internal pressure."""
    k = float(_stiffness(state.internal_pressure, state.length, params))
    if not k > 0.0:
        raise ValueError(f"non-positive stiffness {k} N/mm; check the effective-area model")
    return k


def _spring_force(p_gauge, length, params: BellowsParams):
    return _stiffness(p_gauge, length, params) * (_ze_mm(p_gauge) - length)


def spring_force(state: BellowsState, params: BellowsParams) -> float:
    """Axial spring force in N, positive when it pushes the bellows longer."""
    return float(_spring_force(state.internal_pressure, state.length, params))


def spring_potential(pressure: float, length: float, params: BellowsParams, samples: int = 2001) -> float:
    """Work done against the spring moving from the free length to ``length``."""
    ze = _ze_mm(pressure)
    s = np.linspace(ze, length, samples)
    f = _spring_force(pressure, s, params)
    return float(-trapezoid(f, s))


def static_extension(pressure: float, external_force: float, params: BellowsParams,
                     tol: float = 1e-6) -> float:
    """Length in mm at which the spring force balances a static external force.

    Positive ``external_force`` pulls the bellows longer.
    """
    lo, hi = params.min_length, params.max_length

    def g(z):
        return _spring_force(pressure, z, params) + external_force

    g_lo, g_hi = g(lo), g(hi)
    if g_lo < 0 or g_hi > 0:
        raise NoRootInRange(
            f"no equilibrium for {pressure} bar, {external_force} N inside [{lo}, {hi}] mm")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def extension_curves(pressures, forces, params: BellowsParams):
    """Rows of (pressure_bar, force_N, length_mm) from :func:`static_extension`."""
    return [(float(p), float(f), static_extension(p, f, params)) for p in pressures for f in forces]


def write_extension_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pressure_bar", "force_N", "length_mm"])
        for p, f, z in rows:
            w.writerow([repr(p), repr(f), repr(z)])


def _lag(cur: float, cmd: float, dt: float, tau_f: float, tau_e: float, tau_l: float, crack: float) -> float:
    if cmd >= cur:
        return cmd + (cur - cmd) * math.exp(-dt / tau_f)
    vented = cmd + (cur - cmd) * math.exp(-dt / tau_e)
    if cmd >= crack or vented >= crack:
        return vented
    if cur > crack:
        # vent down to the crack pressure, leak for the rest of the interval
        t_cross = tau_e * math.log((cur - cmd) / (crack - cmd))
        return cmd + (crack - cmd) * math.exp(-(dt - t_cross) / tau_l)
    return cmd + (cur - cmd) * math.exp(-dt / tau_l)


def converter_lag(current, commanded, dt: float, params: BellowsParams):
    """Converter response over ``dt``, integrated exactly.

    Filling is a first-order lag.  Exhausting vents with the slower
    exhaust time constant down to the relief crack pressure; below it the
    bellows only bleeds through a leak with ``leak_time_constant``.
    """
    cur = np.asarray(current, dtype=float)
    cmd = np.broadcast_to(np.asarray(commanded, dtype=float), cur.shape)
    consts = (params.fill_time_constant, params.exhaust_time_constant, params.leak_time_constant,
              params.vent_crack_pressure)
    out = np.array([_lag(float(c), float(m), dt, *consts) for c, m in zip(cur.ravel(), cmd.ravel())])
    return out.reshape(cur.shape) if cur.ndim else out[0]


def step(state: BellowsState, commanded_pressure: float, external_force: float, dt: float,
         params: BellowsParams) -> BellowsState:
    """Advance one bellows by ``dt`` seconds.

    The converter lag is integrated exactly; the mechanics use a
    semi-implicit Euler step with damping and the local stiffness taken
    implicitly in the velocity update, then the position from the new
    velocity.  Mechanical stops clamp the length and zero the velocity.
    """
    if not (0.0 < dt <= 0.01):
        raise ValueError(f"dt must be in (0, 0.01] s, got {dt}")
    p = float(converter_lag(state.internal_pressure, commanded_pressure, dt, params))
    z, v = state.length, state.velocity
    k = float(_stiffness(p, z, params))
    force = k * (_ze_mm(p) - z) + external_force
    m = params.moving_mass * 1e-3  # N s^2 / mm
    v_new = (v + dt * force / m) / (1.0 + dt * params.damping / m + dt * dt * k / m)
    z_new = z + dt * v_new
    if z_new <= params.min_length:
        z_new, v_new = params.min_length, 0.0
    elif z_new >= params.max_length:
        z_new, v_new = params.max_length, 0.0
    return BellowsState(z_new, v_new, p)


def simulate_step_response(p_from: float, p_to: float, duration: float, params: BellowsParams,
                           dt: float = 1e-3, external_force: float = 0.0):
    """Open-loop response to a commanded pressure step, starting at rest at ``p_from``.

    Returns arrays ``(t, length, pressure)``.
    """
    n = int(round(duration / dt))
    z0 = static_extension(p_from, external_force, params)
    state = BellowsState(z0, 0.0, p_from)
    t = np.arange(n + 1) * dt
    zs = np.empty(n + 1)
    ps = np.empty(n + 1)
    zs[0], ps[0] = state.length, state.internal_pressure
    for i in range(n):
        state = step(state, p_to, external_force, dt, params)
        zs[i + 1], ps[i + 1] = state.length, state.internal_pressure
    return t, zs, ps
