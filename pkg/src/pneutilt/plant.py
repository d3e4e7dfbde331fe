"""Rigid tilt-platform simulator driven by three bellows.

The plate rotates on the universal joint; the bellows lengths are
always derived from the tilt through the inverse kinematics, so the only
dynamic states are the two tilt angles, their rates and the three
pressures behind the converter lags.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import bellows as bw
from .bellows import BellowsParams, BellowsState
from .calibration import PointCloud
from .errors import NoConvergence
from .kinematics import PlatformGeometry, Tilt, _lengths_jacobian, _lengths_jacobian_point

DEG = math.pi / 180.0
PRESSURE_RANGE = (0.0, 5.0)


@dataclass(frozen=True, eq=False)
class PlantParams:
    inertia: tuple = (5.0e4, 5.0e4)          # kg mm^2 about the x and y joint axes
    joint_damping: tuple = (20.0, 20.0)      # N mm s / deg
    geometry: PlatformGeometry = field(default_factory=PlatformGeometry)
    bellows_params: BellowsParams = field(default_factory=BellowsParams)

    def __post_init__(self):
        if min(self.inertia) <= 0:
            raise ValueError("inertia must be positive")
        if min(self.joint_damping) < 0:
            raise ValueError("joint damping must be non-negative")
        object.__setattr__(self, "inertia", tuple(float(v) for v in self.inertia))
        object.__setattr__(self, "joint_damping", tuple(float(v) for v in self.joint_damping))


@dataclass(frozen=True)
class PlantState:
    tilt: Tilt
    tilt_rate: tuple = (0.0, 0.0)            # deg/s
    pressures: tuple = (0.0, 0.0, 0.0)       # bar gauge, after the converter lag

    def lengths(self, geom: PlatformGeometry) -> np.ndarray:
        return _lengths_jacobian(self.tilt[0] * DEG, self.tilt[1] * DEG, geom)[0]

    def bellows(self, geom: PlatformGeometry) -> list:
        ls, jac = _lengths_jacobian(self.tilt[0] * DEG, self.tilt[1] * DEG, geom)
        rate = np.asarray(self.tilt_rate) * DEG
        vs = jac @ rate
        return [BellowsState(float(l), float(v), float(p)) for l, v, p in zip(ls, vs, self.pressures)]


class Equilibrium(NamedTuple):
    tilt: Tilt
    limit_contact: bool
    residual: float            # N mm, max-abs torque on the free axes


def _spring_torque(ax, ay, pressures, params: PlantParams):
    """Generalised spring torque (..., 2) in N mm for tilts in radians."""
    ls, jac = _lengths_jacobian(ax, ay, params.geometry)
    f = bw._spring_force(pressures, ls, params.bellows_params)
    return np.einsum("...i,...ij->...j", f, jac)


def torque_about_joint(state: PlantState, params: PlantParams) -> np.ndarray:
    """Net bellows torque about the joint x and y axes in N mm.

    Includes the bellows damping forces at the current tilt rate; joint
    damping and external moments are not part of it.
    """
    ax, ay = state.tilt[0] * DEG, state.tilt[1] * DEG
    ls, jac = _lengths_jacobian(ax, ay, params.geometry)
    p = np.asarray(state.pressures, dtype=float)
    f = bw._spring_force(p, ls, params.bellows_params)
    vel = jac @ (np.asarray(state.tilt_rate, dtype=float) * DEG)
    f = f - params.bellows_params.damping * vel
    return jac.T @ f


def _solve_free(pressures, moments, params, x0, fixed_mask, tol, max_iter=60):
    """Batched damped Newton with a central-difference Jacobian.

    ``fixed_mask`` (N, 2) pins coordinates at their value in ``x0``.
    Returns solution (N, 2) radians and residual (N,).
    """
    x = x0.copy()
    free = ~fixed_mask
    h = 1e-6

    def resid(xx):
        r = _spring_torque(xx[:, 0], xx[:, 1], pressures, params) + moments
        return np.where(free, r, 0.0)

    r = resid(x)
    norm = np.max(np.abs(r), axis=1)
    for _ in range(max_iter):
        active = norm >= tol
        if not np.any(active):
            break
        jac = np.empty((len(x), 2, 2))
        for j in range(2):
            dx = np.zeros(2)
            dx[j] = h
            jac[:, :, j] = (resid(x + dx) - resid(x - dx)) / (2 * h)
        # pinned coordinates: identity rows/cols keep the system regular
        for j in range(2):
            pin = fixed_mask[:, j]
            jac[pin, j, :] = 0.0
            jac[pin, :, j] = 0.0
            jac[pin, j, j] = 1.0
        step = -np.linalg.solve(jac, r[..., None])[..., 0]
        step = np.where(free, step, 0.0)
        step = np.clip(step, -0.2, 0.2)
        scale = np.ones(len(x))
        new_x = x.copy()
        new_r = r.copy()
        new_norm = norm.copy()
        pending = active.copy()
        for _ls in range(30):
            if not np.any(pending):
                break
            idx = np.nonzero(pending)[0]
            trial = x[idx] + scale[idx, None] * step[idx]
            trial = np.clip(trial, -1.2, 1.2)
            rt = _spring_torque(trial[:, 0], trial[:, 1], pressures[idx], params) + moments[idx]
            rt = np.where(free[idx], rt, 0.0)
            nt = np.max(np.abs(rt), axis=1)
            ok = (nt < norm[idx]) | (scale[idx] < 1e-4)
            good = idx[ok]
            new_x[good], new_r[good], new_norm[good] = trial[ok], rt[ok], nt[ok]
            pending[good] = False
            scale[idx[~ok]] *= 0.5
        x, r, norm = new_x, new_r, new_norm
    return x, norm


def static_tilt_batch(pressures, external_moments, params: PlantParams, tol: float = 1e-7):
    """Equilibrium tilts for many pressure triples at once.

    Returns ``(tilts_deg (N, 2), limit_contact (N,), residual (N,))``.
    Equilibria beyond the joint stops are re-solved with the violated
    axes pinned at the stop.
    """
    pressures = np.atleast_2d(np.asarray(pressures, dtype=float))
    n = len(pressures)
    moments = np.broadcast_to(np.asarray(external_moments, dtype=float), (n, 2)).copy()
    (x0, x1), (y0, y1) = params.geometry.tilt_limits
    lo = np.array([x0, y0]) * DEG
    hi = np.array([x1, y1]) * DEG

    x, res = _solve_free(pressures, moments, params, np.zeros((n, 2)), np.zeros((n, 2), bool), tol)
    contact = np.zeros(n, bool)
    outside = np.any((x < lo - 1e-12) | (x > hi + 1e-12), axis=1)
    if np.any(outside):
        idx = np.nonzero(outside)[0]
        best_x = np.clip(x[idx], lo, hi)
        best_res = np.full(len(idx), np.inf)
        done = np.zeros(len(idx), bool)
        # try pinning x, then y, then both; accept the first consistent active set
        for pin in ([True, False], [False, True], [True, True]):
            todo = ~done
            if not np.any(todo):
                break
            sub = idx[todo]
            start = np.clip(x[sub], lo, hi)
            mask = np.broadcast_to(np.array(pin), (len(sub), 2)).copy()
            xs, rs = _solve_free(pressures[sub], moments[sub], params, start, mask, tol)
            inside = np.all((xs >= lo - 1e-12) & (xs <= hi + 1e-12), axis=1)
            torque = _spring_torque(xs[:, 0], xs[:, 1], pressures[sub], params) + moments[sub]
            # a pinned axis must be pushed into its stop
            pushes = np.ones(len(sub), bool)
            for j in range(2):
                if pin[j]:
                    at_hi = np.isclose(xs[:, j], hi[j])
                    pushes &= np.where(at_hi, torque[:, j] >= 0, torque[:, j] <= 0)
            ok = inside & pushes & (rs < tol * 10)
            pos = np.nonzero(todo)[0]
            best_x[pos[ok]] = xs[ok]
            best_res[pos[ok]] = rs[ok]
            done[pos[ok]] = True
        x[idx] = best_x
        res[idx] = np.where(done, best_res, res[idx])
        contact[idx] = True
    return x / DEG, contact, res


def static_tilt(pressures, external_moment, params: PlantParams, tol: float = 1e-7) -> Equilibrium:
    """Tilt at which the bellows torque balances an external couple.

    Raises
    ------
    NoConvergence
        If Newton fails to bring the free-axis torque below 1e-6 N mm.
    """
    tilts, contact, res = static_tilt_batch([pressures], [external_moment], params, tol)
    if not res[0] < 1e-6:
        raise NoConvergence(f"static tilt residual {res[0]:.3e} N mm", float(res[0]))
    return Equilibrium(Tilt(float(tilts[0, 0]), float(tilts[0, 1])), bool(contact[0]), float(res[0]))


def equilibrium_state(pressures, params: PlantParams, external_moment=(0.0, 0.0)) -> PlantState:
    eq = static_tilt(pressures, external_moment, params)
    return PlantState(eq.tilt, (0.0, 0.0), tuple(float(p) for p in pressures))


def step(state: PlantState, commanded, external_moment, dt: float, params: PlantParams) -> PlantState:
    """Advance the platform by ``dt`` seconds.

    Pressures follow the converter lags; the rigid-body rotation uses a
    semi-implicit Euler step with damping and the bellows stiffness
    treated implicitly in the rate update.
    """
    if not (0.0 < dt <= 0.005):
        raise ValueError(f"dt must be in (0, 0.005] s, got {dt}")
    bp = params.bellows_params
    cmd = np.clip(np.asarray(commanded, dtype=float), *PRESSURE_RANGE)
    p = bw.converter_lag(np.asarray(state.pressures, dtype=float), cmd, dt, bp)

    ax, ay = state.tilt[0] * DEG, state.tilt[1] * DEG
    ls, jac = _lengths_jacobian_point(ax, ay, params.geometry)
    k = bw._stiffness(p, ls, bp)
    f = k * (bw._ze_mm(p) - ls)
    q = jac.T @ f + np.asarray(external_moment, dtype=float)

    omega = np.asarray(state.tilt_rate, dtype=float) * DEG
    ix, iy = params.inertia
    mass = np.array([[ix, 0.0], [0.0, iy]]) * 1e-3          # N mm s^2 / rad
    damp = bp.damping * (jac.T @ jac)
    damp[0, 0] += params.joint_damping[0] / DEG
    damp[1, 1] += params.joint_damping[1] / DEG
    stiff = jac.T @ (k[:, None] * jac)
    lhs = mass + dt * damp + dt * dt * stiff
    rhs = mass @ omega + dt * q
    det = lhs[0, 0] * lhs[1, 1] - lhs[0, 1] * lhs[1, 0]
    w0 = (rhs[0] * lhs[1, 1] - lhs[0, 1] * rhs[1]) / det
    w1 = (lhs[0, 0] * rhs[1] - lhs[1, 0] * rhs[0]) / det
    x0n, x1n = ax + dt * w0, ay + dt * w1

    (x0, x1), (y0, y1) = params.geometry.tilt_limits
    if not x0 * DEG <= x0n <= x1 * DEG:
        x0n, w0 = min(max(x0n, x0 * DEG), x1 * DEG), 0.0
    if not y0 * DEG <= x1n <= y1 * DEG:
        x1n, w1 = min(max(x1n, y0 * DEG), y1 * DEG), 0.0
    return PlantState(Tilt(float(x0n / DEG), float(x1n / DEG)),
                      (float(w0 / DEG), float(w1 / DEG)),
                      (float(p[0]), float(p[1]), float(p[2])))


def pressure_lattice(start: float = 0.0, stop: float = 5.0, increment: float = 0.2) -> np.ndarray:
    if increment <= 0:
        raise ValueError("pressure increment must be positive")
    n = int(math.floor((stop - start) / increment + 1e-9)) + 1
    return np.round(start + increment * np.arange(n), 12)


def generate_point_cloud(params: PlantParams, start: float = 0.0, stop: float = 5.0,
                         increment: float = 0.2, noise_deg: float = 0.05, seed: int = 0,
                         chunk: int = 4096) -> PointCloud:
    """Equilibrium tilts over the full pressure lattice, bellows 3 varying fastest.

    Gaussian angle noise of ``noise_deg`` stands in for sensor error; the
    noise stream depends only on ``seed``.
    """
    levels = pressure_lattice(start, stop, increment)
    grid = np.stack(np.meshgrid(levels, levels, levels, indexing="ij"), -1).reshape(-1, 3)
    tilts = np.empty((len(grid), 2))
    for s in range(0, len(grid), chunk):
        t, _, _ = static_tilt_batch(grid[s:s + chunk], (0.0, 0.0), params)
        tilts[s:s + chunk] = t
    if noise_deg > 0:
        rng = np.random.default_rng(seed)
        tilts = tilts + rng.normal(0.0, noise_deg, size=tilts.shape)
    return PointCloud(np.column_stack([tilts, grid]))


def stiffness_at(state: PlantState, params: PlantParams) -> np.ndarray:
    """Per-bellows pneumatic stiffness (3,) in N/mm at the current state."""
    ls = state.lengths(params.geometry)
    return bw._stiffness(np.asarray(state.pressures), ls, params.bellows_params)


def with_payload(params: PlantParams, extra_inertia) -> PlantParams:
    return replace(params, inertia=tuple(i + e for i, e in zip(params.inertia, extra_inertia)))
