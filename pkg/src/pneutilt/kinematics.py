"""Inverse and forward kinematics of the three-bellows tilt module.

The top plate hangs on a universal joint above the bottom plate.  The
plate pose is fully described by two tilt angles; a bellows length is the
distance between its bottom-plate anchor ``a_i`` and its top-plate anchor
``b_i`` mapped into the base frame by

    H_t = T_z(top) @ R_x(alpha_x) @ R_y(alpha_y) @ T_z(bottom)

Angles at the public surface are in degrees, lengths in millimetres.
The underscored helpers work in radians and broadcast over leading batch
dimensions; the plant uses them directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InconsistentLengths, NoConvergence, TiltOutOfRange

TILT_LIMITS = ((-24.4, 16.6), (-21.2, 20.0))


class Tilt(NamedTuple):
    """Tilt of the top plate in degrees."""

    alpha_x: float
    alpha_y: float


def _ring(radius: float, z: float = 0.0) -> np.ndarray:
    # bellows 1 on +x, the others at +120 and +240 degrees
    phi = np.deg2rad([0.0, 120.0, 240.0])
    return np.column_stack([radius * np.cos(phi), radius * np.sin(phi), np.full(3, z)])


@dataclass(frozen=True, eq=False)
class PlatformGeometry:
    """Anchor layout and joint offsets of one module.

    ``bottom_anchor`` and ``top_anchor`` are (3, 3) arrays, one row per
    bellows.  ``tilt_limits`` holds ``((x_min, x_max), (y_min, y_max))`` in
    degrees and doubles as the joint hard stops of the plant.
    """

    bottom_anchor: np.ndarray = field(default_factory=lambda: _ring(80.0))
    top_anchor: np.ndarray = field(default_factory=lambda: _ring(80.0))
    joint_offset_bottom: float = 60.0
    joint_offset_top: float = 60.0
    tilt_limits: tuple = TILT_LIMITS

    def __post_init__(self):
        for name in ("bottom_anchor", "top_anchor"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != (3, 3):
                raise ValueError(f"{name} must have shape (3, 3), got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        (x0, x1), (y0, y1) = self.tilt_limits
        if not (x0 < 0.0 < x1 and y0 < 0.0 < y1):
            raise ValueError("tilt limits must bracket zero tilt")
        object.__setattr__(self, "tilt_limits", ((float(x0), float(x1)), (float(y0), float(y1))))

    @classmethod
    def symmetric(cls, anchor_radius: float = 80.0, **kwargs) -> "PlatformGeometry":
        ring = _ring(anchor_radius)
        return cls(bottom_anchor=ring, top_anchor=ring.copy(), **kwargs)

    @property
    def neutral_length(self) -> float:
        return self.joint_offset_bottom + self.joint_offset_top

    def contains(self, tilt, tol: float = 0.0) -> bool:
        (x0, x1), (y0, y1) = self.tilt_limits
        ax, ay = tilt
        return (x0 - tol <= ax <= x1 + tol) and (y0 - tol <= ay <= y1 + tol)

    def clip(self, tilt) -> Tilt:
        (x0, x1), (y0, y1) = self.tilt_limits
        return Tilt(min(max(tilt[0], x0), x1), min(max(tilt[1], y0), y1))


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0, 0.0], [0.0, c, -s, 0.0], [0.0, s, c, 0.0], [0.0, 0.0, 0.0, 1.0]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s, 0.0], [0.0, 1.0, 0.0, 0.0], [-s, 0.0, c, 0.0], [0.0, 0.0, 0.0, 1.0]])


def trans_z(offset: float) -> np.ndarray:
    t = np.eye(4)
    t[2, 3] = offset
    return t


def transform_top_plate(tilt, geom: PlatformGeometry) -> np.ndarray:
    """Homogeneous transform from the top-plate frame to the base frame."""
    ax, ay = (math.radians(a) for a in tilt)
    return trans_z(geom.joint_offset_top) @ rot_x(ax) @ rot_y(ay) @ trans_z(geom.joint_offset_bottom)


def _rotation(ax, ay):
    """Batched R_x(ax) @ R_y(ay) and its two partial derivatives."""
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    zero = np.zeros_like(cx)
    one = np.ones_like(cx)
    rx = np.stack([np.stack([one, zero, zero], -1),
                   np.stack([zero, cx, -sx], -1),
                   np.stack([zero, sx, cx], -1)], -2)
    drx = np.stack([np.stack([zero, zero, zero], -1),
                    np.stack([zero, -sx, -cx], -1),
                    np.stack([zero, cx, -sx], -1)], -2)
    ry = np.stack([np.stack([cy, zero, sy], -1),
                   np.stack([zero, one, zero], -1),
                   np.stack([-sy, zero, cy], -1)], -2)
    dry = np.stack([np.stack([-sy, zero, cy], -1),
                    np.stack([zero, zero, zero], -1),
                    np.stack([-cy, zero, -sy], -1)], -2)
    return rx @ ry, drx @ ry, rx @ dry


def _lengths_jacobian(ax, ay, geom: PlatformGeometry):
    """Bellows lengths (..., 3) and d(length)/d(angle) (..., 3, 2) per radian."""
    ax = np.asarray(ax, dtype=float)
    ay = np.asarray(ay, dtype=float)
    r, drx, dry = _rotation(ax, ay)
    q = geom.top_anchor + np.array([0.0, 0.0, geom.joint_offset_bottom])
    p = np.einsum("...jk,ik->...ij", r, q)
    p[..., 2] += geom.joint_offset_top
    d = p - geom.bottom_anchor
    lengths = np.linalg.norm(d, axis=-1)
    u = d / lengths[..., None]
    jx = np.einsum("...ik,...ik->...i", u, np.einsum("...jk,ik->...ij", drx, q))
    jy = np.einsum("...ik,...ik->...i", u, np.einsum("...jk,ik->...ij", dry, q))
    return lengths, np.stack([jx, jy], axis=-1)


def _lengths_jacobian_point(ax: float, ay: float, geom: PlatformGeometry):
    """Unbatched :func:`_lengths_jacobian` for one pose; the simulator hot path."""
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    r = np.array([[cy, 0.0, sy], [sx * sy, cx, -sx * cy], [-cx * sy, sx, cx * cy]])
    drx = np.array([[0.0, 0.0, 0.0], [cx * sy, -sx, -cx * cy], [sx * sy, cx, -sx * cy]])
    dry = np.array([[-sy, 0.0, cy], [sx * cy, 0.0, sx * sy], [-cx * cy, 0.0, -cx * sy]])
    q = geom.top_anchor + np.array([0.0, 0.0, geom.joint_offset_bottom])
    d = q @ r.T
    d[:, 2] += geom.joint_offset_top
    d -= geom.bottom_anchor
    lengths = np.sqrt(np.einsum("ij,ij->i", d, d))
    u = d / lengths[:, None]
    jac = np.empty((3, 2))
    jac[:, 0] = np.einsum("ij,ij->i", u, q @ drx.T)
    jac[:, 1] = np.einsum("ij,ij->i", u, q @ dry.T)
    return lengths, jac


def _lengths(ax, ay, geom: PlatformGeometry):
    return _lengths_jacobian(ax, ay, geom)[0]


def inverse_kinematics(tilt, geom: PlatformGeometry) -> np.ndarray:
    """Bellows lengths in mm for a tilt given in degrees.

    Raises
    ------
    TiltOutOfRange
        If the tilt is outside ``geom.tilt_limits``.
    """
    ax, ay = float(tilt[0]), float(tilt[1])
    if not (math.isfinite(ax) and math.isfinite(ay)):
        raise TiltOutOfRange(f"non-finite tilt {tilt!r}")
    if not geom.contains((ax, ay)):
        raise TiltOutOfRange(f"tilt ({ax:.4f}, {ay:.4f}) deg outside limits {geom.tilt_limits}")
    return _lengths(math.radians(ax), math.radians(ay), geom)


def forward_kinematics(lengths, geom: PlatformGeometry, initial_guess=(0.0, 0.0),
                       max_iter: int = 100, tol: float = 1e-10) -> Tilt:
    """Tilt in degrees that reproduces the given bellows lengths.

    Damped Newton on the residuals of bellows 1 and 2; bellows 3 is used
    only as a consistency check once the iteration has converged.
    """
    target = np.asarray(lengths, dtype=float)
    x = np.radians(np.asarray(initial_guess, dtype=float))
    ls, jac = _lengths_jacobian(x[0], x[1], geom)
    res = ls[:2] - target[:2]
    norm = float(np.max(np.abs(res)))
    for _ in range(max_iter):
        if norm < tol:
            break
        step = np.linalg.solve(jac[:2], -res)
        scale = 1.0
        while True:
            trial = x + scale * step
            ls_t, jac_t = _lengths_jacobian(trial[0], trial[1], geom)
            res_t = ls_t[:2] - target[:2]
            norm_t = float(np.max(np.abs(res_t)))
            if norm_t < norm or scale < 1e-6:
                break
            scale *= 0.5
        x, ls, jac, res, norm = trial, ls_t, jac_t, res_t, norm_t
    else:
        raise NoConvergence(f"forward kinematics did not converge, residual {norm:.3e} mm", norm)
    if norm >= tol:
        raise NoConvergence(f"forward kinematics did not converge, residual {norm:.3e} mm", norm)
    third = abs(float(ls[2] - target[2]))
    if third > 1e-6:
        raise InconsistentLengths(f"bellows 3 residual {third:.3e} mm at the two-bellows solution")
    return Tilt(math.degrees(x[0]), math.degrees(x[1]))
