"""Data-driven feed-forward calibration.

Pipeline
--------
1. :class:`PointCloud` -- measured (or simulated) equilibria
   ``[alpha_x, alpha_y, p1, p2, p3]``.
2. :func:`lookup_pressures` -- region search in the aggregate-pressure
   augmented workspace for one reference tilt.
3. :func:`build_reference_grid` + :func:`fit_surface` -- one quadratic
   surface per bellows at a fixed aggregate pressure.
4. :func:`fit_coefficients_over_pressure` -- a degree-7 polynomial in the
   aggregate pressure for each of the 18 surface coefficients, giving the
   deployable :class:`FFModel`.

Region search note: the region radius is the planar Euclidean distance in
the (alpha_x, alpha_y) plane, and the nearest-point metric is the same
distance.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import (CloudFormatError, EmptyCloud, InsufficientLevels, ModelFormatError,
                     RankDeficient, WorkspaceExhausted)

CLOUD_HEADER = ("alpha_x_deg", "alpha_y_deg", "p1_bar", "p2_bar", "p3_bar")
SURFACE_TERMS = ("1", "ax", "ay", "ax2", "axay", "ay2")
POLY_DEGREE = 7
FFMODEL_MAGIC = "ffmodel/1"
DEFAULT_AGR_LEVELS = tuple(round(3.6 + 0.6 * i, 10) for i in range(20))  # 3.6 .. 15.0


class PointCloud:
    """Rows of ``(alpha_x, alpha_y, p1, p2, p3)``; angles in degrees, pressures in bar."""

    def __init__(self, rows):
        rows = np.array(rows, dtype=float)
        if rows.ndim != 2 or rows.shape[1] != 5:
            raise ValueError(f"point cloud rows must have 5 columns, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("point cloud contains non-finite values")
        rows.setflags(write=False)
        self.rows = rows

    def __len__(self):
        return len(self.rows)

    @property
    def tilts(self) -> np.ndarray:
        return self.rows[:, :2]

    @property
    def pressures(self) -> np.ndarray:
        return self.rows[:, 2:]

    @property
    def aggregate(self) -> np.ndarray:
        p = self.rows
        return p[:, 2] + p[:, 3] + p[:, 4]

    def tilt_extent(self):
        t = self.tilts
        return t.min(axis=0), t.max(axis=0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv_text())

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CLOUD_HEADER)
        for r in self.rows.tolist():
            w.writerow([repr(v) for v in r])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path) -> "PointCloud":
        with open(path, newline="") as fh:
            return cls.from_csv_text(fh.read(), source=str(path))

    @classmethod
    def from_csv_text(cls, text: str, source: str = "<cloud>") -> "PointCloud":
        lines = text.splitlines()
        if not lines or tuple(h.strip() for h in lines[0].split(",")) != CLOUD_HEADER:
            raise CloudFormatError(f"{source}: row 1: expected header {','.join(CLOUD_HEADER)}")
        rows = []
        for n, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise CloudFormatError(f"{source}: row {n}: expected 5 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise CloudFormatError(f"{source}: row {n}: non-numeric field in {line!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise CloudFormatError(f"{source}: row {n}: non-finite value")
            if not all(0.0 <= v <= 5.0 for v in vals[2:]):
                raise CloudFormatError(f"{source}: row {n}: pressure outside [0, 5] bar")
            rows.append(vals)
        if not rows:
            raise EmptyCloud(f"{source}: no data rows")
        return cls(rows)


@dataclass(frozen=True)
class LookupTolerances:
    angle_radius: float = 0.25         # deg, anT
    aggregate_radius: float = 0.3      # bar, aggrT
    increment_angle: float = 0.1       # deg
    increment_pressure: float = 0.1    # bar
    acceptable_tol: float = 0.1        # deg

    def __post_init__(self):
        for name in ("angle_radius", "aggregate_radius", "increment_angle",
                     "increment_pressure", "acceptable_tol"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive, got {v}")


def _radius_schedule(start: float, inc: float, reach: float) -> np.ndarray:
    """Radii start, start+inc, ... accumulated by repeated addition until >= reach."""
    out = [start]
    r = start
    while r < reach:
        r = r + inc
        out.append(r)
    return np.array(out)


def _planar_distance(tx, ty, rx, ry):
    dx = tx - rx
    dy = ty - ry
    return np.sqrt(dx * dx + dy * dy)


def lookup_many(refs, p_agr: float, cloud: PointCloud, tol: LookupTolerances = LookupTolerances(),
                chunk: int = 512) -> np.ndarray:
    """Region-search pressures for many reference tilts at one aggregate pressure.

    Returns an (M, 3) array; row ``i`` equals ``lookup_pressures(refs[i], ...)``.
    """
    if len(cloud) == 0:
        raise EmptyCloud("point cloud is empty")
    refs = np.atleast_2d(np.asarray(refs, dtype=float))
    tilts = cloud.tilts
    press = cloud.pressures
    tx, ty = tilts[:, 0], tilts[:, 1]
    agr_dist = np.abs(cloud.aggregate - p_agr)

    # radii never need to exceed the farthest cloud point from any reference
    lo, hi = tilts.min(axis=0), tilts.max(axis=0)
    far = np.max(np.hypot(np.maximum(np.abs(refs[:, 0:1] - [lo[0], hi[0]]).max(1), 0),
                          np.maximum(np.abs(refs[:, 1:2] - [lo[1], hi[1]]).max(1), 0)))
    reach_a = far + tol.increment_angle + tol.angle_radius
    reach_g = float(agr_dist.max()) + tol.increment_pressure
    n_steps = max(math.ceil((reach_a - tol.angle_radius) / tol.increment_angle),
                  math.ceil((reach_g - tol.aggregate_radius) / tol.increment_pressure), 0) + 2
    if not math.isfinite(n_steps) or n_steps > 10_000_000:
        raise WorkspaceExhausted("region radii would exceed the workspace without a hit")
    an = _radius_schedule(tol.angle_radius, tol.increment_angle, tol.angle_radius + n_steps * tol.increment_angle)
    ag = _radius_schedule(tol.aggregate_radius, tol.increment_pressure,
                          tol.aggregate_radius + n_steps * tol.increment_pressure)
    k_len = min(len(an), len(ag))
    an, ag = an[:k_len], ag[:k_len]
    if an[-1] < far or ag[-1] < agr_dist.max():
        raise WorkspaceExhausted("region radii exceed the workspace without a hit")

    kg = np.searchsorted(ag, agr_dist, side="left")
    # upper bound on the stopping step from the best aggregate group
    g_min = int(kg.min())
    best_group = np.nonzero(kg == g_min)[0]
    tree = cKDTree(tilts[best_group])

    out = np.empty((len(refs), 3))
    # process spatially compact tiles so each candidate set stays small
    side = max(float(np.sqrt(chunk)) * 0.05, 0.5)
    keys = np.floor(refs / side)
    _, tile = np.unique(keys, axis=0, return_inverse=True)
    order = np.argsort(tile.ravel(), kind="stable")
    bounds = np.flatnonzero(np.diff(tile.ravel()[order])) + 1
    for rows in np.split(order, bounds):
        r = refs[rows]
        d_nn, _ = tree.query(r, k=1)
        ub = np.minimum(np.maximum(np.searchsorted(an, d_nn, side="left"), g_min) + 1, k_len - 1)
        ub_max = int(ub.max())
        reach = an[ub_max]
        cand = np.nonzero((kg <= ub_max)
                          & (tx >= r[:, 0].min() - reach) & (tx <= r[:, 0].max() + reach)
                          & (ty >= r[:, 1].min() - reach) & (ty <= r[:, 1].max() + reach))[0]
        d = _planar_distance(tx[cand][None, :], ty[cand][None, :], r[:, 0:1], r[:, 1:2])
        k = np.maximum(np.searchsorted(an, d.ravel(), side="left").reshape(d.shape), kg[cand][None, :])
        kstar = k.min(axis=1)
        region = k <= kstar[:, None]
        dm = np.where(region, d, np.inf)
        q = np.argmin(dm, axis=1)
        dq = dm[np.arange(len(r)), q]
        accept = dq <= tol.acceptable_tol
        out[rows[accept]] = press[cand[q[accept]]]
        for i in np.nonzero(~accept)[0]:
            idx = cand[region[i]]
            out[rows[i]] = press[idx].mean(axis=0)
    return out


def lookup_pressures(ref, p_agr: float, cloud: PointCloud,
                     tol: LookupTolerances = LookupTolerances()) -> np.ndarray:
    """Bellows pressures for a reference tilt at a requested aggregate pressure.

    Grows a region around ``(ref, p_agr)`` until it holds at least one cloud
    point, then returns the pressures of the nearest region point if it is
    within ``acceptable_tol`` of the reference, else the region mean.

    Raises
    ------
    EmptyCloud
        If the cloud has no rows.
    """
    return lookup_many([ref], p_agr, cloud, tol)[0]


def reference_lattice(extent: float = 10.0, step: float = 0.05) -> np.ndarray:
    n = int(round(2 * extent / step)) + 1
    return np.round(np.linspace(-extent, extent, n), 12)


class ReferenceGrid(NamedTuple):
    alpha_x: np.ndarray        # (n,) lattice along x
    alpha_y: np.ndarray        # (m,) lattice along y
    pressures: np.ndarray      # (n, m, 3)


def build_reference_grid(p_agr: float, cloud: PointCloud, tol: LookupTolerances = LookupTolerances(),
                         extent: float = 10.0, step: float = 0.05, alpha_x=None, alpha_y=None) -> ReferenceGrid:
    """Region-search pressures over a square lattice of reference tilts."""
    ax = reference_lattice(extent, step) if alpha_x is None else np.asarray(alpha_x, dtype=float)
    ay = reference_lattice(extent, step) if alpha_y is None else np.asarray(alpha_y, dtype=float)
    gx, gy = np.meshgrid(ax, ay, indexing="ij")
    refs = np.column_stack([gx.ravel(), gy.ravel()])
    p = lookup_many(refs, p_agr, cloud, tol)
    return ReferenceGrid(ax, ay, p.reshape(len(ax), len(ay), 3))


def surface_basis(ax, ay) -> np.ndarray:
    ax = np.asarray(ax, dtype=float)
    ay = np.asarray(ay, dtype=float)
    return np.stack([np.ones_like(ax), ax, ay, ax * ax, ax * ay, ay * ay], axis=-1)


def eval_surface(coeffs, ax, ay):
    c = np.asarray(coeffs)
    return (c[..., 0] + c[..., 1] * ax + c[..., 2] * ay
            + c[..., 3] * ax * ax + c[..., 4] * ax * ay + c[..., 5] * ay * ay)


class SurfaceFit(NamedTuple):
    coeffs: np.ndarray     # (6,) in SURFACE_TERMS order
    rms: float


def fit_surface(ax, ay, values) -> SurfaceFit:
    """Least-squares quadratic surface ``c0 + c1 x + c2 y + c3 x^2 + c4 x y + c5 y^2``."""
    ax = np.ravel(np.asarray(ax, dtype=float))
    ay = np.ravel(np.asarray(ay, dtype=float))
    v = np.ravel(np.asarray(values, dtype=float))
    if not (len(ax) == len(ay) == len(v)):
        raise ValueError("ax, ay and values must have the same number of points")
    basis = surface_basis(ax, ay)
    coeffs, _, rank, _ = np.linalg.lstsq(basis, v, rcond=None)
    if rank < 6:
        raise RankDeficient(f"surface design matrix has rank {rank} < 6")
    resid = basis @ coeffs - v
    return SurfaceFit(coeffs, float(np.sqrt(np.mean(resid * resid))))


def fit_grid(grid: ReferenceGrid):
    """Fit all three bellows surfaces of a reference grid: coeffs (3, 6), rms (3,)."""
    gx, gy = np.meshgrid(grid.alpha_x, grid.alpha_y, indexing="ij")
    fits = [fit_surface(gx, gy, grid.pressures[..., i]) for i in range(3)]
    return np.array([f.coeffs for f in fits]), np.array([f.rms for f in fits])


@dataclass(frozen=True, eq=False)
class FFModel:
    """Feed-forward model: 3 bellows x 6 surface terms x degree-7 polynomial.

    Polynomials are in the scaled aggregate pressure
    ``s = (p_agr - mid) / half`` with ``mid``/``half`` taken from
    ``agr_range``; coefficients are stored highest degree first.
    """

    coeffs: np.ndarray                 # (3, 6, 8)
    agr_range: tuple = (3.6, 15.0)
    extent: float = 10.0               # deg, half-width of the fitted tilt square

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.shape != (3, 6, POLY_DEGREE + 1):
            raise ValueError(f"coefficients must have shape (3, 6, 8), got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        lo, hi = float(self.agr_range[0]), float(self.agr_range[1])
        if not lo < hi:
            raise ValueError("agr_range must be increasing")
        object.__setattr__(self, "agr_range", (lo, hi))

    def _scale(self, p):
        lo, hi = self.agr_range
        return (p - 0.5 * (lo + hi)) / (0.5 * (hi - lo))

    def surface_coeffs(self, p_agr: float) -> np.ndarray:
        """(3, 6) surface coefficients at an aggregate pressure (no clamping)."""
        s = self._scale(p_agr)
        c = self.coeffs
        val = c[..., 0]
        for i in range(1, POLY_DEGREE + 1):
            val = val * s + c[..., i]
        return val

    def raw(self, ref, p_agr: float) -> np.ndarray:
        """Unclamped surface values (3,) at a reference tilt and aggregate pressure."""
        return eval_surface(self.surface_coeffs(p_agr), ref[0], ref[1])

    def in_domain(self, ref, p_agr: float) -> bool:
        lo, hi = self.agr_range
        return (lo <= p_agr <= hi) and abs(ref[0]) <= self.extent and abs(ref[1]) <= self.extent

    @classmethod
    def constant(cls, surface_coeffs, agr_range=(3.6, 15.0), extent: float = 10.0) -> "FFModel":
        """Model whose surfaces do not depend on the aggregate pressure."""
        c = np.zeros((3, 6, POLY_DEGREE + 1))
        c[..., -1] = np.asarray(surface_coeffs, dtype=float)
        return cls(c, agr_range, extent)

    def dumps(self) -> str:
        lines = [FFMODEL_MAGIC]
        for b in range(3):
            for t, term in enumerate(SURFACE_TERMS):
                lines.append(f"p{b + 1}.{term} " + " ".join(repr(float(v)) for v in self.coeffs[b, t]))
        lines.append(f"range {self.agr_range[0]!r} {self.agr_range[1]!r}")
        lines.append(f"extent {float(self.extent)!r}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "FFModel":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != FFMODEL_MAGIC:
            raise ModelFormatError(f"line 1: expected magic {FFMODEL_MAGIC!r}")
        expected = [f"p{b + 1}.{t}" for b in range(3) for t in SURFACE_TERMS]
        if len(lines) < 1 + len(expected) + 1:
            raise ModelFormatError("truncated model file")
        coeffs = np.empty((3, 6, POLY_DEGREE + 1))
        for i, label in enumerate(expected):
            parts = lines[1 + i].split()
            if not parts or parts[0] != label:
                raise ModelFormatError(f"line {i + 2}: expected label {label!r}")
            if len(parts) != POLY_DEGREE + 2:
                raise ModelFormatError(f"line {i + 2}: expected {POLY_DEGREE + 1} coefficients")
            try:
                coeffs[i // 6, i % 6] = [float(v) for v in parts[1:]]
            except ValueError:
                raise ModelFormatError(f"line {i + 2}: non-numeric coefficient") from None
        rest = lines[1 + len(expected):]
        rng = rest[0].split()
        if len(rng) != 3 or rng[0] != "range":
            raise ModelFormatError(f"line {len(expected) + 2}: expected 'range <lo> <hi>'")
        extent = 10.0
        if len(rest) > 1:
            ex = rest[1].split()
            if len(ex) != 2 or ex[0] != "extent":
                raise ModelFormatError(f"line {len(expected) + 3}: expected 'extent <deg>'")
            extent = float(ex[1])
        return cls(coeffs, (float(rng[1]), float(rng[2])), extent)

    @classmethod
    def load(cls, path) -> "FFModel":
        with open(path) as fh:
            return cls.loads(fh.read())


def fit_coefficients_over_pressure(levels, extent: float = 10.0):
    """Degree-7 least-squares polynomial per surface coefficient.

    ``levels`` is a sequence of ``(p_agr, coeffs)`` with ``coeffs`` of shape
    (3, 6).  Returns ``(model, track_rms)`` where ``track_rms`` (3, 6) is the
    residual of each polynomial fit.
    """
    p = np.array([lv[0] for lv in levels], dtype=float)
    if len(np.unique(p)) < POLY_DEGREE + 1:
        raise InsufficientLevels(
            f"need at least {POLY_DEGREE + 1} distinct aggregate-pressure levels, got {len(np.unique(p))}")
    y = np.array([np.asarray(lv[1], dtype=float) for lv in levels]).reshape(len(p), 18)
    agr_range = (float(p.min()), float(p.max()))
    lo, hi = agr_range
    s = (p - 0.5 * (lo + hi)) / (0.5 * (hi - lo))
    vander = np.vander(s, POLY_DEGREE + 1)
    sol, _, rank, _ = np.linalg.lstsq(vander, y, rcond=None)
    if rank < POLY_DEGREE + 1:
        raise RankDeficient(f"pressure design matrix has rank {rank}")
    resid = vander @ sol - y
    track_rms = np.sqrt(np.mean(resid * resid, axis=0)).reshape(3, 6)
    coeffs = sol.T.reshape(3, 6, POLY_DEGREE + 1)
    return FFModel(coeffs, agr_range, extent), track_rms


def feedforward(ref, p_agr: float, model: FFModel) -> np.ndarray:
    """Commanded pressures (3,) in bar, clamped to [0, 5].

    An aggregate pressure outside the model's range is clamped into it; use
    :meth:`FFModel.in_domain` to detect extrapolation.
    """
    lo, hi = model.agr_range
    p = min(max(p_agr, lo), hi)
    return np.clip(model.raw(ref, p), 0.0, 5.0)


@dataclass
class FitReport:
    levels: list = field(default_factory=list)           # aggregate pressures
    surface_rms: list = field(default_factory=list)      # per level, (3,)
    track_rms: np.ndarray = None                         # (3, 6)

    def to_dict(self) -> dict:
        return {
            "levels": [float(v) for v in self.levels],
            "surface_rms": [[float(v) for v in r] for r in self.surface_rms],
            "tracks": [
                {"bellows": b + 1, "term": SURFACE_TERMS[t], "rms": float(self.track_rms[b, t])}
                for b in range(3) for t in range(6)
            ],
        }


def build_ffmodel(cloud: PointCloud, levels: Sequence[float] = DEFAULT_AGR_LEVELS,
                  tol: LookupTolerances = LookupTolerances(), extent: float = 10.0,
                  step: float = 0.05):
    """Run the full two-stage calibration. Returns ``(model, report)``."""
    report = FitReport()
    fitted = []
    for p in levels:
        grid = build_reference_grid(p, cloud, tol, extent, step)
        coeffs, rms = fit_grid(grid)
        fitted.append((p, coeffs))
        report.levels.append(p)
        report.surface_rms.append(rms)
    model, track_rms = fit_coefficients_over_pressure(fitted, extent)
    report.track_rms = track_rms
    return model, report
