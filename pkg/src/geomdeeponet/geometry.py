"""Parametric solids, analytic signed distances and interior point sampling.

Sign convention throughout: negative inside the solid, zero on its boundary,
positive outside. All lengths are millimetres, angles degrees.

Two shape families are supported:

* ``BeamWithHole`` -- a rectangular beam (length x fixed height x thickness)
  with a circular through-hole near its right end.
* ``CuboidWithVoid`` -- a cuboid enclosing a rotated spheroidal void; the
  cuboid is the axis-aligned bounding box of the rotated void grown by three
  offsets.

Every SDF function is vectorised: points may be ``(3,)`` or ``(..., 3)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import GeometryError, NumericalError, UsageError

BEAM_HEIGHT = 40.0
HOLE_END_OFFSET = 20.0  # hole centre distance from the beam's right end

ELLIPSOID_MAX_ITER = 64
ELLIPSOID_TOL = 1e-12


class ShapeFamily(str, enum.Enum):
    BEAM = "BeamWithHole"
    CUBOID = "CuboidWithVoid"


# (name, min, max); the last entry of each family is the load parameter.
PARAM_RANGES: dict[ShapeFamily, tuple[tuple[str, float, float], ...]] = {
    ShapeFamily.BEAM: (
        ("length", 80.0, 120.0),
        ("thickness", 15.0, 30.0),
        ("radius", 10.0, 15.0),
        ("pressure", 50.0, 100.0),
    ),
    ShapeFamily.CUBOID: (
        ("r_major", 0.5, 5.0),
        ("r_minor", 0.5, 5.0),
        ("theta_x", 0.0, 90.0),
        ("theta_y", 0.0, 90.0),
        ("theta_z", 0.0, 90.0),
        ("d_x", 1.0, 5.0),
        ("d_y", 1.0, 5.0),
        ("d_z", 1.0, 5.0),
        ("strain_y", 0.001, 0.0015),
    ),
}


def param_names(family: ShapeFamily) -> list[str]:
    return [name for name, _, _ in PARAM_RANGES[ShapeFamily(family)]]


@dataclass(frozen=True)
class DesignParams:
    """Geometric and load parameters of one design.

    ``values`` holds the physical values in the family's canonical order;
    the final entry is the load (pressure in MPa or applied strain).
    """

    family: ShapeFamily
    values: tuple[float, ...]

    def __post_init__(self):
        family = ShapeFamily(self.family)
        object.__setattr__(self, "family", family)
        ranges = PARAM_RANGES[family]
        vals = tuple(float(v) for v in self.values)
        if len(vals) != len(ranges):
            raise UsageError(f"{family.value} needs {len(ranges)} parameters, got {len(vals)}")
        for v, (name, lo, hi) in zip(vals, ranges):
            if not (lo <= v <= hi):
                raise UsageError(f"{name}={v} outside [{lo}, {hi}] for {family.value}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_mapping(cls, family, mapping: Mapping[str, float]) -> "DesignParams":
        family = ShapeFamily(family)
        names = param_names(family)
        missing = set(names) - set(mapping)
        extra = set(mapping) - set(names)
        if missing or extra:
            raise UsageError(
                f"parameter names for {family.value}: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        return cls(family, tuple(mapping[n] for n in names))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(param_names(self.family), self.values))

    def __getitem__(self, name: str) -> float:
        return self.as_dict()[name]

    @property
    def geometric(self) -> np.ndarray:
        return np.array(self.values[:-1])

    @property
    def load(self) -> float:
        return self.values[-1]

    @property
    def normalized(self) -> np.ndarray:
        ranges = PARAM_RANGES[self.family]
        lo = np.array([r[1] for r in ranges])
        hi = np.array([r[2] for r in ranges])
        return (np.array(self.values) - lo) / (hi - lo)

    @property
    def normalized_load(self) -> float:
        return float(self.normalized[-1])

    @property
    def normalized_geometric(self) -> np.ndarray:
        return self.normalized[:-1]

    def as_array(self) -> np.ndarray:
        return np.array(self.values)


def sample_design(family, rng: np.random.Generator) -> DesignParams:
    """Draw every parameter independently and uniformly from its range."""
    family = ShapeFamily(family)
    ranges = PARAM_RANGES[family]
    lo = np.array([r[1] for r in ranges])
    hi = np.array([r[2] for r in ranges])
    u = rng.random(len(ranges))
    return DesignParams(family, tuple(np.minimum(lo + u * (hi - lo), hi)))


# ---------------------------------------------------------------------------
# primitives


def sdf_box(p, half_extents) -> np.ndarray:
    """Exact signed distance to an origin-centred axis-aligned box."""
    half = np.asarray(half_extents, dtype=np.float64)
    if np.any(half <= 0):
        raise UsageError(f"box half extents must be positive, got {half}")
    q = np.abs(np.asarray(p, dtype=np.float64)) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def sdf_cylinder(p, radius: float, axis, center) -> np.ndarray:
    """Signed distance to an infinite circular cylinder."""
    if radius <= 0:
        raise UsageError(f"cylinder radius must be positive, got {radius}")
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    rel = np.asarray(p, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    perp = rel - (rel @ axis)[..., None] * axis
    return np.linalg.norm(perp, axis=-1) - radius


def _ellipsoid_newton(e: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Closest points for rows of ``y`` (all > 0 in the last column).

    ``e`` is sorted descending and ``y`` is non-negative. Solves
    ``sum_i (e_i y_i / (u + d_i))^2 = 1`` for ``u`` with ``d_i = e_i^2 - e_min^2``;
    the function is convex and decreasing on ``u > 0`` so Newton iterates
    clamped to the bracket converge monotonically after the first step.
    """
    d = e * e - e[-1] * e[-1]
    ey = e * y
    u_lo = ey[:, -1]
    u_hi = np.sqrt((ey * ey).sum(axis=1))
    # scaled-radial guess: u such that the last coordinate hits the radial projection
    u = np.clip(e[-1] ** 2 * np.sqrt(((y / e) ** 2).sum(axis=1)), u_lo, u_hi)
    active = np.ones(len(y), dtype=bool)
    for _ in range(ELLIPSOID_MAX_ITER):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        ua = u[idx]
        r = ey[idx] / (ua[:, None] + d)
        f = (r * r).sum(axis=1) - 1.0
        fp = -2.0 * (r * r / (ua[:, None] + d)).sum(axis=1)
        step = f / fp
        un = np.clip(ua - step, u_lo[idx], u_hi[idx])
        done = (np.abs(f) <= ELLIPSOID_TOL) | (np.abs(un - ua) <= 1e-16 * ua)
        u[idx] = un
        active[idx[done]] = False
    if active.any():
        k = int(np.nonzero(active)[0][0])
        raise NumericalError(
            f"ellipsoid closest-point solve did not converge for point {y[k]} "
            f"with semi-axes {e}"
        )
    return (e * e) * y / (u[:, None] + d)


def _closest_degenerate(e: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Closest point when the smallest-axis coordinate is exactly zero."""
    n = len(e)
    if n == 1:
        return e.copy()
    if y[-1] > 0:
        return _ellipsoid_newton(e, y[None, :])[0]
    x = np.zeros(n)
    d = e[:-1] ** 2 - e[-1] ** 2
    if np.all(d > 0) and np.all(e[:-1] * y[:-1] < d):
        xde = e[:-1] * y[:-1] / d
        discr = 1.0 - float((xde * xde).sum())
        if discr > 0:
            x[:-1] = e[:-1] * xde
            x[-1] = e[-1] * np.sqrt(discr)
            return x
    x[:-1] = _closest_degenerate(e[:-1], y[:-1])
    return x


def ellipsoid_closest_point(p, semi_axes) -> np.ndarray:
    """Closest point on an origin-centred, axis-aligned ellipsoid surface."""
    semi = np.asarray(semi_axes, dtype=np.float64)
    if semi.shape != (3,) or np.any(semi <= 0):
        raise UsageError(f"ellipsoid semi-axes must be three positive numbers, got {semi_axes}")
    pts = np.asarray(p, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    order = np.argsort(-semi, kind="stable")
    e = semi[order]
    y = np.abs(flat[:, order])
    x = np.empty_like(y)
    general = y[:, -1] > 0
    if general.any():
        x[general] = _ellipsoid_newton(e, y[general])
    for k in np.nonzero(~general)[0]:
        x[k] = _closest_degenerate(e, y[k])
    out = np.empty_like(x)
    out[:, order] = x
    out = np.copysign(out, flat)
    return out.reshape(pts.shape)


def sdf_ellipsoid(p, semi_axes) -> np.ndarray:
    """Euclidean signed distance to an axis-aligned ellipsoid centred at the origin."""
    semi = np.asarray(semi_axes, dtype=np.float64)
    pts = np.asarray(p, dtype=np.float64)
    closest = ellipsoid_closest_point(pts, semi)
    dist = np.linalg.norm(pts - closest, axis=-1)
    level = ((pts / semi) ** 2).sum(axis=-1)
    return np.where(level < 1.0, -dist, dist)


def _rx(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix_xyz(theta_x: float, theta_y: float, theta_z: float) -> np.ndarray:
    """Extrinsic X-Y-Z rotation (degrees): ``Rz @ Ry @ Rx``."""
    tx, ty, tz = np.radians([theta_x, theta_y, theta_z])
    return _rz(tz) @ _ry(ty) @ _rx(tx)


def rotate_extrinsic_xyz(p, theta_x: float, theta_y: float, theta_z: float, inverse: bool = False):
    """Rotate points about the fixed X, then Y, then Z axes.

    With ``inverse=True`` applies the transpose, mapping world points into
    the rotated body's local frame.
    """
    R = rotation_matrix_xyz(theta_x, theta_y, theta_z)
    if inverse:
        R = R.T
    return np.asarray(p, dtype=np.float64) @ R.T


# ---------------------------------------------------------------------------
# family solids


@dataclass(frozen=True)
class Solid:
    """A box minus a void, resolved from design parameters."""

    params: DesignParams
    half_extents: np.ndarray

    @property
    def family(self) -> ShapeFamily:
        return self.params.family

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return -self.half_extents, self.half_extents.copy()

    @property
    def box_volume(self) -> float:
        return float(np.prod(2.0 * self.half_extents))

    # overridden per family
    def void_sdf(self, p) -> np.ndarray:
        raise NotImplementedError

    def void_volume(self) -> float:
        raise NotImplementedError

    @property
    def volume(self) -> float:
        return self.box_volume - self.void_volume()

    def sdf(self, p) -> np.ndarray:
        return np.maximum(sdf_box(p, self.half_extents), -self.void_sdf(p))


@dataclass(frozen=True)
class BeamSolid(Solid):
    radius: float = 0.0
    hole_center: np.ndarray = None

    def void_sdf(self, p):
        return sdf_cylinder(p, self.radius, (0.0, 0.0, 1.0), self.hole_center)

    def void_volume(self) -> float:
        return float(np.pi * self.radius**2 * 2.0 * self.half_extents[2])


@dataclass(frozen=True)
class CuboidSolid(Solid):
    semi_axes: np.ndarray = None
    rotation: np.ndarray = None

    def void_sdf(self, p):
        local = np.asarray(p, dtype=np.float64) @ self.rotation  # R^T p for row vectors
        return sdf_ellipsoid(local, self.semi_axes)

    def void_volume(self) -> float:
        return float(4.0 / 3.0 * np.pi * np.prod(self.semi_axes))


def make_solid(d: DesignParams) -> Solid:
    v = d.as_dict()
    if d.family is ShapeFamily.BEAM:
        half = np.array([v["length"] / 2.0, BEAM_HEIGHT / 2.0, v["thickness"] / 2.0])
        center = np.array([half[0] - HOLE_END_OFFSET, 0.0, 0.0])
        return BeamSolid(d, half, radius=v["radius"], hole_center=center)
    # spheroid from revolving the (major, minor) section about its major axis
    semi = np.array([v["r_major"], v["r_minor"], v["r_minor"]])
    R = rotation_matrix_xyz(v["theta_x"], v["theta_y"], v["theta_z"])
    void_half = np.sqrt(((R * semi) ** 2).sum(axis=1))
    half = void_half + np.array([v["d_x"], v["d_y"], v["d_z"]])
    return CuboidSolid(d, half, semi_axes=semi, rotation=R)


def sdf_family(p, d: DesignParams) -> np.ndarray:
    """Signed distance of points to the solid described by ``d``.

    CSG difference ``max(box, -void)``: exact away from the curve where the
    two primitive surfaces meet, conservative near it.
    """
    return make_solid(d).sdf(p)


def sample_interior(
    d: DesignParams,
    n: int,
    rng: np.random.Generator,
    window: int = 100_000,
    min_acceptance: float = 1e-4,
) -> tuple[np.ndarray, np.ndarray]:
    """Rejection-sample ``n`` points uniformly inside the solid.

    Proposals are uniform over the solid's exact bounding box. Returns
    ``(points, sdf)`` with shapes ``(n, 3)`` and ``(n,)``.
    """
    if n < 1:
        raise UsageError(f"need at least one point, got n={n}")
    solid = make_solid(d)
    lo, hi = solid.bounds
    batch = max(2 * n, 1024)
    pts, vals = [], []
    have = 0
    proposed = accepted_in_window = proposed_in_window = 0
    while have < n:
        cand = lo + rng.random((batch, 3)) * (hi - lo)
        s = solid.sdf(cand)
        keep = s <= 0.0
        k = int(keep.sum())
        pts.append(cand[keep])
        vals.append(s[keep])
        have += k
        proposed += batch
        proposed_in_window += batch
        accepted_in_window += k
        if proposed_in_window >= window:
            if accepted_in_window / proposed_in_window < min_acceptance:
                raise GeometryError(
                    f"acceptance rate {accepted_in_window / proposed_in_window:.2e} "
                    f"below {min_acceptance:g} for {d}"
                )
            proposed_in_window = accepted_in_window = 0
    return np.concatenate(pts)[:n], np.concatenate(vals)[:n]
