"""Reference geometry, rigid placements, and collision-margin bookkeeping.

The reference configuration keeps the body's center of gravity at the
origin of the outer domain.  A placement (h, theta) maps a reference
point y to h + R_theta y.  Boundaries are sampled as polylines for
distance computations (point-to-segment minimization); disks carry
analytic normals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PlacementOutsideDomain

TWO_PI = 2.0 * np.pi


def rotation_matrix(theta):
    """Rotation matrix of angle theta.

    Parameters
    ----------
    theta : float or ndarray
        Rotation angle in radians.  Array input yields a stacked
        (..., 2, 2) result.

    Returns
    -------
    ndarray
        [[cos t, -sin t], [sin t, cos t]], determinant one.
    """
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    out = np.empty(theta.shape + (2, 2))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    return out


def perp(a):
    """Counterclockwise quarter turn: a -> (-a2, a1).

    Works on a single vector (2,) or a stack (..., 2).
    """
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    out[..., 0] = -a[..., 1]
    out[..., 1] = a[..., 0]
    return out


def _wrap_angle(phi):
    # wrap to (-pi, pi]
    return np.mod(np.asarray(phi) + np.pi, TWO_PI) - np.pi


def _point_segment_distance(pts, seg_a, seg_b):
    """Min distance from each point to each segment, shape (n_pts, n_seg)."""
    pts = np.atleast_2d(pts)
    d = seg_b - seg_a
    L2 = np.maximum((d * d).sum(axis=1), 1e-300)
    ap = pts[:, None, :] - seg_a[None, :, :]
    t = np.clip((ap * d[None]).sum(axis=-1) / L2[None], 0.0, 1.0)
    proj = seg_a[None] + t[..., None] * d[None]
    diff = pts[:, None, :] - proj
    return np.sqrt((diff * diff).sum(axis=-1))


class DiskShape:
    """Disk with analytic boundary normals.

    Parameters
    ----------
    radius : float
    center : pair of float, optional
    """

    def __init__(self, radius, center=(0.0, 0.0)):
        if radius <= 0:
            raise ValueError("disk radius must be positive")
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float)

    def boundary_points(self, n=512):
        phi = np.linspace(0.0, TWO_PI, n, endpoint=False)
        return self.center + self.radius * np.stack([np.cos(phi), np.sin(phi)], axis=1)

    def outward_normals(self, points):
        v = np.atleast_2d(points) - self.center
        r = np.linalg.norm(v, axis=1, keepdims=True)
        return v / np.maximum(r, 1e-300)

    def contains(self, points):
        v = np.atleast_2d(points) - self.center
        return (v * v).sum(axis=1) < self.radius**2

    def signed_distance(self, points):
        """Positive outside, negative inside."""
        v = np.atleast_2d(points) - self.center
        return np.sqrt((v * v).sum(axis=1)) - self.radius


class AnnularSector:
    """Open annular sector r in (r0, r1), |phi - phi_c| < half_width."""

    def __init__(self, r0, r1, half_width, phi_center=0.0):
        if not (0 < r0 < r1):
            raise ValueError("need 0 < r0 < r1")
        if not (0 < half_width <= np.pi):
            raise ValueError("need 0 < half_width <= pi")
        self.r0 = float(r0)
        self.r1 = float(r1)
        self.half_width = float(half_width)
        self.phi_center = float(phi_center)

    def contains(self, points):
        pts = np.atleast_2d(points)
        r = np.hypot(pts[:, 0], pts[:, 1])
        phi = _wrap_angle(np.arctan2(pts[:, 1], pts[:, 0]) - self.phi_center)
        return (r > self.r0) & (r < self.r1) & (np.abs(phi) < self.half_width)

    def shrink(self, factor):
        """Concentric sector scaled by ``factor`` in radial span and width."""
        if not (0 < factor < 1):
            raise ValueError("shrink factor must be in (0,1)")
        rm = 0.5 * (self.r0 + self.r1)
        dr = 0.5 * (self.r1 - self.r0) * factor
        return AnnularSector(rm - dr, rm + dr, self.half_width * factor, self.phi_center)

    def outline_points(self, n_arc=256, n_side=64):
        """Closed boundary polyline: inner arc, side, outer arc, side."""
        a, b = self.phi_center - self.half_width, self.phi_center + self.half_width
        phi = np.linspace(a, b, n_arc)
        inner = self.r0 * np.stack([np.cos(phi), np.sin(phi)], axis=1)
        outer = self.r1 * np.stack([np.cos(phi[::-1]), np.sin(phi[::-1])], axis=1)
        t = np.linspace(self.r0, self.r1, n_side)[:, None]
        side_b = t * np.array([np.cos(b), np.sin(b)])[None]
        side_a = t[::-1] * np.array([np.cos(a), np.sin(a)])[None]
        return np.concatenate([inner, side_b, outer, side_a], axis=0)


@dataclass
class RigidState:
    """Body placement and velocity.

    h, theta give the placement; ell is the linear velocity expressed in
    the body-aligned frame (ell = R_theta^{-1} h') and omega the angular
    velocity.
    """

    h: np.ndarray
    theta: float
    ell: np.ndarray
    omega: float

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float).reshape(2)
        self.ell = np.asarray(self.ell, dtype=float).reshape(2)
        self.theta = float(self.theta)
        self.omega = float(self.omega)
        vals = np.concatenate([self.h, self.ell, [self.theta, self.omega]])
        if not np.all(np.isfinite(vals)):
            raise ValueError("rigid state entries must be finite")


@dataclass
class PhysicalParams:
    """Fluid viscosity, body inertia, and boundary friction coefficients.

    beta_S must be strictly positive for any control computation (a
    frictionless disk has an unobservable rotation mode); zero is
    accepted at construction so the diagnostic tests can exhibit
    exactly that degeneracy.
    """

    nu: float
    m: float
    J: float
    beta_Omega: float = 0.0
    beta_S: float = 1.0

    def __post_init__(self):
        if self.nu <= 0 or self.m <= 0 or self.J <= 0:
            raise ValueError("nu, m, J must be positive")
        if self.beta_Omega < 0 or self.beta_S < 0:
            raise ValueError("friction coefficients must be nonnegative")

    def require_body_friction(self):
        if self.beta_S <= 0:
            raise ValueError(
                "beta_S = 0: rigid rotation of a disk is unobservable; "
                "control requires strictly positive body friction"
            )


@dataclass
class Domain:
    """Reference geometry bundle.

    d is the distance from the reference body to the boundary of
    Omega minus the closed control region, computed at construction;
    c_geom is max |y| over sampled body boundary points and scales the
    rotation term in the smallness bound.
    """

    outer: DiskShape
    body: DiskShape
    control: AnnularSector
    eta_core: AnnularSector
    d: float = field(default=0.0)
    c_geom: float = field(default=0.0)
    _obstacle_a: np.ndarray = field(default=None, repr=False)
    _obstacle_b: np.ndarray = field(default=None, repr=False)

    @classmethod
    def build(cls, outer, body, control, shrink_factor=0.7, n_margin_samples=10_000):
        if np.any(body.center != 0.0):
            raise ValueError("reference body must be centered at the origin")
        core = control.shrink(shrink_factor)
        dom = cls(outer=outer, body=body, control=control, eta_core=core)
        outline = np.concatenate(
            [outer.boundary_points(2048), control.outline_points(512, 128)], axis=0
        )
        # closed polylines -> segments (wrap last to first within each part)
        n_out = 2048
        a1, b1 = outline[:n_out], np.roll(outline[:n_out], -1, axis=0)
        a2, b2 = outline[n_out:], np.roll(outline[n_out:], -1, axis=0)
        dom._obstacle_a = np.concatenate([a1, a2], axis=0)
        dom._obstacle_b = np.concatenate([b1, b2], axis=0)
        samples = body.boundary_points(n_margin_samples)
        dom.c_geom = float(np.max(np.linalg.norm(samples, axis=1)))
        dom.d = float(
            _point_segment_distance(
                body.boundary_points(1024), dom._obstacle_a, dom._obstacle_b
            ).min()
        )
        if dom.d <= 0:
            raise ValueError("control region or outer boundary touches the body")
        if not np.all(control.contains(core.outline_points(64, 16))):
            raise ValueError("eta core must be strictly inside the control region")
        return dom


def benchmark_domain(shrink_factor=0.7):
    """Frozen desk-scale geometry: unit disk, body disk r=0.2, sector control region."""
    return Domain.build(
        outer=DiskShape(1.0),
        body=DiskShape(0.2),
        control=AnnularSector(0.45, 0.80, 1.05),
        shrink_factor=shrink_factor,
    )


@dataclass
class PlacedBody:
    points: np.ndarray
    normals: np.ndarray
    h: np.ndarray
    theta: float


def place_body(domain, h, theta, n=512):
    """Place the body at (h, theta): y -> h + R_theta y.

    Returns sampled boundary points with outward normals.  Raises
    PlacementOutsideDomain if any sample leaves the outer domain.
    """
    h = np.asarray(h, dtype=float).reshape(2)
    R = rotation_matrix(theta)
    ref = domain.body.boundary_points(n)
    pts = h + ref @ R.T
    nrm = domain.body.outward_normals(ref) @ R.T
    if np.any(domain.outer.signed_distance(pts) >= 0.0):
        raise PlacementOutsideDomain(
            f"body placed at h={h.tolist()}, theta={theta:g} crosses the outer boundary"
        )
    return PlacedBody(points=pts, normals=nrm, h=h, theta=float(theta))


def structure_velocity(state, x, frame="physical"):
    """Rigid velocity field of the body.

    physical frame: h' + omega (x - h)^perp with h' = R_theta ell;
    reference frame: ell + omega y^perp.
    """
    x = np.asarray(x, dtype=float)
    if frame == "physical":
        hp = rotation_matrix(state.theta) @ state.ell
        return hp + state.omega * perp(x - state.h)
    if frame == "reference":
        return state.ell + state.omega * perp(x)
    raise ValueError(f"unknown frame {frame!r}")


@dataclass
class MarginReport:
    margin: float
    flag: bool
    smallness_lhs: float
    smallness_bound: float


def collision_margin(domain, h, theta, n=512):
    """Distance from the placed body to the boundary of Omega minus the control region.

    The flag combines the d/2 margin requirement with the sampled
    smallness bound |h| + c_geom |R_theta - I|_F <= d/2 that guarantees
    it independently of direction.
    """
    h = np.asarray(h, dtype=float).reshape(2)
    R = rotation_matrix(theta)
    pts = h + domain.body.boundary_points(n) @ R.T
    margin = float(
        _point_segment_distance(pts, domain._obstacle_a, domain._obstacle_b).min()
    )
    lhs = float(np.linalg.norm(h) + domain.c_geom * np.linalg.norm(R - np.eye(2)))
    bound = 0.5 * domain.d
    return MarginReport(
        margin=margin,
        flag=bool(margin >= bound and lhs <= bound),
        smallness_lhs=lhs,
        smallness_bound=bound,
    )
