"""Change of variables following the rigid body, and the transformed operators.

The moving-domain problem is pulled back to the reference configuration
(body centered at the origin) through a flow map X(t, y): the reference
point y is transported by the divergence-free field

    w(s, x) = grad-perp( chi(|x|) psi(s, x) ),
    psi(s, x) = h2'(x1 - h1) - h1'(x2 - h2) + (omega/2) |x - h|^2,

whose stream function psi generates the rigid velocity h' + omega (x-h)-perp.
The radial cutoff chi is 1 on a disk containing the swept body and 0
well inside the outer boundary, so X equals the rigid motion near the
body and the identity near the wall.  The gradient of the map solves
the variational equation d(grad X)/ds = grad w(X) grad X alongside;
both are integrated with a fourth-order Runge-Kutta scheme.

When the trajectory starts away from the centered pose, a smootherstep
ramp over a pseudo-time interval [-t_pre, 0] carries the body from the
centered reference pose to its initial placement, so X(0, .) already
maps reference to initial configuration.

Fields on the reference annulus live on the structured polar lattice of
the mesh; radial and azimuthal derivatives use fourth-order finite
differences (one-sided at the radial ends, periodic in angle), and
Cartesian derivatives follow by the chain rule.  The plain grid
Laplacian is the composition of those first-derivative stencils, so all
transformed operators degenerate to their flat counterparts exactly
when the map is the identity.

Metric conventions: g_lo = (grad X)^T grad X and g_up = its inverse,
computed as (grad X)^{-1} (grad X)^{-T} so that g_lo g_up = I holds to
machine precision.  The Christoffel symbols default to the standard
definition (minus sign on the last derivative); the variant with all
plus signs is available as convention="as_written".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import (FlowIntegrationDiverged, GridMismatch, MarginViolated,
                     SingularMetric)
from .geometry import rotation_matrix

DET_DRIFT_TOL = 1e-6


def smootherstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10.0 + t * (-15.0 + 6.0 * t))


def smootherstep_d1(t):
    t = np.asarray(t, dtype=float)
    out = np.where((t > 0.0) & (t < 1.0), 30.0 * t**2 * (t - 1.0) ** 2, 0.0)
    return float(out) if out.ndim == 0 else out


def smootherstep_d2(t):
    t = np.asarray(t, dtype=float)
    out = np.where((t > 0.0) & (t < 1.0),
                   60.0 * t * (t - 1.0) * (2.0 * t - 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- polar grid
def _deriv_matrix_line(n, h):
    """Fourth-order first-derivative matrix on a line of n >= 5 points."""
    D = np.zeros((n, n))
    c = 1.0 / (12.0 * h)
    for i in range(2, n - 2):
        D[i, i - 2 : i + 3] = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) * c
    D[0, :5] = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) * c
    D[1, :5] = np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) * c
    D[n - 1, n - 5 :] = -np.array([-25.0, 48.0, -36.0, 16.0, -3.0])[::-1] * c
    D[n - 2, n - 5 :] = -np.array([-3.0, -10.0, 18.0, -6.0, 1.0])[::-1] * c
    return D


def _deriv_matrix_periodic(n, h):
    D = np.zeros((n, n))
    c = 1.0 / (12.0 * h)
    for off, coef in ((-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0)):
        D += np.roll(np.eye(n), off, axis=1) * (coef * c)
    return D


class PolarGrid:
    """Structured (n_r+1) x n_phi lattice on the reference annulus.

    Point ordering matches the generated mesh: flat index i * n_phi + j.
    """

    def __init__(self, r, phi):
        self.r = np.asarray(r, dtype=float)
        self.phi = np.asarray(phi, dtype=float)
        if len(self.r) < 5:
            raise GridMismatch("need at least 5 radial layers for the stencils")
        self.n_r = len(self.r) - 1
        self.n_phi = len(self.phi)
        dr = np.diff(self.r)
        if not np.allclose(dr, dr[0], rtol=1e-12, atol=1e-14):
            raise GridMismatch("radial spacing must be uniform")
        self._Dr = _deriv_matrix_line(len(self.r), dr[0])
        self._Dphi = _deriv_matrix_periodic(self.n_phi, 2.0 * np.pi / self.n_phi)
        R, PHI = np.meshgrid(self.r, self.phi, indexing="ij")
        self.R, self.PHI = R, PHI
        self.pts = np.stack([(R * np.cos(PHI)).ravel(),
                             (R * np.sin(PHI)).ravel()], axis=1)
        self._cos, self._sin = np.cos(PHI), np.sin(PHI)
        # trapezoid in r, uniform in phi, against the polar measure r dr dphi
        wr = np.full(len(self.r), dr[0])
        wr[0] = wr[-1] = 0.5 * dr[0]
        self.quad_weights = (wr[:, None] * self.r[:, None]
                             * (2.0 * np.pi / self.n_phi)
                             * np.ones((1, self.n_phi))).ravel()

    @property
    def n_points(self):
        return (self.n_r + 1) * self.n_phi

    @property
    def shape(self):
        return (self.n_r + 1, self.n_phi)

    @classmethod
    def from_mesh(cls, mesh):
        s = mesh.structure
        if s is None:
            raise GridMismatch("mesh was not generated on a structured lattice")
        return cls(s.r, s.phi)

    def check(self, f):
        if f.shape[:2] != self.shape:
            raise GridMismatch(
                f"field shape {f.shape[:2]} does not match grid {self.shape}")

    def from_vertex_values(self, vals):
        vals = np.asarray(vals)
        return vals.reshape(self.shape + vals.shape[1:])

    def flat(self, f):
        return f.reshape((self.n_points,) + f.shape[2:])

    # ------------------------------------------------------------ derivatives
    def dr(self, f):
        return np.einsum("ab,b...->a...", self._Dr, f)

    def dphi(self, f):
        return np.einsum("ab,rb...->ra...", self._Dphi, f)

    def dx(self, f):
        fr, fp = self.dr(f), self.dphi(f)
        shape = (slice(None), slice(None)) + (None,) * (f.ndim - 2)
        return self._cos[shape] * fr - (self._sin / self.R)[shape] * fp

    def dy(self, f):
        fr, fp = self.dr(f), self.dphi(f)
        shape = (slice(None), slice(None)) + (None,) * (f.ndim - 2)
        return self._sin[shape] * fr + (self._cos / self.R)[shape] * fp

    def cart_grad_scalar(self, f):
        return np.stack([self.dx(f), self.dy(f)], axis=-1)

    def cart_grad_vector(self, u):
        """du[..., i, j] = d u_i / d y_j for u shaped (nr, nphi, 2)."""
        self.check(u)
        return np.stack([self.dx(u), self.dy(u)], axis=-1)

    # ----------------------------------------------------------- interpolation
    def interpolation_to(self, pts):
        """Sparse bilinear interpolation (in r, phi) to arbitrary points."""
        pts = np.atleast_2d(pts)
        n = len(pts)
        r = np.clip(np.hypot(pts[:, 0], pts[:, 1]), self.r[0], self.r[-1])
        phi = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2.0 * np.pi)
        dr = self.r[1] - self.r[0]
        dphi = 2.0 * np.pi / self.n_phi
        fi = np.clip((r - self.r[0]) / dr, 0, self.n_r - 1e-12)
        fj = phi / dphi
        i0 = fi.astype(np.int64)
        j0 = np.minimum(fj.astype(np.int64), self.n_phi - 1)
        ti = fi - i0
        tj = fj - j0
        j1 = (j0 + 1) % self.n_phi
        rows = np.repeat(np.arange(n), 4)
        cols = np.stack([
            i0 * self.n_phi + j0, i0 * self.n_phi + j1,
            (i0 + 1) * self.n_phi + j0, (i0 + 1) * self.n_phi + j1,
        ], axis=1).ravel()
        w = np.stack([
            (1 - ti) * (1 - tj), (1 - ti) * tj, ti * (1 - tj), ti * tj,
        ], axis=1).ravel()
        return sp.csr_matrix((w, (rows, cols)), shape=(n, self.n_points))


# ----------------------------------------------------------------- body path
@dataclass
class BodyPath:
    """Physical rigid trajectory samples with velocities, plus an optional
    smootherstep ramp on [-t_pre, 0] from the centered pose to the
    initial placement."""

    times: np.ndarray
    h: np.ndarray
    theta: np.ndarray
    hdot: np.ndarray
    omega: np.ndarray
    t_pre: float = 0.0

    def __post_init__(self):
        for name in ("times", "h", "theta", "hdot", "omega"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.t_pre == 0.0 and (np.abs(self.h[0]).max() > 1e-14
                                  or abs(self.theta[0]) > 1e-14):
            raise FlowIntegrationDiverged(
                "initial pose is off-center but no ramp interval was given")

    def max_radius(self):
        return float(np.abs(np.hypot(self.h[:, 0], self.h[:, 1])).max())

    def eval(self, s):
        """Return (h, hdot, omega) at time s (scalar)."""
        if s < 0.0 and self.t_pre == 0.0:
            s = 0.0  # rounding at the leg boundary
        if s < 0.0:
            x = (s + self.t_pre) / self.t_pre
            sig, dsig = smootherstep(x), smootherstep_d1(x) / self.t_pre
            return (sig * self.h[0], dsig * self.h[0],
                    float(dsig * self.theta[0]))
        t = self.times
        i = int(np.clip(np.searchsorted(t, s, side="right") - 1, 0, len(t) - 2))
        t0, t1 = t[i], t[i + 1]
        dt = t1 - t0
        x = (s - t0) / dt
        h00, h10 = self.h[i], self.h[i + 1]
        v0, v1 = self.hdot[i] * dt, self.hdot[i + 1] * dt
        a = 2 * x**3 - 3 * x**2 + 1
        b = x**3 - 2 * x**2 + x
        c = -2 * x**3 + 3 * x**2
        d = x**3 - x**2
        h = a * h00 + b * v0 + c * h10 + d * v1
        da = (6 * x**2 - 6 * x) / dt
        db = (3 * x**2 - 4 * x + 1) / dt
        dc = (-6 * x**2 + 6 * x) / dt
        dd = (3 * x**2 - 2 * x) / dt
        hdot = da * h00 + db * v0 + dc * h10 + dd * v1
        th_d0, th_d1 = self.omega[i] * dt, self.omega[i + 1] * dt
        omega = (da * self.theta[i] + db * th_d0 + dc * self.theta[i + 1]
                 + dd * th_d1)
        return h, hdot, float(omega)


def rigid_states_from_trajectory(op, traj) -> BodyPath:
    """Physical body path from a transformed-frame trajectory: the solver
    carries l = R_theta^{-1} h', so h' = R_theta l."""
    ell, k = traj.rigid_velocities()
    theta = traj.positions[:, 2]
    hdot = np.einsum("nij,nj->ni", rotation_matrix(theta), ell)
    t_pre = 0.0
    if np.abs(traj.positions[0, :2]).max() > 1e-14 or abs(theta[0]) > 1e-14:
        t_pre = max(0.5 * (traj.times[-1] - traj.times[0]), 1e-2)
    return BodyPath(times=traj.times, h=traj.positions[:, :2], theta=theta,
                    hdot=hdot, omega=k, t_pre=t_pre)


# ------------------------------------------------------------ extension flow
class ExtensionFlow:
    """Divergence-free extension of the rigid motion with analytic gradient.

    The velocity is the perp gradient of chi(|x|) * psi where psi is the
    stream function of the rigid field h' + omega (x-h)^perp.  chi is 1 up
    to the swept radius r0 and 0 beyond r1, so a trajectory that keeps the
    margin flag leaves the control region and the outer wall inside the
    chi = 0 zone.  The cutoff shear scales like 1 / (r1 - r0), and the
    map deformation exponentiates it, so the band should fill as much of
    the free gap as the protected zone allows.
    psi is only defined up to a time-dependent constant; subtracting its
    mean over the band annulus keeps the band velocity proportional to the
    rigid speed instead of to omega * r0^2.
    """

    def __init__(self, path: BodyPath, r_inner, r_outer):
        if not 0.0 < r_inner < r_outer:
            raise FlowIntegrationDiverged("cutoff radii must be ordered")
        self.path = path
        self.r0 = float(r_inner)
        self.r1 = float(r_outer)
        self._mean_sq = 0.5 * (self.r0**2 + self.r1**2)

    def _chi(self, rho):
        x = (rho - self.r0) / (self.r1 - self.r0)
        chi = 1.0 - smootherstep(x)
        d1 = -smootherstep_d1(x) / (self.r1 - self.r0)
        d2 = -smootherstep_d2(x) / (self.r1 - self.r0) ** 2
        return chi, d1, d2

    def _gauge(self, h, hdot, omega):
        # area mean of psi over the band annulus; constant in x, so the
        # rigid zone (grad chi = 0) never sees it
        return (-(hdot[1] * h[0] - hdot[0] * h[1])
                + 0.5 * omega * (self._mean_sq + h[0]**2 + h[1]**2))

    def velocity(self, s, x):
        h, hdot, omega = self.path.eval(s)
        rho = np.hypot(x[:, 0], x[:, 1])
        rho = np.maximum(rho, 1e-14)
        chi, dchi, _ = self._chi(rho)
        rel = x - h
        psi = (hdot[1] * rel[:, 0] - hdot[0] * rel[:, 1]
               + 0.5 * omega * (rel**2).sum(axis=1)
               - self._gauge(h, hdot, omega))
        gpsi = np.stack([hdot[1] + omega * rel[:, 0],
                         -hdot[0] + omega * rel[:, 1]], axis=1)
        xhat = x / rho[:, None]
        gchi = dchi[:, None] * xhat
        gf = psi[:, None] * gchi + chi[:, None] * gpsi
        return np.stack([-gf[:, 1], gf[:, 0]], axis=1)

    def velocity_grad(self, s, x):
        h, hdot, omega = self.path.eval(s)
        rho = np.maximum(np.hypot(x[:, 0], x[:, 1]), 1e-14)
        chi, dchi, d2chi = self._chi(rho)
        rel = x - h
        psi = (hdot[1] * rel[:, 0] - hdot[0] * rel[:, 1]
               + 0.5 * omega * (rel**2).sum(axis=1)
               - self._gauge(h, hdot, omega))
        gpsi = np.stack([hdot[1] + omega * rel[:, 0],
                         -hdot[0] + omega * rel[:, 1]], axis=1)
        xhat = x / rho[:, None]
        gchi = dchi[:, None] * xhat
        outer = np.einsum("ni,nj->nij", xhat, xhat)
        eye = np.eye(2)[None]
        Hchi = d2chi[:, None, None] * outer + (dchi / rho)[:, None, None] * (eye - outer)
        H = (psi[:, None, None] * Hchi
             + np.einsum("ni,nj->nij", gchi, gpsi)
             + np.einsum("ni,nj->nij", gpsi, gchi)
             + (chi * omega)[:, None, None] * eye)
        gw = np.empty_like(H)
        gw[:, 0, 0] = -H[:, 0, 1]
        gw[:, 0, 1] = -H[:, 1, 1]
        gw[:, 1, 0] = H[:, 0, 0]
        gw[:, 1, 1] = H[:, 0, 1]
        return gw

    def substeps(self, x, s0, s1, dt_floor):
        """Resolve the leg so that |grad w| ds stays small; the cutoff
        band makes the gradient equation stiff when the body moves fast."""
        span = abs(s1 - s0)
        if span == 0.0:
            return 1
        rate = 0.0
        for s in (s0, 0.5 * (s0 + s1), s1):
            gw = self.velocity_grad(s, x)
            rate = max(rate, float(np.abs(gw).sum(axis=2).max()))
        return max(1, int(np.ceil(span / dt_floor)),
                   int(np.ceil(span * rate / 0.05)))

    def rk4(self, x, gradx, s0, s1, n_sub):
        """Jointly advance positions and map gradients from s0 to s1."""
        ds = (s1 - s0) / n_sub
        for m in range(n_sub):
            s = s0 + m * ds
            k1 = self.velocity(s, x)
            g1 = np.einsum("nij,njk->nik", self.velocity_grad(s, x), gradx)
            x2 = x + 0.5 * ds * k1
            g2in = gradx + 0.5 * ds * g1
            k2 = self.velocity(s + 0.5 * ds, x2)
            g2 = np.einsum("nij,njk->nik",
                           self.velocity_grad(s + 0.5 * ds, x2), g2in)
            x3 = x + 0.5 * ds * k2
            g3in = gradx + 0.5 * ds * g2
            k3 = self.velocity(s + 0.5 * ds, x3)
            g3 = np.einsum("nij,njk->nik",
                           self.velocity_grad(s + 0.5 * ds, x3), g3in)
            x4 = x + ds * k3
            g4in = gradx + ds * g3
            k4 = self.velocity(s + ds, x4)
            g4 = np.einsum("nij,njk->nik", self.velocity_grad(s + ds, x4), g4in)
            x = x + (ds / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            gradx = gradx + (ds / 6.0) * (g1 + 2 * g2 + 2 * g3 + g4)
        return x, gradx

    def transport(self, pts, s0, s1, dt):
        """Integrate bare points (no gradients) from s0 to s1."""
        pts = np.array(pts, dtype=float)
        n_sub = self.substeps(pts, s0, s1, dt)
        g = np.tile(np.eye(2), (len(pts), 1, 1))
        x, _ = self.rk4(pts, g, s0, s1, n_sub)
        return x


@dataclass
class TransformMaps:
    """Flow map samples on the polar grid at the trajectory times.

    Arrays are grid-shaped: X is (N+1, nr, nphi, 2), gradX and dgradXdt
    are (N+1, nr, nphi, 2, 2); dXdt holds w(t, X).
    """

    grid: PolarGrid
    times: np.ndarray
    X: np.ndarray
    gradX: np.ndarray
    dXdt: np.ndarray
    dgradXdt: np.ndarray
    detgradX: np.ndarray
    flow: Optional[ExtensionFlow] = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def identity(cls, grid, times):
        n = len(times)
        shape = grid.shape
        X = np.tile(grid.pts.reshape(shape + (2,)), (n, 1, 1, 1))
        gX = np.tile(np.eye(2), (n,) + shape + (1, 1))
        zeros = np.zeros((n,) + shape + (2,))
        return cls(grid=grid, times=np.asarray(times), X=X, gradX=gX,
                   dXdt=zeros, dgradXdt=np.zeros_like(gX),
                   detgradX=np.ones((n,) + shape))

    def invert_points(self, n, x_pts, dt=None):
        """Map physical points back to reference by reversing the flow."""
        if self.flow is None:
            return np.array(x_pts, dtype=float)
        t = self.times[n]
        dt = dt or (self.times[1] - self.times[0]) / 4.0
        return self.flow.transport(x_pts, t, -self.flow.path.t_pre, dt)

    def dump_csv(self, path):
        """Write the sampled maps as CSV rows (t, y1, y2, X1, X2, det)."""
        pts = self.grid.pts
        with open(path, "w") as f:
            f.write("t,y1,y2,X1,X2,det\n")
            for n, t in enumerate(self.times):
                Xf = self.X[n].reshape(-1, 2)
                df = self.detgradX[n].reshape(-1)
                for p in range(len(pts)):
                    f.write("%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                            % (t, pts[p, 0], pts[p, 1],
                               Xf[p, 0], Xf[p, 1], df[p]))


def build_extension_flow(times, path: BodyPath, domain, grid: PolarGrid,
                         dt_flow=None) -> TransformMaps:
    """Integrate the extension flow over the ramp and the real trajectory,
    recording maps at each sample time."""
    times = np.asarray(times, dtype=float)
    # densely sampled swept radius (Hermite legs can peak between samples)
    s_dense = np.linspace(-path.t_pre, path.times[-1],
                          16 * max(len(path.times), 4) + 1)
    r_max = max(float(np.hypot(*path.eval(s)[0])) for s in s_dense)
    r_swept = r_max + domain.body.radius
    band = 0.5 * domain.d
    clearance = min(domain.outer.radius, domain.control.r0)
    if r_swept + band > clearance + 1e-12:
        raise MarginViolated(
            f"swept body radius {r_swept:.3f} plus transition band "
            f"{band:.3f} reaches into the protected zone at {clearance:.3f}")
    # soften the cutoff: everything between the swept disk and the
    # protected zone is available, and a wider band means exponentially
    # less metric distortion
    band = max(band, 0.9 * (clearance - r_swept))
    flow = ExtensionFlow(path, r_swept, r_swept + band)
    if dt_flow is None:
        dt_flow = (times[1] - times[0]) / 4.0

    n_t = len(times)
    shape = grid.shape
    X = np.empty((n_t,) + shape + (2,))
    gX = np.empty((n_t,) + shape + (2, 2))
    dXdt = np.empty((n_t,) + shape + (2,))
    dgXdt = np.empty((n_t,) + shape + (2, 2))
    det = np.empty((n_t,) + shape)

    x = grid.pts.copy()
    g = np.tile(np.eye(2), (len(x), 1, 1))
    if path.t_pre > 0.0:
        n_sub = flow.substeps(x, -path.t_pre, 0.0, dt_flow)
        x, g = flow.rk4(x, g, -path.t_pre, 0.0, n_sub)

    def record(n, s, x, g):
        X[n] = x.reshape(shape + (2,))
        gX[n] = g.reshape(shape + (2, 2))
        dXdt[n] = flow.velocity(s, x).reshape(shape + (2,))
        dgXdt[n] = np.einsum("nij,njk->nik", flow.velocity_grad(s, x),
                             g).reshape(shape + (2, 2))
        d = g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] * g[:, 1, 0]
        det[n] = d.reshape(shape)
        if np.abs(d - 1.0).max() > DET_DRIFT_TOL:
            raise FlowIntegrationDiverged(
                f"volume drift {np.abs(d - 1.0).max():.2e} at t={s:.4f}")

    record(0, times[0], x, g)
    for n in range(1, n_t):
        n_sub = flow.substeps(x, times[n - 1], times[n], dt_flow)
        x, g = flow.rk4(x, g, times[n - 1], times[n], n_sub)
        record(n, times[n], x, g)

    maps = TransformMaps(grid=grid, times=times, X=X, gradX=gX, dXdt=dXdt,
                         dgradXdt=dgXdt, detgradX=det, flow=flow)
    # body-tracking fidelity on the inner ring
    yb = grid.pts.reshape(shape + (2,))[0]
    h_n, th_n = path.h[-1], path.theta[-1]
    target = h_n + yb @ rotation_matrix(th_n).T
    maps.meta["body_tracking_error"] = float(
        np.abs(X[-1, 0] - target).max())
    return maps


# ------------------------------------------------------------ metric algebra
@dataclass
class MetricData:
    grid: PolarGrid
    g_lo: np.ndarray
    g_up: np.ndarray
    invgradX: np.ndarray


def metric_tensors(maps: TransformMaps, n) -> MetricData:
    gX = maps.gradX[n]
    det = maps.detgradX[n]
    if np.abs(det).min() < 1e-8:
        raise SingularMetric(f"map gradient degenerates: min |det| = "
                             f"{np.abs(det).min():.2e}")
    inv = np.empty_like(gX)
    inv[..., 0, 0] = gX[..., 1, 1] / det
    inv[..., 0, 1] = -gX[..., 0, 1] / det
    inv[..., 1, 0] = -gX[..., 1, 0] / det
    inv[..., 1, 1] = gX[..., 0, 0] / det
    g_lo = np.einsum("...ki,...kj->...ij", gX, gX)
    g_up = np.einsum("...ik,...jk->...ij", inv, inv)
    return MetricData(grid=maps.grid, g_lo=g_lo, g_up=g_up, invgradX=inv)


def christoffel(met: MetricData, convention="standard"):
    """Gamma[..., k, i, j] from grid derivatives of the covariant metric."""
    grid = met.grid
    dg = np.stack([grid.dx(met.g_lo), grid.dy(met.g_lo)], axis=-1)
    # dg[..., i, j, l] = d g_ij / d y_l
    t1 = np.einsum("...ilj->...ijl", dg)     # d g_il / d y_j
    t2 = np.einsum("...jli->...ijl", dg)     # d g_jl / d y_i
    if convention == "standard":
        combo = t1 + t2 - dg
    elif convention == "as_written":
        combo = t1 + t2 + dg
    else:
        raise ValueError(f"unknown Christoffel convention {convention!r}")
    return 0.5 * np.einsum("...kl,...ijl->...kij", met.g_up, combo)


# ------------------------------------------------------- transformed operators
def laplacian_h(u, grid: PolarGrid):
    """Componentwise composed-stencil Laplacian D1 D1 + D2 D2."""
    grid.check(u)
    return grid.dx(grid.dx(u)) + grid.dy(grid.dy(u))


def gradient_h(p, grid: PolarGrid):
    grid.check(p)
    return np.stack([grid.dx(p), grid.dy(p)], axis=-1)


def apply_L(u, met: MetricData, gam):
    """Transformed Laplacian, divergence form exactly as displayed."""
    grid = met.grid
    grid.check(u)
    du = grid.cart_grad_vector(u)                          # du[...,i,k]
    flux = np.einsum("...jk,...ik->...ij", met.g_up, du)   # g^{jk} d_k u_i
    term1 = grid.dx(flux[..., 0]) + grid.dy(flux[..., 1])
    term2 = 2.0 * np.einsum("...kl,...ijk,...jl->...i", met.g_up, gam, du)
    ggam = np.einsum("...kl,...ijl->...ijk", met.g_up, gam)  # g^{kl} Gam^i_{jl}
    div_ggam = grid.dx(ggam[..., 0]) + grid.dy(ggam[..., 1])
    quad = np.einsum("...kl,...mjl,...ikm->...ij", met.g_up, gam, gam)
    term3 = np.einsum("...ij,...j->...i", div_ggam + quad, u)
    return term1 + term2 + term3


def apply_M(u, maps: TransformMaps, met: MetricData, gam, n):
    """Relative-motion terms built from the map's time derivatives."""
    grid = met.grid
    grid.check(u)
    du = grid.cart_grad_vector(u)
    ydot = -np.einsum("...ij,...j->...i", met.invgradX, maps.dXdt[n])
    term1 = np.einsum("...j,...ij->...i", ydot, du)
    coef = (np.einsum("...ijk,...k->...ij", gam, ydot)
            + np.einsum("...ik,...kj->...ij", met.invgradX, maps.dgradXdt[n]))
    return term1 + np.einsum("...ij,...j->...i", coef, u)


def apply_N(u, grid: PolarGrid, gam):
    """Transformed advection u . grad u plus the curvature correction."""
    grid.check(u)
    du = grid.cart_grad_vector(u)
    term1 = np.einsum("...j,...ij->...i", u, du)
    term2 = np.einsum("...ijk,...j,...k->...i", gam, u, u)
    return term1 + term2


def apply_G(p, met: MetricData):
    grid = met.grid
    grid.check(p)
    dp = np.stack([grid.dx(p), grid.dy(p)], axis=-1)
    return np.einsum("...ij,...j->...i", met.g_up, dp)


def piola_transform(maps: TransformMaps, n, u_physical):
    """Pull a physical velocity field back to the reference frame:
    u(y) = Cof(grad X)^T U(X(y)).  u_physical is a callable pts -> (m, 2).
    With unit determinant the cofactor transpose equals the inverse."""
    grid = maps.grid
    x = maps.X[n].reshape(-1, 2)
    U = np.asarray(u_physical(x))
    gX = maps.gradX[n].reshape(-1, 2, 2)
    det = (gX[:, 0, 0] * gX[:, 1, 1] - gX[:, 0, 1] * gX[:, 1, 0])
    cofT = np.empty_like(gX)
    cofT[:, 0, 0] = gX[:, 1, 1]
    cofT[:, 0, 1] = -gX[:, 0, 1]
    cofT[:, 1, 0] = -gX[:, 1, 0]
    cofT[:, 1, 1] = gX[:, 0, 0]
    u = np.einsum("nij,nj->ni", cofT, U)
    return u.reshape(grid.shape + (2,)), det.reshape(grid.shape)


def piola_push(maps: TransformMaps, n, u):
    """Inverse of the pull-back: values of the physical field at the
    transported points X(y), U(X(y)) = (1/det) grad X u(y)."""
    grid = maps.grid
    grid.check(u)
    gX = maps.gradX[n]
    det = maps.detgradX[n]
    return np.einsum("...ij,...j->...i", gX, u) / det[..., None]
