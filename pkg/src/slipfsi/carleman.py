"""Observability weight machinery: base profile, weight family, probes.

The observability argument runs on exponential space-time weights built
from a base profile eta on the fluid annulus.  eta vanishes on both
boundary circles, is positive inside, has inward-pointing boundary
gradient, and its only critical points sit inside a designated core
sector of the control region.  From eta and (lam, s, N, T) the weight
family is

    beta(t,y)  = (e^{lam(2N+2)} - e^{lam(2N + eta(y))}) / (t(T-t))^N
    xi(t,y)    = e^{lam(2N + eta(y))} / (t(T-t))^N

with hatted/starred variants taking the extremes over y, and the time
weights rho, rho_1..rho_4 are exponentials of s beta-hat frozen at
their t = T/2 values on the first half interval.  At representative
parameters the raw rho values underflow double precision, so every
derived quantity is exposed in log space and the normalized variants
rho_i(t)/rho_i(T/2) are the objects meant for downstream use.

The probes integrate both sides of three weighted inequalities (a heat
inequality, a stationary divergence-free Laplacian inequality, and the
full coupled-system inequality) and report per-term values plus the
left/right ratio.  Probe constants are non-constructive in the source
estimates; calibration finds the smallest scale s where the ratio dips
below one and freezes it per mesh as a regression value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EtaConstructionFailed,
    OverflowGuard,
    QuadratureUnderflow,
)

MAX_EXP = 700.0             # exp() overflow guard threshold
ETA_GRAD_FLOOR = 1e-3       # min |grad eta| outside the core, after scaling


@dataclass(frozen=True)
class CarlemanParams:
    """Weight sharpness lam, scale s, time exponent N, horizon T."""

    lam: float
    s: float
    N: int
    T: float

    def __post_init__(self):
        if not self.lam > 1.0:
            raise ValueError("lam must exceed 1")
        if not self.s > 1.0:
            raise ValueError("s must exceed 1")
        if int(self.N) != self.N or self.N < 4:
            raise ValueError("N must be an integer >= 4")
        if not self.T > 0.0:
            raise ValueError("T must be positive")
        object.__setattr__(self, "N", int(self.N))


def _smootherstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u**3 * (10.0 + u * (6.0 * u - 15.0))


def _smootherstep_d(u):
    u = np.clip(u, 0.0, 1.0)
    return 30.0 * u**2 * (1.0 - u) ** 2


class EtaField:
    """Base weight profile on the annulus.

    Radial part: the radially symmetric solution of -Lap eta0 = 1 with
    eta0 = 0 on both circles,

        eta0(r) = A + c1 ln r - r^2 / 4.

    Its critical ring r = sqrt(2 c1) would violate the gradient floor
    everywhere along it, so the profile is modulated by a positive C^2
    angular weight w(phi) whose only critical angles are +-phi_c inside
    the core sector; the product then has exactly one interior maximum
    and one saddle, both at radius sqrt(2 c1) and angle +-phi_c, i.e.
    inside the core.  The descent from the maximum is front loaded:
    most of the angular drop completes within a head fraction of the
    long arc (still inside the core), which makes the exponential
    weights concentrate sharply into the core as the scale grows; a
    slow strictly monotone tail keeps the gradient floor positive on
    the rest of the arc.  Scaled so the sup norm is one.
    """

    def __init__(self, mesh, core, r_in, r_out, amp, phi_c, phi_center,
                 head=1.0, tail=0.0, bump_amp=0.0, bump_width=1.0):
        self.mesh = mesh
        self.core = core
        self.r_in = float(r_in)
        self.r_out = float(r_out)
        self.amp = float(amp)
        self.phi_c = float(phi_c)
        self.phi_center = float(phi_center)
        self.head = float(head)
        self.tail = float(tail)
        self.bump_amp = float(bump_amp)
        self.bump_width = float(bump_width)
        self.c1 = (r_out**2 - r_in**2) / (4.0 * math.log(r_out / r_in))
        self.A = r_out**2 / 4.0 - self.c1 * math.log(r_out)
        self.r_crit = math.sqrt(2.0 * self.c1)
        # sup of radial * w, attained at the critical radius and max angle
        top = self._radial(np.array([self.r_crit]))[0]
        self.scale = 1.0 / (top * (1.0 + amp))
        self.norm_inf = 1.0
        self.values = self.eval(mesh.vertices)
        self.gradients = self.grad(mesh.vertices)
        self.grad_floor = 0.0
        self.meta: dict = {}

    def _poisson(self, r):
        return self.A + self.c1 * np.log(r) - 0.25 * r**2

    def _bump(self, r):
        z = (r - self.r_crit) / self.bump_width
        return np.exp(-0.5 * z**2)

    def _radial(self, r):
        """Poisson profile sharpened around its critical ring.

        The Gaussian factor peaks exactly at the ring, so the ring
        stays the only radial critical locus while the profile falls
        off fast enough around it for the exponential weights to
        concentrate at moderate scales.
        """
        return self._poisson(r) * (1.0 + self.bump_amp * self._bump(r))

    def _radial_d(self, r):
        g = self._bump(r)
        dg = -(r - self.r_crit) / self.bump_width**2 * g
        return ((self.c1 / r - 0.5 * r) * (1.0 + self.bump_amp * g)
                + self._poisson(r) * self.bump_amp * dg)

    def _long_arc(self, v):
        """Drop profile on the long arc and its derivative in v.

        Two smootherstep scales: the head completes a 1 - tail share of
        the descent by v = head, the tail spreads the rest over the
        whole arc.  Both pieces have vanishing first and second
        derivatives at the junctions, so the glued profile stays C^2
        and strictly decreasing inside the arc.
        """
        u = np.clip(v / self.head, 0.0, 1.0)
        B = (1.0 - self.tail) * _smootherstep(u) + self.tail * _smootherstep(v)
        dB = np.where(v < self.head,
                      (1.0 - self.tail) * _smootherstep_d(u) / self.head,
                      0.0) + self.tail * _smootherstep_d(v)
        return B, dB

    def _angular(self, phi):
        psi = np.mod(phi - self.phi_center + np.pi, 2.0 * np.pi) - np.pi
        w = np.empty_like(psi)
        dw = np.empty_like(psi)
        short = np.abs(psi) <= self.phi_c
        u = (psi[short] + self.phi_c) / (2.0 * self.phi_c)
        w[short] = 1.0 - self.amp + 2.0 * self.amp * _smootherstep(u)
        dw[short] = self.amp * _smootherstep_d(u) / self.phi_c
        far = ~short
        span = 2.0 * np.pi - 2.0 * self.phi_c
        v = (np.mod(psi[far] - self.phi_c, 2.0 * np.pi)) / span
        B, dB = self._long_arc(v)
        w[far] = 1.0 + self.amp - 2.0 * self.amp * B
        dw[far] = -2.0 * self.amp * dB / span
        return w, dw

    def eval(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        r = np.hypot(pts[:, 0], pts[:, 1])
        r = np.clip(r, self.r_in, self.r_out)
        phi = np.arctan2(pts[:, 1], pts[:, 0])
        w, _ = self._angular(phi)
        return self.scale * self._radial(r) * w

    def grad(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        r = np.hypot(pts[:, 0], pts[:, 1])
        r = np.clip(r, self.r_in, self.r_out)
        phi = np.arctan2(pts[:, 1], pts[:, 0])
        w, dw = self._angular(phi)
        d_r = self._radial_d(r) * w
        d_phi = self._radial(r) * dw / r
        er = np.stack([np.cos(phi), np.sin(phi)], axis=1)
        ephi = np.stack([-np.sin(phi), np.cos(phi)], axis=1)
        return self.scale * (d_r[:, None] * er + d_phi[:, None] * ephi)


def _quad_points(mesh):
    """Triangle quadrature nodes and weights of the assembly rule."""
    from .fsi_core import TRI_QP, TRI_QW

    tp = mesh.vertices[mesh.triangles]
    qp = np.einsum("qi,eic->eqc", TRI_QP, tp).reshape(-1, 2)
    qw = (mesh.areas[:, None] * TRI_QW[None, :]).ravel()
    return qp, qw


def build_eta(domain, mesh, grad_floor=ETA_GRAD_FLOOR, max_rounds=10):
    """Construct the base profile and verify its defining conditions.

    The radial Poisson profile alone carries a full ring of critical
    points; each repair round increases the angular modulation until
    the scan of |grad eta| over quadrature points outside the core
    clears the floor.  Raises EtaConstructionFailed when the rounds are
    exhausted or when a structural precondition fails (critical radius
    outside the core's radial span, boundary slope of the wrong sign).
    """
    core = domain.eta_core
    r_in, r_out = domain.body.radius, domain.outer.radius
    c1 = (r_out**2 - r_in**2) / (4.0 * math.log(r_out / r_in))
    r_crit = math.sqrt(2.0 * c1)
    if not (core.r0 < r_crit < core.r1):
        raise EtaConstructionFailed(
            f"critical radius {r_crit:.3f} outside the core span "
            f"({core.r0:.3f}, {core.r1:.3f}); repair cannot relocate it"
        )
    phi_c = 0.45 * core.half_width
    span = 2.0 * np.pi - 2.0 * phi_c
    # fast descent finishes inside the core's angular extent
    head = 0.8 * (core.half_width - phi_c) / span
    tail = 0.25
    # sharpen the radial peak on the scale of the core's inner margin
    bump_width = r_crit - core.r0
    bump_amp = 0.3

    qp, _ = _quad_points(mesh)
    scan = np.concatenate([qp, mesh.vertices], axis=0)
    outside = ~core.contains(scan)

    amp = 0.1
    for round_no in range(max_rounds):
        eta = EtaField(mesh, core, r_in, r_out, amp, phi_c, core.phi_center,
                       head=head, tail=tail,
                       bump_amp=bump_amp, bump_width=bump_width)
        floor = float(np.linalg.norm(eta.grad(scan[outside]), axis=1).min())
        if floor >= grad_floor:
            eta.grad_floor = floor
            eta.meta = {"repair_rounds": round_no + 1, "amplitude": amp,
                        "phi_c": phi_c, "head": head, "tail": tail,
                        "bump_amp": bump_amp, "bump_width": bump_width,
                        "grad_floor": floor}
            break
        amp = min(1.5 * amp, 0.75)
    else:
        raise EtaConstructionFailed(
            f"gradient floor {floor:.2e} below {grad_floor:.2e} after "
            f"{max_rounds} repair rounds"
        )

    # boundary conditions: zero trace and strictly inward slope
    bpts = mesh.vertices[np.unique(mesh.boundary_edges)]
    if np.abs(eta.eval(bpts)).max() > 1e-10:
        raise EtaConstructionFailed("eta does not vanish on the boundary")
    slope = np.einsum("ec,ec->e", eta.grad(mesh.edge_mid), mesh.edge_nrm)
    if slope.max() >= 0.0:
        raise EtaConstructionFailed("boundary slope of eta is not negative")
    eta.meta["boundary_slope_max"] = float(slope.max())
    return eta


class WeightSet:
    """All weights derived from (params, eta), with log-space access.

    Raw rho values underflow at representative parameters, so the
    invariant checks and all downstream consumers work with the log
    values; rho3_tilde and friends are the normalized representable
    variants, equal to one on [0, T/2].
    """

    def __init__(self, params: CarlemanParams, eta: EtaField):
        self.params = params
        self.eta = eta
        lam, N = params.lam, params.N
        if lam * (2 * N + 2) > MAX_EXP:
            raise OverflowGuard(
                f"lam (2N+2) = {lam * (2 * N + 2):.1f} exceeds the "
                "representable exponent range; rescale lam or N"
            )
        self.e_top = math.exp(lam * (2 * N + 2))
        self.e_lo = math.exp(lam * 2 * N)          # eta = 0
        self.e_hi = math.exp(lam * (2 * N + 1))    # eta = sup = 1
        self.K_hat = self.e_top - self.e_lo
        self.K_star = self.e_top - self.e_hi

    # ------------------------------------------------------------ time factor
    def _tf(self, t):
        t = np.asarray(t, dtype=float)
        return np.maximum(t * (self.params.T - t), 0.0) ** self.params.N

    def _inv_tf(self, t):
        tf = self._tf(t)
        with np.errstate(divide="ignore"):
            return np.where(tf > 0.0, 1.0 / np.maximum(tf, 1e-300), np.inf)

    def _frozen(self, t):
        return np.maximum(np.asarray(t, dtype=float), 0.5 * self.params.T)

    # ------------------------------------------------------- pointwise weights
    def beta(self, t, eta_vals):
        num = self.e_top - np.exp(
            self.params.lam * (2 * self.params.N + np.asarray(eta_vals)))
        return num * self._inv_tf(t)

    def beta_hat(self, t):
        return self.K_hat * self._inv_tf(t)

    def beta_star(self, t):
        return self.K_star * self._inv_tf(t)

    def beta_hat_prime(self, t):
        t = np.asarray(t, dtype=float)
        T, N = self.params.T, self.params.N
        u = np.maximum(t * (T - t), 0.0)
        with np.errstate(divide="ignore"):
            inv = np.where(u > 0.0, 1.0 / np.maximum(u, 1e-300), np.inf)
        return -N * self.K_hat * (T - 2.0 * t) * inv ** (N + 1)

    def xi(self, t, eta_vals):
        e = np.exp(self.params.lam * (2 * self.params.N + np.asarray(eta_vals)))
        return e * self._inv_tf(t)

    def xi_star(self, t):
        return self.e_lo * self._inv_tf(t)

    def xi_hat(self, t):
        return self.e_hi * self._inv_tf(t)

    # ------------------------------------------------------------ time weights
    def rho(self, t):
        with np.errstate(over="ignore"):
            return np.exp(-1.5 * self.params.s * self.beta_hat(t))

    def log_rho1(self, t):
        s, lam = self.params.s, self.params.lam
        tf = self._frozen(t)
        bh = self.beta_hat(tf)
        # the power-law blow-up of beta always beats the log of xi, so
        # the weight still vanishes at t = T
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (1.5 * math.log(s * lam) - 2.5 * s * bh
                   + 1.5 * np.log(self.xi_star(tf)))
        return np.where(np.isinf(bh), -np.inf, out)

    def log_rho2(self, t):
        return -1.5 * self.params.s * self.beta_hat(self._frozen(t))

    def log_rho3(self, t):
        s, lam = self.params.s, self.params.lam
        tf = self._frozen(t)
        bh = self.beta_hat(tf)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (2.5 * math.log(s) + 3.0 * math.log(lam)
                   - s * self.beta_star(tf) - 1.5 * s * bh
                   + 2.5 * np.log(self.xi_hat(tf)))
        return np.where(np.isinf(bh), -np.inf, out)

    def log_rho4(self, t):
        return -(11.0 / 8.0) * self.params.s * self.beta_hat(self._frozen(t))

    def log_rho(self, i, t):
        return getattr(self, f"log_rho{i}")(t)

    def rho_i(self, i, t):
        return np.exp(self.log_rho(i, t))

    def log_rho_star(self, i, t):
        t = np.asarray(t, dtype=float)
        reflected = np.where(t < 0.5 * self.params.T, self.params.T - t, t)
        return self.log_rho(i, reflected)

    def rho_tilde(self, i, t):
        """rho_i(t) / rho_i(T/2): one on [0, T/2], decays to zero at T."""
        mid = self.log_rho(i, 0.5 * self.params.T)
        return np.exp(self.log_rho(i, t) - mid)

    # --------------------------------------------------------------- envelope
    def envelope_lhs_log(self, t):
        """log |rho4' rho2 / rho4^2|; minus infinity on the frozen half."""
        t = np.asarray(t, dtype=float)
        s = self.params.s
        dbh = np.where(t > 0.5 * self.params.T, self.beta_hat_prime(t), 0.0)
        with np.errstate(divide="ignore"):
            return (np.log(np.abs(dbh) * (11.0 / 8.0) * s)
                    - 0.125 * s * self.beta_hat(t))

    def envelope_constant(self, n=4001):
        """Smallest constant C with |rho4' rho2 / rho4^2| <= C e^{-s bh/8}
        over the scan grid, restricted to points where the right side is
        representable in doubles."""
        T, s = self.params.T, self.params.s
        t = np.linspace(0.5 * T, T, n)[1:-1]
        rhs_log = -0.125 * s * self.beta_hat(t)
        ok = rhs_log > -745.0
        if not ok.any():
            return 0.0
        return float(np.exp(np.max(self.envelope_lhs_log(t[ok]) - rhs_log[ok])))

    # ------------------------------------------------------------- invariants
    def check_invariants(self, n_time=801, n_pts=400, rng=None):
        p = self.params
        T = p.T
        t_in = np.linspace(0.0, T, n_time)[1:-1]
        rng = np.random.default_rng(0) if rng is None else rng
        idx = rng.choice(len(self.eta.values), size=min(n_pts, len(self.eta.values)),
                         replace=False)
        ev = self.eta.values[idx]

        b = self.beta(t_in[:, None], ev[None, :])
        bh = self.beta_hat(t_in)[:, None]
        bs = self.beta_star(t_in)[:, None]
        x = self.xi(t_in[:, None], ev[None, :])
        xs = self.xi_star(t_in)[:, None]
        xh = self.xi_hat(t_in)[:, None]
        report = {
            "ordering_beta": bool(np.all(bs <= b + 1e-12 * np.abs(bs))
                                  and np.all(b <= bh * (1 + 1e-12))),
            "ordering_xi": bool(np.all(xs <= x * (1 + 1e-12))
                                and np.all(x <= xh * (1 + 1e-12))),
        }

        grid = np.linspace(0.0, T, n_time)
        half = grid[grid <= 0.5 * T]
        for i in (1, 2, 3, 4):
            lg = self.log_rho(i, grid)
            report[f"rho{i}_finite_before_T"] = bool(np.all(np.isfinite(lg[:-1])))
            report[f"rho{i}_zero_at_T"] = bool(np.isneginf(lg[-1]))
            lh = self.log_rho(i, half)
            report[f"rho{i}_frozen_first_half"] = bool(
                np.all(lh == self.log_rho(i, 0.5 * T)))
        for i in (1, 3):
            diff = self.log_rho(i, grid[:-1]) - self.log_rho4(grid[:-1])
            report[f"rho{i}_over_rho4_sup_log"] = float(np.max(diff))
            report[f"rho{i}_over_rho4_bounded"] = bool(np.isfinite(np.max(diff)))
        report["envelope_constant"] = self.envelope_constant()
        report["ok"] = all(v for k, v in report.items()
                           if isinstance(v, bool))
        return report


def weights(params: CarlemanParams, eta: EtaField) -> WeightSet:
    return WeightSet(params, eta)


# ------------------------------------------------------------------- probes
@dataclass
class ProbeReport:
    """Per-term breakdown of one weighted inequality evaluation."""

    terms: list
    lhs: float
    rhs: float
    ratio: float
    meta: dict = field(default_factory=dict)

    def rows(self):
        return [(name, side, value) for name, side, value in self.terms]

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("term,side,value\n")
            for name, side, value in self.terms:
                fh.write("%s,%s,%.17g\n" % (name, side, value))
            fh.write("total,left,%.17g\n" % self.lhs)
            fh.write("total,right,%.17g\n" % self.rhs)
            fh.write("ratio,both,%.17g\n" % self.ratio)


def _finish_report(terms, meta, field_max, C=1.0):
    if C <= 0.0:
        raise ValueError("probe constant C must be positive")
    meta = dict(meta, C=C)
    lhs = math.fsum(v for _, s, v in terms if s == "left")
    rhs = math.fsum(v for _, s, v in terms if s == "right")
    if rhs <= 0.0:
        if lhs <= 0.0 and field_max == 0.0:
            return ProbeReport(terms, 0.0, 0.0, 0.0, meta)
        raise QuadratureUnderflow(
            "weighted right side underflowed to zero for a nonzero field; "
            "reduce s or enlarge the probe horizon"
        )
    return ProbeReport(terms, lhs, rhs, lhs / (C * rhs), meta)


def _gauss_times(T, panels, nodes):
    """Composite Gauss-Legendre nodes on (0, T); endpoints never sampled."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    edges = np.linspace(0.0, T, panels + 1)
    ts, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        ts.append(0.5 * (b - a) * x + 0.5 * (a + b))
        ws.append(0.5 * (b - a) * w)
    return np.concatenate(ts), np.concatenate(ws)


def _sq(a):
    a = np.asarray(a)
    if a.ndim == 1:
        return a**2
    return np.einsum("...c,...c->...", a, a)


def _sq_all(a):
    """Row-wise squared magnitude, summing every trailing axis."""
    a = np.asarray(a, dtype=float)
    return (a.reshape(a.shape[0], -1) ** 2).sum(axis=1)


def _edge_quadrature(mesh):
    """Edge Gauss points, weights (include length), tangents, normals."""
    from .fsi_core import EDGE_QP, EDGE_QW

    v0 = mesh.vertices[mesh.boundary_edges[:, 0]]
    v1 = mesh.vertices[mesh.boundary_edges[:, 1]]
    pts, wts, tau, nrm = [], [], [], []
    for tq, wq in zip(EDGE_QP, EDGE_QW):
        pts.append((1.0 - tq) * v0 + tq * v1)
        wts.append(wq * mesh.edge_len)
        tau.append(mesh.edge_tan)
        nrm.append(mesh.edge_nrm)
    return (np.concatenate(pts), np.concatenate(wts),
            np.concatenate(tau), np.concatenate(nrm))


def _tangential_part(grad_vals, tau):
    """Contract the derivative axis of grad psi with the tangent."""
    g = np.asarray(grad_vals, dtype=float)
    if g.ndim == 2:
        return np.einsum("nd,nd->n", g, tau)[:, None]
    return np.einsum("ncd,nd->nc", g, tau)


def probe_heat_carleman(params: CarlemanParams, eta: EtaField, psi, f,
                        panels=64, nodes=6, C=1.0) -> ProbeReport:
    """Integrate both sides of the weighted heat-operator inequality.

    psi carries callables value(t, pts), grad(t, pts), dt(t, pts) of a
    manufactured solution of the backward heat equation with source f,
    where f is (t, pts) -> values.  Interior integrals use the assembly
    triangle rule, boundary ones the 2-point edge rule, time a
    composite Gauss rule whose nodes avoid the endpoints where the
    weights vanish.  Scalar and two-component psi both work.

    C is the inequality's constant; it is not constructive, so it
    enters as a calibration output (see calibrate) and divides the
    right side in the reported ratio.  Per-term values stay raw.

    The raw weights underflow doubles at useful scales, so every term
    is computed with the common factor exp(-log_scale) removed, where
    log_scale is the largest interior log weight over the time nodes;
    the left/right ratio is unaffected and log_scale lands in meta.
    """
    mesh = eta.mesh
    W = WeightSet(params, eta)
    s, lam = params.s, params.lam
    qp, qw = _quad_points(mesh)
    ev = eta.eval(qp)
    in_core = eta.core.contains(qp)
    qw_core = qw[in_core]
    bq, bw, btau, _ = _edge_quadrature(mesh)

    tq, tw = _gauss_times(params.T, panels, nodes)
    log_scale = float(np.max(-2.0 * s * W.beta_star(tq)))
    acc = {name: [] for name in (
        "gradient", "field", "boundary_field", "local_field",
        "local_gradient", "source", "boundary_tangential", "boundary_time")}
    field_max = 0.0
    for t, wt in zip(tq, tw):
        w_in = np.exp(-2.0 * s * W.beta(t, ev) - log_scale)
        x = W.xi(t, ev)
        bh = float(W.beta_hat(t))
        xs = float(W.xi_star(t))
        w_bd = math.exp(-2.0 * s * bh - log_scale)

        pv = _sq_all(psi.value(t, qp))
        pg = _sq_all(psi.grad(t, qp))
        fv = _sq_all(f(t, qp))
        field_max = max(field_max, math.sqrt(pv.max(initial=0.0)))

        acc["gradient"].append(wt * s * lam**2 * float(qw @ (w_in * x * pg)))
        acc["field"].append(
            wt * s**3 * lam**4 * float(qw @ (w_in * x**3 * pv)))
        acc["local_field"].append(
            wt * s**3 * lam**4
            * float(qw_core @ (w_in * x**3 * pv)[in_core]))
        acc["local_gradient"].append(
            wt * s * lam**2 * float(qw_core @ (w_in * x * pg)[in_core]))
        acc["source"].append(wt * float(qw @ (w_in * fv)))

        if w_bd > 0.0:
            bv = _sq_all(psi.value(t, bq))
            btg = _sq_all(_tangential_part(psi.grad(t, bq), btau))
            bdt = _sq_all(psi.dt(t, bq))
            acc["boundary_field"].append(
                wt * s**3 * lam**3 * w_bd * xs**3 * float(bw @ bv))
            acc["boundary_tangential"].append(
                wt * s * lam * w_bd * xs * float(bw @ btg))
            acc["boundary_time"].append(
                wt * w_bd / (s * lam * xs) * float(bw @ bdt))

    side = {"gradient": "left", "field": "left", "boundary_field": "left",
            "local_field": "right", "local_gradient": "right",
            "source": "right", "boundary_tangential": "right",
            "boundary_time": "right"}
    terms = [(name, side[name], math.fsum(vals)) for name, vals in acc.items()]
    meta = {"probe": "heat", "s": s, "lam": lam, "N": params.N,
            "T": params.T, "panels": panels, "nodes": nodes,
            "log_scale": log_scale}
    return _finish_report(terms, meta, field_max, C)


def _circle_fourier(psi_value, center, radius, outward_sign, n_fft=256):
    """Normal-trace Fourier data on one boundary circle.

    Returns (sum |grad_tau a_n|^2 dGamma, squared half-order Sobolev
    norm of a_n) with the circle convention: arc measure 2 pi R and
    multipliers (1 + k^2)^{1/2} on the unit-angle Fourier coefficients.
    """
    phi = np.linspace(0.0, 2.0 * np.pi, n_fft, endpoint=False)
    er = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    pts = np.asarray(center)[None, :] + radius * er
    nrm = outward_sign * er
    an = np.einsum("nc,nc->n", np.atleast_2d(psi_value(pts)), nrm)
    coef = np.fft.rfft(an) / n_fft
    k = np.arange(len(coef), dtype=float)
    mult = np.full(len(coef), 2.0)           # rfft folds the +-k pair
    mult[0] = 1.0
    if n_fft % 2 == 0:
        mult[-1] = 1.0
    power = mult * np.abs(coef) ** 2
    grad_tau = 2.0 * np.pi * radius * float((k / radius) ** 2 @ power)
    half = 2.0 * np.pi * radius * float(np.sqrt(1.0 + k**2) @ power)
    return grad_tau, half


def probe_stationary_carleman(params: CarlemanParams, eta: EtaField, psi, f,
                              control, beta_fric=1.0,
                              n_fft=256, C=1.0) -> ProbeReport:
    """Integrate the stationary divergence-free system inequality.

    psi carries value(pts) and grad(pts) of a divergence-free field, f
    is pts -> minus its vector Laplacian, control is the region of the
    localized right-hand term.  Boundary data are derived from psi:
    the normal trace and the slip combination of shear and friction.
    The half-order boundary norm is evaluated spectrally per circle.
    C is the calibrated constant dividing the right side of the ratio.
    """
    mesh = eta.mesh
    s, lam = params.s, params.lam
    if 2.0 * s * math.exp(lam) > MAX_EXP:
        raise OverflowGuard(
            f"2 s e^lam = {2.0 * s * math.exp(lam):.1f} exceeds the "
            "representable exponent range"
        )
    qp, qw = _quad_points(mesh)
    alpha = np.exp(lam * eta.eval(qp))
    w = np.exp(2.0 * s * alpha)
    in_ctl = control.contains(qp)

    pv = _sq_all(psi.value(qp))
    pg = _sq_all(psi.grad(qp))
    fv = _sq_all(f(qp))
    field_max = math.sqrt(pv.max(initial=0.0))

    bq, bw, btau, bnrm = _edge_quadrature(mesh)
    vals_b = np.atleast_2d(psi.value(bq))
    grads_b = np.asarray(psi.grad(bq), dtype=float)
    psi_tau = np.einsum("nc,nc->n", vals_b, btau)
    # slip trace: twice the symmetric gradient acting on n, plus friction
    dn = np.einsum("ncd,nd->nc", grads_b, bnrm)
    dnt = np.einsum("ndc,nd->nc", grads_b, bnrm)
    slip = np.einsum("nc,nc->n", dn + dnt + beta_fric * vals_b, btau)

    st = mesh.structure
    if st is None:
        raise ValueError("spectral boundary norms need the structured "
                         "annulus mesh")
    e2s = math.exp(2.0 * s)
    gt_sum, half_sum = 0.0, 0.0
    for radius, sign in ((st.r_out, 1.0), (st.r_in, -1.0)):
        gt, hf = _circle_fourier(psi.value, (0.0, 0.0), radius, sign, n_fft)
        gt_sum += gt
        half_sum += hf

    terms = [
        ("gradient", "left", s**2 * lam**2 * float(qw @ (w * alpha**2 * pg))),
        ("field", "left", s**4 * lam**4 * float(qw @ (w * alpha**4 * pv))),
        ("boundary_friction", "left",
         beta_fric * s**3 * lam**2 * e2s * float(bw @ psi_tau**2)),
        ("local_field", "right",
         s**4 * lam**4 * float(qw[in_ctl] @ (w * alpha**4 * pv)[in_ctl])),
        ("source", "right", s * float(qw @ (w * alpha * fv))),
        ("boundary_normal_grad", "right", s**3 * lam**2 * e2s * gt_sum),
        ("boundary_normal_half", "right", s**4 * lam**2 * e2s * half_sum),
        ("boundary_slip", "right", s**3 * lam**2 * e2s * float(bw @ slip**2)),
    ]
    meta = {"probe": "stationary", "s": s, "lam": lam, "N": params.N,
            "beta_fric": beta_fric, "n_fft": n_fft}
    return _finish_report(terms, meta, field_max, C)


def probe_system_carleman(params: CarlemanParams, eta: EtaField,
                          adjoint_traj, sources, op=None,
                          control=None, C=1.0) -> ProbeReport:
    """Integrate the coupled-system inequality along an adjoint run.

    The trajectory supplies the discrete operator and the control
    region through its meta dict unless passed explicitly.  Weighted
    norms use the assembled mass and stiffness forms; the localized
    term restricts to velocity dofs supported in the control region.
    Time integration is the trapezoid rule on the trajectory grid; the
    weights vanish at both endpoints, killing the end contributions.
    """
    op = op if op is not None else adjoint_traj.meta.get("op")
    control = control if control is not None \
        else adjoint_traj.meta.get("control")
    if op is None or control is None:
        raise ValueError("probe needs the discrete operator and the "
                         "control region, via arguments or trajectory meta")
    W = WeightSet(params, eta)
    s, lam = params.s, params.lam
    times = np.asarray(adjoint_traj.times, dtype=float)
    n = len(times)
    trap = np.empty(n)
    trap[1:-1] = 0.5 * (times[2:] - times[:-2])
    trap[0] = 0.5 * (times[1] - times[0])
    trap[-1] = 0.5 * (times[-1] - times[-2])

    inner = (times > 0.0) & (times < params.T)
    ti = times[inner]
    log_xs = np.full(n, -np.inf)
    log_xh = np.full(n, -np.inf)
    bh = np.full(n, np.inf)
    bs = np.full(n, np.inf)
    log_xs[inner] = np.log(W.xi_star(ti))
    log_xh[inner] = np.log(W.xi_hat(ti))
    bh[inner] = W.beta_hat(ti)
    bs[inner] = W.beta_star(ti)

    log_w = {
        "grad": -5.0 * s * bh + 3.0 * log_xs,
        "field": -5.0 * s * bh + 4.0 * log_xs,
        "local": -2.0 * s * bs - 3.0 * s * bh + 5.0 * log_xh,
        "src": -3.0 * s * bh,
    }
    # common scale keeps the dominant family near unit size; the ratio
    # is invariant and the scale is reported in meta
    finite = [v[np.isfinite(v)] for v in log_w.values()]
    log_scale = float(max(v.max() for v in finite if v.size))

    def wexp(key):
        lw = log_w[key]
        out = np.zeros(n)
        ok = np.isfinite(lw)
        out[ok] = np.exp(lw[ok] - log_scale)
        return out

    w_grad = wexp("grad")
    w_field = wexp("field")
    w_local = wexp("local")
    w_src = wexp("src")

    D = op.velocity_mask(control).astype(float)
    qp, qw = _quad_points(op.mesh)
    grad2 = np.empty(n)
    field2 = np.empty(n)
    rigid2 = np.empty(n)
    local2 = np.empty(n)
    src_f = np.empty(n)
    src_r = np.empty(n)
    field_max = 0.0
    for i in range(n):
        y = adjoint_traj.states[i]
        u = y[: op.n_u]
        grad2[i] = float(u @ (op.H_u @ u))
        field2[i] = float(u @ (op.M_u @ u))
        ell, k = op.rigid_of(y)
        rigid2[i] = float(ell @ ell) + k * k
        ud = D * u
        local2[i] = float(ud @ (op.M_u @ ud))
        f1 = np.asarray(sources.F1(times[i], qp), dtype=float)
        src_f[i] = float(qw @ _sq_all(f1))
        f2 = np.asarray(sources.F2(times[i]), dtype=float)
        f3 = float(np.asarray(sources.F3(times[i])))
        src_r[i] = float(f2 @ f2) + f3 * f3
        field_max = max(field_max, math.sqrt(field2[i] + rigid2[i]))

    def tsum(vals):
        return math.fsum(trap * vals)

    terms = [
        ("gradient", "left", s**3 * lam**4 * tsum(w_grad * grad2)),
        ("field", "left", s**4 * lam**4 * tsum(w_field * field2)),
        ("rigid", "left", s**3 * lam**3 * tsum(w_grad * rigid2)),
        ("local_field", "right", s**5 * lam**6 * tsum(w_local * local2)),
        ("source_fluid", "right", tsum(w_src * src_f)),
        ("source_rigid", "right", tsum(w_src * src_r)),
    ]
    meta = {"probe": "system", "s": s, "lam": lam, "N": params.N,
            "T": params.T, "n_steps": n - 1, "log_scale": log_scale}
    return _finish_report(terms, meta, field_max, C)


class SeparableStreamMode:
    """Divergence-free probe field with separable exponential decay.

    psi(t, y) = e^{-decay t} grad-perp sin(k . y).  Closing the
    backward heat equation -dt psi - nu Lap psi = f gives the source
    f = (decay + nu |k|^2) psi, available as the source method.
    """

    def __init__(self, wave=(2.0, 1.0), decay=0.0, nu=1.0):
        self.k = np.asarray(wave, dtype=float)
        self.c = np.array([-self.k[1], self.k[0]])
        self.decay = float(decay)
        self.nu = float(nu)

    def _amp(self, t):
        return math.exp(-self.decay * t)

    def value(self, t, pts):
        pts = np.atleast_2d(pts)
        return self._amp(t) * np.cos(pts @ self.k)[:, None] * self.c

    def grad(self, t, pts):
        pts = np.atleast_2d(pts)
        sn = np.sin(pts @ self.k)
        return -self._amp(t) * sn[:, None, None] * np.outer(self.c, self.k)

    def dt(self, t, pts):
        return -self.decay * self.value(t, pts)

    def source(self, t, pts):
        gain = self.decay + self.nu * float(self.k @ self.k)
        return gain * self.value(t, pts)


class StationaryStreamMode:
    """Time-independent divergence-free field for the stationary probe."""

    def __init__(self, wave=(2.0, 1.0)):
        self.k = np.asarray(wave, dtype=float)
        self.c = np.array([-self.k[1], self.k[0]])

    def value(self, pts):
        pts = np.atleast_2d(pts)
        return np.cos(pts @ self.k)[:, None] * self.c

    def grad(self, pts):
        pts = np.atleast_2d(pts)
        sn = np.sin(pts @ self.k)
        return -sn[:, None, None] * np.outer(self.c, self.k)

    def source(self, pts):
        # minus the vector Laplacian
        return float(self.k @ self.k) * self.value(pts)


@dataclass
class Calibration:
    """Frozen probe calibration: threshold scale and constant."""

    s_cal: float
    C_cal: float
    grid_s: tuple
    grid_raw: tuple

    def sweep(self):
        """The doubling scales whose ratios must not increase."""
        return (self.s_cal, 2.0 * self.s_cal, 4.0 * self.s_cal)


def calibrate(probe_fn, s_lo=1.5, s_hi=24.0, n_grid=9, margin=0.05,
              tol=1e-3, max_iter=60) -> Calibration:
    """Freeze a probe's constant and threshold scale from a scan.

    The inequality's constant and scale threshold are not
    constructive, so both are calibration outputs rather than inputs.
    probe_fn maps a scale s to a ProbeReport evaluated with C = 1.  A
    geometric scan over [s_lo, s_hi] locates the largest raw ratio;
    the raw ratios past it must form a non-increasing chain, which is
    the s-uniformity the estimate asserts.  The constant is anchored
    at that peak and bisection finds the smallest s where the
    normalized ratio first dips below one (by the given margin, to
    land on the falling flank rather than the flat crest).
    """
    grid = np.geomspace(s_lo, s_hi, n_grid)
    raw = [probe_fn(float(s)).ratio for s in grid]
    i_max = int(np.argmax(raw))
    tail = raw[i_max:]
    if any(b > a for a, b in zip(tail, tail[1:])):
        raise ValueError(
            "raw probe ratio is not non-increasing beyond its peak; "
            "the scan bracket does not isolate the decay regime"
        )
    C_cal = raw[i_max]
    target = C_cal * (1.0 - margin)
    for j in range(i_max + 1, len(raw)):
        if raw[j] <= target:
            break
    else:
        raise ValueError(
            f"normalized probe ratio never dips below one by margin "
            f"{margin} within s <= {s_hi}; widen the bracket"
        )
    lo, hi = float(grid[j - 1]), float(grid[j])
    for _ in range(max_iter):
        if hi - lo <= tol * hi:
            break
        mid = 0.5 * (lo + hi)
        if probe_fn(mid).ratio <= target:
            hi = mid
        else:
            lo = mid
    return Calibration(s_cal=hi, C_cal=C_cal,
                       grid_s=tuple(float(s) for s in grid),
                       grid_raw=tuple(raw))
