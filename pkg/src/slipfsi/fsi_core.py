"""Monolithic discretization of the fluid-rigid-body system with Navier slip.

The continuous state space is the set of divergence-free fields on the
fluid region whose normal trace vanishes on the outer boundary and
matches a rigid field l + k y-perp on the body boundary.  Its discrete
counterpart couples a P1+bubble velocity on the fluid mesh with the
three rigid unknowns (l1, l2, k); the canonical inner product is

    <w, v> = int_F w.v dy + m l_w . l_v + J k_w k_v.

The dissipative bilinear form (minus the generator) is

    a(w, v) = 2 nu int_F D(w):D(v)
            + beta_Omega int_dOmega w_tau . v_tau
            + beta_S int_dS (w - w_S)_tau . (v - v_S)_tau,

with the divergence constraint carried by a continuous P1 pressure
multiplier and the two normal-trace conditions imposed weakly, one row
per boundary edge (chord normals, so the discrete divergence theorem is
exact on the polygonal mesh).  The pressure is pinned to zero mean
through one extra multiplier.  One implicit theta-step of w' = Aw + F
then solves a symmetric saddle-point system, factorized once per time
step size and reused.

Degree-of-freedom layout: vertex x-velocities, vertex y-velocities,
bubble x, bubble y, then (l1, l2, k).  Pressure and constraint
multipliers live in a separate vector ordered (pressure rows, outer
edge rows, body edge rows, mean-pressure row).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import mesh as meshmod
from .errors import (
    AssemblyFailed,
    FixedPointDiverged,
    LinearSolveFailed,
    MarginViolated,
    NonFiniteState,
)
from .geometry import perp, rotation_matrix

TOL_LINEAR = 1e-10          # relative residual of every saddle solve
TOL_FIXED_POINT = 1e-8      # weighted F-difference in the Picard loop
MAX_PICARD = 25

# Degree-6 triangle rule (12 points), weights on the unit measure.
_QA1, _QB1, _QW1 = 0.501426509658179, 0.249286745170910, 0.116786275726379
_QA2, _QB2, _QW2 = 0.873821971016996, 0.063089014491502, 0.050844906370207
_Q3 = (0.053145049844817, 0.310352451033784, 0.636502499121399)
_QW3 = 0.082851075618374


def _tri_rule():
    pts, w = [], []
    for (a, b), wt in (((_QA1, _QB1), _QW1), ((_QA2, _QB2), _QW2)):
        pts += [(a, b, b), (b, a, b), (b, b, a)]
        w += [wt] * 3
    import itertools

    for p in sorted(set(itertools.permutations(_Q3))):
        pts.append(p)
        w.append(_QW3)
    return np.array(pts), np.array(w)


TRI_QP, TRI_QW = _tri_rule()

# 2-point Gauss on [0,1]
EDGE_QP = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
EDGE_QW = np.array([0.5, 0.5])


@dataclass
class FsiField:
    """Monolithic state: fluid velocity dofs, rigid (l, k), pressure."""

    u: np.ndarray
    ell: np.ndarray
    k: float
    p: Optional[np.ndarray] = None
    t: float = 0.0

    def to_state(self):
        return np.concatenate([self.u, self.ell, [self.k]])

    @classmethod
    def from_state(cls, vec, p=None, t=0.0):
        return cls(u=vec[:-3].copy(), ell=vec[-3:-1].copy(), k=float(vec[-1]),
                   p=p, t=t)


@dataclass
class SourceTerms:
    """Right-hand sides: F1 fluid force (t, pts) -> (n, 2); F2(t) body
    force; F3(t) torque.  Any of them may be None (zero)."""

    F1: Optional[Callable] = None
    F2: Optional[Callable] = None
    F3: Optional[Callable] = None

    @classmethod
    def zero(cls):
        return cls()


class SaddleStepper:
    """Symmetric KKT solves shared by stepping, projection and steady solves.

    Unknowns (y, lam, mu) with blocks

        [ Ablk  C^T  0 ] [y  ]   [b]
        [ C     0    e ] [lam] = [0]
        [ 0     e^T  0 ] [mu ]   [0]

    where e pins the pressure mean.  Ablk is M + alpha K (alpha = theta dt)
    or K alone for the steady problem.  All factorizations are cached.
    """

    def __init__(self, M, K, C, e_mean):
        self.M = M.tocsr()
        self.K = K.tocsr()
        self.C = C.tocsr()
        self.e = np.asarray(e_mean)
        self.n_y = M.shape[0]
        self.n_c = C.shape[0]
        self._factors = {}

    def _kkt(self, ablk):
        if self.n_c == 0:
            return sp.csc_matrix(ablk)
        e_col = sp.csr_matrix(self.e[:, None])
        return sp.bmat(
            [[ablk, self.C.T, None],
             [self.C, None, e_col],
             [None, e_col.T, None]],
            format="csc",
        )

    def _factor(self, key, ablk):
        if key not in self._factors:
            kkt = self._kkt(ablk)
            try:
                self._factors[key] = (spla.splu(kkt), kkt)
            except RuntimeError as exc:  # pragma: no cover - singular assembly
                raise LinearSolveFailed(f"factorization failed: {exc}") from exc
        return self._factors[key]

    def _solve(self, key, ablk, rhs_y):
        lu, kkt = self._factor(key, ablk)
        pad = 0 if self.n_c == 0 else self.n_c + 1
        rhs = np.concatenate([rhs_y, np.zeros(pad)])
        sol = lu.solve(rhs)
        if not np.all(np.isfinite(sol)):
            raise NonFiniteState("saddle solve produced non-finite values")
        res = kkt @ sol - rhs
        rel = np.linalg.norm(res) / max(1.0, np.linalg.norm(rhs))
        if rel > TOL_LINEAR:
            raise LinearSolveFailed("saddle solve residual too large", residual=rel)
        return sol[: self.n_y], sol[self.n_y : self.n_y + self.n_c]

    def solve_shifted(self, alpha, rhs_y):
        """Solve with Ablk = M + alpha K (alpha may be 0: H-projection)."""
        key = ("shift", round(float(alpha), 15))
        ablk = self.M if alpha == 0.0 else (self.M + alpha * self.K).tocsr()
        return self._solve(key, ablk, rhs_y)

    def solve_steady(self, rhs_y):
        return self._solve(("steady",), self.K, rhs_y)

    def project(self, z):
        """M-orthogonal projection onto the constraint kernel (discrete
        Leray-type projector of the monolithic space)."""
        y, _ = self.solve_shifted(0.0, self.M @ z)
        return y

    def step(self, y, load, dt, theta=1.0):
        """One theta-step of M y' + K y = load; returns (y_new, chi)
        where chi/dt recovers the pressure/trace multipliers."""
        rhs = self.M @ y + dt * load
        if theta != 1.0:
            rhs = rhs - (1.0 - theta) * dt * (self.K @ y)
        return self.solve_shifted(theta * dt, rhs)


class DiscreteOperator:
    """Assembled mass/stiffness/constraint blocks plus helpers.

    Built by :func:`assemble`; treat instances as immutable.
    """

    def __init__(self, mesh, params):
        self.mesh = mesh
        self.params = params
        self.n_v = mesh.n_vertices
        self.n_t = mesh.n_triangles
        self.n_u = 2 * self.n_v + 2 * self.n_t
        self.n_y = self.n_u + 3
        self.n_p = self.n_v
        self.n_be = len(mesh.boundary_edges)
        # filled by assemble()
        self.M = None
        self.K = None
        self.C = None
        self.e_mean = None
        self.M_u = None
        self.H_u = None
        self.stepper = None
        self._quad = None
        self._quad_grad = None

    # ---------------------------------------------------------- inner product
    def inner(self, a, b):
        return float(a @ (self.M @ b))

    def norm(self, a):
        return float(np.sqrt(max(self.inner(a, a), 0.0)))

    def energy(self, a):
        """Dissipation form a(w, w) >= 0."""
        return float(a @ (self.K @ a))

    def graph_norm(self, a):
        """Discrete square-root-domain norm: <w,w> - <w,Aw> = ||w||^2 + a(w,w)."""
        return float(np.sqrt(max(self.inner(a, a) + self.energy(a), 0.0)))

    def fluid_l2(self, y):
        u = y[: self.n_u]
        return float(np.sqrt(max(u @ (self.M_u @ u), 0.0)))

    def fluid_h1semi(self, y):
        u = y[: self.n_u]
        return float(np.sqrt(max(u @ (self.H_u @ u), 0.0)))

    def project(self, z):
        return self.stepper.project(z)

    # ------------------------------------------------------------ dof helpers
    def rigid_of(self, y):
        return y[self.n_u : self.n_u + 2], float(y[self.n_u + 2])

    def velocity_mask(self, region):
        """Boolean mask over velocity dofs whose support point lies in region."""
        mask_v = region.contains(self.mesh.vertices)
        mask_t = region.contains(self.mesh.centroids)
        return np.concatenate([mask_v, mask_v, mask_t, mask_t])

    def vertex_values(self, y):
        """Velocity at mesh vertices, shape (n_v, 2) (bubbles vanish there)."""
        return np.stack([y[: self.n_v], y[self.n_v : 2 * self.n_v]], axis=1)

    def evaluate_velocity(self, y, pts):
        tri, lam = self.mesh.locate(pts)
        tv = self.mesh.triangles[tri]
        ux = (y[tv] * lam).sum(axis=1)
        uy = (y[self.n_v + tv] * lam).sum(axis=1)
        bub = 27.0 * lam.prod(axis=1)
        ux = ux + y[2 * self.n_v + tri] * bub
        uy = uy + y[2 * self.n_v + self.n_t + tri] * bub
        return np.stack([ux, uy], axis=1)

    def evaluate_pressure(self, p, pts):
        tri, lam = self.mesh.locate(pts)
        return (p[self.mesh.triangles[tri]] * lam).sum(axis=1)

    # ------------------------------------------------------------------ loads
    def load_vector(self, src: SourceTerms, t):
        load = np.zeros(self.n_y)
        if src.F1 is not None:
            qp, qw, phi, dofmap = self._quad
            vals = np.asarray(src.F1(t, qp.reshape(-1, 2))).reshape(qp.shape)
            contrib = np.einsum("eq,qa,eqc->eac", qw, phi, vals)
            np.add.at(load, dofmap[:, :4], contrib[:, :, 0])
            np.add.at(load, dofmap[:, 4:], contrib[:, :, 1])
        if src.F2 is not None:
            load[self.n_u : self.n_u + 2] = np.asarray(src.F2(t), dtype=float)
        if src.F3 is not None:
            load[self.n_u + 2] = float(src.F3(t))
        return load

    def load_from_velocity_dofs(self, v):
        """L2 load of a velocity-dof field (mass-matrix Riesz lift)."""
        load = np.zeros(self.n_y)
        load[: self.n_u] = self.M_u @ v
        return load

    def step_field(self, state: FsiField, src: SourceTerms, dt, theta=1.0):
        t_next = state.t + dt
        load = self.load_vector(src, t_next if theta == 1.0 else state.t + theta * dt)
        y, chi = self.stepper.step(state.to_state(), load, dt, theta)
        return FsiField.from_state(y, p=chi[: self.n_p] / dt, t=t_next)


def _scalar_basis(lam):
    """P1 hats + cubic bubble at barycentric points lam (nq, 3) -> (nq, 4)."""
    bub = 27.0 * lam.prod(axis=1, keepdims=True)
    return np.concatenate([lam, bub], axis=1)


def assemble(mesh, params) -> DiscreteOperator:
    """Build mass, stiffness and constraint blocks on the given mesh.

    See the module docstring for the weak form.  Raises AssemblyFailed
    on structural defects (non-finite entries, asymmetry) and
    MeshTooCoarse through mesh validation.
    """
    op = DiscreteOperator(mesh, params)
    n_v, n_t, n_u = op.n_v, op.n_t, op.n_u
    nq = len(TRI_QW)

    lam = TRI_QP
    phi = _scalar_basis(lam)                                   # (nq, 4)
    tp = mesh.vertices[mesh.triangles]                         # (n_t, 3, 2)
    qp = np.einsum("qi,eic->eqc", lam, tp)                     # (n_t, nq, 2)
    qw = mesh.areas[:, None] * TRI_QW[None, :]                 # (n_t, nq)

    g = mesh.grads                                             # (n_t, 3, 2)
    # bubble gradient at each quadrature point
    gb = 27.0 * (
        (lam[:, 1] * lam[:, 2])[None, :, None] * g[:, None, 0]
        + (lam[:, 0] * lam[:, 2])[None, :, None] * g[:, None, 1]
        + (lam[:, 0] * lam[:, 1])[None, :, None] * g[:, None, 2]
    )                                                          # (n_t, nq, 2)
    G = np.empty((n_t, nq, 4, 2))
    G[:, :, :3, :] = g[:, None, :, :]
    G[:, :, 3, :] = gb

    # local scalar matrices
    mass_sc = np.einsum("eq,qa,qb->eab", qw, phi, phi)
    h_sc = np.einsum("eq,eqad,eqbd->eab", qw, G, G)
    # cross terms: W[e,a,b,p,r] = int d_p phi_a d_r phi_b
    W = np.einsum("eq,eqap,eqbr->eabpr", qw, G, G)

    # velocity dof map per element: [x0 x1 x2 xb | y0 y1 y2 yb]
    dofmap = np.empty((n_t, 8), dtype=np.int64)
    dofmap[:, :3] = mesh.triangles
    dofmap[:, 3] = 2 * n_v + np.arange(n_t)
    dofmap[:, 4:7] = n_v + mesh.triangles
    dofmap[:, 7] = 2 * n_v + n_t + np.arange(n_t)

    nu = params.nu
    K_loc = np.zeros((n_t, 8, 8))
    M_loc = np.zeros((n_t, 8, 8))
    for al in range(2):
        for be in range(2):
            # test dof (a, al), trial dof (b, be):
            # nu (grad phi_a . grad phi_b delta_{al,be} + d_be phi_a d_al phi_b)
            blk = nu * W[:, :, :, be, al]
            if al == be:
                blk = blk + nu * h_sc
            K_loc[:, al * 4 : al * 4 + 4, be * 4 : be * 4 + 4] = blk
        M_loc[:, al * 4 : al * 4 + 4, al * 4 : al * 4 + 4] = mass_sc

    rows = np.repeat(dofmap, 8, axis=1).ravel()
    cols = np.tile(dofmap, (1, 8)).ravel()
    K_u = sp.coo_matrix((K_loc.ravel(), (rows, cols)), shape=(n_u, n_u)).tocsr()
    M_u = sp.coo_matrix((M_loc.ravel(), (rows, cols)), shape=(n_u, n_u)).tocsr()
    H_loc = np.zeros((n_t, 8, 8))
    H_loc[:, :4, :4] = h_sc
    H_loc[:, 4:, 4:] = h_sc
    H_u = sp.coo_matrix((H_loc.ravel(), (rows, cols)), shape=(n_u, n_u)).tocsr()

    # divergence rows: int lambda_p d_beta phi_b
    B_loc = np.einsum("eq,qp,eqbd->epbd", qw, lam, G)          # (n_t,3,4,2)
    prow = np.repeat(mesh.triangles, 8, axis=1).ravel()
    pcol = np.tile(dofmap, (1, 3)).ravel()
    pdat = np.concatenate([B_loc[:, :, :, 0], B_loc[:, :, :, 1]], axis=2).ravel()
    B_div = sp.coo_matrix((pdat, (prow, pcol)), shape=(n_v, op.n_y)).tocsr()

    # ------------------------------------------------------- boundary terms
    be_idx = np.arange(op.n_be)
    v0 = mesh.boundary_edges[:, 0]
    v1 = mesh.boundary_edges[:, 1]
    tau, nrm, L = mesh.edge_tan, mesh.edge_nrm, mesh.edge_len
    p0, p1 = mesh.vertices[v0], mesh.vertices[v1]
    is_body = mesh.boundary_markers == meshmod.MARKER_BODY

    K_bd = sp.lil_matrix((op.n_y, op.n_y))
    C_n = sp.lil_matrix((op.n_be, op.n_y))
    l1c, l2c, kc = n_u, n_u + 1, n_u + 2
    for e in be_idx:
        cols_e = [v0[e], n_v + v0[e], v1[e], n_v + v1[e]]
        friction = params.beta_S if is_body[e] else params.beta_Omega
        if is_body[e]:
            cols_e += [l1c, l2c, kc]
        cols_e = np.array(cols_e, dtype=np.int64)
        acc = np.zeros((len(cols_e), len(cols_e)))
        row_n = np.zeros(len(cols_e))
        for tq, wq in zip(EDGE_QP, EDGE_QW):
            y = (1.0 - tq) * p0[e] + tq * p1[e]
            rt = [(1.0 - tq) * tau[e, 0], (1.0 - tq) * tau[e, 1],
                  tq * tau[e, 0], tq * tau[e, 1]]
            rn = [(1.0 - tq) * nrm[e, 0], (1.0 - tq) * nrm[e, 1],
                  tq * nrm[e, 0], tq * nrm[e, 1]]
            if is_body[e]:
                yp = perp(y)
                rt += [-tau[e, 0], -tau[e, 1], -float(yp @ tau[e])]
                rn += [-nrm[e, 0], -nrm[e, 1], -float(yp @ nrm[e])]
            rt = np.array(rt)
            acc += (wq * L[e] * friction) * np.outer(rt, rt)
            row_n += (wq * L[e]) * np.array(rn)
        K_bd[np.ix_(cols_e, cols_e)] += acc
        C_n[e, cols_e] = row_n

    K = (sp.block_diag([K_u, sp.csr_matrix((3, 3))], format="csr")
         + K_bd.tocsr())
    M = sp.block_diag(
        [M_u, sp.diags([params.m, params.m, params.J])], format="csr"
    )

    C = sp.vstack([B_div, C_n.tocsr()], format="csr")

    e_mean = np.zeros(C.shape[0])
    np.add.at(e_mean, mesh.triangles.ravel(),
              np.repeat(mesh.areas / 3.0, 3))

    for mat, name in ((M, "mass"), (K, "stiffness"), (C, "constraint")):
        if not np.all(np.isfinite(mat.data)):
            raise AssemblyFailed(f"non-finite entries in {name}")
    asym = abs(K - K.T).max()
    scale = abs(K).max()
    if asym > 1e-12 * scale:
        raise AssemblyFailed(f"stiffness asymmetry {asym:.2e} (scale {scale:.2e})")

    op.M, op.K, op.C, op.e_mean = M, K, C, e_mean
    op.M_u, op.H_u = M_u, H_u
    op.stepper = SaddleStepper(M, K, C, e_mean)
    op._quad = (qp, qw, phi, dofmap)
    op._quad_grad = G
    return op


def assemble_decoupled(params) -> SaddleStepper:
    """Rigid-only stepper (no fluid dofs): M = diag(m, m, J), K = 0.

    Diagnostic configuration for the adjoint ODE oracle m l' = source.
    """
    M = sp.diags([params.m, params.m, params.J]).tocsr()
    K = sp.csr_matrix((3, 3))
    C = sp.csr_matrix((0, 3))
    return SaddleStepper(M, K, C, np.zeros(0))


# --------------------------------------------------------------- validation
def validate_initial_data(op: DiscreteOperator, u0, ell0, omega0):
    """Compatibility report for initial data.

    u0 is a callable pts -> (n, 2) or a velocity dof vector.  Checks the
    discrete divergence residual and the two normal-trace residuals
    against the mesh tolerance; returns a dict with residuals and flags.
    """
    if callable(u0):
        uv = np.zeros(op.n_u)
        vals = np.asarray(u0(op.mesh.vertices))
        uv[: op.n_v] = vals[:, 0]
        uv[op.n_v : 2 * op.n_v] = vals[:, 1]
    else:
        uv = np.asarray(u0, dtype=float)
    y = np.concatenate([uv, np.asarray(ell0, dtype=float).reshape(2),
                        [float(omega0)]])
    res = op.C @ y
    div = res[: op.n_p]
    trace = res[op.n_p :]
    outer_rows = op.mesh.boundary_markers == meshmod.MARKER_OUTER
    scale = max(op.norm(y), 1e-30)
    tol = op.mesh.tolerance * max(1.0, scale)
    report = {
        "divergence_residual": float(np.linalg.norm(div)),
        "outer_trace_residual": float(np.linalg.norm(trace[outer_rows])),
        "body_trace_residual": float(np.linalg.norm(trace[~outer_rows])),
        "tolerance": tol,
        "scale": scale,
    }
    report["divergence_ok"] = report["divergence_residual"] <= tol
    report["outer_trace_ok"] = report["outer_trace_residual"] <= tol
    report["body_trace_ok"] = report["body_trace_residual"] <= tol
    report["ok"] = bool(
        report["divergence_ok"] and report["outer_trace_ok"] and report["body_trace_ok"]
    )
    return report


def step_linear(op: DiscreteOperator, state: FsiField, src: SourceTerms, dt,
                theta=1.0):
    """One implicit theta-step (default backward Euler)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return op.step_field(state, src, dt, theta)


@dataclass
class Trajectory:
    """Time-sampled solution.  states has shape (n_steps+1, n_y); the
    positions array carries (h1, h2, theta) integrated alongside."""

    times: np.ndarray
    states: np.ndarray
    positions: np.ndarray
    pressures: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return len(self.times) - 1

    def field_at(self, i):
        p = None if self.pressures is None else self.pressures[i]
        return FsiField.from_state(self.states[i], p=p, t=self.times[i])

    def rigid_velocities(self):
        return self.states[:, -3:-1], self.states[:, -1]


def solve_linear(op: DiscreteOperator, y0, load_fn, dt, n_steps, theta=1.0,
                 h0=(0.0, 0.0), theta0=0.0, keep_pressure=False):
    """March the linear system; positions integrate a' = (l, k) implicitly.

    load_fn(step, t_new) returns the full load vector at the implicit
    time level (may be None for zero).
    """
    n_y = op.n_y
    states = np.empty((n_steps + 1, n_y))
    states[0] = y0
    pos = np.empty((n_steps + 1, 3))
    pos[0] = [h0[0], h0[1], theta0]
    pressures = np.zeros((n_steps + 1, op.n_p)) if keep_pressure else None
    y = y0.copy()
    for n in range(n_steps):
        t_new = (n + 1) * dt
        load = load_fn(n, t_new)
        if load is None:
            load = np.zeros(n_y)
        y, chi = op.stepper.step(y, load, dt, theta)
        states[n + 1] = y
        ell, k = op.rigid_of(y)
        pos[n + 1, :2] = pos[n, :2] + dt * ell
        pos[n + 1, 2] = pos[n, 2] + dt * k
        if keep_pressure:
            pressures[n + 1] = chi[: op.n_p] / dt
    times = dt * np.arange(n_steps + 1)
    return Trajectory(times=times, states=states, positions=pos,
                      pressures=pressures)


# ---------------------------------------------------------------- nonlinear
@dataclass
class NonlinearProblem:
    """Everything the fixed-point solver needs: discretization handles,
    time horizon and initial data (y0 given as an admissible dof vector
    or any vector, projected on use)."""

    op: DiscreteOperator
    domain: object
    params: object
    T: float
    n_steps: int
    y0: np.ndarray
    h0: tuple = (0.0, 0.0)
    theta0: float = 0.0
    tol_fixed_point: float = TOL_FIXED_POINT

    def initial_state(self):
        return self.op.project(np.asarray(self.y0, dtype=float))


def _true_positions(op, states, dt, h0, theta0):
    """Nonlinear kinematics h' = R_theta l, theta' = omega (implicit in
    the rigid velocities, explicit in the angle within each step)."""
    n = len(states)
    pos = np.empty((n, 3))
    pos[0] = [h0[0], h0[1], theta0]
    for i in range(1, n):
        ell, k = op.rigid_of(states[i])
        th_new = pos[i - 1, 2] + dt * k
        pos[i, 2] = th_new
        pos[i, :2] = pos[i - 1, :2] + dt * (rotation_matrix(th_new) @ ell)
    return pos


def solve_nonlinear(problem, control=None) -> Trajectory:
    """Fixed-point solve of the transformed nonlinear system.

    Picard iteration on the remainder map

        Phi(F) = ( nu (L - Delta) u - M u - N u + (grad - G) pi  on the fluid,
                   (-m k l-perp, 0)                              on the body )

    around the linear solver; every outer iteration rebuilds the change
    of variables from the current rigid path and re-evaluates Phi on the
    new iterate (lagged sources).  The fluid part is paired with the
    velocity test functions in weak form, so only first derivatives of
    the map metric and of the discrete velocity ever appear; see
    :func:`_remainder_loads`.  ``control`` is an optional (n_steps, n_u)
    array of velocity-dof values applied as an L2 force (already masked
    to the control region by the caller).
    """
    op = problem.op
    dt = problem.T / problem.n_steps
    n_steps = problem.n_steps
    y0 = problem.initial_state()
    h0, th0 = np.asarray(problem.h0, dtype=float), float(problem.theta0)

    base_loads = np.zeros((n_steps, op.n_y))
    for n in range(n_steps):
        if control is not None:
            base_loads[n] = op.load_from_velocity_dofs(control[n])

    grid = _metric_grid(problem.domain)
    interp = grid.interpolation_to(op._quad[0].reshape(-1, 2))

    scale0 = max(op.norm(y0), float(np.abs(h0).max()), abs(th0), 1e-30)
    rem_loads = np.zeros((n_steps, op.n_y))
    diffs = []
    traj = None
    for it in range(MAX_PICARD):
        def load_fn(n, t, _rl=rem_loads):
            return base_loads[n] + _rl[n]

        traj = solve_linear(op, y0, load_fn, dt, n_steps, h0=h0, theta0=th0,
                            keep_pressure=True)
        traj.positions = _true_positions(op, traj.states, dt, h0, th0)

        margin_ok = _check_margins(problem.domain, traj.positions)
        if not margin_ok:
            raise MarginViolated("trajectory left the d/2 safety corridor")

        loads_new = _remainder_loads(problem, op, grid, interp, traj, dt)
        dF = _remainder_diff(op, loads_new - rem_loads)
        diffs.append(dF)
        rem_loads = loads_new
        if dF <= problem.tol_fixed_point * max(1.0, scale0):
            traj.meta["picard_iterations"] = it + 1
            traj.meta["picard_diffs"] = diffs
            traj.meta["remainder_norm"] = _remainder_diff(op, rem_loads)
            return traj
    raise FixedPointDiverged("Picard loop exhausted", history=diffs)


def _check_margins(domain, positions):
    from .geometry import collision_margin

    stride = max(1, len(positions) // 16)
    idx = list(range(0, len(positions), stride)) + [len(positions) - 1]
    for i in idx:
        rep = collision_margin(domain, positions[i, :2], positions[i, 2])
        if rep.margin < 0.5 * domain.d:
            return False
    return True


def _metric_grid(domain, n_r=64, n_phi=96):
    """Polar lattice for the map metric, finer than the mesh lattice: the
    cutoff band of the extension flow has to be resolved radially."""
    from . import transform as tr

    r = np.linspace(domain.body.radius, domain.outer.radius, n_r + 1)
    phi = np.arange(n_phi) * (2.0 * np.pi / n_phi)
    return tr.PolarGrid(r, phi)


def _quad_fields(op, y, p):
    """Velocity, velocity gradient, pressure gradient of a discrete state
    at the volume quadrature points: u (e,q,2), du[...,i,k] = d_k u_i,
    dp (e,q,2).  Exact on the P1+bubble / P1 spaces."""
    qp, qw, phi, dofmap = op._quad
    G = op._quad_grad
    ux, uy = y[dofmap[:, :4]], y[dofmap[:, 4:]]            # (e, 4)
    u = np.stack([np.einsum("ea,qa->eq", ux, phi),
                  np.einsum("ea,qa->eq", uy, phi)], axis=-1)
    du = np.stack([np.einsum("ea,eqad->eqd", ux, G),
                   np.einsum("ea,eqad->eqd", uy, G)], axis=-2)
    ptri = p[op.mesh.triangles]                            # (e, 3)
    dp = np.einsum("ea,ead->ed", ptri, op.mesh.grads)[:, None, :]
    dp = np.broadcast_to(dp, u.shape)
    return u, du, dp


def _remainder_loads(problem, op, grid, interp, traj, dt):
    """Assemble the load vectors of Phi(F) along the trajectory.

    The metric quantities (g^{-1}, Christoffel symbols, frame velocity)
    are sampled on the polar grid, where the flow map is smooth, and
    interpolated to the quadrature points; the state enters through its
    exact finite element values.  The two genuinely second-order pieces
    of nu (L - Delta) u are integrated by parts,

        int d_j((g^{jk} - d^{jk}) d_k u_i) phi_i
            = -int (g^{jk} - d^{jk}) d_k u_i d_j phi_i,
        int d_k(g^{kl} Gam^i_{jl}) u_j phi_i
            = -int g^{kl} Gam^i_{jl} (d_k u_j phi_i + u_j d_k phi_i),

    with no boundary contribution: the map is rigid near the body wall
    and the identity near the outer wall, so g = id and Gam = 0 on a
    neighborhood of both.  Everything else is evaluated pointwise.
    Returns an (n_steps, n_y) array; row n is applied at implicit level
    n + 1, matching the lagged Picard sources.
    """
    from . import transform as tr

    n_steps = traj.n_steps
    nu = problem.params.nu
    qp, qw, phi, dofmap = op._quad
    G = op._quad_grad
    n_e, n_q = qw.shape
    path = tr.rigid_states_from_trajectory(op, traj)
    maps = tr.build_extension_flow(traj.times, path, problem.domain, grid,
                                   dt_flow=dt / 4.0)
    eye = np.eye(2)
    loads = np.zeros((n_steps, op.n_y))
    for n in range(1, n_steps + 1):
        met = tr.metric_tensors(maps, n)
        gam = tr.christoffel(met)
        ydot = -np.einsum("...ij,...j->...i", met.invgradX, maps.dXdt[n])
        mcoef = (np.einsum("...ijk,...k->...ij", gam, ydot)
                 + np.einsum("...ik,...kj->...ij", met.invgradX,
                             maps.dgradXdt[n]))
        fields = np.concatenate([
            grid.flat(met.g_up).reshape(grid.n_points, 4),
            grid.flat(gam).reshape(grid.n_points, 8),
            grid.flat(ydot).reshape(grid.n_points, 2),
            grid.flat(mcoef).reshape(grid.n_points, 4),
        ], axis=1)
        q = interp @ fields
        g_up = q[:, 0:4].reshape(n_e, n_q, 2, 2)
        gm = q[:, 4:12].reshape(n_e, n_q, 2, 2, 2)
        yd = q[:, 12:14].reshape(n_e, n_q, 2)
        mc = q[:, 14:18].reshape(n_e, n_q, 2, 2)

        y = traj.states[n]
        u, du, dp = _quad_fields(op, y, traj.pressures[n])

        # pointwise part of F (first-order terms only)
        term2 = 2.0 * np.einsum("eqkl,eqijk,eqjl->eqi", g_up, gm, du)
        quad = np.einsum("eqkl,eqmjl,eqikm->eqij", g_up, gm, gm)
        f_pt = nu * (term2 + np.einsum("eqij,eqj->eqi", quad, u))
        f_pt -= (np.einsum("eqj,eqij->eqi", yd, du)
                 + np.einsum("eqij,eqj->eqi", mc, u))
        f_pt -= (np.einsum("eqj,eqij->eqi", u, du)
                 + np.einsum("eqijk,eqj,eqk->eqi", gm, u, u))
        f_pt += dp - np.einsum("eqij,eqj->eqi", g_up, dp)
        contrib = np.einsum("eq,qa,eqi->eai", qw, phi, f_pt)

        # flux terms, integrated by parts
        A = g_up - eye
        contrib -= nu * np.einsum("eq,eqjk,eqik,eqaj->eai", qw, A, du, G)
        ggam = np.einsum("eqkl,eqijl->eqijk", g_up, gm)
        contrib -= nu * np.einsum("eq,eqijk,eqjk,qa->eai", qw, ggam, du, phi)
        contrib -= nu * np.einsum("eq,eqijk,eqj,eqak->eai", qw, ggam, u, G)

        load = loads[n - 1]
        np.add.at(load, dofmap[:, :4], contrib[:, :, 0])
        np.add.at(load, dofmap[:, 4:], contrib[:, :, 1])
        ell, k = op.rigid_of(y)
        load[op.n_u : op.n_u + 2] = -problem.params.m * k * perp(ell)
    return loads


def _remainder_diff(op, loads):
    """Norm of a remainder (difference): max over steps of the energy
    norm of the Riesz lift of each load functional."""
    out = 0.0
    for n in range(len(loads)):
        z, _ = op.stepper.solve_shifted(0.0, loads[n])
        out = max(out, np.sqrt(max(float(z @ loads[n]), 0.0)))
    return float(out)
