"""Flow map construction and transformed operators.

Oracles, written before the implementations they check:
  * analytic derivatives of exp/trig fields for the stencil order;
  * the pure-rotation path, whose flow map is the rotation matrix
    itself wherever the cutoff is 1 and the identity outside it;
  * metric compatibility, d_l g_ij = g_mj Gam^m_il + g_im Gam^m_jl,
    which holds for the standard Christoffel symbols only;
  * round-trip transport (forward then backward flow).
"""

import numpy as np
import pytest

from slipfsi import mesh as meshmod
from slipfsi import transform as tr
from slipfsi.errors import FlowIntegrationDiverged, GridMismatch
from slipfsi.geometry import benchmark_domain, rotation_matrix


def make_grid(n_r=16, n_phi=64):
    r = np.linspace(0.2, 1.0, n_r + 1)
    phi = np.arange(n_phi) * 2 * np.pi / n_phi
    return tr.PolarGrid(r, phi)


def scalar_field(grid):
    x, y = grid.pts[:, 0], grid.pts[:, 1]
    f = np.exp(0.8 * x) * np.sin(1.7 * y)
    fx = 0.8 * f
    fy = np.exp(0.8 * x) * np.cos(1.7 * y) * 1.7
    return (f.reshape(grid.shape), fx.reshape(grid.shape),
            fy.reshape(grid.shape))


def test_cartesian_derivatives_fourth_order():
    errs = []
    for n in (12, 24):
        grid = make_grid(n, 4 * n)
        f, fx, fy = scalar_field(grid)
        ex = np.abs(grid.dx(f) - fx).max()
        ey = np.abs(grid.dy(f) - fy).max()
        errs.append(max(ex, ey))
    rate = np.log2(errs[0] / errs[1])
    assert rate > 3.5, (errs, rate)


def test_quad_weights_measure():
    grid = make_grid(40, 160)
    area = grid.quad_weights.sum()
    assert abs(area - np.pi * (1.0 - 0.2**2)) <= 1e-10
    # second moment: trapezoid converges at second order
    val = grid.quad_weights @ (grid.pts**2).sum(axis=1)
    exact = np.pi / 2 * (1.0 - 0.2**4)
    assert abs(val - exact) <= 1e-3 * exact


def test_interpolation_bilinear_exactness():
    grid = make_grid(10, 40)
    r = np.hypot(grid.pts[:, 0], grid.pts[:, 1])
    phi = np.mod(np.arctan2(grid.pts[:, 1], grid.pts[:, 0]), 2 * np.pi)
    vals = 0.3 + 1.2 * r
    rng = np.random.default_rng(0)
    rr = rng.uniform(0.2, 1.0, 50)
    pp = rng.uniform(0, 2 * np.pi, 50)
    pts = np.stack([rr * np.cos(pp), rr * np.sin(pp)], axis=1)
    P = grid.interpolation_to(pts)
    got = P @ vals
    assert np.abs(got - (0.3 + 1.2 * rr)).max() <= 1e-12


def test_identity_maps_degenerate_exactly():
    grid = make_grid(12, 48)
    times = np.linspace(0.0, 1.0, 6)
    maps = tr.TransformMaps.identity(grid, times)
    met = tr.metric_tensors(maps, 3)
    gam = tr.christoffel(met)
    # the curvature terms see only roundoff of the constant metric
    # pushed through the stencil matrices
    assert np.abs(gam).max() <= 1e-13
    rng = np.random.default_rng(1)
    u = rng.standard_normal(grid.shape + (2,))
    p = rng.standard_normal(grid.shape)
    lap = tr.laplacian_h(u, grid)
    assert np.abs(tr.apply_L(u, met, gam) - lap).max() <= 1e-10
    assert np.abs(tr.apply_M(u, maps, met, gam, 3)).max() == 0.0
    assert np.array_equal(tr.apply_G(p, met), tr.gradient_h(p, grid))
    # N degenerates to plain advection
    du = grid.cart_grad_vector(u)
    adv = np.einsum("...j,...ij->...i", u, du)
    assert np.abs(tr.apply_N(u, grid, gam) - adv).max() <= 1e-12


@pytest.fixture(scope="module")
def rotation_setup():
    domain = benchmark_domain()
    grid = make_grid(16, 64)
    omega = 0.9
    times = np.linspace(0.0, 1.0, 26)
    path = tr.BodyPath(times=times, h=np.zeros((26, 2)),
                       theta=omega * times, hdot=np.zeros((26, 2)),
                       omega=np.full(26, omega))
    maps = tr.build_extension_flow(times, path, domain, grid)
    return domain, grid, omega, times, maps


def test_rotation_flow_matches_rotation(rotation_setup):
    domain, grid, omega, times, maps = rotation_setup
    flow = maps.flow
    r = np.hypot(grid.pts[:, 0], grid.pts[:, 1])
    # the rigid zone ends at the swept radius, which for a centered
    # rotation is the body ring itself
    inner = r <= flow.r0 + 1e-9
    outer = r >= flow.r1 + 1e-9
    assert inner.any() and outer.any()
    n = len(times) - 1
    R = rotation_matrix(omega * times[n])
    X = maps.X[n].reshape(-1, 2)
    gX = maps.gradX[n].reshape(-1, 2, 2)
    exact = grid.pts @ R.T
    assert np.abs(X[inner] - exact[inner]).max() <= 1e-9
    # the quintic bump is C^2 only, so gradient transport at the ring
    # touching the band is second order in the substep, not exact
    assert np.abs(gX[inner] - R[None]).max() <= 5e-4
    assert np.abs(X[outer] - grid.pts[outer]).max() <= 1e-12
    assert np.abs(gX[outer] - np.eye(2)[None]).max() <= 1e-12


def test_volume_preserved(rotation_setup):
    *_, maps = rotation_setup
    assert np.abs(maps.detgradX - 1.0).max() <= 1e-8


def test_metric_inverse_consistent(rotation_setup):
    *_, maps = rotation_setup
    met = tr.metric_tensors(maps, len(maps.times) - 1)
    prod = np.einsum("...ij,...jk->...ik", met.g_lo, met.g_up)
    # roundoff is amplified by the squared condition number of grad X
    # inside the cutoff transition ring
    assert np.abs(prod - np.eye(2)).max() <= 1e-11


def test_rotation_metric_flat(rotation_setup):
    # the map is an isometry where chi is constant, so g = I and Gamma = 0
    domain, grid, omega, times, maps = rotation_setup
    flow = maps.flow
    met = tr.metric_tensors(maps, len(times) - 1)
    gam = tr.christoffel(met)
    r = grid.R
    # rigid zone: pointwise isometry, so g = I there without any stencil;
    # tolerance tracks the C^2-limited gradient transport at the ring
    rigid = r <= flow.r0 + 1e-9
    assert rigid.any()
    assert np.abs(met.g_lo[rigid] - np.eye(2)).max() <= 1e-3
    # past the transition band the map is the identity; Christoffel uses
    # grid derivatives whose stencils reach two cells back toward the
    # band, so restrict further out
    outer = r >= flow.r1 + 1e-9
    far = r >= flow.r1 + 2.5 * (grid.r[1] - grid.r[0])
    assert far.any()
    assert np.abs(met.g_lo[outer] - np.eye(2)).max() <= 1e-8
    assert np.abs(gam[far]).max() <= 1e-6


def general_path(times, amp=0.10, rot=0.35):
    # translation along a bent track plus rotation, starting centered;
    # default amplitude keeps the swept radius plus the transition band
    # clear of the control region at r = 0.45
    s = times / times[-1]
    ramp = s**2 * (3 - 2 * s)
    h = amp * np.stack([ramp, 0.5 * ramp**2], axis=1)
    dramp = (6 * s * (1 - s)) / times[-1]
    hdot = amp * np.stack([dramp, ramp * dramp], axis=1)
    theta = rot * ramp
    omega = rot * dramp
    return tr.BodyPath(times=times, h=h, theta=theta, hdot=hdot, omega=omega)


@pytest.fixture(scope="module")
def general_setup():
    domain = benchmark_domain()
    grid = make_grid(16, 64)
    times = np.linspace(0.0, 0.8, 21)
    path = general_path(times)
    maps = tr.build_extension_flow(times, path, domain, grid)
    return domain, grid, times, path, maps


def test_roundtrip_inversion(general_setup):
    domain, grid, times, path, maps = general_setup
    n = len(times) - 1
    x = maps.X[n].reshape(-1, 2)
    back = maps.invert_points(n, x)
    assert np.abs(back - grid.pts).max() <= 1e-8


def test_map_gradient_matches_flow_differences(general_setup):
    # divided differences of the transported map itself; grid stencils
    # cannot resolve the cutoff band, but transporting y +- eps e_j with
    # the same integrator isolates the recorded gradient to O(eps^2)
    domain, grid, times, path, maps = general_setup
    flow = maps.flow
    n = len(times) - 1
    rng = np.random.default_rng(7)
    idx = rng.choice(grid.pts.shape[0], size=12, replace=False)
    eps = 1e-5
    for flat in idx:
        y = grid.pts[flat]
        stencil = np.array([y, y + [eps, 0], y - [eps, 0],
                            y + [0, eps], y - [0, eps]])
        x = flow.transport(stencil, times[0], times[n],
                           (times[1] - times[0]) / 4.0)
        fd = np.stack([(x[1] - x[2]) / (2 * eps),
                       (x[3] - x[4]) / (2 * eps)], axis=1)
        rec = maps.gradX[n].reshape(-1, 2, 2)[flat]
        assert np.abs(fd - rec).max() <= 1e-5 * (1.0 + np.abs(rec).max()), \
            (flat, np.abs(fd - rec).max())


def test_map_time_derivatives_consistent(general_setup):
    # central differencing of the recorded samples must converge at
    # second order in dt to the recorded analytic time derivatives
    domain, grid, times, path, maps = general_setup

    def fd_errors(n_t):
        ts = np.linspace(times[0], times[-1], n_t)
        p = general_path(ts)
        m = tr.build_extension_flow(ts, p, domain, grid)
        k = n_t // 2
        dt = ts[1] - ts[0]
        ex = np.abs((m.X[k + 1] - m.X[k - 1]) / (2 * dt) - m.dXdt[k]).max()
        eg = np.abs((m.gradX[k + 1] - m.gradX[k - 1]) / (2 * dt)
                    - m.dgradXdt[k]).max()
        return ex, eg, np.abs(m.dgradXdt[k]).max()

    ex1, eg1, _ = fd_errors(41)
    ex2, eg2, g_scale = fd_errors(81)
    # dXdt differences are clean second order; the gradient rate drops
    # to first order because chi''' jumps at the band edges cross the
    # stencil window, but the limit is still the recorded derivative
    assert ex2 <= 0.35 * ex1, (ex1, ex2)
    assert eg2 <= 0.7 * eg1, (eg1, eg2)
    assert ex2 <= 1e-3 * max(1.0, np.abs(maps.dXdt).max())
    assert eg2 <= 0.02 * g_scale


def test_body_tracking(general_setup):
    *_, maps = general_setup
    assert maps.meta["body_tracking_error"] <= 1e-7


def test_metric_compatibility_standard_only(general_setup):
    domain, grid, times, path, maps = general_setup
    n = len(times) - 1
    met = tr.metric_tensors(maps, n)
    dg = np.stack([grid.dx(met.g_lo), grid.dy(met.g_lo)], axis=-1)
    scale = np.abs(dg).max()

    def residual(gam):
        pred = (np.einsum("...mj,...mil->...ijl", met.g_lo, gam)
                + np.einsum("...im,...mjl->...ijl", met.g_lo, gam))
        return np.abs(pred - dg).max()

    good = residual(tr.christoffel(met, "standard"))
    bad = residual(tr.christoffel(met, "as_written"))
    assert good <= 1e-3 * scale, (good, scale)
    assert bad > 10 * good


def test_piola_rotation_equivariance(rotation_setup):
    domain, grid, omega, times, maps = rotation_setup
    n = len(times) - 1
    u_ref, det = tr.piola_transform(
        maps, n, lambda x: omega * np.stack([-x[:, 1], x[:, 0]], axis=1))
    exact = omega * np.stack([-grid.pts[:, 1], grid.pts[:, 0]],
                             axis=1).reshape(grid.shape + (2,))
    flow = maps.flow
    r = grid.R
    inner = r <= flow.r0 + 1e-9
    far = r >= flow.r1 + 1e-9
    assert inner.any() and far.any()
    assert np.abs(u_ref[inner] - exact[inner]).max() <= 1e-8
    # past the band the map is the identity, so the pull-back is exact
    assert np.abs(u_ref[far] - exact[far]).max() <= 1e-12
    assert np.abs(det - 1.0).max() <= 1e-8


def test_grid_mismatch_raised(general_setup):
    _, grid, times, _, maps = general_setup
    met = tr.metric_tensors(maps, 0)
    bad = np.zeros((3, 5, 2))
    with pytest.raises(GridMismatch):
        tr.apply_N(bad, grid, tr.christoffel(met))
    with pytest.raises(GridMismatch):
        tr.laplacian_h(bad, grid)


def test_offcenter_start_needs_ramp():
    times = np.linspace(0.0, 1.0, 5)
    with pytest.raises(FlowIntegrationDiverged):
        tr.BodyPath(times=times, h=np.full((5, 2), 0.3),
                    theta=np.zeros(5), hdot=np.zeros((5, 2)),
                    omega=np.zeros(5))


def test_ramp_reaches_initial_pose():
    domain = benchmark_domain()
    grid = make_grid(14, 56)
    times = np.linspace(0.0, 0.5, 11)
    h0 = np.array([0.09, -0.06])
    th0 = 0.3
    path = tr.BodyPath(times=times, h=np.tile(h0, (11, 1)),
                       theta=np.full(11, th0), hdot=np.zeros((11, 2)),
                       omega=np.zeros(11), t_pre=0.4)
    maps = tr.build_extension_flow(times, path, domain, grid)
    # X(0, .) should carry the reference body onto the placed body
    yb = grid.pts.reshape(grid.shape + (2,))[0]
    target = h0 + yb @ rotation_matrix(th0).T
    assert np.abs(maps.X[0][0] - target).max() <= 1e-6
    assert maps.meta["body_tracking_error"] <= 1e-6


def test_constant_trajectory_is_identity():
    domain = benchmark_domain()
    grid = make_grid(10, 40)
    times = np.linspace(0.0, 1.0, 6)
    path = tr.BodyPath(times=times, h=np.zeros((6, 2)), theta=np.zeros(6),
                       hdot=np.zeros((6, 2)), omega=np.zeros(6))
    maps = tr.build_extension_flow(times, path, domain, grid)
    pts = grid.pts.reshape(grid.shape + (2,))
    # zero velocity leaves every integrator stage untouched
    assert np.array_equal(maps.X, np.tile(pts, (6, 1, 1, 1)))
    assert np.array_equal(maps.detgradX, np.ones((6,) + grid.shape))


def test_pure_translation_matches_near_body():
    domain = benchmark_domain()
    grid = make_grid(16, 64)
    delta = 0.08
    times = np.linspace(0.0, 1.0, 11)
    h = np.stack([delta * times, np.zeros(11)], axis=1)
    path = tr.BodyPath(times=times, h=h, theta=np.zeros(11),
                       hdot=np.tile([delta, 0.0], (11, 1)),
                       omega=np.zeros(11))
    maps = tr.build_extension_flow(times, path, domain, grid)
    n = len(times) - 1
    r = np.hypot(grid.pts[:, 0], grid.pts[:, 1])
    ring = r <= domain.body.radius + 1e-9
    X = maps.X[n].reshape(-1, 2)
    assert np.abs(X[ring] - (grid.pts[ring] + h[n])).max() <= 1e-9
    assert np.abs(maps.detgradX - 1.0).max() <= 1e-8
    # determinant oracle: divided differences of the transported map,
    # accurate to the eps^2 truncation of the stencil
    flow = maps.flow
    rng = np.random.default_rng(3)
    eps = 1e-5
    for flat in rng.choice(len(grid.pts), 8, replace=False):
        y = grid.pts[flat]
        st = np.array([y + [eps, 0], y - [eps, 0], y + [0, eps], y - [0, eps]])
        x = flow.transport(st, 0.0, times[n], (times[1] - times[0]) / 4.0)
        fd = np.stack([(x[0] - x[1]) / (2 * eps),
                       (x[2] - x[3]) / (2 * eps)], axis=1)
        assert abs(fd[0, 0] * fd[1, 1] - fd[0, 1] * fd[1, 0] - 1.0) <= 1e-6


def test_metric_product_general_map(general_setup):
    *_, maps = general_setup
    met = tr.metric_tensors(maps, len(maps.times) - 1)
    prod = np.einsum("...ij,...jk->...ik", met.g_lo, met.g_up)
    assert np.abs(prod - np.eye(2)).max() <= 1e-8


def synthetic_shear_maps(n_r, n_phi, eps=0.12):
    """Exact volume-preserving double shear; no flow integration."""
    grid = make_grid(n_r, n_phi)
    y = grid.pts
    X = np.stack([y[:, 0] + eps * y[:, 1]**2,
                  y[:, 1] + eps * (y[:, 0] + eps * y[:, 1]**2)], axis=1)
    g = np.empty((len(y), 2, 2))
    g[:, 0, 0] = 1.0
    g[:, 0, 1] = 2 * eps * y[:, 1]
    g[:, 1, 0] = eps
    g[:, 1, 1] = 1.0 + 2 * eps**2 * y[:, 1]
    det = g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] * g[:, 1, 0]
    shp = grid.shape
    zeros = np.zeros((1,) + shp + (2,))
    return grid, tr.TransformMaps(
        grid=grid, times=np.array([0.0]), X=X.reshape((1,) + shp + (2,)),
        gradX=g.reshape((1,) + shp + (2, 2)), dXdt=zeros,
        dgradXdt=np.zeros((1,) + shp + (2, 2)),
        detgradX=det.reshape((1,) + shp))


def test_piola_preserves_discrete_divergence():
    grid, maps = synthetic_shear_maps(32, 128)

    def U(x):
        sx = 1.3 * np.cos(1.3 * x[:, 0]) * np.cos(0.9 * x[:, 1])
        sy = -0.9 * np.sin(1.3 * x[:, 0]) * np.sin(0.9 * x[:, 1])
        return np.stack([-sy, sx], axis=1)    # perp gradient, div-free

    u, det = tr.piola_transform(maps, 0, U)
    assert np.abs(det - 1.0).max() <= 1e-12
    Ur = U(grid.pts).reshape(grid.shape + (2,))
    div_U = np.abs(grid.dx(Ur[..., 0]) + grid.dy(Ur[..., 1])).max()
    div_u = np.abs(grid.dx(u[..., 0]) + grid.dy(u[..., 1])).max()
    assert div_u <= 10.0 * div_U + 1e-8, (div_u, div_U)


def test_piola_roundtrip(general_setup):
    domain, grid, times, path, maps = general_setup
    n = len(times) - 1

    def U(x):
        return np.stack([np.sin(0.9 * x[:, 0]) + 0.2 * x[:, 1],
                         np.cos(1.1 * x[:, 1])], axis=1)

    # exact sampling: pull back then push forward is pointwise algebra
    u, _ = tr.piola_transform(maps, n, U)
    push = tr.piola_push(maps, n, u)
    exact = U(maps.X[n].reshape(-1, 2)).reshape(grid.shape + (2,))
    assert np.abs(push - exact).max() <= 1e-12
    # grid-sampled physical field: round trip limited by interpolation
    U_grid = U(grid.pts)
    P = grid.interpolation_to(maps.X[n].reshape(-1, 2))
    u2, _ = tr.piola_transform(maps, n, lambda x: np.stack(
        [P @ U_grid[:, 0], P @ U_grid[:, 1]], axis=1))
    push2 = tr.piola_push(maps, n, u2)
    interp_err = np.abs(np.stack([P @ U_grid[:, 0], P @ U_grid[:, 1]],
                                 axis=1) - U(maps.X[n].reshape(-1, 2))).max()
    assert np.abs(push2 - exact).max() <= 2.0 * interp_err + 1e-12


def test_dump_csv(tmp_path, general_setup):
    *_, maps = general_setup
    out = tmp_path / "maps.csv"
    maps.dump_csv(out)
    data = np.loadtxt(out, delimiter=",", skiprows=1)
    n_pts = maps.grid.pts.shape[0]
    assert data.shape == (len(maps.times) * n_pts, 6)
    row = data[-n_pts:]
    assert np.abs(row[:, 0] - maps.times[-1]).max() == 0.0
    assert np.abs(row[:, 1:3] - maps.grid.pts).max() == 0.0
    assert np.abs(row[:, 3:5] - maps.X[-1].reshape(-1, 2)).max() == 0.0
    assert np.abs(row[:, 5] - maps.detgradX[-1].reshape(-1)).max() == 0.0


def test_map_norm_bounded_by_path_norm():
    # sampled surrogate of the map regularity bound: the constant was
    # fitted once over these seeds and is frozen here
    domain = benchmark_domain()
    grid = make_grid(12, 48)
    frozen_c = 10.0
    T = 1.0
    tt = np.linspace(0, T, 11)
    dt = tt[1] - tt[0]
    pts = grid.pts.reshape(grid.shape + (2,))
    for seed in range(20):
        rg = np.random.default_rng(100 + seed)
        amp = rg.uniform(0.01, 0.09)
        a = rg.normal(size=(2, 2))
        b0 = rg.normal()
        raw = np.stack([a[i, 0] * np.sin(np.pi * tt / T)
                        + a[i, 1] * np.sin(2 * np.pi * tt / T)
                        for i in range(2)], axis=1)
        h = amp * raw / max(1e-9, np.hypot(raw[:, 0], raw[:, 1]).max())
        hd = np.gradient(h, tt, axis=0)
        th = 0.2 * b0 * np.sin(np.pi * tt / T)
        om = np.gradient(th, tt)
        path = tr.BodyPath(times=tt, h=h, theta=th, hdot=hd, omega=om)
        maps = tr.build_extension_flow(tt, path, domain, grid)
        surro = (np.abs(maps.X - pts[None]).max()
                 + np.abs(maps.gradX - np.eye(2)).max()
                 + np.abs(np.diff(maps.X, 2, axis=0) / dt**2).max() * dt)
        d2h = np.diff(h, 2, axis=0) / dt**2
        d2t = np.diff(th, 2) / dt**2
        path_norm = (np.sqrt((h**2).sum() * dt) + np.sqrt((hd**2).sum() * dt)
                     + np.sqrt((d2h**2).sum() * dt)
                     + np.sqrt((th**2).sum() * dt)
                     + np.sqrt((om**2).sum() * dt)
                     + np.sqrt((d2t**2).sum() * dt))
        assert surro <= frozen_c * path_norm, (seed, surro / path_norm)


def _symbolic_metric():
    sm = pytest.importorskip("sympy")
    y1, y2 = sm.symbols("y1 y2", real=True)
    eps = sm.Rational(3, 25)
    X1 = y1 + eps * y2**2
    X2 = y2 + eps * (y1 + eps * y2**2)
    J = sm.Matrix([[sm.diff(X1, y1), sm.diff(X1, y2)],
                   [sm.diff(X2, y1), sm.diff(X2, y2)]])
    assert sm.simplify(J.det()) == 1
    g = sm.simplify(J.T * J)
    gu = sm.simplify(g.inv())
    yy = (y1, y2)
    gam = [[[sum(gu[k, l] * (sm.diff(g[i, l], yy[j])
                             + sm.diff(g[j, l], yy[i])
                             - sm.diff(g[i, j], yy[l]))
                 for l in range(2)) / 2
             for j in range(2)] for i in range(2)] for k in range(2)]
    return sm, yy, g, gu, gam


def test_christoffel_matches_symbolic():
    sm, yy, g, gu, gam_sym = _symbolic_metric()
    grid, maps = synthetic_shear_maps(24, 256)
    met = tr.metric_tensors(maps, 0)
    gam = tr.christoffel(met, "standard")
    # lower-index symmetry of the standard symbols
    assert np.abs(gam - gam.swapaxes(-1, -2)).max() <= 1e-12
    p1, p2 = grid.pts[:, 0], grid.pts[:, 1]
    for k in range(2):
        for i in range(2):
            for j in range(2):
                f = sm.lambdify(yy, gam_sym[k][i][j], "numpy")
                ref = np.broadcast_to(f(p1, p2), p1.shape)
                err = np.abs(gam[..., k, i, j].reshape(-1) - ref).max()
                assert err <= 1e-6, (k, i, j, err)


def test_apply_L_matches_symbolic_formula():
    sm, yy, g, gu, gam_sym = _symbolic_metric()
    y1, y2 = yy
    u_sym = [sm.sin(sm.Rational(13, 10) * y1 + sm.Rational(3, 10) * y2),
             sm.cos(sm.Rational(7, 10) * y1 - sm.Rational(1, 2) * y2)]
    L_sym = []
    for i in range(2):
        t1 = sum(sm.diff(gu[j, k] * sm.diff(u_sym[i], yy[k]), yy[j])
                 for j in range(2) for k in range(2))
        t2 = 2 * sum(gu[k, l] * gam_sym[i][j][k] * sm.diff(u_sym[j], yy[l])
                     for j in range(2) for k in range(2) for l in range(2))
        t3 = sum((sum(sm.diff(gu[k, l] * gam_sym[i][j][l], yy[k])
                      for k in range(2) for l in range(2))
                  + sum(gu[k, l] * gam_sym[m][j][l] * gam_sym[i][k][m]
                        for k in range(2) for l in range(2)
                        for m in range(2))) * u_sym[j]
                 for j in range(2))
        L_sym.append(t1 + t2 + t3)
    # the one-sided radial stencils at the annulus ends carry much larger
    # truncation constants than the interior, so the radial count dominates
    grid, maps = synthetic_shear_maps(128, 512)
    met = tr.metric_tensors(maps, 0)
    gam = tr.christoffel(met, "standard")
    p1, p2 = grid.pts[:, 0], grid.pts[:, 1]
    u = np.stack([sm.lambdify(yy, u_sym[0], "numpy")(p1, p2),
                  sm.lambdify(yy, u_sym[1], "numpy")(p1, p2)],
                 axis=1).reshape(grid.shape + (2,))
    got = tr.apply_L(u, met, gam)
    ref = np.stack([sm.lambdify(yy, L_sym[0], "numpy")(p1, p2),
                    sm.lambdify(yy, L_sym[1], "numpy")(p1, p2)],
                   axis=1).reshape(grid.shape + (2,))
    scale = np.abs(ref).max()
    assert np.abs(got - ref).max() <= 1e-6 * scale, np.abs(got - ref).max()
