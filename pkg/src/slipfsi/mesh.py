"""Triangle meshes for the annular fluid region.

The solver meshes only the fluid; the rigid body is never meshed (its
motion enters through two extra velocity unknowns).  The built-in
generator lays a structured polar lattice between the body circle and
the outer circle, which keeps boundary edges exactly on chords of the
two circles and makes point location O(1).  General meshes can be read
from a plain text format (see ``save``/``load``).

Boundary edges are oriented with the fluid on the left, so the
right-hand normal of each edge points out of the fluid: radially out on
the outer circle, into the body on the body circle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MeshTooCoarse

MARKER_OUTER = 1
MARKER_BODY = 2


@dataclass
class AnnulusStructure:
    """Polar-lattice bookkeeping for generated meshes."""

    r_in: float
    r_out: float
    n_r: int
    n_phi: int

    @property
    def r(self):
        return np.linspace(self.r_in, self.r_out, self.n_r + 1)

    @property
    def phi(self):
        return np.linspace(0.0, 2.0 * np.pi, self.n_phi, endpoint=False)


class TriMesh:
    def __init__(self, vertices, triangles, boundary_edges, boundary_markers,
                 structure: AnnulusStructure | None = None):
        self.vertices = np.asarray(vertices, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        self.boundary_edges = np.asarray(boundary_edges, dtype=np.int64)
        self.boundary_markers = np.asarray(boundary_markers, dtype=np.int64)
        self.structure = structure
        self._validate()
        self._build_derived()

    # ------------------------------------------------------------- validity
    def _validate(self):
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshTooCoarse("vertices must be (n, 2)")
        tp = self.vertices[self.triangles]
        d1 = tp[:, 1] - tp[:, 0]
        d2 = tp[:, 2] - tp[:, 0]
        areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        if len(areas) < 16 or np.any(areas <= 0):
            raise MeshTooCoarse(
                f"{int(np.sum(areas <= 0))} non-positive triangle areas "
                f"({len(areas)} triangles)"
            )
        ev = self.vertices[self.boundary_edges[:, 1]] - self.vertices[self.boundary_edges[:, 0]]
        if np.any(np.hypot(ev[:, 0], ev[:, 1]) <= 0):
            raise MeshTooCoarse("degenerate boundary edge")

    def _build_derived(self):
        v, t = self.vertices, self.triangles
        tp = v[t]                                       # (n_t, 3, 2)
        d1 = tp[:, 1] - tp[:, 0]
        d2 = tp[:, 2] - tp[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        self.areas = 0.5 * det
        # grads[e, i, :] = gradient of the P1 hat of local vertex i
        g = np.empty((len(t), 3, 2))
        g[:, 1, 0] = d2[:, 1] / det
        g[:, 1, 1] = -d2[:, 0] / det
        g[:, 2, 0] = -d1[:, 1] / det
        g[:, 2, 1] = d1[:, 0] / det
        g[:, 0] = -g[:, 1] - g[:, 2]
        self.grads = g
        self.centroids = tp.mean(axis=1)

        be = self.boundary_edges
        ev = v[be[:, 1]] - v[be[:, 0]]
        self.edge_len = np.hypot(ev[:, 0], ev[:, 1])
        self.edge_tan = ev / self.edge_len[:, None]
        # fluid on the left -> right-hand normal points out of the fluid
        self.edge_nrm = np.stack([self.edge_tan[:, 1], -self.edge_tan[:, 0]], axis=1)
        self.edge_mid = 0.5 * (v[be[:, 0]] + v[be[:, 1]])

        edges_all = np.concatenate(
            [tp[:, 1] - tp[:, 0], tp[:, 2] - tp[:, 1], tp[:, 0] - tp[:, 2]]
        )
        self.h_max = float(np.hypot(edges_all[:, 0], edges_all[:, 1]).max())
        self.tolerance = self.h_max**2

    # ------------------------------------------------------------ accessors
    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def edges_with_marker(self, marker):
        return np.nonzero(self.boundary_markers == marker)[0]

    # -------------------------------------------------------- point location
    def locate(self, pts, clip=True):
        """Map points to (triangle index, barycentric coords).

        Requires a structured (generated) mesh.  Points are interpreted
        in the polar lattice; radii slightly outside the annulus are
        clipped when ``clip`` is set.
        """
        s = self.structure
        if s is None:
            raise MeshTooCoarse("point location needs a structured mesh")
        pts = np.atleast_2d(pts)
        r = np.hypot(pts[:, 0], pts[:, 1])
        if clip:
            r = np.clip(r, s.r_in, s.r_out)
        phi = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2.0 * np.pi)
        dr = (s.r_out - s.r_in) / s.n_r
        dphi = 2.0 * np.pi / s.n_phi
        i = np.clip((r - s.r_in) / dr, 0, s.n_r - 1e-12).astype(np.int64)
        j = np.clip(phi / dphi, 0, s.n_phi - 1e-12).astype(np.int64)
        x = pts if not clip else r[:, None] * np.stack([np.cos(phi), np.sin(phi)], axis=1)
        # The ray walls of each cell are exact, but the ring estimate can
        # be off by one inside the sliver between a circle and its chord,
        # so scan rings i-1, i, i+1 at the guessed j and keep the best.
        tri = np.full(len(x), -1, dtype=np.int64)
        best = np.full(len(x), -np.inf)
        lam = np.zeros((len(x), 3))
        for di in (0, -1, 1):
            ii = i + di
            valid = (ii >= 0) & (ii < s.n_r) & (best < -1e-12)
            if not np.any(valid):
                continue
            base = 2 * (ii[valid] * s.n_phi + j[valid])
            for off in (0, 1):
                cand = base + off
                lam_c = self._barycentric(cand, x[valid])
                score = lam_c.min(axis=1)
                take = score > best[valid]
                sel = np.where(valid)[0][take]
                tri[sel] = cand[take]
                lam[sel] = lam_c[take]
                best[sel] = score[take]
        return tri, np.clip(lam, 0.0, 1.0)

    def _barycentric(self, tri, pts):
        tp = self.vertices[self.triangles[tri]]
        d1 = tp[:, 1] - tp[:, 0]
        d2 = tp[:, 2] - tp[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        rp = pts - tp[:, 0]
        l1 = (rp[:, 0] * d2[:, 1] - rp[:, 1] * d2[:, 0]) / det
        l2 = (d1[:, 0] * rp[:, 1] - d1[:, 1] * rp[:, 0]) / det
        return np.stack([1.0 - l1 - l2, l1, l2], axis=1)

    # ------------------------------------------------------------------- io
    def save(self, path):
        with open(path, "w") as f:
            f.write(f"vertices {self.n_vertices}\n")
            for x, y in self.vertices:
                f.write(f"{float(x)!r} {float(y)!r}\n")
            f.write(f"triangles {self.n_triangles}\n")
            for a, b, c in self.triangles:
                f.write(f"{a} {b} {c}\n")
            f.write(f"boundary_markers {len(self.boundary_edges)}\n")
            for (a, b), m in zip(self.boundary_edges, self.boundary_markers):
                f.write(f"{a} {b} {m}\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            tokens = f.read().split()
        pos = 0

        def expect(name):
            nonlocal pos
            if tokens[pos] != name:
                raise MeshTooCoarse(f"mesh file: expected section {name!r}")
            n = int(tokens[pos + 1])
            pos += 2
            return n

        n = expect("vertices")
        verts = np.array(tokens[pos:pos + 2 * n], dtype=float).reshape(n, 2)
        pos += 2 * n
        n = expect("triangles")
        tris = np.array(tokens[pos:pos + 3 * n], dtype=np.int64).reshape(n, 3)
        pos += 3 * n
        n = expect("boundary_markers")
        rows = np.array(tokens[pos:pos + 3 * n], dtype=np.int64).reshape(n, 3)
        return cls(verts, tris, rows[:, :2], rows[:, 2])


def annulus_mesh(r_in, r_out, n_r, n_phi):
    """Structured triangulation of the annulus r_in <= r <= r_out.

    n_r radial intervals, n_phi angular intervals; 2*n_r*n_phi
    triangles.  Boundary edges carry MARKER_BODY on the inner circle and
    MARKER_OUTER on the outer circle, oriented with the fluid on the
    left.
    """
    if n_r < 2 or n_phi < 12:
        raise MeshTooCoarse("need at least 2 radial and 12 angular intervals")
    s = AnnulusStructure(float(r_in), float(r_out), int(n_r), int(n_phi))
    r = s.r
    phi = s.phi
    R, P = np.meshgrid(r, phi, indexing="ij")
    verts = np.stack([(R * np.cos(P)).ravel(), (R * np.sin(P)).ravel()], axis=1)

    def idx(i, j):
        return i * n_phi + np.mod(j, n_phi)

    tris = []
    for i in range(n_r):
        j = np.arange(n_phi)
        a, b = idx(i, j), idx(i, j + 1)
        c, d = idx(i + 1, j), idx(i + 1, j + 1)
        # split along the a-d diagonal, both triangles counterclockwise;
        # order must stay aligned with locate()
        tri0 = np.stack([a, d, b], axis=1)
        tri1 = np.stack([a, c, d], axis=1)
        tris.append(np.stack([tri0, tri1], axis=1).reshape(-1, 3))
    tris = np.concatenate(tris, axis=0)

    j = np.arange(n_phi)
    outer = np.stack([idx(n_r, j), idx(n_r, j + 1)], axis=1)          # ccw
    body = np.stack([idx(0, j + 1), idx(0, j)], axis=1)               # cw
    edges = np.concatenate([outer, body], axis=0)
    markers = np.concatenate(
        [np.full(n_phi, MARKER_OUTER), np.full(n_phi, MARKER_BODY)]
    )
    return TriMesh(verts, tris, edges, markers, structure=s)
