"""Synthetic meshes for experiments and verification: planar grids, random
Delaunay sheets, smooth height-field warps, icospheres, cone fans."""

from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay

from .mesh import TriMesh


def grid_mesh(n: int = 8, extent: float = 1.0, z: float = 0.0) -> TriMesh:
    """Regular (n+1)^2-vertex triangulated square in the z-plane, with UVs."""
    lin = np.linspace(0.0, extent, n + 1)
    xx, yy = np.meshgrid(lin, lin, indexing="ij")
    verts = np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)], axis=1)
    faces = []
    for i in range(n):
        for j in range(n):
            v00 = i * (n + 1) + j
            v10 = (i + 1) * (n + 1) + j
            v01 = i * (n + 1) + j + 1
            v11 = (i + 1) * (n + 1) + j + 1
            faces.append([v00, v10, v11])
            faces.append([v00, v11, v01])
    faces = np.asarray(faces)
    uv = verts[faces][:, :, :2] / extent
    return TriMesh(verts, faces, uv)


def delaunay_sheet(n_vertices: int, rng: np.random.Generator,
                   extent: float = 1.0) -> TriMesh:
    """Random planar Delaunay mesh over [0, extent]^2 with pinned corners."""
    corners = np.array([[0, 0], [extent, 0], [0, extent], [extent, extent]], dtype=float)
    pts = rng.random((max(n_vertices - 4, 0), 2)) * extent
    pts = np.vstack([corners, pts])
    tri = Delaunay(pts)
    faces = tri.simplices.copy()
    # enforce counter-clockwise orientation in the plane
    e1 = pts[faces[:, 1]] - pts[faces[:, 0]]
    e2 = pts[faces[:, 2]] - pts[faces[:, 0]]
    flip = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    verts = np.column_stack([pts, np.zeros(len(pts))])
    uv = pts[faces] / extent
    return TriMesh(verts, faces, uv)


def warp_heightfield(mesh: TriMesh, rng: np.random.Generator,
                     amplitude: float = 0.08, freq: float = 2.0) -> TriMesh:
    """Displace a planar mesh by a smooth random height field (stays manifold)."""
    v = mesh.vertices.copy()
    phase = rng.random(4) * 2 * np.pi
    w = freq * 2 * np.pi
    v[:, 2] += amplitude * (
        np.sin(w * v[:, 0] + phase[0]) * np.cos(w * v[:, 1] + phase[1])
        + 0.5 * np.sin(0.5 * w * v[:, 0] + phase[2]) * np.sin(w * v[:, 1] + phase[3]))
    return TriMesh(v, mesh.faces.copy(), None if mesh.uv is None else mesh.uv.copy())


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriMesh:
    """Unit icosahedron subdivided and projected to the sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    for _ in range(subdivisions):
        verts, faces = _midpoint_subdivide(verts, faces)
        verts /= np.linalg.norm(verts, axis=1)[:, None]
    return TriMesh(verts * radius, faces, None)


def _midpoint_subdivide(verts, faces):
    verts = list(map(np.asarray, verts))
    cache = {}

    def midpoint(a, b):
        key = (min(a, b), max(a, b))
        if key not in cache:
            cache[key] = len(verts)
            verts.append(0.5 * (verts[a] + verts[b]))
        return cache[key]

    out = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return np.asarray(verts), np.asarray(out)


def subdivide_midpoint(mesh: TriMesh) -> TriMesh:
    """One 1-to-4 midpoint subdivision (roughly quadruples |V|)."""
    verts, faces = _midpoint_subdivide(mesh.vertices, mesh.faces)
    uv = None
    if mesh.uv is not None:
        # rebuild per-corner UVs by barycentric placement within old faces
        uv = np.zeros((len(faces), 3, 2))
        for old_f in range(mesh.n_faces):
            o = mesh.uv[old_f]
            mids = [(o[0] + o[1]) / 2, (o[1] + o[2]) / 2, (o[2] + o[0]) / 2]
            local = [
                [o[0], mids[0], mids[2]],
                [o[1], mids[1], mids[0]],
                [o[2], mids[2], mids[1]],
                [mids[0], mids[1], mids[2]],
            ]
            for k in range(4):
                uv[4 * old_f + k] = local[k]
    return TriMesh(verts, faces, uv)


def cone_fan(n: int = 6, total_angle: float = np.pi, edge_len: float = 1.0) -> TriMesh:
    """Fan of n triangles around an apex whose corner angles sum to
    ``total_angle``; all rim edges from the apex have length ``edge_len``."""
    beta = total_angle / n
    # cone with apex half-angle derived from the per-wedge corner angle:
    # rim point (rho cos t_j, rho sin t_j, -h) with  rho^2 (1 - cos dtheta)
    # = L^2 (1 - cos beta), dtheta = 2 pi / n
    dtheta = 2 * np.pi / n
    rho2 = edge_len ** 2 * (1 - np.cos(beta)) / (1 - np.cos(dtheta))
    rho = np.sqrt(rho2)
    h = np.sqrt(max(edge_len ** 2 - rho2, 0.0))
    verts = [np.array([0.0, 0.0, 0.0])]
    for j in range(n):
        t = dtheta * j
        verts.append(np.array([rho * np.cos(t), rho * np.sin(t), -h]))
    faces = [[0, 1 + j, 1 + (j + 1) % n] for j in range(n)]
    return TriMesh(np.asarray(verts), np.asarray(faces), None)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random 3D rotation matrix via QR."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def rigid_transform(mesh: TriMesh, R: np.ndarray, t: np.ndarray) -> TriMesh:
    return TriMesh(mesh.vertices @ R.T + t, mesh.faces.copy(),
                   None if mesh.uv is None else mesh.uv.copy())
