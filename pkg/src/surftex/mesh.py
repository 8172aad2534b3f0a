"""Triangle-mesh differential geometry: one-rings, tangent frames, log maps,
parallel transport, area measures, surface sampling and edge-flip
retriangulation.

All operators here are one-ring local. Tangent vectors at a vertex are
complex numbers in that vertex's orthonormal frame. No global surface
parameterization is ever built.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_AXES = np.eye(3)


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class SurfacePoint:
    """A point on the surface: face index plus barycentric coordinates in
    that face's stored corner order."""

    face: int
    bary: tuple

    def __post_init__(self):
        b = np.asarray(self.bary, dtype=np.float64)
        if b.shape != (3,) or np.any(b < -1e-9) or abs(b.sum() - 1.0) > 1e-9:
            raise MeshError(f"invalid barycentric coordinates {self.bary}")


@dataclass(frozen=True)
class TangentFrameField:
    """Per-vertex orthonormal tangent bases (e_x, e_y) and unit normals."""

    e_x: np.ndarray
    e_y: np.ndarray
    normal: np.ndarray

    def rotated(self, angles: np.ndarray) -> "TangentFrameField":
        """Rotate each frame in its tangent plane by the given angle."""
        c = np.cos(angles)[:, None]
        s = np.sin(angles)[:, None]
        return TangentFrameField(
            e_x=c * self.e_x + s * self.e_y,
            e_y=-s * self.e_x + c * self.e_y,
            normal=self.normal,
        )


class TriMesh:
    """Indexed triangle mesh with per-corner UVs and one-ring adjacency.

    Parameters
    ----------
    vertices : (V, 3) float array
        Vertex positions.
    faces : (F, 3) int array
        Vertex indices, consistently counter-clockwise.
    uv : (F, 3, 2) float array or None
        Atlas coordinates per face corner. Kept per-corner so UV seams
        survive position deduplication.

    Notes
    -----
    Instances are immutable after construction and safe to share across
    threads. One-rings are stored as ordered cyclic vertex/face lists,
    counter-clockwise with respect to the vertex normal (inherited from
    the face winding).
    """

    def __init__(self, vertices, faces, uv=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError("vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError("faces must be (F, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face indices out of range")
        self.uv = None if uv is None else np.ascontiguousarray(uv, dtype=np.float64)
        if self.uv is not None and self.uv.shape != (len(self.faces), 3, 2):
            raise MeshError("uv must be (F, 3, 2)")

        e1 = self.vertices[self.faces[:, 1]] - self.vertices[self.faces[:, 0]]
        e2 = self.vertices[self.faces[:, 2]] - self.vertices[self.faces[:, 0]]
        cross = np.cross(e1, e2)
        self.face_normals_raw = cross
        self.face_areas = 0.5 * np.linalg.norm(cross, axis=1)
        self.vertex_areas = np.zeros(len(self.vertices))
        for k in range(3):
            np.add.at(self.vertex_areas, self.faces[:, k], self.face_areas / 3.0)
        self.total_area = float(self.face_areas.sum())

        self._check_edge_manifold()
        self._build_one_rings()

    # -- construction helpers -------------------------------------------------

    def _check_edge_manifold(self):
        directed = {}
        undirected = {}
        for f, (a, b, c) in enumerate(self.faces):
            for u, v in ((a, b), (b, c), (c, a)):
                if (u, v) in directed:
                    raise MeshError(f"non-manifold or inconsistently wound edge ({u}, {v})")
                directed[(u, v)] = f
                key = (min(u, v), max(u, v))
                undirected.setdefault(key, []).append(f)
        bad = [e for e, fs in undirected.items() if len(fs) > 2]
        if bad:
            raise MeshError(f"non-manifold edges (more than two incident faces): {bad}")
        self._undirected_edges = undirected

    def _build_one_rings(self):
        V = len(self.vertices)
        wedges = [dict() for _ in range(V)]
        for f, (a, b, c) in enumerate(self.faces):
            for p, u, v in ((a, b, c), (b, c, a), (c, a, b)):
                if u in wedges[p]:
                    raise MeshError(f"non-manifold vertex {p}")
                wedges[p][u] = (v, f)

        self.ring_vertices = []
        self.ring_faces = []
        self.is_boundary_vertex = np.zeros(V, dtype=bool)
        for p in range(V):
            w = wedges[p]
            if not w:
                raise MeshError(f"isolated vertex {p}")
            targets = {v for v, _ in w.values()}
            starts = [u for u in w if u not in targets]
            if len(starts) > 1:
                raise MeshError(f"non-manifold vertex {p} (multiple fans)")
            if starts:
                s = starts[0]
                self.is_boundary_vertex[p] = True
            else:
                s = min(w)  # canonical rotation of the interior cycle
            verts = [s]
            faces = []
            cur = s
            while cur in w and len(faces) < len(w):
                nxt, f = w[cur]
                faces.append(f)
                cur = nxt
                if cur == s:
                    break
                verts.append(cur)
            if len(faces) != len(w):
                raise MeshError(f"non-manifold vertex {p} (disconnected fan)")
            self.ring_vertices.append(np.asarray(verts, dtype=np.int64))
            self.ring_faces.append(np.asarray(faces, dtype=np.int64))

    # -- queries ---------------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (E, 2) array."""
        return np.asarray(sorted(self._undirected_edges), dtype=np.int64)

    def corner_of(self, face: int, vertex: int) -> int:
        for k in range(3):
            if self.faces[face, k] == vertex:
                return k
        raise MeshError(f"vertex {vertex} not in face {face}")

    def content_hash(self) -> int:
        """Stable 64-bit hash of geometry, connectivity and UVs."""
        h = hashlib.sha256()
        h.update(self.vertices.astype("<f4").tobytes())
        h.update(self.faces.astype("<i4").tobytes())
        if self.uv is not None:
            h.update(self.uv.astype("<f4").tobytes())
        return int.from_bytes(h.digest()[:8], "little")


# ---------------------------------------------------------------------------
# tangent frames


def compute_vertex_frames(mesh: TriMesh) -> TangentFrameField:
    """Build per-vertex orthonormal tangent frames.

    Normals are area-weighted averages of incident face normals. The
    x-axis is the projection of a fixed global axis onto the tangent
    plane, falling back deterministically to the next axis when the
    projection norm drops below 1e-6; the y-axis is ``n x e_x``.

    Raises
    ------
    MeshError
        If a vertex has a zero-area one-ring (no usable normal).
    """
    V = mesh.n_vertices
    normals = np.zeros((V, 3))
    for k in range(3):
        np.add.at(normals, mesh.faces[:, k], mesh.face_normals_raw)
    norms = np.linalg.norm(normals, axis=1)
    bad = np.flatnonzero(norms < 1e-14)
    if bad.size:
        raise MeshError(f"degenerate vertex {bad[0]}: zero-area one-ring, no normal")
    normals /= norms[:, None]

    e_x = np.zeros((V, 3))
    chosen = np.zeros(V, dtype=bool)
    for axis in _AXES:
        proj = axis[None, :] - normals * (normals @ axis)[:, None]
        pn = np.linalg.norm(proj, axis=1)
        use = (~chosen) & (pn >= 1e-6)
        e_x[use] = proj[use] / pn[use, None]
        chosen |= use
    if not chosen.all():
        raise MeshError("could not build tangent frame (no axis projects)")
    e_y = np.cross(normals, e_x)
    return TangentFrameField(e_x=e_x, e_y=e_y, normal=normals)


# ---------------------------------------------------------------------------
# logarithm map


def one_ring_log_map(mesh: TriMesh, frames: TangentFrameField, p: int) -> np.ndarray:
    """Unfold the one-ring of vertex ``p`` into its tangent plane.

    Radial distances equal edge lengths. Angles between consecutive
    neighbors are the interior corner angles at ``p``, rescaled by
    ``2*pi / total`` for interior vertices; boundary vertices keep their
    actual angle sum. The result is a complex array aligned with
    ``mesh.ring_vertices[p]``, expressed in ``p``'s frame.
    """
    ring = mesh.ring_vertices[p]
    edges = mesh.vertices[ring] - mesh.vertices[p]
    r = np.linalg.norm(edges, axis=1)
    if np.any(r < 1e-14):
        raise MeshError(f"zero-length edge at vertex {p}")

    m = len(ring)
    boundary = mesh.is_boundary_vertex[p]
    n_angles = m - 1 if boundary else m
    unit = edges / r[:, None]
    nxt = (np.arange(n_angles) + 1) % m
    cosang = np.clip(np.einsum("ij,ij->i", unit[:n_angles], unit[nxt]), -1.0, 1.0)
    beta = np.arccos(cosang)
    total = beta.sum()
    if total < 1e-12:
        raise MeshError(f"degenerate one-ring at vertex {p}")
    scale = 1.0 if boundary else 2.0 * np.pi / total

    cum = np.zeros(m)
    cum[1:] = scale * np.cumsum(beta)[: m - 1]

    n = frames.normal[p]
    u0 = edges[0] - n * (edges[0] @ n)
    u0n = np.linalg.norm(u0)
    if u0n < 1e-14:
        raise MeshError(f"edge at vertex {p} is parallel to the normal")
    alpha0 = np.arctan2(u0 @ frames.e_y[p], u0 @ frames.e_x[p])
    return r * np.exp(1j * (alpha0 + cum))


def build_corner_log_table(mesh: TriMesh, frames: TangentFrameField) -> np.ndarray:
    """Per (face, center-corner, corner): unfolded position of each corner
    in the center vertex's frame. table[f, c, c] == 0 for every c."""
    table = np.zeros((mesh.n_faces, 3, 3), dtype=np.complex128)
    for p in range(mesh.n_vertices):
        logs = one_ring_log_map(mesh, frames, p)
        ring = mesh.ring_vertices[p]
        pos = {int(v): logs[j] for j, v in enumerate(ring)}
        pos[p] = 0.0 + 0.0j
        for f in mesh.ring_faces[p]:
            cp = mesh.corner_of(f, p)
            for k in range(3):
                table[f, cp, k] = pos[int(mesh.faces[f, k])]
    return table


def log_coordinate_of_point(mesh: TriMesh, frames: TangentFrameField, p: int,
                            q: SurfacePoint) -> complex:
    """Log coordinate of a surface point in a face incident to ``p``:
    barycentric combination of the unfolded corner positions."""
    if q.face not in mesh.ring_faces[p] and p not in mesh.faces[q.face]:
        raise MeshError(f"point in face {q.face} is not in the one-ring of vertex {p}")
    logs = one_ring_log_map(mesh, frames, p)
    ring = mesh.ring_vertices[p]
    pos = {int(v): logs[j] for j, v in enumerate(ring)}
    pos[p] = 0.0 + 0.0j
    corners = mesh.faces[q.face]
    if not all(int(c) in pos for c in corners):
        raise MeshError(f"face {q.face} not incident to vertex {p}")
    bary = np.asarray(q.bary)
    return complex(sum(bary[k] * pos[int(corners[k])] for k in range(3)))


# ---------------------------------------------------------------------------
# parallel transport


def _ring_angle_lookup(mesh, frames, p):
    logs = one_ring_log_map(mesh, frames, p)
    return {int(v): np.angle(logs[j]) for j, v in enumerate(mesh.ring_vertices[p])}


def transport_angle(mesh: TriMesh, frames: TangentFrameField, p: int, q: int) -> float:
    """Angle phi such that a tangent vector expressed in ``q``'s frame is
    re-expressed in ``p``'s frame by multiplication with ``exp(i*phi)``.

    Along the shared edge the outgoing direction at ``p`` must match the
    flipped outgoing direction at ``q``, giving
    ``phi = theta_pq - theta_qp + pi``. Satisfies ``phi_pq = -phi_qp``
    modulo 2*pi.
    """
    ang_p = _ring_angle_lookup(mesh, frames, p)
    ang_q = _ring_angle_lookup(mesh, frames, q)
    if q not in ang_p or p not in ang_q:
        raise MeshError(f"vertices {p} and {q} are not adjacent")
    phi = ang_p[q] - ang_q[p] + np.pi
    return float(np.arctan2(np.sin(phi), np.cos(phi)))


def all_transport_angles(mesh: TriMesh, frames: TangentFrameField):
    """Transport angles for every directed edge, as a dict (p, q) -> phi."""
    angle_tables = [_ring_angle_lookup(mesh, frames, p) for p in range(mesh.n_vertices)]
    out = {}
    for p in range(mesh.n_vertices):
        for q, th_pq in angle_tables[p].items():
            phi = th_pq - angle_tables[q][p] + np.pi
            out[(p, q)] = float(np.arctan2(np.sin(phi), np.cos(phi)))
    return out


# ---------------------------------------------------------------------------
# surface sampling


def _uniform_bary(rng, n):
    r1 = rng.random(n)
    r2 = rng.random(n)
    s = np.sqrt(r1)
    return np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)


def sample_one_ring_arrays(mesh: TriMesh, frames: TangentFrameField, p: int,
                           count: int, rng: np.random.Generator):
    """Area-uniform samples over the one-ring of ``p``.

    Returns ``(faces, bary, logs)`` arrays: the sampled face index, the
    barycentric coordinates in stored corner order, and the complex log
    coordinate of each sample in ``p``'s frame.
    """
    if count < 1:
        raise MeshError("sample count must be >= 1")
    rfaces = mesh.ring_faces[p]
    if len(rfaces) == 0:
        raise MeshError(f"empty one-ring at vertex {p}")
    areas = mesh.face_areas[rfaces]
    if areas.sum() <= 0:
        raise MeshError(f"zero-area one-ring at vertex {p}")
    probs = areas / areas.sum()
    pick = rng.choice(len(rfaces), size=count, p=probs)
    faces = rfaces[pick]
    bary = _uniform_bary(rng, count)
    # unfolded corner positions, per sampled face, centered at p
    logs_ring = one_ring_log_map(mesh, frames, p)
    pos = {int(v): logs_ring[j] for j, v in enumerate(mesh.ring_vertices[p])}
    pos[p] = 0.0 + 0.0j
    corner_pos = np.array([[pos[int(c)] for c in mesh.faces[f]] for f in faces])
    logs = np.einsum("nk,nk->n", bary.astype(np.complex128), corner_pos)
    return faces, bary, logs


def sample_one_ring(mesh: TriMesh, frames: TangentFrameField, p: int, count: int,
                    rng: np.random.Generator):
    """Spec-level variant returning a list of (SurfacePoint, log) tuples."""
    faces, bary, logs = sample_one_ring_arrays(mesh, frames, p, count, rng)
    return [(SurfacePoint(int(f), tuple(b)), complex(z))
            for f, b, z in zip(faces, bary, logs)]


def mean_area_radius(mesh: TriMesh) -> float:
    """Radius of the mean vertex area element: sqrt(A / (pi * |V|))."""
    if mesh.total_area <= 0:
        raise MeshError("mesh has no positive area")
    return float(np.sqrt(mesh.total_area / (np.pi * mesh.n_vertices)))


# ---------------------------------------------------------------------------
# retriangulation by randomized edge flips


def _triangle_area3d(a, b, c):
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a))


def _uv_signed_area(uv):
    return 0.5 * ((uv[1][0] - uv[0][0]) * (uv[2][1] - uv[0][1])
                  - (uv[2][0] - uv[0][0]) * (uv[1][1] - uv[0][1]))


class _FlipMesh:
    """Mutable face-set view used only inside random_retriangulate."""

    def __init__(self, mesh: TriMesh):
        self.X = mesh.vertices
        self.faces = {i: tuple(int(v) for v in f) for i, f in enumerate(mesh.faces)}
        if mesh.uv is not None:
            self.uv = {i: [mesh.uv[i, k].copy() for k in range(3)] for i in self.faces}
        else:
            self.uv = None
        self.next_id = len(self.faces)
        self.edge_faces = {}
        self.degree = np.zeros(len(self.X), dtype=np.int64)
        for i, f in self.faces.items():
            self._register(i, f)
        for f in self.faces.values():
            for v in f:
                self.degree[v] += 1

    def _register(self, i, f):
        for u, v in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            self.edge_faces.setdefault((min(u, v), max(u, v)), set()).add(i)

    def _unregister(self, i, f):
        for u, v in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            key = (min(u, v), max(u, v))
            self.edge_faces[key].discard(i)
            if not self.edge_faces[key]:
                del self.edge_faces[key]

    def try_flip(self, key, area_tol_abs):
        fs = self.edge_faces.get(key)
        if fs is None or len(fs) != 2:
            return 0.0, False
        f1, f2 = sorted(fs)
        t1, t2 = self.faces[f1], self.faces[f2]
        # orient so that t1 contains the directed edge a->b
        a, b = key
        if (a, b) not in ((t1[0], t1[1]), (t1[1], t1[2]), (t1[2], t1[0])):
            a, b = b, a
            if (a, b) not in ((t1[0], t1[1]), (t1[1], t1[2]), (t1[2], t1[0])):
                return 0.0, False
        c = next(v for v in t1 if v not in (a, b))
        d = next(v for v in t2 if v not in (a, b))
        if c == d:
            return 0.0, False
        nk = (min(c, d), max(c, d))
        if nk in self.edge_faces:
            return 0.0, False
        if self.degree[a] <= 3 or self.degree[b] <= 3:
            return 0.0, False

        X = self.X
        # unfold the two triangles across the shared edge
        L = np.linalg.norm(X[b] - X[a])
        if L < 1e-14:
            return 0.0, False

        def planar(v, side):
            dv = X[v] - X[a]
            e = (X[b] - X[a]) / L
            x = dv @ e
            y2 = max(dv @ dv - x * x, 0.0)
            return np.array([x, side * np.sqrt(y2)])

        pc = planar(c, +1.0)
        pd = planar(d, -1.0)
        if pc[1] < 1e-12 or -pd[1] < 1e-12:
            return 0.0, False
        t = pc[1] / (pc[1] - pd[1])
        x_int = pc[0] + t * (pd[0] - pc[0])
        margin = 1e-9 * L
        if not (margin < x_int < L - margin):
            return 0.0, False  # unfolded quad not convex: flip illegal

        old_area = _triangle_area3d(X[a], X[b], X[c]) + _triangle_area3d(X[b], X[a], X[d])
        new_area = _triangle_area3d(X[c], X[a], X[d]) + _triangle_area3d(X[d], X[b], X[c])
        if min(_triangle_area3d(X[c], X[a], X[d]), _triangle_area3d(X[d], X[b], X[c])) < 1e-16:
            return 0.0, False
        darea = abs(new_area - old_area)
        if darea > area_tol_abs:
            return 0.0, False

        new1 = (c, a, d)
        new2 = (d, b, c)
        nuv1 = nuv2 = None
        if self.uv is not None:
            uv1 = {v: self.uv[f1][k] for k, v in enumerate(t1)}
            uv2 = {v: self.uv[f2][k] for k, v in enumerate(t2)}
            # shared vertices must agree across the edge, else it is a seam
            if (np.max(np.abs(uv1[a] - uv2[a])) > 1e-12
                    or np.max(np.abs(uv1[b] - uv2[b])) > 1e-12):
                return 0.0, False
            nuv1 = [uv1[c], uv1[a], uv2[d]]
            nuv2 = [uv2[d], uv1[b], uv1[c]]
            s_old = np.sign(_uv_signed_area([self.uv[f1][k] for k in range(3)]))
            s1 = _uv_signed_area(nuv1)
            s2 = _uv_signed_area(nuv2)
            if s_old == 0 or np.sign(s1) != s_old or np.sign(s2) != s_old:
                return 0.0, False

        self._unregister(f1, t1)
        self._unregister(f2, t2)
        del self.faces[f1], self.faces[f2]
        if self.uv is not None:
            del self.uv[f1], self.uv[f2]
        i1, i2 = self.next_id, self.next_id + 1
        self.next_id += 2
        self.faces[i1] = new1
        self.faces[i2] = new2
        if self.uv is not None:
            self.uv[i1] = nuv1
            self.uv[i2] = nuv2
        self._register(i1, new1)
        self._register(i2, new2)
        self.degree[a] -= 1
        self.degree[b] -= 1
        self.degree[c] += 1
        self.degree[d] += 1
        return darea, True


def random_retriangulate(mesh: TriMesh, rng: np.random.Generator,
                         rounds: int = 1) -> TriMesh:
    """Reconnect the mesh by a randomized sequence of legal edge flips.

    A flip is applied only when it keeps the mesh manifold, keeps the
    unfolded quad convex, preserves UV orientation, does not cross a UV
    seam, and changes the total surface area by less than 1e-9 relative
    per flip (with a cumulative cap), so vertex positions, per-corner UV
    charts and the surface area are all preserved. Illegal flips are
    skipped, never forced.
    """
    if rounds <= 0:
        return TriMesh(mesh.vertices.copy(), mesh.faces.copy(),
                       None if mesh.uv is None else mesh.uv.copy())
    fm = _FlipMesh(mesh)
    area_tol = 1e-9 * mesh.total_area
    budget = 2e-7 * mesh.total_area
    drift = 0.0
    for _ in range(rounds):
        keys = sorted(fm.edge_faces.keys())
        order = rng.permutation(len(keys))
        for j in order:
            if drift >= budget:
                break
            darea, ok = fm.try_flip(keys[j], min(area_tol, budget - drift))
            if ok:
                drift += darea
    ids = sorted(fm.faces)
    new_faces = np.asarray([fm.faces[i] for i in ids], dtype=np.int64)
    new_uv = None
    if fm.uv is not None:
        new_uv = np.asarray([[fm.uv[i][k] for k in range(3)] for i in ids])
    return TriMesh(mesh.vertices.copy(), new_faces, new_uv)
