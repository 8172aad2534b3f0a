"""Field convolutions over one-rings, residual blocks, transport-aware
pooling, and the two-level U-Net noise predictor.

A field convolution gathers neighbor features, parallel-transports them
into the center frame, and weights each term by a learned filter evaluated
at the frame-invariant argument r * exp(i(theta - phi_feature)) together
with an optional scalar embedding; the feature angle is taken after
transport, which is what keeps the argument invariant under per-vertex
frame re-choices. Distances are pre-normalized by the mean-area radius and
the area measure by the mean vertex area, so every filter argument, and
hence the whole network, is invariant to uniform rescaling of the mesh.

Support tables use a flat edge list sorted by center vertex (the center
itself is edge 0 of its segment with radius 0 and unit transport), so the
per-edge work matches the actual one-ring sizes instead of the padded
maximum. Filters are low-rank: a small shared real trunk MLP maps the
invariant argument to a basis, mixed per (out, in) pair by a complex
tensor, which keeps the bank affordable without changing the per-pair
three-layer-MLP contract. All convolution arithmetic runs in the feature
tensor's own precision.
"""

from __future__ import annotations

import concurrent.futures
import heapq
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tape as T
from .mesh import (TriMesh, TangentFrameField, MeshError, mean_area_radius,
                   one_ring_log_map)


# ---------------------------------------------------------------------------
# geometry tables


@dataclass
class ConvGeometry:
    """Flat one-ring support tables for one resolution level."""

    edge_src: np.ndarray    # [M] center vertex, sorted ascending
    edge_dst: np.ndarray    # [M] contributing vertex (== src for centers)
    weight: np.ndarray      # [M] area(dst) / (pi rtilde^2)
    radial: np.ndarray      # [M] complex (r / rtilde) e^{i theta}, 0 at centers
    transport: np.ndarray   # [M] unit complex e^{i phi}, 1 at centers
    src_starts: np.ndarray  # reduceat boundaries: one segment per vertex
    plan_dst: T.ScatterPlan
    vweight: np.ndarray     # [V] vertex areas normalized to sum 1
    rtilde: float
    n_vertices: int

    @classmethod
    def assemble(cls, edge_src, edge_dst, weight, radial, transport, vweight,
                 rtilde):
        order = np.argsort(edge_src, kind="stable")
        edge_src = edge_src[order]
        edge_dst = edge_dst[order]
        n = len(vweight)
        counts = np.bincount(edge_src, minlength=n)
        if np.any(counts == 0):
            raise MeshError("every vertex needs at least its center entry")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        return cls(edge_src=edge_src, edge_dst=edge_dst, weight=weight[order],
                   radial=radial[order], transport=transport[order],
                   src_starts=starts,
                   plan_dst=T.make_scatter_plan(edge_dst, n),
                   vweight=vweight, rtilde=rtilde, n_vertices=n)

    def segment_sum(self, per_edge: np.ndarray) -> np.ndarray:
        return np.add.reduceat(per_edge, self.src_starts, axis=0)

    def edge_angles(self):
        """dict (src, dst) -> (transport angle, log direction angle)."""
        out = {}
        for i in range(len(self.edge_src)):
            s, d = int(self.edge_src[i]), int(self.edge_dst[i])
            if s != d:
                out[(s, d)] = (float(np.angle(self.transport[i])),
                               float(np.angle(self.radial[i])))
        return out


def build_conv_geometry(mesh: TriMesh, frames: TangentFrameField) -> ConvGeometry:
    """One-ring filter-support tables in each vertex's frame."""
    v = mesh.n_vertices
    rt = mean_area_radius(mesh)
    mean_vertex_area = np.pi * rt * rt
    logs = [one_ring_log_map(mesh, frames, p) for p in range(v)]
    angle = [{int(q): lg[j] for j, q in enumerate(mesh.ring_vertices[p])}
             for p, lg in enumerate(logs)]

    src, dst, wgt, rad, trn = [], [], [], [], []
    for p in range(v):
        src.append(p)
        dst.append(p)
        wgt.append(mesh.vertex_areas[p] / mean_vertex_area)
        rad.append(0.0)
        trn.append(1.0)
        for q in mesh.ring_vertices[p]:
            q = int(q)
            lpq = angle[p][q]
            lqp = angle[q][p]
            src.append(p)
            dst.append(q)
            wgt.append(mesh.vertex_areas[q] / mean_vertex_area)
            rad.append(lpq / rt)
            trn.append(np.exp(1j * (np.angle(lpq) - np.angle(lqp) + np.pi)))
    return ConvGeometry.assemble(
        np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64),
        np.asarray(wgt), np.asarray(rad, dtype=np.complex128),
        np.asarray(trn, dtype=np.complex128),
        mesh.vertex_areas / mesh.total_area, rt)


@dataclass
class PoolingMap:
    """Fine-to-coarse assignment with chained parallel transport."""

    seeds: np.ndarray        # [Vc] fine vertex ids
    assign: np.ndarray       # [V] coarse cluster index
    phase: np.ndarray        # [V] unit complex: transport fine -> seed frame
    pool_coeff: np.ndarray   # [V] complex: area-normalized weight * phase
    hops: np.ndarray         # [V] tree depth to the seed
    cluster_area: np.ndarray  # [Vc]
    plan: T.ScatterPlan

    @property
    def n_coarse(self):
        return len(self.seeds)


def _edge_lists(mesh: TriMesh):
    return [[int(q) for q in mesh.ring_vertices[p]] for p in range(mesh.n_vertices)]


def farthest_point_seeds(positions: np.ndarray, count: int) -> np.ndarray:
    """Greedy Euclidean farthest-point selection, seeded at the vertex
    farthest from the centroid (deterministic)."""
    n = len(positions)
    count = min(count, n)
    d2 = np.sum((positions - positions.mean(axis=0)) ** 2, axis=1)
    first = int(np.argmax(d2))
    seeds = [first]
    dist = np.sum((positions - positions[first]) ** 2, axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        seeds.append(nxt)
        dist = np.minimum(dist, np.sum((positions - positions[nxt]) ** 2, axis=1))
    return np.asarray(seeds, dtype=np.int64)


def build_pooling(mesh: TriMesh, geometry: ConvGeometry, ratio: int = 4) -> PoolingMap:
    """Cluster fine vertices to farthest-point seeds by shortest edge paths,
    accumulating the transport angle into the seed frame along each tree."""
    v = mesh.n_vertices
    n_coarse = max(1, int(np.ceil(v / ratio)))
    seeds = farthest_point_seeds(mesh.vertices, n_coarse)
    adj = _edge_lists(mesh)
    nbr_angle = {k: a for k, (a, _) in geometry.edge_angles().items()}

    dist = np.full(v, np.inf)
    assign = np.full(v, -1, dtype=np.int64)
    chi = np.zeros(v)
    hops = np.zeros(v, dtype=np.int64)
    heap = []
    for ci, s in enumerate(seeds):
        dist[s] = 0.0
        assign[s] = ci
        heapq.heappush(heap, (0.0, int(s)))
    done = np.zeros(v, dtype=bool)
    while heap:
        d, u = heapq.heappop(heap)
        if done[u] or d > dist[u]:
            continue
        done[u] = True
        for q in adj[u]:
            w = float(np.linalg.norm(mesh.vertices[u] - mesh.vertices[q]))
            nd = d + w
            if nd < dist[q] - 1e-15:
                dist[q] = nd
                assign[q] = assign[u]
                chi[q] = chi[u] + nbr_angle[(u, q)]
                hops[q] = hops[u] + 1
                heapq.heappush(heap, (nd, q))
    if np.any(assign < 0):
        raise MeshError("pooling: some vertices are unreachable from any seed")

    cluster_area = np.zeros(n_coarse)
    np.add.at(cluster_area, assign, mesh.vertex_areas)
    coeff = (mesh.vertex_areas / cluster_area[assign]) * np.exp(1j * chi)
    return PoolingMap(seeds=seeds, assign=assign, phase=np.exp(1j * chi),
                      pool_coeff=coeff, hops=hops, cluster_area=cluster_area,
                      plan=T.make_scatter_plan(assign, n_coarse))


def build_coarse_geometry(mesh: TriMesh, geometry: ConvGeometry,
                          pooling: PoolingMap):
    """One-ring tables on the cluster graph. Distances, directions and
    transports come from shortest fine-edge paths between adjacent seeds.

    Returns (coarse ConvGeometry, max fine-hops along any coarse edge).
    """
    v = mesh.n_vertices
    adj = _edge_lists(mesh)
    nc = pooling.n_coarse
    coarse_adj = [set() for _ in range(nc)]
    for p in range(v):
        for q in adj[p]:
            a, b = pooling.assign[p], pooling.assign[q]
            if a != b:
                coarse_adj[a].add(b)
                coarse_adj[b].add(a)

    angles = geometry.edge_angles()
    total_area = mesh.total_area
    rt_c = float(np.sqrt(total_area / (np.pi * nc)))
    mean_area_c = np.pi * rt_c * rt_c

    src, dstl, wgt, rad, trn = [], [], [], [], []
    max_hops = 0
    for ci in range(nc):
        s = int(pooling.seeds[ci])
        src.append(ci)
        dstl.append(ci)
        wgt.append(pooling.cluster_area[ci] / mean_area_c)
        rad.append(0.0)
        trn.append(1.0)
        targets = {int(pooling.seeds[cj]): cj for cj in coarse_adj[ci]}
        if not targets:
            continue
        dist = {s: 0.0}
        chi = {s: 0.0}
        first = {s: None}
        hops = {s: 0}
        heap = [(0.0, s)]
        remaining = set(targets)
        found = {}
        while heap and remaining:
            d, u = heapq.heappop(heap)
            if d > dist.get(u, np.inf):
                continue
            if u in remaining:
                remaining.discard(u)
                found[u] = (d, chi[u], first[u], hops[u])
            for q in adj[u]:
                w = float(np.linalg.norm(mesh.vertices[u] - mesh.vertices[q]))
                nd = d + w
                if nd < dist.get(q, np.inf) - 1e-15:
                    dist[q] = nd
                    chi[q] = chi[u] + angles[(u, q)][0]
                    first[q] = first[u] if first[u] is not None else q
                    hops[q] = hops[u] + 1
                    heapq.heappush(heap, (nd, q))
        for tv, cj in sorted(targets.items(), key=lambda kv: kv[1]):
            if tv not in found:
                continue
            d, chi_t, first_hop, nh = found[tv]
            max_hops = max(max_hops, nh)
            src.append(ci)
            dstl.append(cj)
            wgt.append(pooling.cluster_area[cj] / mean_area_c)
            rad.append((d / rt_c) * np.exp(1j * angles[(s, first_hop)][1]))
            trn.append(np.exp(1j * chi_t))
    geom = ConvGeometry.assemble(
        np.asarray(src, dtype=np.int64), np.asarray(dstl, dtype=np.int64),
        np.asarray(wgt), np.asarray(rad, dtype=np.complex128),
        np.asarray(trn, dtype=np.complex128),
        pooling.cluster_area / pooling.cluster_area.sum(), rt_c)
    return geom, max_hops


# ---------------------------------------------------------------------------
# pooling ops (linear, composed from tape primitives)


def pool_mean_transport(x: T.Tensor, pooling: PoolingMap) -> T.Tensor:
    """Area-weighted mean of each cluster, transported into the seed frame."""
    x = T.as_tensor(x)
    if x.shape[0] != len(pooling.assign):
        raise MeshError("pooling map does not match the vertex count")
    coeff = pooling.pool_coeff[:, None].astype(x.data.dtype)
    return T.scatter_sum(T.mul(x, coeff), pooling.assign, pooling.n_coarse)


def unpool_transport(xc: T.Tensor, pooling: PoolingMap) -> T.Tensor:
    """Nearest-seed unpooling, transported back into each fine frame."""
    xc = T.as_tensor(xc)
    back = np.conj(pooling.phase)[:, None].astype(xc.data.dtype)
    return T.mul(T.gather_rows(xc, pooling.assign, pooling.plan), back)


# ---------------------------------------------------------------------------
# filter bank and the fused convolution op


class FilterBank:
    """C_out x C_in filters, each a three-layer real MLP with eight hidden
    channels: a shared trunk producing a basis, mixed per filter pair by a
    complex tensor (zero-initialized so convolutions start silent)."""

    def __init__(self, store: nn.ParameterStore, name: str, c_in: int, c_out: int,
                 embed_dim: int = 0, hidden: int = 8, zero_mix: bool = True,
                 mix_init: float = 0.0):
        self.c_in, self.c_out, self.embed_dim, self.hidden = c_in, c_out, embed_dim, hidden
        in_dim = 2 + embed_dim
        self.w1 = store.real_init(f"{name}.w1", (hidden, in_dim), fan_in=in_dim)
        self.b1 = store.constant(f"{name}.b1", np.zeros(hidden))
        self.w2 = store.real_init(f"{name}.w2", (hidden, hidden), fan_in=hidden)
        self.b2 = store.constant(f"{name}.b2", np.zeros(hidden))
        self.mix = store.complex_init(f"{name}.mix", (c_out, c_in, hidden),
                                      fan_in=c_in * hidden,
                                      zero=zero_mix and mix_init == 0.0)
        if zero_mix and mix_init > 0.0:
            self.mix.data *= mix_init

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2, self.mix]

    def filter_value(self, radial_arg, embedding=None):
        """Evaluate filters at given arguments: returns [N, c_out, c_in].

        Reference path used by tests; the convolution itself inlines this.
        """
        radial_arg = np.atleast_1d(np.asarray(radial_arg, dtype=np.complex128))
        cols = [radial_arg.real, radial_arg.imag]
        if self.embed_dim:
            emb = np.zeros((len(radial_arg), self.embed_dim)) if embedding is None \
                else np.broadcast_to(np.asarray(embedding), (len(radial_arg), self.embed_dim))
            cols.extend(emb.T)
        inp = np.stack(cols, axis=-1)
        h = _silu(inp @ self.w1.data.T + self.b1.data)
        h = _silu(h @ self.w2.data.T + self.b2.data)
        return np.einsum("nh,oih->noi", h, self.mix.data)


_POOL = None
_PARALLEL_MIN_ROWS = 6000


def _run_rows(fn, m: int):
    """Run a row-slice kernel, split across two threads for large inputs.
    Identical arithmetic per row, so results are bit-deterministic."""
    global _POOL
    if m < _PARALLEL_MIN_ROWS:
        fn(slice(0, m))
        return
    if _POOL is None:
        _POOL = concurrent.futures.ThreadPoolExecutor(max_workers=2)
    half = m // 2
    pending = _POOL.submit(fn, slice(0, half))
    fn(slice(half, m))
    pending.result()


def _sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _silu(x):
    return x * _sigmoid(x)


def field_convolve(x: T.Tensor, bank: FilterBank, geom: ConvGeometry,
                   embedding: T.Tensor | None = None) -> T.Tensor:
    """Area-weighted one-ring convolution of tangent features with the
    filter bank, including the center point (radial 0)."""
    x = T.as_tensor(x)
    if x.shape[0] != geom.n_vertices:
        raise MeshError("field_convolve: features do not match the geometry tables")
    if x.shape[-1] != bank.c_in:
        raise MeshError("field_convolve: channel count does not match the bank")
    if bank.embed_dim and embedding is None:
        raise MeshError("field_convolve: bank expects an embedding field")
    if embedding is not None and not bank.embed_dim:
        raise MeshError("field_convolve: bank takes no embedding")
    if embedding is not None and embedding.shape[0] != geom.n_vertices:
        raise MeshError("field_convolve: embedding does not match the geometry")

    pi = T.as_tensor(embedding) if embedding is not None else None
    parents = [x, bank.w1, bank.b1, bank.w2, bank.b2, bank.mix]
    if pi is not None:
        parents.append(pi)

    m = len(geom.edge_src)
    c_in, c_out, hid = bank.c_in, bank.c_out, bank.hidden
    rdt = np.float32 if x.data.dtype in (np.complex64, np.float32) else np.float64
    cdt = np.complex64 if rdt == np.float32 else np.complex128
    floor = 1e-30
    transport = geom.transport.astype(cdt)
    radial = geom.radial.astype(cdt)
    weight = geom.weight.astype(rdt)
    w1 = bank.w1.data.astype(rdt)
    b1 = bank.b1.data.astype(rdt)
    w2 = bank.w2.data.astype(rdt)
    b2 = bank.b2.data.astype(rdt)
    mix = bank.mix.data.astype(cdt)

    # layer 1 of the trunk splits into an argument part (per edge, channel)
    # and an embedding part (per edge only, shared across channels)
    w1a = w1[:, :2]
    w1p = w1[:, 2:]
    xc = x.data.astype(cdt)
    pind = pi.data.astype(rdt) if pi is not None else None

    # all per-edge work is row-independent; big meshes split across threads
    yt = np.empty((m, c_in), cdt)
    u = np.empty((m, c_in), cdt)
    safe = np.empty((m, c_in), rdt)
    arg = np.empty((m, c_in), cdt)
    pre1 = np.empty((m, c_in, hid), rdt)
    s1 = np.empty((m, c_in, hid), rdt)
    a1 = np.empty((m, c_in, hid), rdt)
    pre2 = np.empty((m, c_in, hid), rdt)
    s2 = np.empty((m, c_in, hid), rdt)
    a2 = np.empty((m, c_in, hid), rdt)
    contrib = np.empty((m, c_in * hid), cdt)

    def fwd_rows(sl):
        dst = geom.edge_dst[sl]
        yt[sl] = xc[dst] * transport[sl, None]
        mag = np.abs(yt[sl])
        np.maximum(mag, floor, out=safe[sl])
        u[sl] = yt[sl] / safe[sl]
        u[sl][mag == 0.0] = 1.0  # the phase of a zero vector is defined as 1
        arg[sl] = radial[sl, None] * np.conj(u[sl])
        n = sl.stop - sl.start
        p1 = (arg[sl].view(rdt).reshape(-1, 2) @ w1a.T).reshape(n, c_in, hid)
        if pind is not None:
            p1 += (pind[dst] @ w1p.T + b1)[:, None, :]
        else:
            p1 += b1
        pre1[sl] = p1
        s1[sl] = _sigmoid(p1)
        a1[sl] = p1 * s1[sl]
        p2 = (a1[sl].reshape(-1, hid) @ w2.T + b2).reshape(n, c_in, hid)
        pre2[sl] = p2
        s2[sl] = _sigmoid(p2)
        a2[sl] = p2 * s2[sl]
        yw = yt[sl] * weight[sl, None]
        contrib[sl] = (yw[:, :, None] * a2[sl]).reshape(n, c_in * hid)

    _run_rows(fwd_rows, m)
    per_edge = contrib @ mix.reshape(c_out, -1).T                 # [M, C']
    out_data = geom.segment_sum(per_edge)

    def bw(g):
        g_src = np.asarray(g).astype(cdt)[geom.edge_src]          # [M, C']
        gmix = g_src.T @ np.conj(contrib)
        T._accumulate(bank.mix, gmix.reshape(c_out, c_in, hid))
        gxn = np.empty((m, c_in), cdt)
        gpin = np.empty((m, bank.embed_dim), rdt) if pi is not None else None
        parts = {}

        def bw_rows(sl):
            gge = (g_src[sl] @ np.conj(mix.reshape(c_out, -1))).reshape(-1, c_in, hid)
            yw = yt[sl] * weight[sl, None]
            gyw = (np.einsum("mch,mch->mc", gge.real, a2[sl])
                   + 1j * np.einsum("mch,mch->mc", gge.imag, a2[sl]))
            ga2 = gge.real * yw.real[:, :, None] + gge.imag * yw.imag[:, :, None]
            gpre2 = ga2 * (s2[sl] * (1.0 + pre2[sl] * (1.0 - s2[sl])))
            gw2 = gpre2.reshape(-1, hid).T @ a1[sl].reshape(-1, hid)
            gb2 = gpre2.reshape(-1, hid).sum(axis=0)
            ga1 = (gpre2.reshape(-1, hid) @ w2).reshape(gpre2.shape)
            gpre1 = ga1 * (s1[sl] * (1.0 + pre1[sl] * (1.0 - s1[sl])))
            ghid = gpre1.reshape(-1, hid)
            gw1a = ghid.T @ arg[sl].view(rdt).reshape(-1, 2)
            gb1 = ghid.sum(axis=0)
            garg2 = (ghid @ w1a).reshape(-1, c_in, 2)
            garg = garg2[..., 0] + 1j * garg2[..., 1]
            gw1p = None
            if pi is not None:
                gsum = gpre1.sum(axis=1)
                gw1p = gsum.T @ pind[geom.edge_dst[sl]]
                gpin[sl] = gsum @ w1p
            gyt = gyw * weight[sl, None]
            gu = radial[sl, None] * np.conj(garg)
            gyt += (gu - u[sl] * u[sl] * np.conj(gu)) / (2.0 * safe[sl])
            gxn[sl] = gyt * np.conj(transport[sl])[:, None]
            parts[sl.start] = (gw2, gb2, gw1a, gb1, gw1p)

        _run_rows(bw_rows, m)
        acc = [sum(parts[k][i] for k in sorted(parts)) for i in range(4)]
        T._accumulate(bank.w2, acc[0])
        T._accumulate(bank.b2, acc[1])
        T._accumulate(bank.b1, acc[3])
        if pi is not None:
            gw1p = sum(parts[k][4] for k in sorted(parts))
            T._accumulate(bank.w1, np.concatenate([acc[2], gw1p], axis=1))
            if pi.requires_grad:
                T._accumulate(pi, T.segment_sum(gpin, geom.plan_dst))
        else:
            T._accumulate(bank.w1, acc[2])
        T._accumulate(x, T.segment_sum(gxn, geom.plan_dst))

    return T._make(out_data, tuple(parents), bw)


def field_convolve_embedded(x, embedding, bank: FilterBank, geom: ConvGeometry):
    """Convolution with a scalar embedding interleaved into every filter."""
    return field_convolve(x, bank, geom, embedding=embedding)


# ---------------------------------------------------------------------------
# residual blocks and the U-Net


class FCResNetBlock:
    """Normalized three-layer VN MLP, field convolution, a second VN MLP,
    then an embedding-conditioned convolution, with a residual path."""

    def __init__(self, store, name, c_in, c_out, embed_dim, delta=1e-6,
                 filter_hidden=8, mix_init=0.0):
        ch = [c_in, c_out, c_out]
        self.norms1 = [nn.FRN(store, f"{name}.n1{i}", ch[i]) for i in range(3)]
        self.vns1 = [nn.VectorNeuron(store, f"{name}.v1{i}", ch[i],
                                     ch[i + 1] if i < 2 else c_out, delta)
                     for i in range(3)]
        self.conv1 = FilterBank(store, f"{name}.conv1", c_out, c_out,
                                embed_dim=0, hidden=filter_hidden,
                                mix_init=mix_init)
        self.norms2 = [nn.FRN(store, f"{name}.n2{i}", c_out) for i in range(3)]
        self.vns2 = [nn.VectorNeuron(store, f"{name}.v2{i}", c_out, c_out, delta)
                     for i in range(3)]
        self.conv2 = FilterBank(store, f"{name}.conv2", c_out, c_out,
                                embed_dim=embed_dim, hidden=filter_hidden,
                                mix_init=mix_init)
        self.res = None if c_in == c_out else nn.ComplexLinear(
            store, f"{name}.res", c_in, c_out)

    def __call__(self, x, embedding, geom: ConvGeometry) -> T.Tensor:
        w = geom.vweight[:, None]
        h = x
        for norm, vn in zip(self.norms1, self.vns1):
            h = vn(norm(h, w, axes=0))
        h = field_convolve(h, self.conv1, geom)
        for norm, vn in zip(self.norms2, self.vns2):
            h = vn(norm(h, w, axes=0))
        h = field_convolve(h, self.conv2, geom, embedding=embedding)
        skip = x if self.res is None else self.res(x)
        return T.add(h, skip)


def timestep_embedding(t: int, dim: int, max_t: int = 10000) -> np.ndarray:
    """Sinusoidal embedding at geometrically spaced frequencies; the first
    half holds sines (zero at t = 0), the second half cosines (one)."""
    if dim % 2:
        raise ValueError("embedding dimension must be even")
    if t < 0:
        raise ValueError("timestep must be nonnegative")
    half = dim // 2
    freqs = np.exp(-np.log(max_t) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


@dataclass(frozen=True)
class DenoiserConfig:
    latent_dim: int = 8
    fine_channels: int = 96
    coarse_channels: int = 192
    input_blocks: int = 2
    coarse_blocks: int = 4
    up_blocks: int = 4
    time_dim: int = 32
    label_vocab: int = 0
    filter_hidden: int = 8
    vn_delta: float = 1e-6
    pool_ratio: int = 4
    # 0 keeps convolutions exactly silent at initialization; a small value
    # seeds them with fan-in-scaled noise so timestep conditioning engages
    # immediately (useful for short desk-scale runs)
    init_mix_scale: float = 0.0

    @property
    def embed_dim(self) -> int:
        return self.time_dim + self.label_vocab

    @property
    def total_blocks(self) -> int:
        return self.input_blocks + self.coarse_blocks + self.up_blocks


@dataclass
class MeshLevels:
    """Everything the denoiser needs about one mesh."""

    fine: ConvGeometry
    pooling: PoolingMap
    coarse: ConvGeometry
    coarse_edge_hops: int

    @classmethod
    def build(cls, mesh: TriMesh, frames: TangentFrameField, pool_ratio: int = 4):
        fine = build_conv_geometry(mesh, frames)
        pooling = build_pooling(mesh, fine, ratio=pool_ratio)
        coarse, hops = build_coarse_geometry(mesh, fine, pooling)
        return cls(fine=fine, pooling=pooling, coarse=coarse,
                   coarse_edge_hops=hops)

    def save_cache(self, path, mesh: TriMesh, pool_ratio: int):
        """Geometry-table cache: one npz keyed by the mesh content hash.
        Array names mirror the ConvGeometry / PoolingMap fields with
        fine_/coarse_/pool_ prefixes."""
        np.savez(path,
                 mesh_hash=np.uint64(mesh.content_hash()),
                 pool_ratio=np.int64(pool_ratio),
                 coarse_edge_hops=np.int64(self.coarse_edge_hops),
                 **{f"fine_{k}": getattr(self.fine, k)
                    for k in ("edge_src", "edge_dst", "weight", "radial",
                              "transport", "vweight")},
                 fine_rtilde=self.fine.rtilde,
                 **{f"coarse_{k}": getattr(self.coarse, k)
                    for k in ("edge_src", "edge_dst", "weight", "radial",
                              "transport", "vweight")},
                 coarse_rtilde=self.coarse.rtilde,
                 pool_seeds=self.pooling.seeds, pool_assign=self.pooling.assign,
                 pool_phase=self.pooling.phase, pool_hops=self.pooling.hops,
                 pool_cluster_area=self.pooling.cluster_area)

    @classmethod
    def load_cache(cls, path, mesh: TriMesh, pool_ratio: int = 4):
        """Load cached tables; returns None when the file is absent or was
        built for a different mesh or pooling ratio."""
        import os
        if not os.path.exists(path):
            return None
        z = np.load(path)
        if (int(z["mesh_hash"]) != mesh.content_hash()
                or int(z["pool_ratio"]) != pool_ratio):
            return None
        fine = ConvGeometry.assemble(
            z["fine_edge_src"], z["fine_edge_dst"], z["fine_weight"],
            z["fine_radial"], z["fine_transport"], z["fine_vweight"],
            float(z["fine_rtilde"]))
        coarse = ConvGeometry.assemble(
            z["coarse_edge_src"], z["coarse_edge_dst"], z["coarse_weight"],
            z["coarse_radial"], z["coarse_transport"], z["coarse_vweight"],
            float(z["coarse_rtilde"]))
        area = z["pool_cluster_area"]
        assign = z["pool_assign"]
        phase = z["pool_phase"]
        coeff = (mesh.vertex_areas / area[assign]) * phase
        pooling = PoolingMap(seeds=z["pool_seeds"], assign=assign, phase=phase,
                             pool_coeff=coeff, hops=z["pool_hops"],
                             cluster_area=area,
                             plan=T.make_scatter_plan(assign, len(area)))
        return cls(fine=fine, pooling=pooling, coarse=coarse,
                   coarse_edge_hops=int(z["coarse_edge_hops"]))

    def receptive_ring_bound(self, cfg: DenoiserConfig) -> int:
        fine_convs = 2 * (cfg.input_blocks + cfg.up_blocks)
        coarse_convs = 2 * cfg.coarse_blocks
        pool_hops = int(self.pooling.hops.max())
        return (fine_convs + 2 * pool_hops
                + coarse_convs * max(self.coarse_edge_hops, 1))


class DenoiserUNet:
    """Shallow two-level U-Net of FCResNet blocks predicting the noise in
    a latent vector field, conditioned on the timestep and optional
    per-vertex labels."""

    def __init__(self, store: nn.ParameterStore, cfg: DenoiserConfig, name="unet"):
        self.cfg = cfg
        d, f, c = cfg.latent_dim, cfg.fine_channels, cfg.coarse_channels
        e = cfg.embed_dim
        self.blocks_in = [
            FCResNetBlock(store, f"{name}.in{i}", d if i == 0 else f, f, e,
                          cfg.vn_delta, cfg.filter_hidden, cfg.init_mix_scale)
            for i in range(cfg.input_blocks)]
        self.blocks_down = [
            FCResNetBlock(store, f"{name}.down{i}", f if i == 0 else c, c, e,
                          cfg.vn_delta, cfg.filter_hidden, cfg.init_mix_scale)
            for i in range(cfg.coarse_blocks)]
        self.blocks_up = [
            FCResNetBlock(store, f"{name}.up{i}", f + c if i == 0 else f, f, e,
                          cfg.vn_delta, cfg.filter_hidden, cfg.init_mix_scale)
            for i in range(cfg.up_blocks)]
        self.out_proj = nn.ComplexLinear(store, f"{name}.out", f, d, zero=True)
        if cfg.label_vocab:
            self.label_table = store.real_init(f"{name}.labels",
                                               (cfg.label_vocab, cfg.label_vocab),
                                               fan_in=1)
        else:
            self.label_table = None

    def embedding_field(self, t: int, labels, n_vertices: int,
                        dtype=np.float64):
        temb = timestep_embedding(t, self.cfg.time_dim).astype(dtype)
        tcol = T.Tensor(np.broadcast_to(temb, (n_vertices, self.cfg.time_dim)).copy())
        if self.cfg.label_vocab == 0:
            if labels is not None:
                raise MeshError("denoiser was built without label conditioning")
            return tcol
        if labels is None:
            lcol = T.Tensor(np.zeros((n_vertices, self.cfg.label_vocab), dtype=dtype))
        else:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (n_vertices,):
                raise MeshError("labels must give one index per vertex")
            if labels.min() < 0 or labels.max() >= self.cfg.label_vocab:
                raise MeshError(f"label out of vocabulary (size {self.cfg.label_vocab})")
            lcol = T.gather_rows(self.label_table, labels)
        return T.concat([tcol, lcol], axis=-1)

    @property
    def complex_dtype(self):
        return self.out_proj.w.data.dtype

    def __call__(self, z: T.Tensor, t: int, labels, levels: MeshLevels) -> T.Tensor:
        z = T.as_tensor(z)
        if z.shape[0] != levels.fine.n_vertices:
            raise MeshError("latents do not match the geometry tables")
        if z.shape[-1] != self.cfg.latent_dim:
            raise MeshError("latent channel count does not match the denoiser")
        dtype = np.float32 if z.data.dtype in (np.complex64, np.float32) else np.float64
        pi_f = self.embedding_field(t, labels, levels.fine.n_vertices, dtype)
        pi_c = T.gather_rows(pi_f, levels.pooling.seeds)

        h = z
        for blk in self.blocks_in:
            h = blk(h, pi_f, levels.fine)
        skip = h
        hc = pool_mean_transport(h, levels.pooling)
        for blk in self.blocks_down:
            hc = blk(hc, pi_c, levels.coarse)
        hu = unpool_transport(hc, levels.pooling)
        h = T.concat([skip, hu], axis=-1)
        for blk in self.blocks_up:
            h = blk(h, pi_f, levels.fine)
        return self.out_proj(h)


def create_denoiser(cfg: DenoiserConfig, seed: int = 0, dtype=np.float64):
    store = nn.ParameterStore(np.random.default_rng(seed), dtype=dtype)
    return DenoiserUNet(store, cfg), store


def randomize_filter_mixes(store: nn.ParameterStore, rng: np.random.Generator,
                           scale: float = 0.03):
    """Give zero-initialized mixing tensors and the output projection random
    fan-in-scaled values; used by equivariance checks that need a non-silent
    network. The modest scale keeps the deep stack numerically tame so
    double-precision equivariance holds to ~1e-10."""
    for name, p in store.params.items():
        if name.endswith(".mix") or name.endswith("out.w"):
            fan = int(np.prod(p.data.shape[1:]))
            s = scale * np.sqrt(0.5 / fan) if name.endswith(".mix") \
                else np.sqrt(0.5 / fan)
            p.data = ((rng.standard_normal(p.data.shape)
                       + 1j * rng.standard_normal(p.data.shape)) * s).astype(p.data.dtype)


def condition_for_equivariance_checks(store: nn.ParameterStore,
                                      rng: np.random.Generator,
                                      mix_scale: float = 0.03,
                                      vn_eps: float = 0.25):
    """Weights for verification runs that need the deep stack to preserve
    input-level precision. Equivariance holds for any weights, but checking
    it at 1e-9 in double precision requires bounded error amplification:
    the dominant amplifiers are the gate division in the vector neurons and
    phases of near-zero features, so K/Q linears are set to identity plus a
    perturbation (the gate is provably inactive at the identity point) and
    filter mixes are kept fan-in small. Every code path still executes."""
    for name, p in store.params.items():
        if name.endswith(".mix"):
            fan = int(np.prod(p.data.shape[1:]))
            s = mix_scale * np.sqrt(0.5 / fan)
            p.data = ((rng.standard_normal(p.data.shape)
                       + 1j * rng.standard_normal(p.data.shape)) * s).astype(p.data.dtype)
        elif name.endswith("out.w"):
            fan = p.data.shape[1]
            p.data = ((rng.standard_normal(p.data.shape)
                       + 1j * rng.standard_normal(p.data.shape))
                      * np.sqrt(0.5 / fan)).astype(p.data.dtype)
        elif (".k.w" in name or ".q.w" in name) and p.data.ndim == 2:
            o, i = p.data.shape
            eye = np.zeros((o, i), dtype=p.data.dtype)
            for r in range(o):
                eye[r, r % i] = 1.0
            pert = ((rng.standard_normal((o, i)) + 1j * rng.standard_normal((o, i)))
                    * np.sqrt(0.5 / i) * vn_eps).astype(p.data.dtype)
            p.data = eye + pert
