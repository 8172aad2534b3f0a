"""Texture atlases and asset I/O: OBJ meshes with per-corner UVs, bilinear
texture sampling, UV-space rasterization, latent-field baking, and the
PSNR / DSSIM reconstruction metrics.

UV convention: u maps to columns as u * (W - 1) and v to rows as
(1 - v) * (H - 1), so integer texel coordinates land exactly on texel
centers and v points up as in OBJ files. PNG rows load top-down unchanged.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .mesh import TriMesh, TangentFrameField, MeshError, build_corner_log_table


@dataclass
class TextureAtlas:
    """Float RGB image in [0, 1] plus an occupancy mask of texels covered
    by (or dilated from) UV triangles."""

    data: np.ndarray
    occupancy: np.ndarray = field(default=None)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = np.repeat(self.data[:, :, None], 3, axis=2)
        if self.data.ndim != 3 or self.data.shape[2] != 3 or min(self.data.shape[:2]) < 1:
            raise ValueError("atlas must be an H x W x 3 image")
        if self.occupancy is None:
            self.occupancy = np.ones(self.data.shape[:2], dtype=bool)
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        if self.occupancy.shape != self.data.shape[:2]:
            raise ValueError("occupancy mask must match the image size")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


def load_png(path) -> TextureAtlas:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return TextureAtlas(data=img)


def save_png(path, atlas: TextureAtlas):
    q = np.rint(np.clip(atlas.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# OBJ I/O


def load_mesh_obj(path) -> TriMesh:
    """Load an OBJ with v/vt/f records. Quads and larger polygons are
    fan-triangulated; vertex positions are deduplicated exactly while UVs
    stay per-corner so seams survive."""
    positions = []
    uvs = []
    raw_faces = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                positions.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                uvs.append([float(parts[1]), float(parts[2])])
            elif tag == "f":
                corners = []
                for tok in parts[1:]:
                    fields = tok.split("/")
                    vi = int(fields[0])
                    ti = None
                    if len(fields) > 1 and fields[1]:
                        ti = int(fields[1])
                    corners.append((vi, ti))
                if any(t is None for _, t in corners):
                    raise MeshError(f"{path}:{ln}: atlas required (face without vt)")
                for k in range(1, len(corners) - 1):
                    raw_faces.append([corners[0], corners[k], corners[k + 1]])
    if not raw_faces:
        raise MeshError(f"{path}: no faces")
    positions = np.asarray(positions)
    uvs = np.asarray(uvs) if uvs else np.zeros((0, 2))

    def resolve(idx, n):
        return idx - 1 if idx > 0 else n + idx

    dedup: dict = {}
    remap = np.zeros(len(positions), dtype=np.int64)
    unique = []
    for i, p in enumerate(positions):
        key = (p[0], p[1], p[2])
        if key not in dedup:
            dedup[key] = len(unique)
            unique.append(p)
        remap[i] = dedup[key]
    verts = np.asarray(unique)

    faces = np.zeros((len(raw_faces), 3), dtype=np.int64)
    uv = np.zeros((len(raw_faces), 3, 2))
    for f, corners in enumerate(raw_faces):
        for k, (vi, ti) in enumerate(corners):
            faces[f, k] = remap[resolve(vi, len(positions))]
            uv[f, k] = uvs[resolve(ti, len(uvs))]
    return TriMesh(verts, faces, uv)


def save_mesh_obj(path, mesh: TriMesh):
    """Write v/vt/f records with shortest-exact float formatting, so a
    load -> write -> load round trip is bit-exact."""
    if mesh.uv is None:
        raise MeshError("mesh has no UVs; cannot write an atlas-mapped OBJ")

    def fmt(x):
        return np.format_float_positional(np.float64(x), unique=True, trim="0")

    vt_index: dict = {}
    vt_list = []
    corner_vt = np.zeros((mesh.n_faces, 3), dtype=np.int64)
    for f in range(mesh.n_faces):
        for k in range(3):
            key = (mesh.uv[f, k, 0], mesh.uv[f, k, 1])
            if key not in vt_index:
                vt_index[key] = len(vt_list)
                vt_list.append(key)
            corner_vt[f, k] = vt_index[key]
    with open(path, "w") as fh:
        for p in mesh.vertices:
            fh.write(f"v {fmt(p[0])} {fmt(p[1])} {fmt(p[2])}\n")
        for u, v in vt_list:
            fh.write(f"vt {fmt(u)} {fmt(v)}\n")
        for f in range(mesh.n_faces):
            toks = [f"{mesh.faces[f, k] + 1}/{corner_vt[f, k] + 1}" for k in range(3)]
            fh.write("f " + " ".join(toks) + "\n")


# ---------------------------------------------------------------------------
# texture sampling


def _uv_to_rc(uv, h, w):
    return (1.0 - uv[..., 1]) * (h - 1), uv[..., 0] * (w - 1)


def sample_texture_batch(atlas: TextureAtlas, mesh: TriMesh, faces, bary) -> np.ndarray:
    """Bilinear texture lookups for surface points given by (face, bary)."""
    faces = np.asarray(faces)
    bary = np.asarray(bary)
    uvc = mesh.uv[faces]                       # [n, 3, 2]
    uv = np.einsum("nk,nkj->nj", bary, uvc)
    if np.any(uv < -1e-9) or np.any(uv > 1 + 1e-9):
        warnings.warn("UV coordinates outside [0,1]^2; clamping", stacklevel=2)
    uv = np.clip(uv, 0.0, 1.0)
    r, c = _uv_to_rc(uv, atlas.height, atlas.width)
    r0 = np.clip(np.floor(r).astype(int), 0, atlas.height - 1)
    c0 = np.clip(np.floor(c).astype(int), 0, atlas.width - 1)
    r1 = np.minimum(r0 + 1, atlas.height - 1)
    c1 = np.minimum(c0 + 1, atlas.width - 1)
    fr = (r - r0)[:, None]
    fc = (c - c0)[:, None]
    d = atlas.data
    return ((1 - fr) * (1 - fc) * d[r0, c0] + (1 - fr) * fc * d[r0, c1]
            + fr * (1 - fc) * d[r1, c0] + fr * fc * d[r1, c1])


def sample_texture(atlas: TextureAtlas, mesh: TriMesh, point) -> np.ndarray:
    """Single-point variant taking a SurfacePoint."""
    return sample_texture_batch(atlas, mesh, [point.face], [list(point.bary)])[0]


# ---------------------------------------------------------------------------
# rasterization and baking


def rasterize_uv(mesh: TriMesh, height: int, width: int, dilate: int = 1):
    """Conservative UV rasterization: per texel, the covering face and its
    barycentric coordinates, dilated by ``dilate`` texels into unoccupied
    space (clamped barycentrics) to avoid seam bleed when baking.

    Returns (face_id [H,W] with -1 outside, bary [H,W,3], occupancy).
    """
    if mesh.uv is None:
        raise MeshError("mesh has no UVs")
    face_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    best = np.full((height, width), -np.inf)
    margin = 0.75 * np.hypot(1.0 / max(width - 1, 1), 1.0 / max(height - 1, 1))

    for f in range(mesh.n_faces):
        tri = mesh.uv[f]
        lo = np.maximum(tri.min(axis=0) - margin, 0.0)
        hi = np.minimum(tri.max(axis=0) + margin, 1.0)
        c0 = int(np.floor(lo[0] * (width - 1)))
        c1 = int(np.ceil(hi[0] * (width - 1)))
        r0 = int(np.floor((1.0 - hi[1]) * (height - 1)))
        r1 = int(np.ceil((1.0 - lo[1]) * (height - 1)))
        if c1 < c0 or r1 < r0:
            continue
        cols = np.arange(c0, c1 + 1)
        rows = np.arange(r0, r1 + 1)
        uu = cols / max(width - 1, 1)
        vv = 1.0 - rows / max(height - 1, 1)
        uvg = np.stack(np.meshgrid(uu, vv, indexing="xy"), axis=-1)  # [R, C, 2]
        m = np.array([[tri[1, 0] - tri[0, 0], tri[2, 0] - tri[0, 0]],
                      [tri[1, 1] - tri[0, 1], tri[2, 1] - tri[0, 1]]])
        det = np.linalg.det(m)
        if abs(det) < 1e-18:
            continue
        minv = np.linalg.inv(m)
        rel = uvg - tri[0]
        bc12 = rel @ minv.T
        b = np.concatenate([1.0 - bc12.sum(axis=-1, keepdims=True), bc12], axis=-1)
        score = b.min(axis=-1)
        ok = score > -margin / np.sqrt(abs(det))
        rr, cc = np.nonzero(ok)
        sc = score[rr, cc]
        tgt_r = rows[rr]
        tgt_c = cols[cc]
        better = sc > best[tgt_r, tgt_c]
        tr, tc, sel = tgt_r[better], tgt_c[better], sc[better]
        best[tr, tc] = sel
        face_id[tr, tc] = f
        bary[tr, tc] = b[rr, cc][better]

    occupancy = face_id >= 0
    for _ in range(max(dilate, 0)):
        grow = occupancy.copy()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            shifted = np.roll(occupancy, (dr, dc), axis=(0, 1))
            if dr > 0:
                shifted[:dr] = False
            if dr < 0:
                shifted[dr:] = False
            if dc > 0:
                shifted[:, :dc] = False
            if dc < 0:
                shifted[:, dc:] = False
            newly = shifted & ~grow
            rr, cc = np.nonzero(newly)
            src_r, src_c = rr - dr, cc - dc
            face_id[rr, cc] = face_id[src_r, src_c]
            bary[rr, cc] = bary[src_r, src_c]
            grow |= newly
        occupancy = grow
    # clamp barycentrics of conservative / dilated texels back into the face
    np.clip(bary, 0.0, None, out=bary)
    s = bary.sum(axis=-1, keepdims=True)
    s[s == 0] = 1.0
    bary /= s
    return face_id, bary, occupancy


def bake_atlas(mesh: TriMesh, frames: TangentFrameField, latents: np.ndarray,
               decode_fn, resolution: int, corner_logs: np.ndarray | None = None,
               progress=None) -> TextureAtlas:
    """Decode a latent field to a texture atlas.

    Every occupied texel maps to (face, bary); each of the face's three
    vertices decodes the texel from its own log coordinate and latent, and
    the three predictions are blended barycentrically. ``decode_fn(logs, z)
    -> [n, 3] colors in [0, 1]``; ``latents`` must already be unscaled.
    """
    h = w = int(resolution)
    face_id, bary, occ = rasterize_uv(mesh, h, w)
    if corner_logs is None:
        corner_logs = build_corner_log_table(mesh, frames)
    rr, cc = np.nonzero(occ)
    fid = face_id[rr, cc]
    b = bary[rr, cc]                                    # [N, 3]
    n = len(fid)
    logs_nc = np.einsum("nk,nck->nc", b.astype(np.complex128), corner_logs[fid])
    corner_verts = mesh.faces[fid]                      # [N, 3]
    z_nc = latents[corner_verts]                        # [N, 3, d]
    preds = decode_fn(logs_nc.reshape(-1), z_nc.reshape(3 * n, -1)).reshape(n, 3, 3)
    colors = np.einsum("nk,nkj->nj", b, preds)
    out = np.zeros((h, w, 3))
    out[rr, cc] = colors
    if progress:
        progress(f"[bake] {n} texels decoded at {h}x{w}")
    return TextureAtlas(data=out, occupancy=occ)


# ---------------------------------------------------------------------------
# metrics


def psnr(a: TextureAtlas | np.ndarray, b, mask=None) -> float:
    """10 log10(MAX^2 / MSE) over masked texels; +inf when identical."""
    da = a.data if isinstance(a, TextureAtlas) else np.asarray(a, dtype=np.float64)
    db = b.data if isinstance(b, TextureAtlas) else np.asarray(b, dtype=np.float64)
    if da.shape != db.shape:
        raise ValueError("psnr: image sizes differ")
    peak = 255.0 if da.max() > 1.5 or db.max() > 1.5 else 1.0
    diff = (da - db) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        diff = diff[mask]
    mse = float(diff.mean())
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def dssim(a, b, mask=None, sigma: float = 1.5) -> float:
    """(1 - SSIM) / 2 with the standard constants, Gaussian-windowed and
    averaged over masked texels. Symmetric in its arguments."""
    da = a.data if isinstance(a, TextureAtlas) else np.asarray(a, dtype=np.float64)
    db = b.data if isinstance(b, TextureAtlas) else np.asarray(b, dtype=np.float64)
    if da.shape != db.shape:
        raise ValueError("dssim: image sizes differ")
    peak = 255.0 if da.max() > 1.5 or db.max() > 1.5 else 1.0
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    def blur(x):
        return np.stack([gaussian_filter(x[..., k], sigma, mode="nearest")
                         for k in range(x.shape[-1])], axis=-1)

    mu_a = blur(da)
    mu_b = blur(db)
    var_a = blur(da * da) - mu_a * mu_a
    var_b = blur(db * db) - mu_b * mu_b
    cov = blur(da * db) - mu_a * mu_b
    ssim_map = (((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    if mask is not None:
        ssim_map = ssim_map[np.asarray(mask, dtype=bool)]
    return float((1.0 - ssim_map.mean()) / 2.0)
