"""Planar pretraining data: farthest-point sampled, Delaunay-triangulated
sheets overlaid on images, with cached one-ring texture samples."""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay

from .atlas import TextureAtlas, load_png, sample_texture_batch
from .mesh import TriMesh, compute_vertex_frames, sample_one_ring_arrays
from .noise import Purpose


@dataclass
class PlanarRecord:
    """One textured planar mesh plus its per-vertex one-ring sample cache."""

    image_name: str
    mesh: TriMesh
    colors: np.ndarray   # [V, S, 3] in [0, 1]
    logs: np.ndarray     # [V, S] complex

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.image_name.encode())
        h.update(self.mesh.vertices.astype("<f8").tobytes())
        h.update(self.mesh.faces.astype("<i8").tobytes())
        h.update(self.colors.astype("<f4").tobytes())
        h.update(self.logs.astype("<c16").tobytes())
        return h.hexdigest()


def farthest_point_mesh(n_vertices: int, rng: np.random.Generator,
                        pool_factor: int = 20) -> TriMesh:
    """Planar mesh over [0, 1]^2: farthest-point selection from a random
    candidate pool (the four corners always included, so the Delaunay hull
    is the full rectangle), then Delaunay triangulation."""
    if n_vertices < 4:
        raise ValueError("need at least the four corner vertices")
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    pool = rng.random((max(pool_factor * n_vertices, n_vertices), 2))
    chosen = list(corners)
    dist = np.min([np.sum((pool - c) ** 2, axis=1) for c in corners], axis=0)
    for _ in range(n_vertices - 4):
        idx = int(np.argmax(dist))
        chosen.append(pool[idx])
        dist = np.minimum(dist, np.sum((pool - pool[idx]) ** 2, axis=1))
    pts = np.asarray(chosen)
    tri = Delaunay(pts)
    faces = tri.simplices.copy()
    e1 = pts[faces[:, 1]] - pts[faces[:, 0]]
    e2 = pts[faces[:, 2]] - pts[faces[:, 0]]
    flip = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    verts = np.column_stack([pts, np.zeros(len(pts))])
    return TriMesh(verts, faces, pts[faces])


def build_record(image_name: str, atlas: TextureAtlas, n_vertices: int,
                 samples_per_ring: int, seed: int, mesh_index: int = 0) -> PlanarRecord:
    rng = np.random.default_rng(np.random.SeedSequence([seed, mesh_index]))
    mesh = farthest_point_mesh(n_vertices, rng)
    frames = compute_vertex_frames(mesh)
    v = mesh.n_vertices
    colors = np.zeros((v, samples_per_ring, 3))
    logs = np.zeros((v, samples_per_ring), dtype=np.complex128)
    for p in range(v):
        ring_rng = np.random.Generator(np.random.Philox(
            key=np.array([seed, (Purpose.DATA << 40) + (mesh_index << 24) + p],
                         dtype=np.uint64)))
        faces, bary, lg = sample_one_ring_arrays(mesh, frames, p,
                                                 samples_per_ring, ring_rng)
        colors[p] = sample_texture_batch(atlas, mesh, faces, bary)
        logs[p] = lg
    return PlanarRecord(image_name=image_name, mesh=mesh, colors=colors, logs=logs)


def generate_planar_dataset(image_paths, mesh_count: int, vertices_per_mesh: int,
                            samples_per_ring: int, seed: int,
                            progress=print):
    """Build ``mesh_count`` textured planar records, cycling through the
    images. Unreadable images are skipped with a warning; an empty usable
    set is an error. Returns (records, manifest_hash)."""
    atlases = []
    for path in image_paths:
        try:
            atlases.append((Path(path).name, load_png(path)))
        except Exception as exc:
            warnings.warn(f"skipping unreadable image {path}: {exc}", stacklevel=2)
    if not atlases:
        raise ValueError("no readable images for planar dataset generation")
    records = []
    for k in range(mesh_count):
        name, atl = atlases[k % len(atlases)]
        rec = build_record(name, atl, vertices_per_mesh, samples_per_ring,
                           seed, mesh_index=k)
        records.append(rec)
        if progress:
            progress(f"[gen-planar] mesh {k}: image={name} "
                     f"V={rec.mesh.n_vertices} F={rec.mesh.n_faces}")
    manifest = hashlib.sha256()
    for rec in records:
        manifest.update(rec.content_hash().encode())
    return records, manifest.hexdigest()


def save_records(out_dir, records, manifest_hash: str):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, rec in enumerate(records):
        np.savez(out / f"record_{k:04d}.npz",
                 image_name=rec.image_name,
                 vertices=rec.mesh.vertices, faces=rec.mesh.faces,
                 uv=rec.mesh.uv, colors=rec.colors, logs=rec.logs)
    with open(out / "manifest.txt", "w") as fh:
        fh.write(f"records {len(records)}\n")
        for k, rec in enumerate(records):
            fh.write(f"record_{k:04d}.npz {rec.content_hash()}\n")
        fh.write(f"manifest {manifest_hash}\n")


def load_records(in_dir):
    out = []
    paths = sorted(Path(in_dir).glob("record_*.npz"))
    if not paths:
        raise FileNotFoundError(f"no planar records under {in_dir}")
    for path in paths:
        z = np.load(path, allow_pickle=False)
        mesh = TriMesh(z["vertices"], z["faces"], z["uv"])
        out.append(PlanarRecord(image_name=str(z["image_name"]), mesh=mesh,
                                colors=z["colors"], logs=z["logs"]))
    return out
