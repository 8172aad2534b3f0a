"""Sweep random meshes, rigid motions and frame re-choices, and report the
worst equivariance deviations of every operator family."""

import time

import numpy as np

from surftex import convnet as C
from surftex import diffusion as D
from surftex import mesh as M
from surftex import shapes as S
from surftex import tape as T
from surftex import vae as V
from surftex.noise import NoiseStream, frame_change_rotations, linear_alpha_schedule


class PushforwardStream:
    def __init__(self, base, rotations):
        self.base = base
        self.rot = np.asarray(rotations)[:, None]

    def complex_field(self, purpose, step, n, d):
        return self.rot * self.base.complex_field(purpose, step, n, d)


def main(n_meshes=8, min_v=200, max_v=1200, seed=0):
    start = time.time()
    vcfg = V.VAEConfig(latent_dim=4, channels=16, vn_layers=2, heads=4,
                       samples_per_ring=10, decoder_width=32, decoder_layers=3,
                       coord_scale=10.0)
    vae_model = V.FieldVAE.create(vcfg, seed=1)
    dcfg = C.DenoiserConfig(latent_dim=3, fine_channels=4, coarse_channels=6,
                            time_dim=8, vn_delta=1e-2)
    net, store = C.create_denoiser(dcfg, seed=2)
    C.condition_for_equivariance_checks(store, np.random.default_rng(3))

    master = np.random.default_rng(seed)
    worst = {}
    for mi in range(n_meshes):
        nv = int(master.integers(min_v, max_v))
        rng = np.random.default_rng(1000 + mi)
        mesh = S.warp_heightfield(S.delaunay_sheet(nv, rng), rng, amplitude=0.06)
        frames = M.compute_vertex_frames(mesh)
        R = S.random_rotation(rng)
        moved = S.rigid_transform(mesh, R, rng.standard_normal(3))
        frames_m = M.compute_vertex_frames(moved).rotated(
            rng.random(mesh.n_vertices) * 2 * np.pi)
        rot = frame_change_rotations(R, frames, frames_m)
        lev_a = C.MeshLevels.build(mesh, frames)
        lev_b = C.MeshLevels.build(moved, frames_m)

        p = int(rng.integers(0, mesh.n_vertices))
        _, _, logs = M.sample_one_ring_arrays(mesh, frames, p, 10,
                                              np.random.default_rng(7))
        colors = rng.random((1, 10, 3)) * 2 - 1
        mu_a, sg_a = vae_model.encoder(colors, logs[None])
        mu_b, sg_b = vae_model.encoder(colors, (rot[p] * logs)[None])
        worst["encoder mean"] = max(worst.get("encoder mean", 0),
                                    float(np.abs(mu_b.data - rot[p] * mu_a.data).max()))
        worst["encoder sigma"] = max(worst.get("encoder sigma", 0),
                                     float(np.abs(sg_b.data - sg_a.data).max()))

        mod = 0.7 + 0.6 * rng.random((mesh.n_vertices, 3))
        x = mod * np.exp(1j * rng.random((mesh.n_vertices, 3)) * 2 * np.pi)
        na = net(T.Tensor(x), 5, None, lev_a).data
        nb = net(T.Tensor(rot[:, None] * x), 5, None, lev_b).data
        worst["denoiser"] = max(worst.get("denoiser", 0),
                                float(np.abs(nb - rot[:, None] * na).max()))

        sch = linear_alpha_schedule(8, 1e-4)
        base = NoiseStream(50 + mi)
        za = D.sample(lev_a, net, sch, None, base)
        zb = D.sample(lev_b, net, sch, None, PushforwardStream(base, rot))
        worst["trajectory"] = max(worst.get("trajectory", 0),
                                  float(np.abs(zb - rot[:, None] * za).max()))
        print(f"mesh {mi} ({nv} vertices) done", flush=True)

    print(f"\n{n_meshes} meshes, {time.time() - start:.0f}s")
    for k, v in worst.items():
        print(f"  worst {k:14s} deviation: {v:.3e}")


if __name__ == "__main__":
    main()
