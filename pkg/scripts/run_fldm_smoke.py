"""Desk-scale diffusion smoke run: brief autoencoder training, then the
latent diffusion model on a 2K-vertex textured sheet with retriangulated
copies, followed by a 100-step sample decoded to an atlas."""

import time

import numpy as np

from surftex import atlas as A
from surftex import convnet as C
from surftex import diffusion as D
from surftex import planar as P
from surftex import vae as V
from surftex import shapes as S
from surftex.mesh import compute_vertex_frames
from surftex.noise import NoiseSchedule, NoiseStream

from run_vae_overfit import smooth_image


def main(vae_iterations=1500, fldm_iterations=2000, copies=4, seed=7):
    t_all = time.time()
    atlas = smooth_image()
    vcfg = V.VAEConfig(latent_dim=8, channels=32, vn_layers=3, heads=4,
                       samples_per_ring=16, decoder_width=192, decoder_layers=5,
                       batch_size=8, lambda_kl=1e-3, lr_start=2e-3,
                       sigma_init=0.05, coord_scale=27.0)
    record = P.build_record("synthetic", atlas, 500, vcfg.samples_per_ring, seed=11)
    vae_model, _ = V.pretrain_planar([record], vcfg, seed=3,
                                     iterations=vae_iterations, log_every=500)

    mesh = S.delaunay_sheet(2000, np.random.default_rng(5))
    fcfg = D.FLDMConfig(T=1000, batch_size=1, iterations=fldm_iterations,
                        copies=copies, seed=seed, precision="float32")
    dcfg = C.DenoiserConfig(latent_dim=8, fine_channels=8, coarse_channels=16,
                            time_dim=8)

    def sampler(m, faces, bary):
        return A.sample_texture_batch(atlas, m, faces, bary)

    trained = D.train_fldm(mesh, sampler, vae_model, fcfg, dcfg, log_every=200)
    first = np.mean(trained.losses[:100])
    last = np.mean(trained.losses[-100:])
    print(f"loss: first-100 mean {first:.3f} -> last-100 mean {last:.3f} "
          f"({100 * (1 - last / first):.0f}% drop)")

    idx = np.unique(np.round(np.linspace(0, trained.schedule.T, 101)).astype(int))
    sch = NoiseSchedule(alpha_bar=trained.schedule.alpha_bar[idx])
    frames = compute_vertex_frames(mesh)
    levels = C.MeshLevels.build(mesh, frames, pool_ratio=dcfg.pool_ratio)
    z = D.sample(levels, trained.net, sch, None, NoiseStream(99),
                 mode=trained.coefficient_mode)
    latents = D.unscale_latents(z, trained.factors)
    baked = A.bake_atlas(mesh, frames, latents, vae_model.decode_points, 96)
    A.save_png("fldm_smoke_sample.png", baked)
    D.save_bundle("fldm_smoke.stbd", trained)
    print(f"total {time.time() - t_all:.0f}s; wrote fldm_smoke_sample.png / .stbd")


if __name__ == "__main__":
    main()
