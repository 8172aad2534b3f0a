"""Command-line surface: pretrain-vae, encode, decode, train-fldm, sample,
inpaint, transfer, metrics, gen-planar and inspect, all driven by one
RunConfig document plus flag overrides.

Exit codes: 0 success, 1 runtime error, 2 usage error. Per-vertex label
and mask files are plain text, one integer per line, line k = vertex k.
Target meshes are assumed uniformly remeshed (an external remesher);
one-ring sizes at inference should be no smaller than at pretraining.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import atlas as atlas_io
from . import diffusion as diff
from . import planar
from . import vae as vae_mod
from .config import RunConfig, load_vertex_integers
from .convnet import MeshLevels, create_denoiser
from .mesh import compute_vertex_frames, mean_area_radius
from .noise import NoiseStream
from .vae import load_vae, save_vae


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig.defaults()
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if getattr(args, "deterministic", False):
        cfg.set("precision", "float64")
    for item in getattr(args, "override", []) or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        cfg.set(key.strip(), val.strip(), where="--set")
    return cfg


def _out_path(args, default_name):
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(default_name)


def _atlas_sampler(atlas):
    def sampler(mesh, faces, bary):
        return atlas_io.sample_texture_batch(atlas, mesh, faces, bary)
    return sampler


def _schedule_with_stride(trained, steps):
    """Optionally subsample the stored schedule to a shorter recursion."""
    if not steps or steps >= trained.schedule.T:
        return trained.schedule
    idx = np.unique(np.round(np.linspace(0, trained.schedule.T, steps + 1)).astype(int))
    from .noise import NoiseSchedule
    return NoiseSchedule(alpha_bar=trained.schedule.alpha_bar[idx])


def cmd_gen_planar(args):
    cfg = _load_config(args)
    images = sorted(Path(args.images).glob("*.png"))
    records, manifest = planar.generate_planar_dataset(
        images, cfg["planar.mesh_count"], cfg["planar.vertices_per_mesh"],
        cfg["vae.samples_per_ring"], cfg["seed"])
    out = _out_path(args, "planar_dataset")
    planar.save_records(out, records, manifest)
    print(f"[gen-planar] wrote {len(records)} records to {out} manifest={manifest[:16]}")
    return 0


def cmd_pretrain_vae(args):
    cfg = _load_config(args)
    records = planar.load_records(args.data)
    out = _out_path(args, "vae.stck")
    model, history = vae_mod.pretrain_planar(
        records, cfg.vae_config(), cfg["seed"], cfg["vae.iterations"],
        checkpoint_every=max(cfg["vae.iterations"] // 10, 1), checkpoint_path=out)
    save_vae(out, model)
    print(f"[pretrain-vae] final recon={history[-1][0]:.4f} kl={history[-1][1]:.4f} -> {out}")
    return 0


def cmd_encode(args):
    cfg = _load_config(args)
    mesh = atlas_io.load_mesh_obj(args.mesh)
    atlas = atlas_io.load_png(args.atlas)
    model = load_vae(args.vae)
    frames = compute_vertex_frames(mesh)
    stream = NoiseStream(cfg["seed"])
    sampler = _atlas_sampler(atlas)
    dist = model.encode_mesh(mesh, frames,
                             lambda faces, bary: sampler(mesh, faces, bary), stream)
    out = _out_path(args, "latents.stlf")
    vae_mod.save_latents(out, dist)
    print(f"[encode] {mesh.n_vertices} vertices, d={model.cfg.latent_dim} -> {out}")
    return 0


def cmd_decode(args):
    cfg = _load_config(args)
    mesh = atlas_io.load_mesh_obj(args.mesh)
    model = load_vae(args.vae)
    frames = compute_vertex_frames(mesh)
    dist = vae_mod.load_latents(args.latents, mesh, frames)
    baked = atlas_io.bake_atlas(mesh, frames, dist.mu.values, model.decode_points,
                                cfg["bake.resolution"], progress=print)
    out = _out_path(args, "decoded.png")
    atlas_io.save_png(out, baked)
    print(f"[decode] wrote {out}")
    return 0


def cmd_train_fldm(args):
    cfg = _load_config(args)
    mesh = atlas_io.load_mesh_obj(args.mesh)
    atlas = atlas_io.load_png(args.atlas)
    model = load_vae(args.vae)
    labels = None
    den_cfg = cfg.denoiser_config()
    if args.labels:
        labels = load_vertex_integers(args.labels, mesh.n_vertices)
        vocab = int(labels.max()) + 1
        if den_cfg.label_vocab < vocab:
            from dataclasses import replace
            den_cfg = replace(den_cfg, label_vocab=vocab)
    trained = diff.train_fldm(mesh, _atlas_sampler(atlas), model,
                              cfg.fldm_config(), den_cfg, labels=labels)
    out = _out_path(args, "model.stbd")
    diff.save_bundle(out, trained)
    print(f"[train-fldm] final loss={trained.losses[-1]:.4f} -> {out}")
    return 0


def _sample_common(args, inpaint=False):
    cfg = _load_config(args)
    mesh = atlas_io.load_mesh_obj(args.mesh)
    model = load_vae(args.vae)
    trained = diff.load_bundle(args.model)
    frames = compute_vertex_frames(mesh)
    levels = MeshLevels.build(mesh, frames,
                              pool_ratio=trained.denoiser_cfg.pool_ratio)
    labels = None
    if args.labels:
        labels = load_vertex_integers(args.labels, mesh.n_vertices)
    stream = NoiseStream(cfg["seed"])
    schedule = _schedule_with_stride(trained, cfg["sample.steps"])
    print(f"[{'inpaint' if inpaint else 'sample'}] mesh={mesh.n_vertices}v "
          f"r_tilde={mean_area_radius(mesh):.5f} T={schedule.T}")
    if inpaint:
        dist = vae_mod.load_latents(args.latents, mesh, frames)
        mask = load_vertex_integers(args.mask, mesh.n_vertices)
        z_in = dist.mu.values * trained.factors
        z = diff.inpaint_sample(levels, trained.net, schedule, mask, z_in,
                                labels, stream, mode=trained.coefficient_mode)
    else:
        z = diff.sample(levels, trained.net, schedule, labels, stream,
                        mode=trained.coefficient_mode, progress=print)
    latents = diff.unscale_latents(z, trained.factors)
    baked = atlas_io.bake_atlas(mesh, frames, latents, model.decode_points,
                                cfg["bake.resolution"], progress=print)
    out = _out_path(args, "sampled.png")
    atlas_io.save_png(out, baked)
    print(f"[{'inpaint' if inpaint else 'sample'}] wrote {out}")
    return 0


def cmd_sample(args):
    return _sample_common(args, inpaint=False)


def cmd_transfer(args):
    # sampling a pre-trained model on a new mesh IS the transfer workflow;
    # equivariance is what makes it valid without retraining
    return _sample_common(args, inpaint=False)


def cmd_inpaint(args):
    return _sample_common(args, inpaint=True)


def cmd_metrics(args):
    ref = atlas_io.load_png(args.ref)
    test = atlas_io.load_png(args.test)
    mask = None
    if args.mesh:
        mesh = atlas_io.load_mesh_obj(args.mesh)
        _, _, mask = atlas_io.rasterize_uv(mesh, ref.height, ref.width, dilate=0)
    p = atlas_io.psnr(ref, test, mask=mask)
    d = atlas_io.dssim(ref, test, mask=mask)
    print(f"[metrics] psnr={'inf' if p == float('inf') else f'{p:.4f}'} dB "
          f"dssim={d:.6f}")
    return 0


def cmd_inspect(args):
    path = Path(args.path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        mesh = atlas_io.load_mesh_obj(path)
        print(f"[inspect] mesh {path}: V={mesh.n_vertices} F={mesh.n_faces} "
              f"area={mesh.total_area:.6f} r_tilde={mean_area_radius(mesh):.6f} "
              f"boundary={int(mesh.is_boundary_vertex.sum())} "
              f"hash={mesh.content_hash():016x}")
    elif suffix == ".stbd":
        b = diff.load_bundle(path)
        cfg = b.denoiser_cfg
        print(f"[inspect] bundle {path}: T={b.schedule.T} d={cfg.latent_dim} "
              f"channels={cfg.fine_channels}/{cfg.coarse_channels} "
              f"labels={cfg.label_vocab} mode={b.coefficient_mode} "
              f"mesh={b.mesh_hash:016x}")
        print(f"[inspect] scale factors: {np.array2string(b.factors, precision=4)}")
    elif suffix == ".stck":
        from .nn import load_checkpoint
        state = load_checkpoint(path)
        n = sum(int(np.prod(a.shape)) for a in state.values())
        print(f"[inspect] checkpoint {path}: {len(state)} tensors, {n} scalars")
        for k in sorted(state)[:12]:
            print(f"  {k}: {state[k].dtype} {state[k].shape}")
        if len(state) > 12:
            print(f"  ... and {len(state) - 12} more")
    elif suffix == ".stlf" and args.mesh:
        mesh = atlas_io.load_mesh_obj(args.mesh)
        frames = compute_vertex_frames(mesh)
        dist = vae_mod.load_latents(path, mesh, frames)
        print(f"[inspect] latents {path}: V={dist.mu.values.shape[0]} "
              f"d={dist.mu.values.shape[1]} "
              f"|mu| mean={np.abs(dist.mu.values).mean():.4f} "
              f"sigma mean={dist.sigma.mean():.4f}")
    else:
        raise ValueError(f"cannot inspect {path} (need .obj/.stbd/.stck, or .stlf with --mesh)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="surftex",
                                 description="Tangent-space latent diffusion for mesh textures")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--deterministic", action="store_true",
                    help="force double precision regardless of config")
    ap.add_argument("--out", default=None, help="output path")
    ap.add_argument("--config", default=None, help="RunConfig document (key = value)")
    ap.add_argument("--set", dest="override", action="append", metavar="KEY=VALUE",
                    help="override a single config key")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-planar", help="build a textured planar pretraining dataset")
    p.add_argument("--images", required=True, help="directory of PNG images")
    p.set_defaults(fn=cmd_gen_planar)

    p = sub.add_parser("pretrain-vae", help="train the autoencoder on planar records")
    p.add_argument("--data", required=True, help="directory from gen-planar")
    p.set_defaults(fn=cmd_pretrain_vae)

    p = sub.add_parser("encode", help="texture atlas -> per-vertex latent field")
    p.add_argument("--mesh", required=True)
    p.add_argument("--atlas", required=True)
    p.add_argument("--vae", required=True)
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("decode", help="latent field -> baked texture atlas")
    p.add_argument("--mesh", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--latents", required=True)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("train-fldm", help="train the latent diffusion model on one mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--atlas", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--labels", default=None)
    p.set_defaults(fn=cmd_train_fldm)

    for name, help_text in (("sample", "sample new latents and bake a texture"),
                            ("transfer", "sample a pre-trained model on a new mesh")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--model", required=True)
        p.add_argument("--mesh", required=True)
        p.add_argument("--vae", required=True)
        p.add_argument("--labels", default=None)
        p.set_defaults(fn=cmd_sample if name == "sample" else cmd_transfer)

    p = sub.add_parser("inpaint", help="regenerate outside a preservation mask")
    p.add_argument("--model", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--latents", required=True, help="encoded input texture latents")
    p.add_argument("--mask", required=True, help="per-vertex 0/1 text file")
    p.add_argument("--labels", default=None)
    p.set_defaults(fn=cmd_inpaint)

    p = sub.add_parser("metrics", help="PSNR / DSSIM between two atlases")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--mesh", default=None, help="restrict to this mesh's UV occupancy")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("inspect", help="summarize a mesh/bundle/checkpoint/latent file")
    p.add_argument("path")
    p.add_argument("--mesh", default=None, help="mesh for latent files")
    p.set_defaults(fn=cmd_inspect)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
