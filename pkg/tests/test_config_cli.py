import numpy as np
import pytest

from surftex import atlas as A
from surftex import cli
from surftex import shapes as S
from surftex.config import RunConfig, load_vertex_integers


def test_config_defaults_carry_published_values():
    cfg = RunConfig.defaults()
    assert cfg["vae.latent_dim"] == 8
    assert cfg["vae.channels"] == 128
    assert cfg["vae.vn_layers"] == 8
    assert cfg["vae.samples_per_ring"] == 64
    assert cfg["vae.decoder_width"] == 512
    assert cfg["vae.decoder_layers"] == 5
    assert cfg["vae.lambda_kl"] == 0.01
    assert cfg["fldm.T"] == 1000
    assert cfg["fldm.batch_size"] == 16
    assert cfg["fldm.lr_start"] == 1e-3 and cfg["fldm.lr_end"] == 1e-5
    assert cfg["denoiser.fine_channels"] == 96
    assert cfg["denoiser.coarse_channels"] == 192
    assert cfg["fldm.schedule"] == "linear-alpha"
    den = cfg.denoiser_config()
    assert den.total_blocks == 10


def test_config_parse_and_validate(tmp_path):
    doc = tmp_path / "run.cfg"
    doc.write_text("""
# comment line
seed = 7
vae.channels = 32   # inline comment
fldm.T = 50
precision = float32
""")
    cfg = RunConfig.from_file(doc)
    assert cfg["seed"] == 7
    assert cfg["vae.channels"] == 32
    assert cfg["fldm.T"] == 50
    assert cfg.vae_config().dtype == "float32"
    bad = tmp_path / "bad.cfg"
    bad.write_text("vae.channnels = 32\n")
    with pytest.raises(ValueError, match="unknown configuration key"):
        RunConfig.from_file(bad)
    bad2 = tmp_path / "bad2.cfg"
    bad2.write_text("vae.channels thirty\n")
    with pytest.raises(ValueError, match="expected key = value"):
        RunConfig.from_file(bad2)
    bad3 = tmp_path / "bad3.cfg"
    bad3.write_text("vae.channels = thirty\n")
    with pytest.raises(ValueError, match="bad value"):
        RunConfig.from_file(bad3)


def test_vertex_integer_files(tmp_path):
    path = tmp_path / "labels.txt"
    path.write_text("0\n1\n2  # eye\n1\n")
    vals = load_vertex_integers(path, 4)
    assert list(vals) == [0, 1, 2, 1]
    with pytest.raises(ValueError):
        load_vertex_integers(path, 5)


def test_cli_usage_errors():
    with pytest.raises(SystemExit) as exc:
        cli.main(["definitely-not-a-command"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["sample", "--bogus-flag"])
    assert exc.value.code == 2


def test_cli_runtime_error_exit_code(tmp_path, capsys):
    rc = cli.main(["inspect", str(tmp_path / "missing.obj")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_cli_metrics_and_inspect(tmp_path, capsys):
    rng = np.random.default_rng(0)
    a = A.TextureAtlas(data=np.clip(rng.random((16, 16, 3)), 0, 1))
    A.save_png(tmp_path / "a.png", a)
    A.save_png(tmp_path / "b.png", A.TextureAtlas(
        data=np.clip(a.data + rng.standard_normal(a.data.shape) * 0.02, 0, 1)))
    rc = cli.main(["metrics", "--ref", str(tmp_path / "a.png"),
                   "--test", str(tmp_path / "b.png")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "psnr=" in out and "dssim=" in out

    mesh = S.grid_mesh(3)
    A.save_mesh_obj(tmp_path / "m.obj", mesh)
    rc = cli.main(["inspect", str(tmp_path / "m.obj")])
    assert rc == 0
    assert "V=16" in capsys.readouterr().out


def test_cli_end_to_end_tiny_workflow(tmp_path, capsys):
    """gen-planar -> pretrain-vae -> encode -> decode -> train-fldm ->
    sample -> transfer -> inpaint -> metrics -> inspect, all desk-tiny."""
    rng = np.random.default_rng(1)
    yy, xx = np.meshgrid(np.linspace(0, 1, 24), np.linspace(0, 1, 24), indexing="ij")
    img = np.stack([xx, yy, 0.5 + 0.4 * np.sin(3 * xx)], axis=-1)
    imgdir = tmp_path / "images"
    imgdir.mkdir()
    A.save_png(imgdir / "img.png", A.TextureAtlas(data=np.clip(img, 0, 1)))

    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("""
seed = 3
vae.latent_dim = 2
vae.channels = 8
vae.vn_layers = 1
vae.heads = 2
vae.samples_per_ring = 6
vae.decoder_width = 16
vae.decoder_layers = 2
vae.batch_size = 4
vae.iterations = 12
vae.coord_scale = 6
planar.mesh_count = 1
planar.vertices_per_mesh = 40
fldm.T = 12
fldm.iterations = 6
fldm.copies = 1
fldm.batch_size = 1
denoiser.fine_channels = 4
denoiser.coarse_channels = 6
denoiser.time_dim = 8
bake.resolution = 24
""")
    base = ["--config", str(cfgfile)]

    data = tmp_path / "dataset"
    assert cli.main(base + ["--out", str(data), "gen-planar",
                            "--images", str(imgdir)]) == 0
    assert (data / "manifest.txt").exists()

    vae_path = tmp_path / "vae.stck"
    assert cli.main(base + ["--out", str(vae_path), "pretrain-vae",
                            "--data", str(data)]) == 0

    mesh = S.delaunay_sheet(60, rng)
    mesh_path = tmp_path / "mesh.obj"
    A.save_mesh_obj(mesh_path, mesh)
    atlas_path = imgdir / "img.png"

    lat_path = tmp_path / "latents.stlf"
    assert cli.main(base + ["--out", str(lat_path), "encode", "--mesh", str(mesh_path),
                            "--atlas", str(atlas_path), "--vae", str(vae_path)]) == 0

    dec_path = tmp_path / "decoded.png"
    assert cli.main(base + ["--out", str(dec_path), "decode", "--mesh", str(mesh_path),
                            "--latents", str(lat_path), "--vae", str(vae_path)]) == 0
    assert dec_path.exists()

    labels_path = tmp_path / "labels.txt"
    labels_path.write_text("\n".join(str(i % 2) for i in range(mesh.n_vertices)))

    model_path = tmp_path / "model.stbd"
    assert cli.main(base + ["--out", str(model_path), "train-fldm",
                            "--mesh", str(mesh_path), "--atlas", str(atlas_path),
                            "--vae", str(vae_path), "--labels", str(labels_path)]) == 0

    sample_path = tmp_path / "sample.png"
    assert cli.main(base + ["--out", str(sample_path), "sample",
                            "--model", str(model_path), "--mesh", str(mesh_path),
                            "--vae", str(vae_path), "--labels", str(labels_path)]) == 0
    assert sample_path.exists()

    # transfer: same trained model, different mesh
    mesh_b = S.warp_heightfield(S.delaunay_sheet(50, np.random.default_rng(5)),
                                np.random.default_rng(6), amplitude=0.04)
    mesh_b_path = tmp_path / "meshB.obj"
    A.save_mesh_obj(mesh_b_path, mesh_b)
    labels_b = tmp_path / "labelsB.txt"
    labels_b.write_text("\n".join("0" for _ in range(mesh_b.n_vertices)))
    transfer_path = tmp_path / "transfer.png"
    assert cli.main(base + ["--out", str(transfer_path), "transfer",
                            "--model", str(model_path), "--mesh", str(mesh_b_path),
                            "--vae", str(vae_path), "--labels", str(labels_b)]) == 0

    mask_path = tmp_path / "mask.txt"
    mask_path.write_text("\n".join(str(i % 2) for i in range(mesh.n_vertices)))
    inpaint_path = tmp_path / "inpaint.png"
    assert cli.main(base + ["--out", str(inpaint_path), "inpaint",
                            "--model", str(model_path), "--mesh", str(mesh_path),
                            "--vae", str(vae_path), "--latents", str(lat_path),
                            "--mask", str(mask_path), "--labels", str(labels_path)]) == 0

    assert cli.main(["metrics", "--ref", str(dec_path), "--test", str(sample_path),
                     "--mesh", str(mesh_path)]) == 0
    assert cli.main(["inspect", str(model_path)]) == 0
    assert cli.main(["inspect", str(lat_path), "--mesh", str(mesh_path)]) == 0
    assert cli.main(["inspect", str(vae_path)]) == 0
    out = capsys.readouterr().out
    assert "bundle" in out and "checkpoint" in out
