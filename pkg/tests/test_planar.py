import warnings

import numpy as np
import pytest

from surftex import atlas as A
from surftex import planar as P


@pytest.fixture(scope="module")
def small_atlas():
    rng = np.random.default_rng(0)
    yy, xx = np.meshgrid(np.linspace(0, 1, 32), np.linspace(0, 1, 32), indexing="ij")
    img = np.stack([xx, yy, 0.5 + 0.3 * np.sin(4 * xx)], axis=-1)
    return A.TextureAtlas(data=np.clip(img, 0, 1))


def test_minimal_mesh_is_two_triangle_quad(rng):
    m = P.farthest_point_mesh(4, rng)
    assert m.n_vertices == 4 and m.n_faces == 2
    corners = {(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)}
    got = {tuple(v[:2]) for v in m.vertices}
    assert got == corners


def test_triangles_positively_oriented(rng):
    m = P.farthest_point_mesh(60, rng)
    e1 = m.vertices[m.faces[:, 1], :2] - m.vertices[m.faces[:, 0], :2]
    e2 = m.vertices[m.faces[:, 2], :2] - m.vertices[m.faces[:, 0], :2]
    assert np.all(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0] > 0)


def test_corners_pinned_and_hull_full(rng):
    m = P.farthest_point_mesh(40, rng)
    assert abs(m.total_area - 1.0) < 1e-9  # convex hull covers the square


def test_record_caches_match_texture(small_atlas):
    rec = P.build_record("img", small_atlas, 30, 8, seed=3)
    assert rec.colors.shape == (30, 8, 3)
    assert rec.logs.shape == (30, 8)
    assert np.all((rec.colors >= 0) & (rec.colors <= 1))
    assert np.all(np.abs(rec.logs) > 0)


def test_dataset_manifest_deterministic(tmp_path, small_atlas):
    A.save_png(tmp_path / "a.png", small_atlas)
    recs1, h1 = P.generate_planar_dataset([tmp_path / "a.png"], 2, 25, 6, seed=5,
                                          progress=None)
    recs2, h2 = P.generate_planar_dataset([tmp_path / "a.png"], 2, 25, 6, seed=5,
                                          progress=None)
    assert h1 == h2
    recs3, h3 = P.generate_planar_dataset([tmp_path / "a.png"], 2, 25, 6, seed=6,
                                          progress=None)
    assert h1 != h3
    # distinct meshes within one dataset
    assert recs1[0].mesh.n_faces != recs1[1].mesh.n_faces or \
        not np.array_equal(recs1[0].mesh.vertices, recs1[1].mesh.vertices)


def test_dataset_skips_unreadable_and_errors_when_empty(tmp_path, small_atlas):
    A.save_png(tmp_path / "ok.png", small_atlas)
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not a png at all")
    with pytest.warns(UserWarning, match="skipping unreadable"):
        recs, _ = P.generate_planar_dataset([bad, tmp_path / "ok.png"], 1, 20, 6,
                                            seed=0, progress=None)
    assert len(recs) == 1
    with pytest.raises(ValueError):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            P.generate_planar_dataset([bad], 1, 20, 6, seed=0, progress=None)


def test_records_save_load_roundtrip(tmp_path, small_atlas):
    A.save_png(tmp_path / "a.png", small_atlas)
    recs, h = P.generate_planar_dataset([tmp_path / "a.png"], 2, 20, 6, seed=1,
                                        progress=None)
    out = tmp_path / "ds"
    P.save_records(out, recs, h)
    back = P.load_records(out)
    assert len(back) == 2
    for a, b in zip(recs, back):
        assert np.array_equal(a.colors, b.colors)
        assert np.array_equal(a.logs, b.logs)
        assert np.array_equal(a.mesh.faces, b.mesh.faces)
    assert (out / "manifest.txt").exists()
    with pytest.raises(FileNotFoundError):
        P.load_records(tmp_path / "nothing")
