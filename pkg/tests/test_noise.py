import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surftex import noise as N


def test_tangent_gaussian_statistics(grid, grid_frames):
    st_ = N.NoiseStream(seed=42)
    z = st_.complex_field(N.Purpose.DATA, 0, 500000, 2)
    target = np.sqrt(np.pi / 2)
    assert abs(np.abs(z).mean() - target) / target < 0.01
    assert abs(z.real.mean()) < 0.005 and abs(z.imag.mean()) < 0.005
    assert abs(z.real.var() - 1) < 0.01 and abs(z.imag.var() - 1) < 0.01


def test_stream_determinism_and_keying(grid, grid_frames):
    st_ = N.NoiseStream(seed=7)
    a = N.sample_tangent_gaussian(grid, grid_frames, 3, st_)
    b = N.sample_tangent_gaussian(grid, grid_frames, 3, st_)
    assert np.array_equal(a.values, b.values)
    c = N.sample_tangent_gaussian(grid, grid_frames, 3, st_, step=1)
    d = N.sample_tangent_gaussian(grid, grid_frames, 3, st_, purpose=N.Purpose.REVERSE)
    assert not np.array_equal(a.values, c.values)
    assert not np.array_equal(a.values, d.values)
    with pytest.raises(ValueError):
        N.sample_tangent_gaussian(grid, grid_frames, 0, st_)


def test_pushforward_identity_and_rotation(grid, grid_frames):
    st_ = N.NoiseStream(seed=3)
    f = N.sample_tangent_gaussian(grid, grid_frames, 2, st_)
    n = grid.n_vertices
    ident = N.pushforward_field(f, grid, grid_frames, np.arange(n), np.ones(n))
    assert np.array_equal(ident.values, f.values)
    by_i = N.pushforward_field(f, grid, grid_frames, np.arange(n), np.full(n, 1j))
    assert np.allclose(by_i.values, 1j * f.values)
    assert np.allclose(np.abs(by_i.values), np.abs(f.values))


def test_pushforward_group_action(grid, grid_frames, rng):
    st_ = N.NoiseStream(seed=3)
    f = N.sample_tangent_gaussian(grid, grid_frames, 2, st_)
    n = grid.n_vertices
    rot = np.exp(1j * rng.random(n) * 2 * np.pi)
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    fwd = N.pushforward_field(f, grid, grid_frames, perm, rot)
    back = N.pushforward_field(fwd, grid, grid_frames, inv, np.conj(rot[inv]))
    assert np.abs(back.values - f.values).max() < 1e-12


def test_pushforward_rejects_non_bijection(grid, grid_frames):
    st_ = N.NoiseStream(seed=3)
    f = N.sample_tangent_gaussian(grid, grid_frames, 2, st_)
    n = grid.n_vertices
    with pytest.raises(ValueError):
        N.pushforward_field(f, grid, grid_frames, np.zeros(n, dtype=int), np.ones(n))
    with pytest.raises(ValueError):
        N.pushforward_field(f, grid, grid_frames, np.arange(n), np.full(n, 2.0))


def test_distribution_symmetry_under_pushforward(grid, grid_frames, rng):
    # coupled draws: push a large sample forward and compare moments with a
    # direct sample through the mapped indexing
    st_ = N.NoiseStream(seed=11)
    n = grid.n_vertices
    rot = np.exp(1j * rng.random(n) * 2 * np.pi)
    perm = rng.permutation(n)
    mods_direct = []
    mods_pushed = []
    comps = []
    for k in range(100000 // n + 1):
        f = N.sample_tangent_gaussian(grid, grid_frames, 1, st_, step=k)
        pf = N.pushforward_field(f, grid, grid_frames, perm, rot)
        mods_direct.append(np.abs(f.values))
        mods_pushed.append(np.abs(pf.values))
        comps.append(pf.values.real)
    md = np.concatenate(mods_direct)
    mp = np.concatenate(mods_pushed)
    target = np.sqrt(np.pi / 2)
    assert abs(md.mean() - mp.mean()) < 0.02 * target
    assert abs(md.var() - mp.var()) / md.var() < 0.02
    assert abs(np.concatenate(comps).mean()) < 0.02


def test_linear_alpha_schedule():
    sch = N.linear_alpha_schedule(1000, 1e-4)
    assert sch.alpha_bar[0] == 1.0
    assert sch.alpha_bar[-1] == 1e-4
    assert abs(sch.alpha_bar[500] - 0.50005) < 1e-12
    assert np.all(np.diff(sch.alpha_bar) < 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 500), st.floats(1e-6, 0.5))
def test_schedule_endpoints_property(T, alpha_min):
    sch = N.linear_alpha_schedule(T, alpha_min)
    assert sch.alpha_bar[0] == 1.0
    assert sch.alpha_bar[-1] == alpha_min
    assert np.all(np.diff(sch.alpha_bar) < 0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        N.linear_alpha_schedule(0, 1e-4)
    with pytest.raises(ValueError):
        N.linear_alpha_schedule(10, 0.0)
    with pytest.raises(ValueError):
        N.linear_alpha_schedule(10, 1.0)
    with pytest.raises(ValueError):
        N.make_schedule("cubic", 10)


def test_beta_schedule_is_valid():
    sch = N.make_schedule("linear-beta", 100)
    assert sch.alpha_bar[0] == 1.0
    assert np.all(np.diff(sch.alpha_bar) < 0)
    assert sch.alpha_bar[-1] > 0
