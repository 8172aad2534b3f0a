"""Gaussian noise in the tangent bundle, isometry pushforwards, and the
diffusion noise schedule.

Randomness is counter-based: every draw is keyed by (seed, purpose, step),
and within a draw the value at (vertex, channel) depends only on its flat
position. Noise is therefore reproducible independent of iteration order,
and coupled draws across meshes with matched vertex indexing are possible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TriMesh, TangentFrameField


class Purpose:
    """Stream separators so independent uses never share bits."""

    ENCODE = 1
    REPARAM = 2
    TRAIN_T = 3
    TRAIN_EPS = 4
    SAMPLE_INIT = 5
    REVERSE = 6
    INPAINT = 7
    DATA = 8
    COPY = 9


@dataclass(frozen=True)
class NoiseStream:
    """Counter-based Gaussian stream keyed by (seed, purpose, step)."""

    seed: int

    def _gen(self, purpose: int, step: int) -> np.random.Generator:
        key = np.array([np.uint64(self.seed), np.uint64((purpose << 40) + step)],
                       dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def normals(self, purpose: int, step: int, shape) -> np.ndarray:
        return self._gen(purpose, step).standard_normal(shape)

    def complex_field(self, purpose: int, step: int, n_vertices: int, d: int) -> np.ndarray:
        """[n_vertices, d] complex with unit-variance real and imaginary parts."""
        z = self._gen(purpose, step).standard_normal((n_vertices, d, 2))
        return z[..., 0] + 1j * z[..., 1]

    def integers(self, purpose: int, step: int, low: int, high: int, size=None):
        return self._gen(purpose, step).integers(low, high, size=size)


@dataclass
class VectorField:
    """A [V, d] stack of complex tangent vectors bound to a (mesh, frames)
    pair. Values are immutable by convention once returned."""

    values: np.ndarray
    mesh: TriMesh
    frames: TangentFrameField

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[0] != self.mesh.n_vertices:
            raise ValueError("vector field length does not match the mesh")
        if self.values.shape[1] < 1:
            raise ValueError("vector field needs at least one channel")
        if not np.all(np.isfinite(self.values.view(np.float64)
                                  if self.values.dtype == np.complex128
                                  else np.abs(self.values))):
            raise ValueError("vector field contains non-finite entries")

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def like(self, values: np.ndarray) -> "VectorField":
        return VectorField(values, self.mesh, self.frames)


def sample_tangent_gaussian(mesh: TriMesh, frames: TangentFrameField, d: int,
                            stream: NoiseStream, purpose: int = Purpose.DATA,
                            step: int = 0) -> VectorField:
    """Standard tangent-bundle Gaussian: each complex entry is
    eps_1 + i*eps_2 with independent standard-normal parts, independent
    across vertices and channels."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return VectorField(stream.complex_field(purpose, step, mesh.n_vertices, d),
                       mesh, frames)


def pushforward_field(field: VectorField, target_mesh: TriMesh,
                      target_frames: TangentFrameField, vertex_map: np.ndarray,
                      rotations: np.ndarray) -> VectorField:
    """Push a field through a vertex bijection with per-vertex rotations:
    output at vertex_map[p] is rotations[p] * field.values[p].

    This is the tangent-space action of an isometry expressed in the two
    meshes' frames; it is a test and transfer utility, not a learned op.
    """
    vertex_map = np.asarray(vertex_map)
    n = field.mesh.n_vertices
    if (vertex_map.shape != (n,) or len(np.unique(vertex_map)) != n
            or target_mesh.n_vertices != n):
        raise ValueError("vertex_map must be a bijection between the vertex sets")
    rotations = np.asarray(rotations, dtype=np.complex128)
    if not np.allclose(np.abs(rotations), 1.0, atol=1e-9):
        raise ValueError("rotations must have unit modulus")
    out = np.empty_like(field.values)
    out[vertex_map] = rotations[:, None] * field.values
    return VectorField(out, target_mesh, target_frames)


def frame_change_rotations(R: np.ndarray, frames_src: TangentFrameField,
                           frames_dst: TangentFrameField,
                           vertex_map: np.ndarray | None = None) -> np.ndarray:
    """Unit complex factors expressing a rigid motion's tangent action.

    For each vertex p, returns the angle factor that re-expresses a vector
    written in frames_src at p as a vector written in frames_dst at
    vertex_map[p], after rotating the surface by R.
    """
    n = frames_src.e_x.shape[0]
    vm = np.arange(n) if vertex_map is None else np.asarray(vertex_map)
    rx = frames_src.e_x @ R.T
    ex = frames_dst.e_x[vm]
    ey = frames_dst.e_y[vm]
    c = np.einsum("ij,ij->i", rx, ex)
    s = np.einsum("ij,ij->i", rx, ey)
    return np.exp(1j * np.arctan2(s, c))


# ---------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative schedule alpha_bar[0..T], strictly decreasing from 1."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha_bar, dtype=np.float64)
        if a.ndim != 1 or len(a) < 2:
            raise ValueError("alpha_bar must be a 1-D array of length T+1")
        if a[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(a) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if a[-1] <= 0:
            raise ValueError("alpha_bar[T] must stay positive")
        object.__setattr__(self, "alpha_bar", a)

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1


def linear_alpha_schedule(T: int, alpha_min: float = 1e-4) -> NoiseSchedule:
    """alpha_bar[t] = 1 - t*(1 - alpha_min)/T, hitting both endpoints exactly."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < alpha_min < 1.0):
        raise ValueError("alpha_min must lie strictly between 0 and 1")
    t = np.arange(T + 1, dtype=np.float64)
    a = 1.0 - t * (1.0 - alpha_min) / T
    a[0] = 1.0
    a[-1] = alpha_min
    return NoiseSchedule(alpha_bar=a)


def linear_beta_schedule(T: int, beta_start: float = 1e-4,
                         beta_end: float = 2e-2) -> NoiseSchedule:
    """DDPM-convention schedule: per-step beta linear, alpha_bar cumulative."""
    if T < 1:
        raise ValueError("T must be >= 1")
    betas = np.linspace(beta_start, beta_end, T)
    a = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha_bar=a)


def make_schedule(kind: str, T: int, alpha_min: float = 1e-4) -> NoiseSchedule:
    if kind == "linear-alpha":
        return linear_alpha_schedule(T, alpha_min)
    if kind == "linear-beta":
        return linear_beta_schedule(T)
    raise ValueError(f"unknown schedule kind {kind!r}")
