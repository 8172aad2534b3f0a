"""The latent diffusion pipeline: per-channel latent scaling, the forward
noising process, denoiser training, reverse sampling, inpainting, and the
trained-model bundle format.

Model bundle byte layout (little-endian):

    magic    4 bytes  b"STBD"
    version  u32      currently 1
    T        u32, alpha_bar (T+1) x f64
    d        u32, scale factors d x f64
    label_vocab u32, mesh_hash u64
    mode     u8       0 = standard-ddpm, 1 = paper-printed
    denoiser u32 x 8  fine_ch, coarse_ch, in_blocks, coarse_blocks,
                      up_blocks, time_dim, filter_hidden, pool_ratio
    vn_delta f64
    weights  embedded checkpoint stream (see nn module)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from . import tape as T
from .convnet import DenoiserConfig, DenoiserUNet, MeshLevels, create_denoiser
from .mesh import TriMesh, TangentFrameField, compute_vertex_frames, random_retriangulate
from .noise import NoiseSchedule, NoiseStream, Purpose, VectorField, make_schedule
from .vae import FieldVAE, reparameterize

def _print_flush(*args):
    print(*args, flush=True)


_BUNDLE_MAGIC = b"STBD"
_BUNDLE_VERSION = 1
_MODES = {"standard-ddpm": 0, "paper-printed": 1}


@dataclass(frozen=True)
class FLDMConfig:
    T: int = 1000
    alpha_min: float = 1e-4
    schedule: str = "linear-alpha"
    batch_size: int = 16
    iterations: int = 30000
    copies: int = 16
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    coefficient_mode: str = "standard-ddpm"
    seed: int = 0
    precision: str = "float64"
    lr_warmup: int = 0

    def __post_init__(self):
        if self.T < 1 or self.batch_size < 1:
            raise ValueError("T and batch size must be >= 1")
        if self.coefficient_mode not in _MODES:
            raise ValueError(f"unknown coefficient mode {self.coefficient_mode!r}")

    def make_schedule(self) -> NoiseSchedule:
        return make_schedule(self.schedule, self.T, self.alpha_min)


# ---------------------------------------------------------------------------
# latent scaling


def scale_factors(values: np.ndarray, vertex_weights: np.ndarray) -> np.ndarray:
    """Per-channel factors bringing the area-weighted mean modulus to
    sqrt(pi/2), the expected pointwise magnitude of tangent noise."""
    w = vertex_weights / vertex_weights.sum()
    mean_mod = np.abs(values).T @ w
    if np.any(mean_mod <= 0):
        bad = int(np.argmin(mean_mod))
        raise ValueError(f"latent channel {bad} is identically zero; cannot scale")
    return np.sqrt(np.pi / 2.0) / mean_mod


def scale_latents(field: VectorField):
    """Scale a latent field channel-wise to noise magnitude; returns the
    scaled field and the factors needed to invert at decode time."""
    f = scale_factors(field.values, field.mesh.vertex_areas)
    return field.like(field.values * f), f


def unscale_latents(values: np.ndarray, factors: np.ndarray) -> np.ndarray:
    return values / factors


# ---------------------------------------------------------------------------
# forward / reverse processes


def forward_noise(values: np.ndarray, t: int, schedule: NoiseSchedule,
                  eps: np.ndarray) -> np.ndarray:
    """sqrt(abar_t) Z + sqrt(1 - abar_t) eps; exactly Z at t = 0."""
    if not (0 <= t <= schedule.T):
        raise ValueError(f"timestep {t} outside [0, {schedule.T}]")
    if np.shape(values) != np.shape(eps):
        raise ValueError("forward_noise: shape mismatch")
    if t == 0:
        return np.array(values, copy=True)
    a = schedule.alpha_bar[t]
    return np.sqrt(a) * values + np.sqrt(1.0 - a) * eps


def reverse_coefficients(schedule: NoiseSchedule, t: int,
                         mode: str = "standard-ddpm"):
    """(C1, C2, C3) for one reverse step t -> t-1.

    standard-ddpm derives C2 from the eta=1 posterior identity
    C2 = sqrt(1 - abar_{t-1} - C3^2) - C1 sqrt(1 - abar_t); paper-printed
    keeps the published closed form, which algebraically reduces to
    (1 - abar_{t-1}) and is retained behind this flag for audits.
    """
    if t < 1:
        raise ValueError("reverse step requires t >= 1")
    a_t = schedule.alpha_bar[t]
    a_p = schedule.alpha_bar[t - 1]
    c1 = np.sqrt(a_p / a_t)
    c3 = np.sqrt(max((1.0 - a_p) / (1.0 - a_t) * (1.0 - a_t / a_p), 0.0))
    if mode == "standard-ddpm":
        c2 = np.sqrt(max(1.0 - a_p - c3 * c3, 0.0)) - c1 * np.sqrt(1.0 - a_t)
    elif mode == "paper-printed":
        c2 = (np.sqrt(a_p * (1.0 - a_t) / a_t)
              * np.sqrt((1.0 - a_p) ** 2 * a_t / (a_p * (1.0 - a_t))))
    else:
        raise ValueError(f"unknown coefficient mode {mode!r}")
    return float(c1), float(c2), float(c3)


def reverse_step(z_t: np.ndarray, t: int, schedule: NoiseSchedule,
                 eps_hat: np.ndarray, eps_new: np.ndarray | None,
                 mode: str = "standard-ddpm") -> np.ndarray:
    """One denoising step; fresh noise is suppressed at t = 1."""
    c1, c2, c3 = reverse_coefficients(schedule, t, mode)
    out = c1 * z_t + c2 * eps_hat
    if t > 1 and eps_new is not None:
        out = out + c3 * eps_new
    return out


# ---------------------------------------------------------------------------
# training


def fldm_loss(pred: T.Tensor, eps: np.ndarray, vweight: np.ndarray) -> T.Tensor:
    """Area-weighted mean over vertices of the squared noise error, summed
    over channels (E |eps|^2 = 2 per complex channel, so a silent net sits
    at 2d)."""
    per_vertex = T.rsum(T.cabs2(T.sub(pred, T.Tensor(eps))), axis=-1)
    return T.rsum(T.mul(per_vertex, vweight))


def training_step(z_scaled: np.ndarray, schedule: NoiseSchedule,
                  net: DenoiserUNet, levels: MeshLevels, labels,
                  stream: NoiseStream, step: int) -> T.Tensor:
    """Draw (t, eps), noise the latents, and return the prediction loss.
    Arithmetic runs in the denoiser's own precision."""
    v, d = z_scaled.shape
    cdt = net.complex_dtype
    t = int(stream.integers(Purpose.TRAIN_T, step, 1, schedule.T + 1))
    eps = stream.complex_field(Purpose.TRAIN_EPS, step, v, d).astype(cdt)
    z_t = forward_noise(z_scaled.astype(cdt), t, schedule, eps)
    pred = net(T.Tensor(z_t), t, labels, levels)
    rdt = np.float32 if cdt == np.complex64 else np.float64
    return fldm_loss(pred, eps, levels.fine.vweight.astype(rdt))


@dataclass
class TrainedFLDM:
    net: DenoiserUNet
    store: nn.ParameterStore
    denoiser_cfg: DenoiserConfig
    schedule: NoiseSchedule
    factors: np.ndarray
    coefficient_mode: str
    mesh_hash: int
    losses: list


def prepare_copies(mesh: TriMesh, cfg: FLDMConfig, progress=_print_flush):
    """The training mesh plus randomized retriangulations sharing its
    vertex set and UV atlas."""
    copies = [mesh]
    for k in range(1, cfg.copies):
        copies.append(random_retriangulate(mesh, np.random.default_rng(cfg.seed + k)))
    if cfg.copies > 1:
        changed = len(set(map(tuple, copies[1].faces.tolist()))
                      - set(map(tuple, mesh.faces.tolist())))
        progress(f"[train-fldm] {cfg.copies} copies, {changed}/{mesh.n_faces} "
                 f"faces changed in copy 1")
    return copies


def train_fldm(mesh: TriMesh, sampler, vae_model: FieldVAE, cfg: FLDMConfig,
               den_cfg: DenoiserConfig, labels=None, progress=_print_flush,
               checkpoint_path=None, log_every: int = 100) -> TrainedFLDM:
    """Train the noise predictor on one textured mesh.

    ``sampler(mesh_copy, faces, bary) -> [n, 3] colors in [0, 1]`` evaluates
    the texture; latents are encoded once per retriangulated copy and
    reparameterized with fresh noise every step.
    """
    if den_cfg.latent_dim != vae_model.cfg.latent_dim:
        raise ValueError("denoiser and autoencoder disagree on the latent dimension")
    stream = NoiseStream(cfg.seed)
    schedule = cfg.make_schedule()
    copies = prepare_copies(mesh, cfg, progress)
    dists = []
    levels = []
    for k, m in enumerate(copies):
        frames = compute_vertex_frames(m)
        try:
            dist = vae_model.encode_mesh(
                m, frames, lambda faces, bary, _m=m: sampler(_m, faces, bary),
                stream, copy_index=k)
        except Exception as exc:
            raise RuntimeError(f"encoding failed on copy {k}: {exc}") from exc
        dists.append(dist)
        levels.append(MeshLevels.build(m, frames, pool_ratio=den_cfg.pool_ratio))
        progress(f"[train-fldm] encoded copy {k} ({m.n_vertices} vertices)")

    z0 = reparameterize(dists[0].mu.values, dists[0].sigma,
                        stream.complex_field(Purpose.REPARAM, 0,
                                             mesh.n_vertices, den_cfg.latent_dim))
    factors = scale_factors(z0, copies[0].vertex_areas)

    net, store = create_denoiser(
        den_cfg, seed=cfg.seed,
        dtype=np.float32 if cfg.precision == "float32" else np.float64)
    opt = nn.Adam(store)
    losses = []
    for it in range(cfg.iterations):
        store.zero_grads()
        batch_vals = []
        for b in range(cfg.batch_size):
            sub = it * cfg.batch_size + b + 1
            k = int(stream.integers(Purpose.COPY, sub, 0, len(copies)))
            z = reparameterize(dists[k].mu.values, dists[k].sigma,
                               stream.complex_field(Purpose.REPARAM, sub,
                                                    mesh.n_vertices,
                                                    den_cfg.latent_dim))
            loss = training_step(z * factors, schedule, net, levels[k], labels,
                                 stream, sub)
            loss.backward()
            batch_vals.append(float(loss.data))
        if cfg.batch_size > 1:
            for p in store.params.values():
                if p.grad is not None:
                    p.grad /= cfg.batch_size
        if it < cfg.lr_warmup:
            lr = cfg.lr_start * (it + 1) / cfg.lr_warmup
        else:
            lr = nn.cosine_lr(it - cfg.lr_warmup, cfg.iterations - cfg.lr_warmup,
                              cfg.lr_start, cfg.lr_end)
        opt.step(lr)
        losses.append(float(np.mean(batch_vals)))
        if log_every and (it % log_every == 0 or it == cfg.iterations - 1):
            progress(f"[train-fldm] iter={it} loss={losses[-1]:.4f}")
        if checkpoint_path and log_every and (it + 1) % (10 * log_every) == 0:
            nn.save_checkpoint(checkpoint_path, store)
    return TrainedFLDM(net=net, store=store, denoiser_cfg=den_cfg,
                       schedule=schedule, factors=factors,
                       coefficient_mode=cfg.coefficient_mode,
                       mesh_hash=mesh.content_hash(), losses=losses)


# ---------------------------------------------------------------------------
# sampling


def sample(levels: MeshLevels, net: DenoiserUNet, schedule: NoiseSchedule,
           labels, stream, mode: str = "standard-ddpm",
           progress=None) -> np.ndarray:
    """Run the full reverse recursion from pure tangent noise; returns
    scaled latents ready for unscaling and decoding.

    ``stream`` must expose ``complex_field(purpose, step, V, d)``; tests
    substitute coupled or pushed-forward streams through the same surface.
    """
    v = levels.fine.n_vertices
    d = net.cfg.latent_dim
    cdt = net.complex_dtype
    z = stream.complex_field(Purpose.SAMPLE_INIT, 0, v, d)
    with T.no_grad():
        for t in range(schedule.T, 0, -1):
            eps_hat = net(T.Tensor(z.astype(cdt)), t, labels, levels).data
            eps_new = None if t == 1 else stream.complex_field(Purpose.REVERSE, t, v, d)
            z = reverse_step(z, t, schedule, eps_hat.astype(np.complex128),
                             eps_new, mode)
            if progress and (t % 25 == 0 or t == 1):
                progress(f"[sample] t={t}")
    return z


def inpaint_sample(levels: MeshLevels, net: DenoiserUNet, schedule: NoiseSchedule,
                   mask: np.ndarray, z_input: np.ndarray, labels, stream,
                   mode: str = "standard-ddpm") -> np.ndarray:
    """Reverse sampling that re-imposes the (appropriately noised) input
    latents on masked vertices after every step; masked vertices end bit
    equal to the input."""
    v = levels.fine.n_vertices
    d = net.cfg.latent_dim
    mask = np.asarray(mask)
    if mask.shape != (v,):
        raise ValueError("mask must give one value per vertex")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    m = mask.astype(np.float64)[:, None]
    z_input = np.asarray(z_input)
    if z_input.shape != (v, d):
        raise ValueError("input latents do not match the mesh/denoiser")

    cdt = net.complex_dtype
    z = stream.complex_field(Purpose.SAMPLE_INIT, 0, v, d)
    with T.no_grad():
        for t in range(schedule.T, 0, -1):
            eps_hat = net(T.Tensor(z.astype(cdt)), t, labels, levels).data
            eps_new = None if t == 1 else stream.complex_field(Purpose.REVERSE, t, v, d)
            z = reverse_step(z, t, schedule, eps_hat.astype(np.complex128),
                             eps_new, mode)
            if t - 1 == 0:
                z_keep = z_input
            else:
                z_keep = forward_noise(z_input, t - 1, schedule,
                                       stream.complex_field(Purpose.INPAINT, t, v, d))
            z = m * z_keep + (1.0 - m) * z
    return z


# ---------------------------------------------------------------------------
# model bundle I/O


def save_bundle(path, trained: TrainedFLDM, label_vocab: int | None = None):
    cfg = trained.denoiser_cfg
    vocab = cfg.label_vocab if label_vocab is None else label_vocab
    with open(path, "wb") as fh:
        fh.write(_BUNDLE_MAGIC)
        fh.write(struct.pack("<I", _BUNDLE_VERSION))
        fh.write(struct.pack("<I", trained.schedule.T))
        fh.write(trained.schedule.alpha_bar.astype("<f8").tobytes())
        fh.write(struct.pack("<I", cfg.latent_dim))
        fh.write(np.asarray(trained.factors, dtype="<f8").tobytes())
        fh.write(struct.pack("<IQ", vocab, trained.mesh_hash))
        fh.write(struct.pack("<B", _MODES[trained.coefficient_mode]))
        fh.write(struct.pack("<8I", cfg.fine_channels, cfg.coarse_channels,
                             cfg.input_blocks, cfg.coarse_blocks, cfg.up_blocks,
                             cfg.time_dim, cfg.filter_hidden, cfg.pool_ratio))
        fh.write(struct.pack("<d", cfg.vn_delta))
        nn.write_checkpoint_stream(fh, trained.store.state_dict())


def load_bundle(path) -> TrainedFLDM:
    with open(path, "rb") as fh:
        if fh.read(4) != _BUNDLE_MAGIC:
            raise ValueError(f"{path}: not a model bundle")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _BUNDLE_VERSION:
            raise ValueError(f"{path}: unsupported bundle version {version}")
        (t_max,) = struct.unpack("<I", fh.read(4))
        alpha_bar = np.frombuffer(fh.read(8 * (t_max + 1)), dtype="<f8").astype(np.float64)
        (d,) = struct.unpack("<I", fh.read(4))
        factors = np.frombuffer(fh.read(8 * d), dtype="<f8").astype(np.float64)
        vocab, mesh_hash = struct.unpack("<IQ", fh.read(12))
        (mode_code,) = struct.unpack("<B", fh.read(1))
        dims = struct.unpack("<8I", fh.read(32))
        (vn_delta,) = struct.unpack("<d", fh.read(8))
        state = nn.read_checkpoint_stream(fh, label=str(path))
    cfg = DenoiserConfig(latent_dim=d, fine_channels=dims[0], coarse_channels=dims[1],
                         input_blocks=dims[2], coarse_blocks=dims[3], up_blocks=dims[4],
                         time_dim=dims[5], label_vocab=vocab, filter_hidden=dims[6],
                         vn_delta=vn_delta, pool_ratio=dims[7])
    net, store = create_denoiser(cfg, seed=0)
    store.load_state(state)
    mode = {v: k for k, v in _MODES.items()}[mode_code]
    return TrainedFLDM(net=net, store=store, denoiser_cfg=cfg,
                       schedule=NoiseSchedule(alpha_bar=alpha_bar), factors=factors,
                       coefficient_mode=mode, mesh_hash=mesh_hash, losses=[])
