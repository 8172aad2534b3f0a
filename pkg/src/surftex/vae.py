"""Variational autoencoder from one-ring texture samples to per-vertex
tangent-space Gaussians, and the log-coordinate neural-field decoder.

The encoder consumes only sampled colors and their complex log
coordinates, so rotating the log coordinates by a unit complex number
rotates the encoded mean and leaves the standard deviation unchanged.
The decoder consumes rotation-invariant features only, so it is invariant
under simultaneous rotation of (log, latent).

Latent-field file layout (little-endian):

    magic   4 bytes  b"STLF"
    version u32      currently 1
    V, d    u32, u32
    mesh    u64      content hash of the mesh the field is bound to
    data    V records of 3*d float32:
            (mu_re, mu_im) per channel, then sigma per channel
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tape as T
from .mesh import TriMesh, TangentFrameField, sample_one_ring_arrays
from .noise import NoiseStream, Purpose, VectorField

def _print_flush(*args):
    print(*args, flush=True)


_LATENT_MAGIC = b"STLF"
_LATENT_VERSION = 1


@dataclass(frozen=True)
class VAEConfig:
    latent_dim: int = 8
    channels: int = 128
    vn_layers: int = 8
    heads: int = 4
    samples_per_ring: int = 64
    radial_hidden: int = 32
    decoder_width: int = 512
    decoder_layers: int = 5
    vn_delta: float = 1e-6
    lambda_kl: float = 0.01
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    batch_size: int = 16
    dtype: str = "float64"
    # initial encoder deviation (the sigma head's last bias starts at its
    # log); small values avoid drowning the means early in training
    sigma_init: float = 0.1
    # fixed preconditioning of the neural field's coordinate inputs,
    # absorbed into its first layer; set near 1 / mean one-ring radius
    coord_scale: float = 1.0

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class LatentDistributionField:
    """Per-vertex encoder output: complex means and positive deviations."""

    mu: VectorField
    sigma: np.ndarray

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma)
        if self.sigma.shape != self.mu.values.shape:
            raise ValueError("sigma must match mu channel-for-channel")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be strictly positive")


class _VNTransformerLayer:
    def __init__(self, store, name, channels, heads, delta):
        if channels % heads:
            raise ValueError("channels must divide evenly into heads")
        self.heads = heads
        self.head_ch = channels // heads
        self.norm_a = nn.FRN(store, f"{name}.norm_a", channels)
        self.norm_b = nn.FRN(store, f"{name}.norm_b", channels)
        self.lin_q = nn.ComplexLinear(store, f"{name}.q", channels, channels)
        self.lin_k = nn.ComplexLinear(store, f"{name}.k", channels, channels)
        self.lin_v = nn.ComplexLinear(store, f"{name}.v", channels, channels)
        self.lin_o = nn.ComplexLinear(store, f"{name}.o", channels, channels)
        self.vn1 = nn.VectorNeuron(store, f"{name}.vn1", channels, channels, delta)
        self.vn2 = nn.VectorNeuron(store, f"{name}.vn2", channels, channels, delta)
        self.scale = 1.0 / np.sqrt(2.0 * self.head_ch)

    def _split_heads(self, x, b, t):
        # [B, T, C] -> [B*H, T, C/H]
        x = T.reshape(x, (b, t, self.heads, self.head_ch))
        x = T.transpose(x, (0, 2, 1, 3))
        return T.reshape(x, (b * self.heads, t, self.head_ch))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        b, t, c = x.shape
        w = np.full((1, t, 1), 1.0 / t)
        h = self.norm_a(x, w, axes=1)
        q = self._split_heads(self.lin_q(h), b, t)
        k = self._split_heads(self.lin_k(h), b, t)
        v = self._split_heads(self.lin_v(h), b, t)
        logits = T.mul(T.creal(T.bmm(q, T.transpose(T.conj(k), (0, 2, 1)))), self.scale)
        att = T.softmax(logits, axis=-1)
        mixed = T.bmm(att, v)
        mixed = T.reshape(T.transpose(T.reshape(mixed, (b, self.heads, t, self.head_ch)),
                                      (0, 2, 1, 3)), (b, t, c))
        x = T.add(x, self.lin_o(mixed))
        h2 = self.norm_b(x, w, axes=1)
        return T.add(x, self.vn2(self.vn1(h2)))


class Encoder:
    """Maps a set of (color, log-coordinate) one-ring samples to the
    parameters of per-vertex tangent Gaussians."""

    def __init__(self, store: nn.ParameterStore, cfg: VAEConfig, name="enc"):
        c, d = cfg.channels, cfg.latent_dim
        self.cfg = cfg
        self.lift_a = nn.ComplexLinear(store, f"{name}.lift_a", 3, c)
        self.lift_b = nn.ComplexLinear(store, f"{name}.lift_b", 3, c)
        self.radial = nn.RealMLP(store, f"{name}.radial",
                                 [1, cfg.radial_hidden, 2 * c])
        self.layers = [_VNTransformerLayer(store, f"{name}.layer{i}", c,
                                           cfg.heads, cfg.vn_delta)
                       for i in range(cfg.vn_layers)]
        self.mean_vn = nn.VectorNeuron(store, f"{name}.mean_vn", c, c, cfg.vn_delta)
        self.mean_out = nn.VectorNeuron(store, f"{name}.mean_out", c, d, cfg.vn_delta)
        self.inv_lin = nn.ComplexLinear(store, f"{name}.inv_lin", c, c)
        # zero-init last layer with bias ln(sigma_init): deviations start
        # there exactly, independent of the token
        self.sigma_mlp = nn.RealMLP(store, f"{name}.sigma", [2 * c, c, d],
                                    zero_last=True)
        self.sigma_mlp.biases[-1].data[:] = np.log(cfg.sigma_init)

    def __call__(self, colors, logs):
        """colors: [B, S, 3] in [-1, 1]; logs: [B, S] complex, in each
        center vertex's frame. Returns (mu [B, d] complex, sigma [B, d])."""
        colors = T.as_tensor(colors)
        logs_c = np.asarray(logs)
        if logs_c.ndim != 2 or colors.shape[:2] != logs_c.shape:
            raise ValueError("colors and logs disagree on (batch, samples)")
        if logs_c.shape[1] < 1:
            raise ValueError("need at least one one-ring sample")
        logs_col = T.Tensor(logs_c[:, :, None])
        zeta = T.mul(self.lift_a(colors), logs_col)
        rad = self.radial(T.Tensor(np.abs(logs_c)[:, :, None]))
        c = self.cfg.channels
        rad_c = T.as_complex(T.slice_axis(rad, 2, 0, c), T.slice_axis(rad, 2, c, 2 * c))
        token = T.rsum(T.mul(T.mul(logs_col, self.lift_b(colors)), rad_c),
                       axis=1, keepdims=True)
        x = T.concat([zeta, token], axis=1)
        for layer in self.layers:
            x = layer(x)
        s = logs_c.shape[1]
        tok = T.reshape(T.slice_axis(x, 1, s, s + 1), (logs_c.shape[0], c))
        mu = self.mean_out(self.mean_vn(tok))
        inv = T.mul(T.conj(tok), self.inv_lin(tok))
        feats = T.concat([T.creal(inv), T.cimag(inv)], axis=-1)
        sigma = T.exp(self.sigma_mlp(feats))
        return mu, sigma


class Decoder:
    """Neural field over each vertex's log-map parameterization."""

    def __init__(self, store: nn.ParameterStore, cfg: VAEConfig, name="dec"):
        d = cfg.latent_dim
        self.cfg = cfg
        in_dim = 2 * (d + d * (d + 1) // 2)
        widths = [in_dim] + [cfg.decoder_width] * (cfg.decoder_layers - 1) + [3]
        # zero-init last layer: predictions start at mid-gray
        self.mlp = nn.RealMLP(store, f"{name}.field", widths, zero_last=True)
        iu, ju = np.triu_indices(d)
        self._triu_flat = (iu * d + ju).astype(np.int64)

    def features(self, logs, z):
        """Rotation-invariant decoder inputs for logs [N] and z [N, d].
        Coordinate features carry the fixed input preconditioning."""
        z = T.as_tensor(z)
        logs_t = T.as_tensor(np.asarray(logs)[:, None] * self.cfg.coord_scale)
        coord = T.mul(logs_t, T.conj(z))
        outer = T.einsum2("ni,nj->nij", z, T.conj(z))
        n, d = z.shape[0], z.shape[1]
        inv = T.take_columns(T.reshape(outer, (n, d * d)), self._triu_flat)
        return T.concat([T.creal(coord), T.cimag(coord),
                         T.creal(inv), T.cimag(inv)], axis=-1)

    def __call__(self, logs, z) -> T.Tensor:
        """Predict colors (in [-1, 1]) at points given by log coordinates."""
        return self.mlp(self.features(logs, z))


def coordinate_feature(log_pq: complex, z: np.ndarray) -> np.ndarray:
    """Positional feature log_pq * conj(z), invariant under simultaneous
    rotation of the log coordinate and the latent."""
    return np.asarray(log_pq) * np.conj(np.asarray(z))


def invariant_feature(z: np.ndarray) -> np.ndarray:
    """Upper-triangular part of the Hermitian outer product z z^*."""
    z = np.asarray(z)
    iu, ju = np.triu_indices(z.shape[-1])
    return z[..., iu] * np.conj(z[..., ju])


def reparameterize(mu, sigma, eps):
    """z = mu + sigma (*) eps, channel-wise; works on tensors or arrays."""
    if isinstance(mu, T.Tensor) or isinstance(sigma, T.Tensor):
        return T.add(mu, T.mul(T.as_tensor(sigma), T.as_tensor(eps)))
    mu, sigma, eps = np.asarray(mu), np.asarray(sigma), np.asarray(eps)
    if mu.shape != sigma.shape or mu.shape != eps.shape:
        raise ValueError("reparameterize: shape mismatch")
    return mu + sigma * eps


def blend_decoded(predictions: np.ndarray, bary) -> np.ndarray:
    """Convex combination of the three per-vertex predictions."""
    p = np.asarray(predictions)
    b = np.asarray(bary)
    return np.einsum("k,k...->...", b, p) if p.ndim == 2 else float(np.dot(b, p))


def recon_loss(pred: T.Tensor, target) -> T.Tensor:
    """Mean over samples of the L1 color distance."""
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError("recon_loss: prediction/target length mismatch")
    return T.rmean(T.rsum(T.absval(T.sub(pred, target)), axis=-1))


def kl_loss(mu, sigma) -> T.Tensor:
    """Mean over vertices of the divergence from the unit Gaussian:
    0.5 * sum_i (|mu_i|^2 + sigma_i^2 - 1 - ln sigma_i^2). Nonnegative,
    zero exactly at (mu, sigma) = (0, 1)."""
    mu, sigma = T.as_tensor(mu), T.as_tensor(sigma)
    s2 = T.mul(sigma, sigma)
    per = T.sub(T.add(T.cabs2(mu), s2), T.add(T.log(s2), 1.0))
    return T.mul(T.rmean(T.rsum(per, axis=-1)), 0.5)


def total_loss(recon: T.Tensor, kl: T.Tensor, lam: float = 0.01) -> T.Tensor:
    return T.add(recon, T.mul(kl, float(lam)))


# ---------------------------------------------------------------------------
# whole-mesh encoding / decoding helpers


def normalize_colors(rgb01: np.ndarray) -> np.ndarray:
    return rgb01 * 2.0 - 1.0


def denormalize_colors(rgb11: np.ndarray) -> np.ndarray:
    return np.clip((rgb11 + 1.0) * 0.5, 0.0, 1.0)


@dataclass
class FieldVAE:
    """Encoder + decoder sharing one parameter store."""

    cfg: VAEConfig
    store: nn.ParameterStore = field(default=None)
    encoder: Encoder = field(default=None)
    decoder: Decoder = field(default=None)

    @classmethod
    def create(cls, cfg: VAEConfig, seed: int = 0) -> "FieldVAE":
        store = nn.ParameterStore(np.random.default_rng(seed), dtype=cfg.np_dtype())
        return cls(cfg=cfg, store=store, encoder=Encoder(store, cfg),
                   decoder=Decoder(store, cfg))

    def encode_mesh(self, mesh: TriMesh, frames: TangentFrameField,
                    sample_fn, stream: NoiseStream, chunk: int = 256,
                    copy_index: int = 0) -> LatentDistributionField:
        """Encode every vertex. ``sample_fn(p, count, rng)`` must return
        colors in [0, 1] for its sampled surface points (it closes over the
        texture); sampling uses the one-ring sampler with keyed rngs."""
        s = self.cfg.samples_per_ring
        v = mesh.n_vertices
        mus = np.zeros((v, self.cfg.latent_dim), dtype=np.complex128)
        sigmas = np.zeros((v, self.cfg.latent_dim))
        with T.no_grad():
            for start in range(0, v, chunk):
                idx = range(start, min(start + chunk, v))
                colors = []
                logs = []
                for p in idx:
                    rng = np.random.Generator(np.random.Philox(
                        key=np.array([stream.seed,
                                      (Purpose.ENCODE << 40) + (copy_index << 24) + p],
                                     dtype=np.uint64)))
                    faces, bary, lg = sample_one_ring_arrays(mesh, frames, p, s, rng)
                    colors.append(normalize_colors(sample_fn(faces, bary)))
                    logs.append(lg)
                mu, sigma = self.encoder(np.stack(colors).astype(self.cfg.np_dtype()),
                                         np.stack(logs))
                mus[start:start + len(colors)] = mu.data
                sigmas[start:start + len(colors)] = sigma.data
        return LatentDistributionField(mu=VectorField(mus, mesh, frames), sigma=sigmas)

    def decode_points(self, logs: np.ndarray, z: np.ndarray,
                      chunk: int = 8192) -> np.ndarray:
        """Decode colors (in [0,1]) for paired log coordinates and latents."""
        out = np.zeros((len(logs), 3))
        with T.no_grad():
            for start in range(0, len(logs), chunk):
                sl = slice(start, start + chunk)
                pred = self.decoder(np.asarray(logs[sl]),
                                    np.asarray(z[sl]))
                out[sl] = pred.data
        return denormalize_colors(out)


# ---------------------------------------------------------------------------
# planar pretraining


def pretrain_planar(records, cfg: VAEConfig, seed: int, iterations: int,
                    log_every: int = 100, checkpoint_every: int = 0,
                    checkpoint_path=None, progress=_print_flush):
    """Train the VAE on cached one-rings of textured planar meshes.

    ``records`` is a sequence of objects exposing ``colors`` [V, S, 3]
    in [0, 1] and ``logs`` [V, S] complex. Returns (FieldVAE, history).
    """
    if not records:
        raise ValueError("pretraining requires at least one planar record")
    model = FieldVAE.create(cfg, seed=seed)
    opt = nn.Adam(model.store)
    stream = NoiseStream(seed)
    history = []
    all_colors = [normalize_colors(r.colors).astype(cfg.np_dtype()) for r in records]
    all_logs = [np.asarray(r.logs) for r in records]
    sizes = np.array([c.shape[0] for c in all_colors])
    for it in range(iterations):
        gen = stream._gen(Purpose.TRAIN_T, it)
        ridx = gen.integers(0, len(records), size=cfg.batch_size)
        vidx = gen.integers(0, sizes[ridx])
        colors = np.stack([all_colors[r][v] for r, v in zip(ridx, vidx)])
        logs = np.stack([all_logs[r][v] for r, v in zip(ridx, vidx)])
        model.store.zero_grads()
        mu, sigma = model.encoder(colors, logs)
        eps = stream.complex_field(Purpose.REPARAM, it, cfg.batch_size, cfg.latent_dim)
        z = reparameterize(mu, sigma, eps.astype(model.store.complex_dtype))
        b, s = logs.shape
        z_rep = T.gather_rows(z, np.repeat(np.arange(b), s))
        pred = model.decoder(logs.reshape(-1), z_rep)
        rloss = recon_loss(pred, colors.reshape(b * s, 3))
        kloss = kl_loss(mu, sigma)
        loss = total_loss(rloss, kloss, cfg.lambda_kl)
        loss.backward()
        opt.step(nn.cosine_lr(it, iterations, cfg.lr_start, cfg.lr_end))
        history.append((float(rloss.data), float(kloss.data)))
        if log_every and (it % log_every == 0 or it == iterations - 1):
            progress(f"[pretrain-vae] iter={it} recon={history[-1][0]:.4f} "
                     f"kl={history[-1][1]:.4f}")
        if checkpoint_every and checkpoint_path and (it + 1) % checkpoint_every == 0:
            nn.save_checkpoint(checkpoint_path, model.store)
    if checkpoint_path:
        nn.save_checkpoint(checkpoint_path, model.store)
    return model, history


# ---------------------------------------------------------------------------
# model checkpoint helpers (config scalars ride along under reserved names)

_CFG_FIELDS = [("latent_dim", int), ("channels", int), ("vn_layers", int),
               ("heads", int), ("samples_per_ring", int), ("radial_hidden", int),
               ("decoder_width", int), ("decoder_layers", int), ("vn_delta", float),
               ("lambda_kl", float), ("sigma_init", float), ("coord_scale", float)]


def save_vae(path, model: FieldVAE):
    state = model.store.state_dict()
    for name, kind in _CFG_FIELDS:
        state[f"_cfg.{name}"] = np.array([getattr(model.cfg, name)], dtype=np.float64)
    nn.save_checkpoint(path, state)


def load_vae(path) -> FieldVAE:
    state = nn.load_checkpoint(path)
    kwargs = {}
    for name, kind in _CFG_FIELDS:
        key = f"_cfg.{name}"
        if key not in state:
            raise ValueError(f"{path}: missing autoencoder config entry {name}")
        kwargs[name] = kind(state.pop(key)[0])
    model = FieldVAE.create(VAEConfig(**kwargs), seed=0)
    model.store.load_state(state)
    return model


# ---------------------------------------------------------------------------
# latent field file I/O


def save_latents(path, dist: LatentDistributionField):
    v, d = dist.mu.values.shape
    with open(path, "wb") as fh:
        fh.write(_LATENT_MAGIC)
        fh.write(struct.pack("<IIIQ", _LATENT_VERSION, v, d,
                             dist.mu.mesh.content_hash()))
        rec = np.zeros((v, 3 * d), dtype="<f4")
        rec[:, 0:2 * d:2] = dist.mu.values.real
        rec[:, 1:2 * d:2] = dist.mu.values.imag
        rec[:, 2 * d:] = dist.sigma
        fh.write(rec.tobytes())


def load_latents(path, mesh: TriMesh, frames: TangentFrameField,
                 check_hash=True) -> LatentDistributionField:
    with open(path, "rb") as fh:
        if fh.read(4) != _LATENT_MAGIC:
            raise ValueError(f"{path}: not a latent field file")
        version, v, d, mesh_hash = struct.unpack("<IIIQ", fh.read(20))
        if version != _LATENT_VERSION:
            raise ValueError(f"{path}: unsupported latent file version {version}")
        if v != mesh.n_vertices:
            raise ValueError(f"{path}: vertex count {v} does not match mesh")
        if check_hash and mesh_hash != mesh.content_hash():
            raise ValueError(f"{path}: latent field was built for a different mesh")
        rec = np.frombuffer(fh.read(v * 3 * d * 4), dtype="<f4").reshape(v, 3 * d)
    mu = rec[:, 0:2 * d:2].astype(np.float64) + 1j * rec[:, 1:2 * d:2].astype(np.float64)
    sigma = rec[:, 2 * d:].astype(np.float64)
    return LatentDistributionField(mu=VectorField(mu, mesh, frames), sigma=sigma)
