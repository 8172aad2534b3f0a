"""Run configuration: a flat, documented key = value text document that is
schema-validated before any work starts.

Format: one `key = value` per line; `#` starts a comment; keys are
dot-namespaced. Booleans are true/false. Unknown keys are an error so
typos fail fast. Every key has a default, so an empty document is valid.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .convnet import DenoiserConfig
from .diffusion import FLDMConfig
from .vae import VAEConfig


def _bool(s):
    if isinstance(s, bool):
        return s
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_SCHEMA = {
    "seed": (int, 0),
    "precision": (str, "float64"),
    "vae.latent_dim": (int, 8),
    "vae.channels": (int, 128),
    "vae.vn_layers": (int, 8),
    "vae.heads": (int, 4),
    "vae.samples_per_ring": (int, 64),
    "vae.radial_hidden": (int, 32),
    "vae.decoder_width": (int, 512),
    "vae.decoder_layers": (int, 5),
    "vae.lambda_kl": (float, 0.01),
    "vae.lr_start": (float, 1e-3),
    "vae.lr_end": (float, 1e-5),
    "vae.batch_size": (int, 16),
    "vae.iterations": (int, 5000),
    "vae.sigma_init": (float, 0.1),
    "vae.coord_scale": (float, 1.0),
    "fldm.T": (int, 1000),
    "fldm.alpha_min": (float, 1e-4),
    "fldm.schedule": (str, "linear-alpha"),
    "fldm.batch_size": (int, 16),
    "fldm.iterations": (int, 30000),
    "fldm.copies": (int, 16),
    "fldm.lr_start": (float, 1e-3),
    "fldm.lr_end": (float, 1e-5),
    "fldm.coefficient_mode": (str, "standard-ddpm"),
    "fldm.lr_warmup": (int, 0),
    "denoiser.init_mix_scale": (float, 0.0),
    "denoiser.fine_channels": (int, 96),
    "denoiser.coarse_channels": (int, 192),
    "denoiser.time_dim": (int, 32),
    "denoiser.label_vocab": (int, 0),
    "denoiser.filter_hidden": (int, 8),
    "denoiser.pool_ratio": (int, 4),
    "planar.mesh_count": (int, 16),
    "planar.vertices_per_mesh": (int, 500),
    "bake.resolution": (int, 256),
    "sample.steps": (int, 0),  # 0 = full schedule
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls(values={k: v for k, (_, v) in _SCHEMA.items()})

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls.defaults()
        with open(path) as fh:
            for ln, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{ln}: expected key = value")
                key, val = (s.strip() for s in line.split("=", 1))
                cfg.set(key, val, where=f"{path}:{ln}")
        return cfg

    def set(self, key: str, val, where: str = "override"):
        if key not in _SCHEMA:
            raise ValueError(f"{where}: unknown configuration key {key!r}")
        kind, _ = _SCHEMA[key]
        try:
            self.values[key] = _bool(val) if kind is bool else kind(val)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{where}: bad value for {key}: {exc}") from exc

    def __getitem__(self, key):
        return self.values[key]

    def vae_config(self) -> VAEConfig:
        v = self.values
        return VAEConfig(
            latent_dim=v["vae.latent_dim"], channels=v["vae.channels"],
            vn_layers=v["vae.vn_layers"], heads=v["vae.heads"],
            samples_per_ring=v["vae.samples_per_ring"],
            radial_hidden=v["vae.radial_hidden"],
            decoder_width=v["vae.decoder_width"],
            decoder_layers=v["vae.decoder_layers"],
            lambda_kl=v["vae.lambda_kl"], lr_start=v["vae.lr_start"],
            lr_end=v["vae.lr_end"], batch_size=v["vae.batch_size"],
            dtype=v["precision"], sigma_init=v["vae.sigma_init"],
            coord_scale=v["vae.coord_scale"])

    def fldm_config(self) -> FLDMConfig:
        v = self.values
        return FLDMConfig(
            T=v["fldm.T"], alpha_min=v["fldm.alpha_min"],
            schedule=v["fldm.schedule"], batch_size=v["fldm.batch_size"],
            iterations=v["fldm.iterations"], copies=v["fldm.copies"],
            lr_start=v["fldm.lr_start"], lr_end=v["fldm.lr_end"],
            coefficient_mode=v["fldm.coefficient_mode"], seed=v["seed"],
            precision=v["precision"], lr_warmup=v["fldm.lr_warmup"])

    def denoiser_config(self) -> DenoiserConfig:
        v = self.values
        return DenoiserConfig(
            latent_dim=v["vae.latent_dim"],
            fine_channels=v["denoiser.fine_channels"],
            coarse_channels=v["denoiser.coarse_channels"],
            time_dim=v["denoiser.time_dim"], label_vocab=v["denoiser.label_vocab"],
            filter_hidden=v["denoiser.filter_hidden"],
            pool_ratio=v["denoiser.pool_ratio"],
            init_mix_scale=v["denoiser.init_mix_scale"])


def load_vertex_integers(path, n_vertices: int) -> np.ndarray:
    """Per-vertex integer file: one value per line, line k = vertex k."""
    vals = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                vals.append(int(line))
    arr = np.asarray(vals, dtype=np.int64)
    if arr.shape != (n_vertices,):
        raise ValueError(f"{path}: expected {n_vertices} entries, found {len(arr)}")
    return arr
