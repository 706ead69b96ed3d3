"""Tiny convolutional VAE whose decoder is the search space for black-box
mining. Downsampling factor 8 maps 32x32 images to a 4x4x4 latent (d=64)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import DatasetManifest
from .errors import ConfigError, IoError, TrainingDivergedError
from .formats import read_tsr, write_json, write_tsr
from .tensor import Tensor

LATENT_SHAPE = (4, 4, 4)
LATENT_DIM = 64

_ENC_CH = (16, 32, 32)
_DEC_CH = (32, 16, 8)

_PARAM_FANS = {
    "enc1_w": ((_ENC_CH[0], 3, 3, 3), 27),
    "enc1_b": ((_ENC_CH[0],), None),
    "enc2_w": ((_ENC_CH[1], _ENC_CH[0], 3, 3), _ENC_CH[0] * 9),
    "enc2_b": ((_ENC_CH[1],), None),
    "enc3_w": ((_ENC_CH[2], _ENC_CH[1], 3, 3), _ENC_CH[1] * 9),
    "enc3_b": ((_ENC_CH[2],), None),
    "mu_w": ((4, _ENC_CH[2], 3, 3), _ENC_CH[2] * 9),
    "mu_b": ((4,), None),
    "logvar_w": ((4, _ENC_CH[2], 3, 3), _ENC_CH[2] * 9),
    "logvar_b": ((4,), None),
    "dec1_w": ((_DEC_CH[0], 4, 3, 3), 36),
    "dec1_b": ((_DEC_CH[0],), None),
    "dec2_w": ((_DEC_CH[1], _DEC_CH[0], 3, 3), _DEC_CH[0] * 9),
    "dec2_b": ((_DEC_CH[1],), None),
    "dec3_w": ((_DEC_CH[2], _DEC_CH[1], 3, 3), _DEC_CH[1] * 9),
    "dec3_b": ((_DEC_CH[2],), None),
    "out_w": ((3, _DEC_CH[2], 3, 3), _DEC_CH[2] * 9),
    "out_b": ((3,), None),
}


def _bias(b: Tensor, channels: int) -> Tensor:
    return T.reshape(b, (1, channels, 1, 1))


class TinyVae:
    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    @classmethod
    def init(cls, seed: int) -> "TinyVae":
        rng = np.random.Generator(np.random.PCG64(seed))
        p = {}
        for name, (shape, fan) in _PARAM_FANS.items():
            if name.endswith("_b"):
                data = np.zeros(shape)
            else:
                data = T.he_init(rng, shape, fan)
            p[name] = Tensor._wrap(np.asarray(data, dtype=np.float64), True)
        return cls(p)

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def param_list(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    # -- towers ---------------------------------------------------------------

    def encode_t(self, images: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        h = T.relu(
            T.conv2d(images, p["enc1_w"], stride=2, pad=1) + _bias(p["enc1_b"], _ENC_CH[0])
        )
        h = T.relu(
            T.conv2d(h, p["enc2_w"], stride=2, pad=1) + _bias(p["enc2_b"], _ENC_CH[1])
        )
        h = T.relu(
            T.conv2d(h, p["enc3_w"], stride=2, pad=1) + _bias(p["enc3_b"], _ENC_CH[2])
        )
        mu = T.conv2d(h, p["mu_w"], stride=1, pad=1) + _bias(p["mu_b"], 4)
        logvar = T.conv2d(h, p["logvar_w"], stride=1, pad=1) + _bias(p["logvar_b"], 4)
        return mu, logvar

    def decode_t(self, latents: Tensor) -> Tensor:
        """(N,64) latent vectors -> (N,3,32,32) images in (0,1)."""
        p = self.params
        n = latents.shape[0]
        h = T.reshape(latents, (n,) + LATENT_SHAPE)
        h = T.relu(T.conv2d(h, p["dec1_w"], stride=1, pad=1) + _bias(p["dec1_b"], _DEC_CH[0]))
        h = T.upsample2x(h)
        h = T.relu(T.conv2d(h, p["dec2_w"], stride=1, pad=1) + _bias(p["dec2_b"], _DEC_CH[1]))
        h = T.upsample2x(h)
        h = T.relu(T.conv2d(h, p["dec3_w"], stride=1, pad=1) + _bias(p["dec3_b"], _DEC_CH[2]))
        h = T.upsample2x(h)
        return T.sigmoid(T.conv2d(h, p["out_w"], stride=1, pad=1) + _bias(p["out_b"], 3))

    def decode(self, latents: np.ndarray) -> np.ndarray:
        latents = np.asarray(latents, dtype=np.float64)
        squeeze = latents.ndim == 1
        if squeeze:
            latents = latents[None]
        if latents.shape[1] != LATENT_DIM:
            raise ConfigError(f"latents must have dim {LATENT_DIM}")
        with T.no_grad():
            out = self.decode_t(Tensor(latents)).data
        return out[0] if squeeze else out

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        """Deterministic reconstruction through the posterior mean."""
        with T.no_grad():
            mu, _ = self.encode_t(Tensor(np.asarray(images)))
            n = mu.shape[0]
            return self.decode_t(T.reshape(mu, (n, LATENT_DIM))).data

    # -- persistence ------------------------------------------------------------

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        for name, t in self.params.items():
            write_tsr(out_dir / "params" / f"{name}.tsr", np.asarray(t.data))
        write_json(out_dir / "meta.json", {"latent_dim": LATENT_DIM, "params": sorted(self.params)})

    @classmethod
    def load(cls, out_dir) -> "TinyVae":
        out_dir = Path(out_dir)
        meta_path = out_dir / "meta.json"
        if not meta_path.exists():
            raise IoError(f"no VAE checkpoint at {out_dir}")
        meta = json.loads(meta_path.read_text("utf-8"))
        params = {
            name: Tensor._wrap(read_tsr(out_dir / "params" / f"{name}.tsr"), False)
            for name in meta["params"]
        }
        return cls(params)


@dataclass
class VaeTrainReport:
    epochs: int
    loss_trace: list[float]
    val_recon_error: float


def recon_error(vae: TinyVae, manifest: DatasetManifest, split: str = "val") -> float:
    """Mean absolute per-pixel reconstruction error over a split."""
    records = manifest.split(split)
    images = np.stack([manifest.load_image(r) for r in records])
    recon = vae.reconstruct(images)
    return float(np.mean(np.abs(recon - images)))


def vae_train(
    manifest: DatasetManifest,
    epochs: int = 40,
    seed: int = 0,
    batch_size: int = 32,
    lr: float = 1e-3,
    kl_weight: float = 0.05,
) -> tuple[TinyVae, VaeTrainReport]:
    """ELBO training: summed squared reconstruction error plus weighted KL."""
    vae = TinyVae.init(seed)
    params = vae.param_list()
    state = T.AdamState(params)
    rng = np.random.Generator(np.random.PCG64(seed))
    records = manifest.split("train")
    if not records:
        raise ConfigError("manifest has no train split")

    loss_trace: list[float] = []
    for _epoch in range(epochs):
        order = rng.permutation(len(records))
        epoch_losses = []
        for start in range(0, len(records) - batch_size + 1, batch_size):
            batch = [records[i] for i in order[start : start + batch_size]]
            images = np.stack([manifest.load_image(r) for r in batch])
            x = Tensor(images)
            mu, logvar = vae.encode_t(x)
            eps = Tensor(rng.standard_normal(mu.shape))
            z = mu + T.exp(logvar * 0.5) * eps
            n = z.shape[0]
            recon = vae.decode_t(T.reshape(z, (n, LATENT_DIM)))
            diff = recon - x
            recon_loss = T.tsum(diff * diff) * (1.0 / n)
            kl = T.tsum(
                (T.exp(logvar) + mu * mu - logvar - 1.0) * 0.5
            ) * (1.0 / n)
            loss = recon_loss + kl * kl_weight
            val = loss.item()
            if not math.isfinite(val):
                raise TrainingDivergedError(f"VAE loss became {val}")
            T.backward(loss)
            grads = [
                p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
            ]
            T.adam_step(params, grads, state, lr)
            T.zero_grads(params)
            epoch_losses.append(val)
        loss_trace.append(float(np.mean(epoch_losses)))

    vae.set_trainable(False)
    report = VaeTrainReport(epochs, loss_trace, recon_error(vae, manifest, "val"))
    return vae, report
