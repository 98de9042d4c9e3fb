"""Convolutional autoencoder and latent-space diffusion.

The autoencoder compresses images by an exact 16x element-count ratio; the
latent diffusion model then reuses the pixel-space objective and sampler
unchanged inside the compressed space.  Latents are standardised by a scalar
factor (reciprocal of the empirical latent standard deviation over the
training set) so the unit-variance noise schedule is well matched; the
factor is stored in the checkpoint and undone before decoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .checkpoint import Checkpoint
from .ddpm import EVAL_CHUNK, TrainConfig, load_split, reverse_chain, train_eps_model, checkpoint_model
from .denoiser import DenoiserConfig
from .errors import DivergenceError, ValidationError
from .manifest import Manifest
from .nn import autodiff as ad
from .nn.autodiff import Tensor, no_grad, silu
from .nn.layers import AdamW, Conv, GroupNorm, Module
from .seeding import rng_from, rng_state_to_json
from .volume import Volume


@dataclass(frozen=True)
class AutoencoderConfig:
    spatial_dims: int = 2
    in_channels: int = 1
    spatial_downsample: int = 4
    latent_channels: int = 1
    base_width: int = 16
    variational: bool = False
    kl_weight: float = 1e-6

    def __post_init__(self):
        if self.spatial_dims != 2:
            raise ValidationError("autoencoder supports 2D inputs only")
        ds = self.spatial_downsample
        if ds < 2 or (ds & (ds - 1)) != 0:
            raise ValidationError(f"spatial_downsample must be a power of two >= 2, got {ds}")
        if self.kl_weight < 0:
            raise ValidationError("kl_weight must be >= 0")
        ratio = self.compression_ratio()
        if ratio != 16:
            raise ValidationError(
                f"element-count compression ratio must be exactly 16, got {ratio}"
            )

    def compression_ratio(self) -> int:
        num = self.spatial_downsample**self.spatial_dims * self.in_channels
        if num % self.latent_channels != 0:
            raise ValidationError("latent_channels must divide the spatial reduction")
        return num // self.latent_channels

    def n_stages(self) -> int:
        return int(round(math.log2(self.spatial_downsample)))

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "AutoencoderConfig":
        return AutoencoderConfig(**d)


class Autoencoder(Module):
    """Strided-conv encoder and nearest-upsample decoder."""

    def __init__(self, config: AutoencoderConfig, rng, dtype=np.float32):
        w = config.base_width
        stages = config.n_stages()
        widths = [min(w * 2**s, 4 * w) for s in range(stages + 1)]
        self.stem = Conv(rng, 2, config.in_channels, widths[0], dtype=dtype)
        self.enc_norms = [GroupNorm(widths[s], dtype=dtype) for s in range(stages)]
        self.enc_convs = [Conv(rng, 2, widths[s], widths[s + 1], stride=2, dtype=dtype) for s in range(stages)]
        head_out = 2 * config.latent_channels if config.variational else config.latent_channels
        self.enc_head_norm = GroupNorm(widths[-1], dtype=dtype)
        self.enc_head = Conv(rng, 2, widths[-1], head_out, k=1, dtype=dtype)

        self.dec_stem = Conv(rng, 2, config.latent_channels, widths[-1], k=1, dtype=dtype)
        self.dec_norms = [GroupNorm(widths[s + 1], dtype=dtype) for s in reversed(range(stages))]
        self.dec_convs = [Conv(rng, 2, widths[s + 1], widths[s], dtype=dtype) for s in reversed(range(stages))]
        self.dec_head_norm = GroupNorm(widths[0], dtype=dtype)
        self.dec_head = Conv(rng, 2, widths[0], config.in_channels, dtype=dtype)
        self._config = config

    def encode_stats(self, x: Tensor) -> tuple[Tensor, Tensor | None]:
        h = self.stem(x)
        for norm, conv in zip(self.enc_norms, self.enc_convs):
            h = conv(silu(norm(h)))
        h = self.enc_head(silu(self.enc_head_norm(h)))
        if not self._config.variational:
            return h, None
        c = self._config.latent_channels
        mu = ad.getitem(h, (Ellipsis, slice(0, c)))
        logvar = ad.getitem(h, (Ellipsis, slice(c, 2 * c)))
        return mu, logvar

    def encode_t(self, x: Tensor) -> Tensor:
        mu, _ = self.encode_stats(x)
        return mu

    def decode_t(self, z: Tensor) -> Tensor:
        h = self.dec_stem(z)
        for norm, conv in zip(self.dec_norms, self.dec_convs):
            h = conv(ad.upsample_nearest(silu(norm(h))))
        return self.dec_head(silu(self.dec_head_norm(h)))


def _check_extent(x: np.ndarray, config: AutoencoderConfig):
    ds = config.spatial_downsample
    spatial = x.shape[1:-1]
    if any(e % ds != 0 for e in spatial):
        raise ValidationError(f"spatial extent {spatial} not divisible by downsample {ds}")


def _as_image_batch(x: np.ndarray, config: AutoencoderConfig) -> tuple[np.ndarray, bool, bool]:
    x = np.asarray(x, dtype=np.float32)
    squeeze_batch = squeeze_chan = False
    if x.ndim == 2:
        x = x[None, ..., None]
        squeeze_batch = squeeze_chan = True
    elif x.ndim == 3:
        if x.shape[-1] == config.in_channels:
            x = x[None]
            squeeze_batch = True
        else:
            x = x[..., None]
            squeeze_chan = True
    elif x.ndim != 4:
        raise ValidationError(f"expected 2D images, got array with shape {x.shape}")
    _check_extent(x, config)
    return x, squeeze_batch, squeeze_chan


def build_autoencoder(ckpt: Checkpoint) -> Autoencoder:
    cfg = AutoencoderConfig.from_dict(ckpt.config)
    ae = Autoencoder(cfg, rng_from(0, "ae-shell"))
    ae.load_parameters(ckpt.arrays)
    return ae


def encode(ae: Autoencoder | Checkpoint, x: np.ndarray) -> np.ndarray:
    """Deterministic latent for x (posterior mean when variational)."""
    if isinstance(ae, Checkpoint):
        ae = build_autoencoder(ae)
    batch, squeeze_batch, _ = _as_image_batch(x, ae._config)
    with no_grad():
        out = np.concatenate(
            [ae.encode_t(Tensor(batch[lo : lo + EVAL_CHUNK])).data for lo in range(0, batch.shape[0], EVAL_CHUNK)]
        )
    return out[0] if squeeze_batch else out


def decode(ae: Autoencoder | Checkpoint, z: np.ndarray) -> np.ndarray:
    """Image(s) for latent(s); single-channel images come back spatial-only."""
    if isinstance(ae, Checkpoint):
        ae = build_autoencoder(ae)
    z = np.asarray(z, dtype=np.float32)
    squeeze_batch = False
    if z.ndim == 3:
        z = z[None]
        squeeze_batch = True
    if z.ndim != 4 or z.shape[-1] != ae._config.latent_channels:
        raise ValidationError(f"latent shape {z.shape} incompatible with config")
    with no_grad():
        out = np.concatenate(
            [ae.decode_t(Tensor(z[lo : lo + EVAL_CHUNK])).data for lo in range(0, z.shape[0], EVAL_CHUNK)]
        )
    if ae._config.in_channels == 1:
        out = out[..., 0]
    return out[0] if squeeze_batch else out


def ae_loss(ae: Autoencoder, x_batch: np.ndarray, rng: np.random.Generator | None = None,
            lambda_perceptual: float | None = None, perceptual_fn=None) -> Tensor:
    """Per-element reconstruction MSE, plus KL and perceptual terms if enabled."""
    cfg = ae._config
    batch, _, _ = _as_image_batch(x_batch, cfg)
    xt = Tensor(batch)
    mu, logvar = ae.encode_stats(xt)
    if cfg.variational:
        if rng is not None:
            noise = rng.standard_normal(mu.shape).astype(np.float32)
            z = mu + ad.texp(logvar * 0.5) * Tensor(noise)
        else:
            z = mu
    else:
        z = mu
    xhat = ae.decode_t(z)
    diff = xhat - xt
    loss = (diff * diff).mean()
    if cfg.variational and cfg.kl_weight > 0:
        kl = 0.5 * (ad.square(mu) + ad.texp(logvar) - logvar - 1.0).mean()
        loss = loss + cfg.kl_weight * kl
    if lambda_perceptual is not None and perceptual_fn is not None:
        loss = loss + lambda_perceptual * perceptual_fn(xhat, xt)
    value = float(loss.data)
    if not math.isfinite(value):
        raise DivergenceError("non-finite autoencoder loss")
    return loss


def train_ae(manifest: Manifest, acfg: AutoencoderConfig, cfg: TrainConfig,
             log=None, perceptual_fn=None) -> Checkpoint:
    """Train the autoencoder; checkpoint stores the latent standardisation factor."""
    x_train, _, _ = load_split(manifest, "train")
    x_val, _, _ = load_split(manifest, "val")
    x_train = _as_image_batch(x_train, acfg)[0]
    x_val = _as_image_batch(x_val, acfg)[0]

    ae = Autoencoder(acfg, rng_from(cfg.seed, "ae-init"))
    opt = AdamW(ae.named_parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = rng_from(cfg.seed, "ae-train")
    n = x_train.shape[0]
    steps = max(1, math.ceil(n / cfg.batch_size))

    def val_loss() -> float:
        total = 0.0
        with no_grad():
            for lo in range(0, x_val.shape[0], EVAL_CHUNK):
                xb = x_val[lo : lo + EVAL_CHUNK]
                total += float(ae_loss(ae, xb).data) * xb.shape[0]
        return total / x_val.shape[0]

    best = math.inf
    best_arrays = ae.export_parameters()
    best_epoch = -1
    stale = 0
    curve = []
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for s in range(steps):
            idx = perm[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            if idx.size == 0:
                continue
            ae.zero_grad()
            loss = ae_loss(ae, x_train[idx], rng, cfg.lambda_perceptual, perceptual_fn)
            loss.backward()
            opt.step()
            epoch_loss += float(loss.data)
        epoch_loss /= steps
        vl = val_loss()
        curve.append({"epoch": epoch, "train_loss": epoch_loss, "val_loss": vl})
        if log is not None:
            log(epoch, epoch_loss, vl)
        if vl < best:
            best, best_epoch, stale = vl, epoch, 0
            best_arrays = ae.export_parameters()
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    ae.load_parameters(best_arrays)
    with no_grad():
        lat = encode(ae, x_train)
    scale = float(1.0 / max(np.std(lat), 1e-8))
    ckpt = Checkpoint(
        kind="ae",
        config=acfg.to_dict(),
        arrays=best_arrays,
        schedule=None,
        train_config=cfg.to_dict(),
        epoch=best_epoch,
        best_val_loss=best,
        rng_state=rng_state_to_json(rng),
        extra={"curve": curve, "latent_scale": scale, "image_shape": list(x_train.shape[1:])},
    )
    return ckpt


def train_ldm(manifest: Manifest, ae_ckpt: Checkpoint, cfg: TrainConfig,
              dcfg: DenoiserConfig, log=None) -> Checkpoint:
    """Diffusion in the frozen autoencoder's standardised latent space."""
    acfg = AutoencoderConfig.from_dict(ae_ckpt.config)
    if dcfg.in_channels != acfg.latent_channels:
        raise ValidationError(
            f"denoiser in_channels {dcfg.in_channels} != latent channels {acfg.latent_channels}"
        )
    ae = build_autoencoder(ae_ckpt)
    ae_fingerprint = ae_ckpt.params_hash()
    scale = float(ae_ckpt.extra["latent_scale"])

    x_train, specs_train, labels_train = load_split(manifest, "train")
    x_val, specs_val, _ = load_split(manifest, "val")
    z_train = encode(ae, x_train) * scale
    z_val = encode(ae, x_val) * scale

    use_cond = dcfg.cond_embed_dim > 0
    ckpt = train_eps_model(
        z_train.astype(np.float32), specs_train if use_cond else None, labels_train,
        z_val.astype(np.float32), specs_val if use_cond else None, cfg, dcfg,
        kind="ldm",
        extra={
            "latent_scale": scale,
            "ae_fingerprint": ae_fingerprint,
            "image_shape": list(ae_ckpt.extra.get("image_shape", [])),
            "spacing_mm": list(manifest.split("train").records[0].spacing_mm),
        },
        log=log,
    )
    return ckpt


def sample_ldm(ldm_ckpt: Checkpoint, ae_ckpt: Checkpoint, cond, n: int,
               rng: np.random.Generator, guidance_scale: float = 1.0) -> list[Volume]:
    """Sample latents through the reverse chain, rescale, and decode."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if ldm_ckpt.extra.get("ae_fingerprint") != ae_ckpt.params_hash():
        raise ValidationError("autoencoder fingerprint does not match the one the LDM was trained on")
    model = checkpoint_model(ldm_ckpt)
    shape = (n, *ldm_ckpt.extra["data_shape"])
    specs = [cond] * n if cond is not None else None
    z = reverse_chain(model, ldm_ckpt.schedule, shape, specs, rng, guidance_scale)
    z = z / float(ldm_ckpt.extra["latent_scale"])
    ae = build_autoencoder(ae_ckpt)
    x = decode(ae, z)
    spacing = tuple(ldm_ckpt.extra.get("spacing_mm", [1.0] * (x.ndim - 1)))
    vols = []
    for i in range(n):
        meta = {"generator": "ldm"}
        if cond is not None:
            meta["condition"] = cond.to_dict()
        vols.append(Volume(data=x[i], spacing_mm=spacing, meta=meta))
    return vols
