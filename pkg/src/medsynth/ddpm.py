"""DDPM training objective, optimisation loop, and ancestral sampling.

The loss is the noise-prediction mean squared error: draw a step t and a
Gaussian eps per item, form the noisy input through the closed-form forward
marginal, and regress the network output onto eps.  Training uses AdamW,
class-weighted sampling over the training set, per-epoch validation with a
frozen noise realisation, and early stopping on the validation loss.
Sampling runs the full reverse chain with the fixed-variance posterior and
optional classifier-free guidance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .checkpoint import Checkpoint
from .conditioning import ConditionSpec
from .denoiser import DenoiserConfig, DiffusionCore, init_denoiser
from .errors import DivergenceError, ValidationError
from .manifest import Manifest
from .nn.autodiff import Tensor, no_grad
from .nn.layers import AdamW
from .schedule import NoiseSchedule, forward_marginal_batch, make_schedule
from .seeding import rng_from, rng_state_to_json
from .volume import Volume

EVAL_CHUNK = 32  # cache-friendly network batch on one CPU core


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 50
    lambda_perceptual: float | None = None
    cond_dropout_p: float = 0.1
    seed: int = 0
    weight_decay: float = 0.0
    optimizer: str = "adamw"
    schedule_kind: str = "linear"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        # learning_rate 0 is allowed as an explicit "frozen" diagnostic mode
        if self.learning_rate != 0.0 and not 1e-5 <= self.learning_rate <= 1e-3:
            raise ValidationError(f"learning rate {self.learning_rate} outside [1e-5, 1e-3]")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 1 <= self.max_epochs <= 2000:
            raise ValidationError(f"max_epochs {self.max_epochs} outside [1, 2000]")
        if self.patience < 1:
            raise ValidationError("patience must be >= 1")
        if self.lambda_perceptual is not None and not 0.1 <= self.lambda_perceptual <= 1.0:
            raise ValidationError(f"lambda_perceptual {self.lambda_perceptual} outside [0.1, 1.0]")
        if not 0.0 <= self.cond_dropout_p <= 0.2:
            raise ValidationError(f"cond_dropout_p {self.cond_dropout_p} outside [0.0, 0.2]")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.optimizer != "adamw":
            raise ValidationError(f"unsupported optimizer {self.optimizer!r}")

    def make_noise_schedule(self) -> NoiseSchedule:
        if self.schedule_kind == "linear":
            return make_schedule("linear", self.T, beta_start=self.beta_start, beta_end=self.beta_end)
        return make_schedule(self.schedule_kind, self.T)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


# -- objective -----------------------------------------------------------------


def eps_prediction_loss(model: DiffusionCore, schedule: NoiseSchedule, x0: np.ndarray,
                        t: np.ndarray, eps: np.ndarray,
                        specs: list[ConditionSpec | None] | None = None,
                        lambda_perceptual: float | None = None,
                        perceptual_fn=None) -> Tensor:
    """Noise-regression loss for fixed (t, eps) draws; differentiable."""
    dtype = model.unet.stem.w.dtype
    x_t = forward_marginal_batch(schedule, x0, t, eps).astype(dtype)
    eps_hat = model.predict(Tensor(x_t), t, specs)
    diff = eps_hat - eps.astype(dtype)
    loss = (diff * diff).mean()
    if lambda_perceptual is not None and perceptual_fn is not None:
        bshape = (-1,) + (1,) * (x0.ndim - 1)
        abar = schedule.alpha_bars[t].reshape(bshape)
        sq = np.sqrt(abar).astype(dtype)
        sq1m = np.sqrt(1.0 - abar).astype(dtype)
        x0_hat = (Tensor(x_t) - eps_hat * sq1m) * (1.0 / sq)
        loss = loss + lambda_perceptual * perceptual_fn(x0_hat, Tensor(x0.astype(dtype)))
    return loss


def ddpm_loss(params_or_model, schedule: NoiseSchedule, x0_batch: np.ndarray,
              cond_batch: list[ConditionSpec | None] | None, rng: np.random.Generator,
              cond_dropout_p: float = 0.0, predictor=None,
              return_grads: bool = False):
    """Single-batch DDPM loss with sampled (t, eps) and conditioning dropout.

    `predictor` overrides the network with a plain numpy callable
    (x_t, t) -> eps_hat; used for oracle stubs.  Returns the scalar loss, or
    (loss, grads) when `return_grads` is set.
    """
    x0 = np.asarray(x0_batch, dtype=np.float64)
    n = x0.shape[0]
    t = rng.integers(0, schedule.T, size=n)
    eps = rng.standard_normal(x0.shape)
    if cond_batch is not None and cond_dropout_p > 0.0:
        drops = rng.random(n) < cond_dropout_p
        cond_batch = [None if d else c for c, d in zip(cond_batch, drops)]
    if predictor is not None:
        x_t = forward_marginal_batch(schedule, x0, t, eps)
        eps_hat = predictor(x_t, t)
        loss = float(np.mean((eps - eps_hat) ** 2))
        if not math.isfinite(loss):
            raise DivergenceError("non-finite stub loss")
        return loss
    model = params_or_model.model() if hasattr(params_or_model, "model") else params_or_model
    if return_grads:
        model.zero_grad()
        loss_t = eps_prediction_loss(model, schedule, x0, t, eps, cond_batch)
        loss_t.backward()
        grads = {k: p.grad.copy() for k, p in model.named_parameters().items() if p.grad is not None}
        loss = float(loss_t.data)
    else:
        with no_grad():
            loss_t = eps_prediction_loss(model, schedule, x0, t, eps, cond_batch)
        loss = float(loss_t.data)
        grads = None
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss (t histogram: {np.bincount(t, minlength=schedule.T)[:8]}...)")
    return (loss, grads) if return_grads else loss


# -- class-weighted sampling -----------------------------------------------------


def class_weighted_sampler(labels, rng: np.random.Generator, n_classes: int | None = None):
    """Infinite index stream: uniform over classes, then uniform within class."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValidationError("empty label sequence")
    classes, inverse = np.unique(labels, return_inverse=True)
    if n_classes is not None and len(classes) != n_classes:
        raise ValidationError(
            f"expected {n_classes} populated classes, found {len(classes)}"
        )
    members = [np.flatnonzero(inverse == k) for k in range(len(classes))]

    def stream():
        k = len(members)
        while True:
            c = int(rng.integers(k))
            yield int(members[c][rng.integers(members[c].size)])

    return stream()


# -- data plumbing ---------------------------------------------------------------


def _to_channels_last(x: np.ndarray, spatial_dims: int) -> np.ndarray:
    if x.ndim == spatial_dims + 1:  # (n, spatial...) -> add channel axis
        return x[..., None]
    if x.ndim == spatial_dims + 2:  # already channels-last
        return x
    raise ValidationError(f"data with shape {x.shape} not compatible with {spatial_dims}D model")


def load_split(manifest: Manifest, split: str) -> tuple[np.ndarray, list[ConditionSpec], np.ndarray]:
    part = manifest.split(split)
    if len(part) == 0:
        raise ValidationError(f"manifest has no {split!r} records")
    x = part.load_stack()
    specs = [
        ConditionSpec(
            orientation_class=r.orientation_class,
            field_strength_tesla=r.field_strength,
            sequence=r.sequence,
            extra_keywords=r.extra_keywords,
        )
        for r in part
    ]
    return x, specs, part.labels()


# -- training ---------------------------------------------------------------------


def train_eps_model(x_train: np.ndarray, specs_train: list[ConditionSpec] | None,
                    labels_train: np.ndarray, x_val: np.ndarray,
                    specs_val: list[ConditionSpec] | None, cfg: TrainConfig,
                    dcfg: DenoiserConfig, *, kind: str = "ddpm", extra: dict | None = None,
                    perceptual_fn=None, log=None) -> Checkpoint:
    """Shared optimisation loop for pixel-space and latent-space diffusion."""
    schedule = cfg.make_noise_schedule()
    x_train = _to_channels_last(np.asarray(x_train, dtype=np.float32), dcfg.spatial_dims)
    x_val = _to_channels_last(np.asarray(x_val, dtype=np.float32), dcfg.spatial_dims)
    n_train = x_train.shape[0]

    params = init_denoiser(dcfg, cfg.seed)
    model = params.model()
    named = model.named_parameters()
    opt = AdamW(named, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    rng_batch = rng_from(cfg.seed, "train-batches")
    rng_noise = rng_from(cfg.seed, "train-noise")
    sampler = class_weighted_sampler(labels_train, rng_batch)

    # frozen validation noise makes epoch-to-epoch losses comparable
    rng_val = rng_from(cfg.seed, "val-noise")
    t_val = rng_val.integers(0, schedule.T, size=x_val.shape[0])
    eps_val = rng_val.standard_normal(x_val.shape).astype(np.float32)

    def val_loss() -> float:
        total, count = 0.0, 0
        with no_grad():
            for lo in range(0, x_val.shape[0], EVAL_CHUNK):
                sl = slice(lo, lo + EVAL_CHUNK)
                sp = specs_val[sl] if specs_val is not None else None
                loss = eps_prediction_loss(model, schedule, x_val[sl], t_val[sl], eps_val[sl], sp)
                total += float(loss.data) * (min(x_val.shape[0], lo + EVAL_CHUNK) - lo)
                count += min(x_val.shape[0], lo + EVAL_CHUNK) - lo
        return total / count

    steps_per_epoch = max(1, math.ceil(n_train / cfg.batch_size))
    best_val = math.inf
    best_arrays = params.arrays
    best_epoch = -1
    stale = 0
    initial_train = None
    runaway = 0
    curve = []

    for epoch in range(cfg.max_epochs):
        epoch_loss = 0.0
        for _ in range(steps_per_epoch):
            idx = np.fromiter((next(sampler) for _ in range(cfg.batch_size)), dtype=np.int64)
            xb = x_train[idx]
            t = rng_noise.integers(0, schedule.T, size=xb.shape[0])
            eps = rng_noise.standard_normal(xb.shape).astype(np.float32)
            sp = None
            if specs_train is not None:
                sp = [specs_train[i] for i in idx]
                if cfg.cond_dropout_p > 0.0:
                    drops = rng_noise.random(len(sp)) < cfg.cond_dropout_p
                    sp = [None if d else s for s, d in zip(sp, drops)]
            model.zero_grad()
            loss = eps_prediction_loss(model, schedule, xb, t, eps, sp,
                                       cfg.lambda_perceptual, perceptual_fn)
            loss.backward()
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch} "
                    f"(t histogram: {np.bincount(t, minlength=schedule.T)[:10]}, "
                    f"grad norm: {opt.grad_norm():.3e})"
                )
            opt.step()
            epoch_loss += lv
        epoch_loss /= steps_per_epoch
        if initial_train is None:
            initial_train = epoch_loss
        runaway = runaway + 1 if epoch_loss > 10.0 * initial_train else 0
        if runaway >= 3:
            raise DivergenceError(
                f"training loss {epoch_loss:.3e} above 10x initial {initial_train:.3e} "
                f"for 3 consecutive epochs (epoch {epoch})"
            )

        vl = val_loss()
        curve.append({"epoch": epoch, "train_loss": epoch_loss, "val_loss": vl})
        if log is not None:
            log(epoch, epoch_loss, vl)
        if vl < best_val:
            best_val = vl
            best_epoch = epoch
            best_arrays = model.export_parameters()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    meta = dict(extra or {})
    meta["curve"] = curve
    meta["best_epoch"] = best_epoch
    meta["data_shape"] = list(x_train.shape[1:])
    return Checkpoint(
        kind=kind,
        config=dcfg.to_dict(),
        arrays=best_arrays,
        schedule=schedule,
        train_config=cfg.to_dict(),
        epoch=best_epoch,
        best_val_loss=best_val,
        rng_state=rng_state_to_json(rng_noise),
        extra=meta,
    )


def train_ddpm(manifest: Manifest, cfg: TrainConfig, dcfg: DenoiserConfig,
               log=None, perceptual_fn=None) -> Checkpoint:
    """Train a (conditional) pixel-space DDPM from a dataset manifest."""
    x_train, specs_train, labels_train = load_split(manifest, "train")
    x_val, specs_val, _ = load_split(manifest, "val")
    spacing = manifest.split("train").records[0].spacing_mm
    use_cond = dcfg.cond_embed_dim > 0
    return train_eps_model(
        x_train, specs_train if use_cond else None, labels_train,
        x_val, specs_val if use_cond else None, cfg, dcfg,
        kind="ddpm", extra={"spacing_mm": list(spacing)},
        perceptual_fn=perceptual_fn, log=log,
    )


# -- sampling ----------------------------------------------------------------------


def checkpoint_model(ckpt: Checkpoint) -> DiffusionCore:
    dcfg = DenoiserConfig.from_dict(ckpt.config)
    core = DiffusionCore(dcfg, rng_from(0, "denoiser-shell"))
    core.load_parameters(ckpt.arrays)
    return core


def predict_eps_chunked(model: DiffusionCore, x: np.ndarray, t: int,
                        specs: list[ConditionSpec | None] | None) -> np.ndarray:
    """Network evaluation over a large batch in cache-friendly chunks."""
    out = np.empty_like(x)
    n = x.shape[0]
    with no_grad():
        for lo in range(0, n, EVAL_CHUNK):
            hi = min(n, lo + EVAL_CHUNK)
            t_arr = np.full(hi - lo, t, dtype=np.int64)
            sp = specs[lo:hi] if specs is not None else None
            out[lo:hi] = model.predict(Tensor(x[lo:hi]), t_arr, sp).data
    return out


def reverse_chain(model: DiffusionCore, schedule: NoiseSchedule, shape: tuple,
                  specs: list[ConditionSpec | None] | None, rng: np.random.Generator,
                  guidance_scale: float = 1.0) -> np.ndarray:
    """Ancestral sampling from pure noise down to t = 0.

    Exactly T network evaluations, or 2T when guidance is active (scale != 1
    with a condition given).
    """
    if guidance_scale < 0:
        raise ValidationError("guidance_scale must be >= 0")
    x = rng.standard_normal(shape).astype(np.float32)
    conditional = specs is not None and any(s is not None for s in specs)
    use_guidance = conditional and guidance_scale != 1.0
    null_specs = [None] * shape[0]
    for t in range(schedule.T - 1, -1, -1):
        if conditional:
            eps_hat = predict_eps_chunked(model, x, t, specs)
            if use_guidance:
                eps_u = predict_eps_chunked(model, x, t, null_specs)
                eps_hat = eps_u + guidance_scale * (eps_hat - eps_u)
        else:
            eps_hat = predict_eps_chunked(model, x, t, null_specs if model.cond is not None else None)
        beta = schedule.betas[t]
        alpha = schedule.alphas[t]
        abar = schedule.alpha_bars[t]
        mean = (x - (beta / np.sqrt(1.0 - abar)) * eps_hat) / np.sqrt(alpha)
        if t > 0:
            sigma = math.sqrt(schedule.posterior_variance(t))
            x = (mean + sigma * rng.standard_normal(shape)).astype(np.float32)
        else:
            x = mean.astype(np.float32)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite sample state at step t={t}")
    return x


def sample_ddpm(ckpt: Checkpoint, cond: ConditionSpec | None, n: int,
                rng: np.random.Generator, guidance_scale: float = 1.0) -> list[Volume]:
    """Draw n images from a trained DDPM checkpoint under one condition."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    model = checkpoint_model(ckpt)
    shape = (n, *ckpt.extra["data_shape"])
    specs = [cond] * n if cond is not None else None
    x = reverse_chain(model, ckpt.schedule, shape, specs, rng, guidance_scale)
    spacing = tuple(ckpt.extra.get("spacing_mm", [1.0] * (len(shape) - 2)))
    vols = []
    for i in range(n):
        meta = {"generator": ckpt.kind}
        if cond is not None:
            meta["condition"] = cond.to_dict()
        vols.append(Volume(data=x[i, ..., 0] if shape[-1] == 1 else x[i], spacing_mm=spacing, meta=meta))
    return vols
