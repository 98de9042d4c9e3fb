"""The trainable noise-prediction network and its contract operations.

`DenoiserParams` is an opaque named-array collection produced by
`init_denoiser`; `denoise_predict` runs the network on a noisy input at a
given step with an optional condition embedding.  `grad_check` validates the
hand-written backward pass of the whole stack against central finite
differences in double precision.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from .conditioning import CondEmbedding, ConditionEncoder, ConditionSpec
from .errors import ValidationError
from .nn.autodiff import Tensor, no_grad
from .nn.layers import Module, timestep_embedding
from .nn.unet import UNet
from .seeding import rng_from


@dataclass(frozen=True)
class DenoiserConfig:
    spatial_dims: int = 2
    in_channels: int = 1
    base_width: int = 16
    depth: int = 3
    attention_levels: tuple[int, ...] = (2,)
    time_embed_dim: int = 64
    cond_embed_dim: int = 32
    use_cross_attention: bool = True

    def __post_init__(self):
        if self.spatial_dims not in (2, 3):
            raise ValidationError(f"spatial_dims must be 2 or 3, got {self.spatial_dims}")
        if self.depth < 1:
            raise ValidationError("depth must be >= 1")
        if self.in_channels < 1 or self.base_width < 1:
            raise ValidationError("channel counts must be positive")
        object.__setattr__(self, "attention_levels", tuple(sorted(set(self.attention_levels))))
        bad = [a for a in self.attention_levels if not 0 <= a < self.depth]
        if bad:
            raise ValidationError(f"attention levels {bad} outside 0..{self.depth - 1}")
        if self.time_embed_dim % 2 != 0 or self.time_embed_dim <= 0:
            raise ValidationError("time_embed_dim must be a positive even number")
        if self.cond_embed_dim < 0:
            raise ValidationError("cond_embed_dim must be >= 0")
        if self.use_cross_attention and self.cond_embed_dim == 0:
            raise ValidationError("cross-attention requires cond_embed_dim > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["attention_levels"] = tuple(d.get("attention_levels", ()))
        return DenoiserConfig(**d)


class DiffusionCore(Module):
    """U-Net plus (optionally) the condition encoders, as one parameter bundle."""

    def __init__(self, config: DenoiserConfig, rng, dtype=np.float32):
        self.unet = UNet(
            rng,
            spatial_dims=config.spatial_dims,
            in_channels=config.in_channels,
            base_width=config.base_width,
            depth=config.depth,
            attention_levels=config.attention_levels,
            time_embed_dim=config.time_embed_dim,
            cond_embed_dim=config.cond_embed_dim,
            use_cross_attention=config.use_cross_attention,
            dtype=dtype,
        )
        self.cond = ConditionEncoder(rng, config.cond_embed_dim, dtype=dtype) if config.cond_embed_dim else None
        self._config = config  # not a parameter; kept for shape checks

    def named_parameters(self, prefix: str = ""):
        out = self.unet.named_parameters(f"{prefix}.unet" if prefix else "unet")
        if self.cond is not None:
            out.update(self.cond.named_parameters(f"{prefix}.cond" if prefix else "cond"))
        return out

    def predict(self, x: Tensor, t: np.ndarray, specs: list[ConditionSpec | None] | None) -> Tensor:
        """Noise prediction for a batch with per-item conditions (None = null)."""
        if self.cond is None:
            return self.unet(x, t)
        if specs is None:
            specs = [None] * x.shape[0]
        class_idx, token_ids, token_mask, null_mask = self.cond.prepare_batch_arrays(specs)
        class_vecs, tokens, full_mask = self.cond.embed_batch(class_idx, token_ids, token_mask, null_mask)
        if self._config.use_cross_attention:
            return self.unet(x, t, class_vecs, tokens, full_mask)
        return self.unet(x, t, class_vecs)

    def predict_embedded(self, x: Tensor, t: np.ndarray, emb: CondEmbedding | None) -> Tensor:
        """Noise prediction with one explicit embedding shared by the batch."""
        if self.cond is None:
            return self.unet(x, t)
        if emb is None:
            emb = self.cond.null_embedding()
        n = x.shape[0]
        dtype = self.unet.stem.w.dtype
        cv = Tensor(np.broadcast_to(emb.class_vector.astype(dtype), (n, emb.class_vector.size)).copy())
        if self._config.use_cross_attention:
            tok = emb.token_matrix.astype(dtype)
            tokens = Tensor(np.broadcast_to(tok, (n,) + tok.shape).copy())
            return self.unet(x, t, cv, tokens)
        return self.unet(x, t, cv)


@dataclass
class DenoiserParams:
    """Opaque named parameter collection, reproducible from (config, seed)."""

    config: DenoiserConfig
    arrays: dict[str, np.ndarray]
    seed: int
    _model: DiffusionCore | None = dc_field(default=None, repr=False, compare=False)

    @property
    def param_count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name]).tobytes())
        return h.hexdigest()

    def model(self) -> DiffusionCore:
        if self._model is None:
            core = DiffusionCore(self.config, rng_from(0, "denoiser-shell"))
            core.load_parameters(self.arrays)
            self._model = core
        return self._model

    def refresh_arrays(self):
        """Pull current model parameter values back into the array dict."""
        if self._model is not None:
            self.arrays = self._model.export_parameters()


def init_denoiser(config: DenoiserConfig, seed: int) -> DenoiserParams:
    """Deterministically initialise a denoiser parameter set."""
    core = DiffusionCore(config, rng_from(seed, "denoiser-init"))
    arrays = core.export_parameters()
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise ValidationError(f"non-finite initial values in {name}")
    params = DenoiserParams(config=config, arrays=arrays, seed=seed)
    params._model = core
    return params


def _as_batch(x: np.ndarray, config: DenoiserConfig) -> tuple[np.ndarray, tuple]:
    """Normalise input to channels-last batch; return it plus original shape."""
    x = np.asarray(x)
    d = config.spatial_dims
    if x.ndim == d:  # bare spatial volume
        batch = x[None, ..., None]
    elif x.ndim == d + 1 and x.shape[-1] == config.in_channels:  # spatial + channels
        batch = x[None]
    elif x.ndim == d + 2 and x.shape[-1] == config.in_channels:  # full batch
        batch = x
    else:
        raise ValidationError(
            f"input shape {x.shape} incompatible with {d}D/{config.in_channels}-channel model"
        )
    return batch, x.shape


def denoise_predict(params: DenoiserParams, x_t: np.ndarray, t: int | np.ndarray,
                    cond: CondEmbedding | None = None) -> np.ndarray:
    """Predicted noise for `x_t` at step `t`; output shape equals input shape.

    With `cond = None` the conditional branches consume the learned null
    embedding, which is what makes the call deterministic and well-defined
    for conditionally trained models.
    """
    batch, orig_shape = _as_batch(x_t, params.config)
    if not np.all(np.isfinite(batch)):
        raise ValidationError("non-finite values in denoiser input")
    model = params.model()
    dtype = model.unet.stem.w.dtype
    n = batch.shape[0]
    t_arr = np.full(n, int(t), dtype=np.int64) if np.isscalar(t) else np.asarray(t, dtype=np.int64)
    if t_arr.shape != (n,):
        raise ValidationError(f"t must be scalar or shape ({n},)")
    if np.any(t_arr < 0):
        raise ValidationError("negative step index")
    with no_grad():
        out = model.predict_embedded(Tensor(batch.astype(dtype)), t_arr, cond)
    result = out.data.reshape(orig_shape).astype(np.float64)
    if not np.all(np.isfinite(result)):
        raise ValidationError("denoiser produced non-finite values")
    return result


def grad_check(params: DenoiserParams, batch: dict, tolerance: float = 1e-3,
               seed: int = 0, entries_per_array: int = 4) -> float:
    """Compare analytic gradients with central finite differences.

    Runs in double precision on a jittered copy of the parameters (so that
    zero-initialised gates do not hide entire branches), samples a few
    entries of every parameter array, and returns the worst relative error
    max ||g_fd - g_an|| / max(||g_fd||, ||g_an||) over arrays.
    """
    from .ddpm import eps_prediction_loss  # local import; ddpm builds on this module
    from .schedule import make_linear_schedule

    rng = rng_from(seed, "grad-check")
    core = DiffusionCore(params.config, rng_from(params.seed, "denoiser-init"), dtype=np.float64)
    core.load_parameters({k: v.astype(np.float64) for k, v in params.arrays.items()})
    named = core.named_parameters()
    for p in named.values():
        p.data = p.data + 0.05 * rng.standard_normal(p.data.shape)

    x0 = np.asarray(batch["x0"], dtype=np.float64)
    specs = batch.get("specs")
    schedule = batch.get("schedule") or make_linear_schedule(10, 1e-4, 0.02)
    n = x0.shape[0]
    t = rng.integers(0, schedule.T, size=n)
    eps = rng.standard_normal(x0.shape)

    def loss_value() -> float:
        with no_grad():
            loss = eps_prediction_loss(core, schedule, x0, t, eps, specs)
        return float(loss.data)

    core.zero_grad()
    loss = eps_prediction_loss(core, schedule, x0, t, eps, specs)
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in named.items()}

    worst = 0.0
    for name, p in named.items():
        flat = p.data.reshape(-1)
        k = min(entries_per_array, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        fd = np.empty(k)
        for j, i in enumerate(idx):
            h = 1e-5 * max(1.0, abs(flat[i]))
            old = flat[i]
            flat[i] = old + h
            fp = loss_value()
            flat[i] = old - h
            fm = loss_value()
            flat[i] = old
            fd[j] = (fp - fm) / (2 * h)
        an = analytic[name].reshape(-1)[idx]
        denom = max(float(np.linalg.norm(fd)), float(np.linalg.norm(an)), 1e-12)
        rel = float(np.linalg.norm(fd - an)) / denom
        worst = max(worst, rel)
    return worst


__all__ = [
    "DenoiserConfig",
    "DenoiserParams",
    "DiffusionCore",
    "init_denoiser",
    "denoise_predict",
    "grad_check",
    "timestep_embedding",
]
