"""Discrete diffusion noise schedules and the closed-form forward process.

A schedule is the table of per-step variance increments beta_t, their
complements alpha_t = 1 - beta_t, and the cumulative products
alpha_bar_t = prod_{s<=t} alpha_s.  With these, the noising process has the
closed-form marginal

    x_t = sqrt(alpha_bar_t) * x_0 + sqrt(1 - alpha_bar_t) * eps,

which `forward_marginal` evaluates and `recover_x0` inverts.  The same
tables drive latent-space diffusion unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

REBUILD_TOL = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable {beta_t, alpha_t, alpha_bar_t} tables for T discrete steps."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "linear"

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", np.asarray(self.alphas, dtype=np.float64))
        object.__setattr__(self, "alpha_bars", np.asarray(self.alpha_bars, dtype=np.float64))
        self._validate()

    def _validate(self):
        if self.betas.ndim != 1 or self.betas.size == 0:
            raise ValidationError("betas must be a non-empty 1D array")
        if np.any(self.betas <= 0.0) or np.any(self.betas >= 1.0):
            raise ValidationError("every beta_t must lie strictly inside (0, 1)")
        if self.alphas.shape != self.betas.shape or self.alpha_bars.shape != self.betas.shape:
            raise ValidationError("alphas/alpha_bars length must match betas")
        if np.max(np.abs(self.alphas - (1.0 - self.betas))) > REBUILD_TOL:
            raise ValidationError("alphas inconsistent with betas")
        rebuilt = np.cumprod(self.alphas)
        if np.max(np.abs(rebuilt - self.alpha_bars)) > REBUILD_TOL:
            raise ValidationError("alpha_bars inconsistent with cumulative product of alphas")
        if np.any(self.alpha_bars <= 0.0) or np.any(self.alpha_bars >= 1.0):
            raise ValidationError("alpha_bars must lie strictly inside (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ValidationError("alpha_bars must be strictly decreasing")

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise ValidationError(f"step index {t} outside [0, {self.T})")
        return t

    def posterior_variance(self, t: int) -> float:
        """beta~_t = beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t).

        The variance of q(x_{t-1} | x_t, x_0); zero at t = 0.
        """
        t = self.check_t(t)
        if t == 0:
            return 0.0
        return float(self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t]))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "betas": self.betas.tolist()}

    @staticmethod
    def from_betas(betas: np.ndarray, kind: str = "custom") -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        alphas = 1.0 - betas
        return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas), kind=kind)

    @staticmethod
    def from_dict(d: dict) -> "NoiseSchedule":
        return NoiseSchedule.from_betas(np.asarray(d["betas"]), kind=d.get("kind", "custom"))


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas from beta_start to beta_end inclusive."""
    if T < 1:
        raise ValidationError(f"step count T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValidationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule.from_betas(betas, kind="linear")


def make_cosine_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Cosine alpha_bar profile with betas derived from its ratios."""
    if T < 1:
        raise ValidationError(f"step count T must be >= 1, got {T}")

    def f(u: float) -> float:
        return math.cos((u + s) / (1.0 + s) * math.pi / 2.0) ** 2

    f0 = f(0.0)
    betas = np.empty(T, dtype=np.float64)
    prev = 1.0
    for t in range(T):
        bar = f((t + 1) / T) / f0
        betas[t] = min(1.0 - bar / prev, max_beta)
        prev = bar
    betas = np.clip(betas, 1e-8, max_beta)
    return NoiseSchedule.from_betas(betas, kind="cosine")


def make_schedule(kind: str, T: int, **kwargs) -> NoiseSchedule:
    """Constructor dispatch by schedule family name."""
    if kind == "linear":
        return make_linear_schedule(T, **kwargs)
    if kind == "cosine":
        return make_cosine_schedule(T, **kwargs)
    raise ValidationError(f"unknown schedule kind {kind!r}")


def _check_shapes(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise ValidationError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def forward_marginal(s: NoiseSchedule, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """Noisy sample x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    _check_shapes(x0, eps, "forward_marginal")
    t = s.check_t(t)
    abar = s.alpha_bars[t]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def recover_x0(s: NoiseSchedule, x_t: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """Invert the forward marginal given the exact noise realisation."""
    x_t = np.asarray(x_t)
    eps = np.asarray(eps)
    _check_shapes(x_t, eps, "recover_x0")
    t = s.check_t(t)
    abar = s.alpha_bars[t]
    if abar <= 0.0:
        raise ValidationError("alpha_bar_t = 0: signal fully destroyed, cannot invert")
    return (x_t - np.sqrt(1.0 - abar) * eps) / np.sqrt(abar)


def forward_marginal_batch(s: NoiseSchedule, x0: np.ndarray, t: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Vectorised forward marginal with one step index per batch item."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    _check_shapes(x0, eps, "forward_marginal_batch")
    t = np.asarray(t, dtype=np.int64)
    if t.shape != (x0.shape[0],):
        raise ValidationError(f"t must have shape ({x0.shape[0]},), got {t.shape}")
    if np.any(t < 0) or np.any(t >= s.T):
        raise ValidationError("some step indices outside [0, T)")
    bshape = (-1,) + (1,) * (x0.ndim - 1)
    abar = s.alpha_bars[t].reshape(bshape).astype(x0.dtype)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
