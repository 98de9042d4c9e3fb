"""Volume preprocessing: bias-field correction, normalisation, ROI, resampling.

The chain mirrors a clinical MRI preparation pipeline at desk scale:
a smooth multiplicative intensity field is estimated in the log domain and
divided out, intensities are standardised per scan, a region of interest is
cut around a mask with a margin, and the result is resampled to a target
voxel spacing by separable linear interpolation on the node-centred grid.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ValidationError
from .volume import Volume


def _poly_design(shape: tuple[int, ...], order: int) -> np.ndarray:
    """Monomial design matrix over the normalised grid, total degree <= order."""
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in shape]
    grids = np.meshgrid(*axes, indexing="ij")
    cols = []
    for powers in itertools.product(range(order + 1), repeat=len(shape)):
        if sum(powers) > order:
            continue
        term = np.ones(shape)
        for g, p in zip(grids, powers):
            if p:
                term = term * g**p
        cols.append(term.ravel())
    return np.stack(cols, axis=1)


def correct_bias_field(v: Volume, poly_order: int = 2) -> Volume:
    """Divide out a smooth multiplicative field fitted to log intensities.

    The fitted field is rescaled to unit mean before division, so a constant
    image passes through unchanged and order 0 is the identity.  Non-positive
    images are shifted into the positive range first; the shift is recorded
    in the metadata and undone afterwards.
    """
    if poly_order < 0:
        raise ValidationError("poly_order must be >= 0")
    data = np.asarray(v.data, dtype=np.float64)
    if poly_order >= 1:
        for ax, n in enumerate(data.shape):
            if n < poly_order + 1:
                raise ValidationError(
                    f"axis {ax} has extent {n}, too short for a degree-{poly_order} fit"
                )
    shift = 0.0
    lo = float(data.min())
    if lo <= 0.0:
        span = float(data.max()) - lo
        shift = -lo + max(span, 1.0) * 1e-3
        data = data + shift
    design = _poly_design(data.shape, poly_order)
    coef, _, rank, _ = np.linalg.lstsq(design, np.log(data).ravel(), rcond=None)
    if rank < design.shape[1]:
        raise ValidationError(
            f"rank-deficient polynomial fit (rank {rank} of {design.shape[1]} terms)"
        )
    raw_field = np.exp(design @ coef).reshape(data.shape)
    field = raw_field / raw_field.mean()
    corrected = data / field - shift
    out = v.copy_with(corrected)
    out.meta["bias_corrected"] = {"poly_order": poly_order, "shift": shift}
    return out


def znormalize(v: Volume) -> Volume:
    """Zero mean, unit variance per scan."""
    data = np.asarray(v.data, dtype=np.float64)
    std = float(data.std())
    if std < 1e-12:
        raise ValidationError("constant image has zero variance; cannot z-normalise")
    out = v.copy_with((data - data.mean()) / std)
    out.meta["znormalized"] = True
    return out


def extract_roi(v: Volume, mask: Volume | np.ndarray, margin_frac: float = 0.1) -> Volume:
    """Crop to the mask bounding box plus a margin, padded square in-plane.

    The margin is `round(margin_frac * extent)` per side and per axis,
    clamped to the volume bounds.  The in-plane axes (the first two) are then
    padded to a square with the image minimum.
    """
    mask_data = mask.data if isinstance(mask, Volume) else np.asarray(mask)
    if mask_data.shape != v.data.shape:
        raise ValidationError(
            f"mask shape {mask_data.shape} does not match volume shape {v.data.shape}"
        )
    if margin_frac < 0:
        raise ValidationError("margin_frac must be >= 0")
    nz = np.nonzero(mask_data)
    if nz[0].size == 0:
        raise ValidationError("empty mask")
    slices = []
    for ax in range(v.data.ndim):
        lo, hi = int(nz[ax].min()), int(nz[ax].max())
        m = int(round(margin_frac * (hi - lo + 1)))
        slices.append(slice(max(0, lo - m), min(v.data.shape[ax], hi + 1 + m)))
    crop = v.data[tuple(slices)]
    h, w = crop.shape[0], crop.shape[1]
    target = max(h, w)
    fill = float(v.data.min())
    pads = [(0, 0)] * crop.ndim
    pads[0] = ((target - h) // 2, target - h - (target - h) // 2)
    pads[1] = ((target - w) // 2, target - w - (target - w) // 2)
    crop = np.pad(crop, pads, constant_values=fill)
    out = v.copy_with(crop)
    out.meta["roi"] = {
        "bbox": [[s.start, s.stop] for s in slices],
        "margin_frac": margin_frac,
    }
    return out


def _interp_axis(data: np.ndarray, axis: int, positions: np.ndarray) -> np.ndarray:
    """Linear interpolation of one axis at fractional index positions."""
    n = data.shape[axis]
    if n == 1:
        reps = [1] * data.ndim
        reps[axis] = positions.size
        return np.tile(data, reps)
    i0 = np.clip(np.floor(positions).astype(np.int64), 0, n - 2)
    frac = positions - i0
    a = np.take(data, i0, axis=axis)
    b = np.take(data, i0 + 1, axis=axis)
    shape = [1] * data.ndim
    shape[axis] = positions.size
    f = frac.reshape(shape)
    return a * (1.0 - f) + b * f


def resample(v: Volume, target_spacing_mm) -> Volume:
    """Separable linear resampling onto the target voxel spacing.

    Grid points are node-centred: axis extent is (n - 1) * spacing, and the
    output grid covers the same physical extent (within one voxel), so linear
    functions are reproduced exactly and equal spacings are the identity.
    """
    target = tuple(float(s) for s in np.atleast_1d(target_spacing_mm))
    if len(target) == 1:
        target = target * v.data.ndim
    if len(target) != v.data.ndim:
        raise ValidationError(
            f"target spacing has {len(target)} entries for a {v.data.ndim}-d volume"
        )
    if any(t <= 0 for t in target):
        raise ValidationError("target spacing must be positive")
    data = np.asarray(v.data, dtype=np.float64)
    for ax, (sp, tsp) in enumerate(zip(v.spacing_mm, target)):
        n_in = data.shape[ax]
        if sp == tsp:
            continue
        n_out = int(np.floor((n_in - 1) * sp / tsp + 1e-9)) + 1
        positions = np.arange(n_out, dtype=np.float64) * (tsp / sp)
        data = _interp_axis(data, ax, positions)
    out = Volume(data=data, spacing_mm=target, meta=dict(v.meta))
    out.meta["resampled_from_mm"] = list(v.spacing_mm)
    return out


def resize_to(v: Volume, target_shape: tuple[int, ...]) -> Volume:
    """Resample onto an exact output shape, preserving the physical extent."""
    target_shape = tuple(int(n) for n in target_shape)
    if len(target_shape) != v.data.ndim:
        raise ValidationError("target shape rank mismatch")
    if any(n < 1 for n in target_shape):
        raise ValidationError("target shape entries must be >= 1")
    data = np.asarray(v.data, dtype=np.float64)
    spacing = []
    for ax, n_out in enumerate(target_shape):
        n_in = data.shape[ax]
        if n_out == n_in:
            spacing.append(v.spacing_mm[ax])
            continue
        positions = (
            np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.array([(n_in - 1) / 2.0])
        )
        data = _interp_axis(data, ax, positions)
        spacing.append(
            v.spacing_mm[ax] * (n_in - 1) / (n_out - 1) if n_out > 1 else v.spacing_mm[ax] * n_in
        )
    out = Volume(data=data, spacing_mm=tuple(spacing), meta=dict(v.meta))
    out.meta["resized_from"] = list(v.data.shape)
    return out


def preprocess_chain(v: Volume, mask: Volume | np.ndarray | None = None, *,
                     bias_poly_order: int = 2, roi_margin_frac: float = 0.1,
                     target_spacing_mm: float | None = 1.0) -> Volume:
    """bias-correct, z-normalise, optionally crop to ROI, then resample."""
    out = correct_bias_field(v, bias_poly_order)
    out = znormalize(out)
    if mask is not None:
        out = extract_roi(out, mask, roi_margin_frac)
    if target_spacing_mm is not None:
        out = resample(out, target_spacing_mm)
    return out
