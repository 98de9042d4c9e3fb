"""Procedural pelvic phantoms with known ground-truth geometry.

Each phantom composes ellipse/capsule organs in a sagittal plane: a bladder
anterior, a rectum and spine posterior, and a two-segment uterus whose
cervix tilt (version) and body bend (flexion) encode the four orientation
classes.  Texture, an optional multiplicative bias field, and Gaussian noise
are layered on top.  Generation is a pure function of the spec, so datasets
are reproducible from a seed, and the uterus mask comes along for free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .conditioning import ConditionSpec, FIELD_STRENGTHS, ORIENTATION_CLASSES, SEQUENCES
from .errors import ValidationError
from .manifest import Manifest, ManifestRecord
from .preprocess import extract_roi, resize_to, znormalize
from .seeding import derive_seed, rng_from
from .volume import Volume, save_volume

# flexion = bend of the body relative to the cervix; version = tilt of the
# cervix relative to the vaginal axis.  Positive angles point anterior.
FLEXION_RANGES_DEG = {"AF": (25.0, 55.0), "RF": (-55.0, -25.0)}
VERSION_RANGES_DEG = {"AV": (12.0, 38.0), "RV": (-38.0, -12.0)}


@dataclass
class PhantomSpec:
    orientation_class: str
    size: int = 32
    slices: int = 1
    spacing_mm: float = 1.0
    noise_sigma: float = 0.02
    texture_amp: float = 0.06
    bias_amp: float = 0.0
    seed: int = 0
    field_strength_tesla: float | None = None
    sequence: str | None = None
    extra_keywords: list[str] = dc_field(default_factory=lambda: ["sagittal", "pelvis"])

    def __post_init__(self):
        if self.orientation_class not in ORIENTATION_CLASSES:
            raise ValidationError(
                f"unknown orientation class {self.orientation_class!r}"
            )
        if self.size < 16:
            raise ValidationError("phantom size must be >= 16")
        if self.slices < 1:
            raise ValidationError("slices must be >= 1")
        if self.noise_sigma < 0 or self.texture_amp < 0 or self.bias_amp < 0:
            raise ValidationError("amplitudes must be >= 0")


def _capsule_mask(xx, yy, a, b, radius):
    """Points within `radius` of the segment a->b (normalised coords)."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    if denom < 1e-12:
        t = np.zeros_like(xx)
    else:
        t = np.clip(((xx - ax) * dx + (yy - ay) * dy) / denom, 0.0, 1.0)
    px = ax + t * dx
    py = ay + t * dy
    return (xx - px) ** 2 + (yy - py) ** 2 <= radius**2


def _ellipse_mask(xx, yy, cx, cy, rx, ry):
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _smooth_noise(rng, shape, sigma_px: float = 2.0):
    """Gaussian-filtered white noise, unit std, via separable convolution."""
    k = int(max(3, 2 * round(3 * sigma_px) + 1))
    xs = np.arange(k) - k // 2
    kernel = np.exp(-0.5 * (xs / sigma_px) ** 2)
    kernel /= kernel.sum()
    noise = rng.standard_normal(shape)
    for ax in range(noise.ndim):
        noise = np.apply_along_axis(lambda m: np.convolve(m, kernel, mode="same"), ax, noise)
    std = noise.std()
    return noise / std if std > 0 else noise


def _dir(angle_deg: float) -> tuple[float, float]:
    """Unit vector tilted `angle_deg` anterior (+x) from superior (-y)."""
    a = math.radians(angle_deg)
    return math.sin(a), -math.cos(a)


def sample_angles(orientation_class: str, rng) -> tuple[float, float]:
    flex_key, vers_key = orientation_class.split("&")
    flo, fhi = FLEXION_RANGES_DEG[flex_key]
    vlo, vhi = VERSION_RANGES_DEG[vers_key]
    return float(rng.uniform(flo, fhi)), float(rng.uniform(vlo, vhi))


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, Volume, ConditionSpec]:
    """Render one phantom; returns (image volume, uterus mask, condition)."""
    rng = rng_from(spec.seed, "phantom", spec.orientation_class)
    n = spec.size
    flexion, version = sample_angles(spec.orientation_class, rng)

    field = spec.field_strength_tesla
    if field is None:
        field = float(FIELD_STRENGTHS[rng.integers(len(FIELD_STRENGTHS))])
    seq = spec.sequence
    if seq is None:
        seq = SEQUENCES[rng.integers(len(SEQUENCES))]

    # geometry jitter
    apex = (0.47 + rng.uniform(-0.02, 0.02), 0.70 + rng.uniform(-0.02, 0.02))
    cervix_len = 0.14 + rng.uniform(-0.015, 0.015)
    cervix_r = 0.045 + rng.uniform(-0.005, 0.005)
    body_len = 0.26 + rng.uniform(-0.03, 0.03)
    body_r = 0.085 + rng.uniform(-0.008, 0.008)
    bladder_c = (0.70 + rng.uniform(-0.03, 0.03), 0.77 + rng.uniform(-0.02, 0.02))
    bladder_r = (0.15 + rng.uniform(-0.02, 0.02), 0.10 + rng.uniform(-0.015, 0.015))
    rectum_c = (0.20 + rng.uniform(-0.02, 0.02), 0.76 + rng.uniform(-0.02, 0.02))
    rectum_r = (0.08 + rng.uniform(-0.01, 0.01), 0.065 + rng.uniform(-0.01, 0.01))

    dir_cx = _dir(version)
    os_pt = (apex[0] + cervix_len * dir_cx[0], apex[1] + cervix_len * dir_cx[1])
    dir_body = _dir(version + flexion)
    fundus = (os_pt[0] + body_len * dir_body[0], os_pt[1] + body_len * dir_body[1])

    # T2-ish intensity levels; HASTE renders fluid a little brighter
    fluid = 0.92 if seq == "TSE" else 0.97
    levels = {"background": 0.40, "spine": 0.14, "rectum": 0.24,
              "bladder": fluid, "myometrium": 0.55, "cervix": 0.50,
              "endometrium": 0.85}

    axis = np.linspace(0.0, 1.0, n)
    xx, yy = np.meshgrid(axis, axis, indexing="xy")  # xx: anterior, yy: inferior

    def render_slice(radius_scale: float) -> tuple[np.ndarray, np.ndarray]:
        img = np.full((n, n), levels["background"])
        img[:, : max(1, int(0.10 * n))] = levels["spine"]
        img[_ellipse_mask(xx, yy, *rectum_c, rectum_r[0] * radius_scale, rectum_r[1] * radius_scale)] = levels["rectum"]
        img[_ellipse_mask(xx, yy, *bladder_c, bladder_r[0] * radius_scale, bladder_r[1] * radius_scale)] = levels["bladder"]
        cervix = _capsule_mask(xx, yy, apex, os_pt, cervix_r * radius_scale)
        body = _capsule_mask(xx, yy, os_pt, fundus, body_r * radius_scale)
        img[cervix] = levels["cervix"]
        img[body] = levels["myometrium"]
        inner_a = (os_pt[0] + 0.18 * body_len * dir_body[0], os_pt[1] + 0.18 * body_len * dir_body[1])
        inner_b = (os_pt[0] + 0.80 * body_len * dir_body[0], os_pt[1] + 0.80 * body_len * dir_body[1])
        stripe = _capsule_mask(xx, yy, inner_a, inner_b, 0.35 * body_r * radius_scale)
        img[stripe] = levels["endometrium"]
        return img, (cervix | body)

    if spec.slices == 1:
        img, mask = render_slice(1.0)
        shape = (n, n)
        spacing = (spec.spacing_mm, spec.spacing_mm)
    else:
        planes, masks = [], []
        half = (spec.slices - 1) / 2.0
        for s in range(spec.slices):
            z = 0.0 if half == 0 else (s - half) / max(half, 1.0)
            scale = math.sqrt(max(1.0 - (0.85 * z) ** 2, 0.05))
            p, m = render_slice(scale)
            planes.append(p)
            masks.append(m)
        img = np.stack(planes, axis=-1)
        mask = np.stack(masks, axis=-1)
        shape = (n, n, spec.slices)
        spacing = (spec.spacing_mm, spec.spacing_mm, spec.spacing_mm)

    if spec.texture_amp > 0:
        img = img * (1.0 + spec.texture_amp * _smooth_noise(rng, shape))
    if spec.bias_amp > 0:
        gx = (xx - 0.5) * rng.uniform(0.5, 1.0) + (yy - 0.5) * rng.uniform(-1.0, 1.0)
        ramp = gx if img.ndim == 2 else gx[..., None]
        img = img * np.exp(spec.bias_amp * ramp)
    # weaker field -> noisier acquisition
    sigma = spec.noise_sigma * math.sqrt(1.5 / field)
    if sigma > 0:
        img = img + sigma * rng.standard_normal(shape)

    cond = ConditionSpec(
        orientation_class=spec.orientation_class,
        field_strength_tesla=field,
        sequence=seq,
        extra_keywords=list(spec.extra_keywords),
    )
    meta = {
        "flexion_deg": flexion,
        "version_deg": version,
        "condition": cond.to_dict(),
        "seed": spec.seed,
    }
    vol = Volume(data=img.astype(np.float32), spacing_mm=spacing, meta=meta)
    mask_vol = Volume(data=mask.astype(np.uint8), spacing_mm=spacing, meta={"kind": "uterus_mask"})
    return vol, mask_vol, cond


def mask_principal_tilt(mask: np.ndarray) -> float:
    """Signed tilt (degrees, anterior positive) of the mask's principal axis.

    Moment-based: the leading eigenvector of the coordinate covariance,
    oriented to point superior, measured against the vertical.
    """
    ys, xs = np.nonzero(np.asarray(mask, dtype=bool))
    if xs.size < 2:
        raise ValidationError("mask too small for moment analysis")
    pts = np.stack([xs - xs.mean(), ys - ys.mean()])
    cov = pts @ pts.T / xs.size
    evals, evecs = np.linalg.eigh(cov)
    v = evecs[:, int(np.argmax(evals))]
    if v[1] > 0:  # make it point superior (negative row direction)
        v = -v
    return math.degrees(math.atan2(v[0], -v[1]))


DEFAULT_SPLITS = (("train", 0.70), ("val", 0.15), ("test", 0.15))


def make_phantom_dataset(out_dir, n_per_class: int, *, size: int = 32, seed: int = 0,
                         noise_sigma: float = 0.02, texture_amp: float = 0.06,
                         bias_amp: float = 0.0, spacing_mm: float = 1.0,
                         roi: bool = False, roi_margin: float = 0.25,
                         znorm: bool = True, splits=DEFAULT_SPLITS,
                         save_masks: bool = False) -> Manifest:
    """Generate a balanced phantom dataset on disk and return its manifest.

    With `roi=True`, phantoms are rendered at 1.5x the target size, cropped
    to the uterus bounding box plus a margin, and resized back to `size`.
    """
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    split_names = [name for name, _ in splits]
    fractions = np.array([frac for _, frac in splits], dtype=np.float64)
    if not math.isclose(fractions.sum(), 1.0, abs_tol=1e-9):
        raise ValidationError("split fractions must sum to 1")
    bounds = np.floor(np.cumsum(fractions) * n_per_class + 1e-9).astype(int)

    render_size = int(round(size * 1.5)) if roi else size
    for cls in ORIENTATION_CLASSES:
        for i in range(n_per_class):
            sample_seed = derive_seed(seed, "phantom-dataset", cls, str(i))
            spec = PhantomSpec(
                orientation_class=cls, size=render_size, seed=sample_seed,
                noise_sigma=noise_sigma, texture_amp=texture_amp,
                bias_amp=bias_amp, spacing_mm=spacing_mm,
            )
            vol, mask, cond = generate_phantom(spec)
            if roi:
                cropped = extract_roi(vol, mask, roi_margin)
                vol = resize_to(cropped, (size, size))
            if znorm:
                vol = znormalize(vol)
            split = split_names[int(np.searchsorted(bounds, i, side="right"))]
            sample_id = f"{cls.replace('&', '')}_{i:04d}"
            save_volume(vol, out_dir / sample_id)
            if save_masks and not roi:
                save_volume(mask, out_dir / f"{sample_id}_mask")
            records.append(
                ManifestRecord(
                    id=sample_id,
                    path=f"{sample_id}.vol",
                    orientation_class=cls,
                    field_strength=cond.field_strength_tesla,
                    sequence=cond.sequence,
                    split=split,
                    spacing_mm=vol.spacing_mm,
                    extra_keywords=list(cond.extra_keywords),
                )
            )
    manifest = Manifest(records, root=out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
