"""medsynth: desk-scale conditioned diffusion models for medical image synthesis.

Train 2D/3D denoising diffusion models and latent diffusion models with
class/text conditioning, filter generated samples for privacy, score them
with distributional metrics, and benchmark synthetic-data augmentation on a
downstream classification task.  Everything runs on CPU with numpy and is
verifiable end to end on a procedural phantom dataset.
"""

__version__ = "0.1.0"

from .errors import DivergenceError, FingerprintError, MedsynthError, ValidationError
from .schedule import (
    NoiseSchedule,
    forward_marginal,
    forward_marginal_batch,
    make_cosine_schedule,
    make_linear_schedule,
    make_schedule,
    recover_x0,
)
from .volume import Volume, load_nifti, load_volume, save_volume, write_png
from .manifest import Manifest, ManifestRecord, expand_slices

__all__ = [
    "__version__",
    "MedsynthError",
    "ValidationError",
    "DivergenceError",
    "FingerprintError",
    "NoiseSchedule",
    "make_linear_schedule",
    "make_cosine_schedule",
    "make_schedule",
    "forward_marginal",
    "forward_marginal_batch",
    "recover_x0",
    "Volume",
    "save_volume",
    "load_volume",
    "load_nifti",
    "write_png",
    "Manifest",
    "ManifestRecord",
    "expand_slices",
]
