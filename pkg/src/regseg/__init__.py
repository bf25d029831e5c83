"""Joint deformable image registration and contour propagation with adversarial feedback."""

__version__ = "0.1.0"

from .volgrid import (Mask, Segmentation, Volume, load_segmentation, load_volume,
                      rescale_intensity, resample_isotropic, save_segmentation,
                      save_volume, torso_mask)
from .warpfield import (DVF, jacobian_determinant, load_dvf, save_dvf, warp_labels,
                        warp_trilinear, zero_dvf)

__all__ = [
    "__version__",
    "Volume", "Segmentation", "Mask", "DVF",
    "load_volume", "save_volume", "load_segmentation", "save_segmentation",
    "rescale_intensity", "resample_isotropic", "torso_mask",
    "warp_trilinear", "warp_labels", "jacobian_determinant",
    "load_dvf", "save_dvf", "zero_dvf",
]
