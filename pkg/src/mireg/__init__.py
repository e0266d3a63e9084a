"""Deformable 3-D registration toolkit.

Corrects geometric distortion by optimizing a dense displacement field under
a differentiable Parzen-window mutual-information loss with a smoothness
regularizer.  Includes a synthetic EPI-style distortion simulator and the
usual evaluation metrics (binned MI, NCC, SSIM).
"""

from .volume import (
    DisplacementField,
    FormatError,
    NormalizationSpec,
    Volume3D,
    downsample,
    normalize_intensities,
    read_volume,
    write_volume,
)
from .losses import (
    HistogramPair,
    LossValueGrad,
    ParzenConfig,
    dmi_loss,
    gaussian_window,
    mse_loss,
    ncc_loss,
    parzen_histogram_pair,
    parzen_joint,
    parzen_marginal,
    smoothness_loss,
    total_loss,
)
from .warp import sample_points, trilinear_sample, warp, warp_with_jacobian
from .registration import RegistrationConfig, RegistrationReport, register, upsample_field
from .simeval import (
    DistortionSpec,
    invert_field,
    make_inter_modality_pair,
    mean_endpoint_error,
    metric_mi,
    metric_ncc,
    metric_ssim,
    nested_ellipsoid_phantom,
    simulate_distortion,
)

__version__ = "0.1.0"
