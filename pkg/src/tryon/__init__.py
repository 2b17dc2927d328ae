"""Zero-shot garment transfer: deep-feature MLS registration followed by
masked extended-attention consistent inpainting, over a pluggable denoiser
backend."""

from .attention import (
    AttentionBundle,
    downsample_mask,
    enhance_contrast,
    masked_extended_attention,
    self_attention,
)
from .backend import BackendDescriptor, DenoiserBackend, ToyBackend, ToyWeights
from .diffusion import (
    GuidanceConfig,
    LatentState,
    NoiseSchedule,
    cfg_combine,
    ddim_step,
    forward_noise,
    gaussian_field,
)
from .features import (
    CorrespondenceSet,
    FeatureMap,
    extract_features,
    match_nn,
    reject_outliers,
    to_control_points,
)
from .inpaint import consistent_inpaint_loop, double_mask_inpaint, stroke_init
from .mls import (
    ControlPointSet,
    DeformationField,
    apply_backward_warp,
    build_deformation_field,
    mls_affine_eval,
    mls_weights,
)
from .pipeline import RegistrationResult, TryOnJob, compute_crop, run_registration, run_try_on

__version__ = "0.1.0"
