"""End-to-end orchestration: registration (warp + fringe fill) followed by
consistent inpainting, with crop-and-paste handling for arbitrary inputs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .backend import DenoiserBackend
from .diffusion import GuidanceConfig
from .errors import ArgumentError
from .features import extract_features, match_nn, reject_outliers, to_control_points
from .inpaint import (
    background_trajectory,
    child_seed,
    consistent_inpaint_loop,
    double_mask_inpaint,
    round_half_up,
    stroke_init,
)
from .mls import ControlPointSet, apply_backward_warp, build_deformation_field

# fringe dilation radius at a 512 px reference size
FRINGE_DILATION_RADIUS_512 = 8
CROP_MARGIN = 0.15


@dataclass
class TryOnJob:
    """Inputs for one garment transfer."""

    person: np.ndarray         # (H_p, W_p, 3) in [0, 1]
    garment: np.ndarray        # (H_g, W_g, 3) in [0, 1]
    person_mask: np.ndarray    # (H_p, W_p) bool, region to replace
    garment_mask: np.ndarray   # (H_g, W_g) bool, garment region
    prompt: Optional[str] = None
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0
    t_feat_frac: float = 0.26
    mls_alpha: float = 1.0
    outlier_k: float = 3.0
    max_control_points: int = 128

    def __post_init__(self):
        self.person = np.asarray(self.person, dtype=np.float64)
        self.garment = np.asarray(self.garment, dtype=np.float64)
        self.person_mask = np.asarray(self.person_mask, bool)
        self.garment_mask = np.asarray(self.garment_mask, bool)
        for img, m, name in ((self.person, self.person_mask, "person"),
                             (self.garment, self.garment_mask, "garment")):
            if img.ndim != 3 or img.shape[2] != 3:
                raise ArgumentError(f"{name} image must be (H, W, 3)")
            if m.shape != img.shape[:2]:
                raise ArgumentError(f"{name} mask shape {m.shape} != image {img.shape[:2]}")
            if not m.any():
                raise ArgumentError(f"{name} mask is empty")
        if not 0.0 < self.t_feat_frac <= 1.0:
            raise ArgumentError("t_feat_frac must be in (0, 1]")


@dataclass
class RegistrationResult:
    """Outputs of the registration stage."""

    warped_garment: np.ndarray
    coverage: np.ndarray
    fringe: np.ndarray
    dilated_fringe: np.ndarray
    registered: np.ndarray
    control_points: ControlPointSet

    def __post_init__(self):
        if (self.fringe & ~self.dilated_fringe).any():
            raise ArgumentError("fringe must be contained in its dilation")


def compute_crop(mask: np.ndarray, image_shape, scale: int) -> tuple[int, int, int]:
    """Square processing window around a mask.

    Tight bbox, 15% margin per side, side rounded up to a multiple of the
    backend scale, centered on the bbox and clamped into the image. Returns
    (x0, y0, side).
    """
    mask = np.asarray(mask, bool)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ArgumentError("mask is empty")
    h_img, w_img = image_shape[:2]
    y0, y1 = ys.min(), ys.max()
    x0, x1 = xs.min(), xs.max()
    bw, bh = x1 - x0 + 1, y1 - y0 + 1
    side_f = max((1 + 2 * CROP_MARGIN) * bw, (1 + 2 * CROP_MARGIN) * bh)
    side = int(math.ceil(side_f / scale)) * scale
    side = min(side, (h_img // scale) * scale, (w_img // scale) * scale)
    cx = (x0 + x1 + 1) / 2.0
    cy = (y0 + y1 + 1) / 2.0
    sx = int(np.clip(round_half_up(cx - side / 2.0), 0, w_img - side))
    sy = int(np.clip(round_half_up(cy - side / 2.0), 0, h_img - side))
    return sx, sy, side


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def dilate_fringe(fringe: np.ndarray) -> np.ndarray:
    """Disk dilation with radius proportional to image size (8 px at 512)."""
    size = max(fringe.shape)
    radius = max(1, round_half_up(FRINGE_DILATION_RADIUS_512 * size / 512.0))
    return ndimage.binary_dilation(fringe, structure=_disk(radius))


def run_registration(job: TryOnJob, backend: DenoiserBackend) -> RegistrationResult:
    """Warp the garment onto the person and fill the leftover fringes."""
    desc = backend.describe()
    t_feat = round_half_up(job.t_feat_frac * backend.schedule().num_steps)

    feat_g = extract_features(job.garment, t_feat, backend, seed=job.seed, image_id="garment")
    feat_p = extract_features(job.person, t_feat, backend, seed=job.seed, image_id="person")
    matches = match_nn(feat_g, job.garment_mask, feat_p, job.person_mask)
    matches = reject_outliers(matches, k=job.outlier_k)
    cps = to_control_points(matches, max_points=job.max_control_points)

    h_p, w_p = job.person.shape[:2]
    field_ = build_deformation_field(cps, w_p, h_p, alpha=job.mls_alpha)
    warped, coverage = apply_backward_warp(job.garment, job.garment_mask, field_)

    paste = coverage & job.person_mask
    composite = job.person.copy()
    composite[paste] = warped[paste]

    fringe = job.person_mask & ~coverage
    dilated = dilate_fringe(fringe) if fringe.any() else fringe.copy()

    registered = composite
    if fringe.any():
        schedule = backend.schedule()
        z0 = backend.encode(composite)
        z_bg = background_trajectory(z0, schedule, child_seed(job.seed, "fringe"))
        filled = double_mask_inpaint(z_bg, fringe, dilated, backend, job.prompt, schedule)
        registered = np.where(fringe[..., None], filled, composite)

    return RegistrationResult(
        warped_garment=warped,
        coverage=coverage,
        fringe=fringe,
        dilated_fringe=dilated,
        registered=registered,
        control_points=cps,
    )


def run_try_on(job: TryOnJob, backend: DenoiserBackend,
               intermediates: Optional[dict] = None) -> np.ndarray:
    """Full pipeline: crop, register, consistent-inpaint, paste back.

    Pixels outside the person mask equal the input bit-exactly. If
    `intermediates` is a dict it is filled with stage artifacts (registration
    images, masks, attention statistics).
    """
    desc = backend.describe()
    # the crop must keep the latent divisible by every hook layer's token
    # stride, not just land on a whole latent cell
    strides = [desc.token_stride(layer) for layer in desc.hook_layers]
    scale = desc.latent_scale * math.lcm(*strides) if strides else desc.latent_scale

    px, py, side_p = compute_crop(job.person_mask, job.person.shape, scale)
    gx, gy, side_g = compute_crop(job.garment_mask, job.garment.shape, scale)
    person_c = job.person[py:py + side_p, px:px + side_p]
    pmask_c = job.person_mask[py:py + side_p, px:px + side_p]
    garment_c = job.garment[gy:gy + side_g, gx:gx + side_g]
    gmask_c = job.garment_mask[gy:gy + side_g, gx:gx + side_g]

    crop_job = TryOnJob(
        person=person_c, garment=garment_c, person_mask=pmask_c, garment_mask=gmask_c,
        prompt=job.prompt, guidance=job.guidance, seed=job.seed,
        t_feat_frac=job.t_feat_frac, mls_alpha=job.mls_alpha,
        outlier_k=job.outlier_k, max_control_points=job.max_control_points)
    reg = run_registration(crop_job, backend)

    schedule = backend.schedule()
    start = stroke_init(reg.registered, job.guidance, schedule, backend, job.seed)
    ref_latent = backend.encode(garment_c)
    z0_registered = backend.encode(reg.registered)
    attn_stats: Optional[dict] = {} if intermediates is not None else None
    out_crop = consistent_inpaint_loop(
        start, ref_latent, pmask_c, gmask_c, job.prompt, job.guidance, backend,
        z0_registered=z0_registered, seed=job.seed, attn_stats=attn_stats)
    out_crop = np.clip(out_crop, 0.0, 1.0)

    result = job.person.copy()
    region = result[py:py + side_p, px:px + side_p]
    region[pmask_c] = out_crop[pmask_c]
    result[py:py + side_p, px:px + side_p] = region

    if intermediates is not None:
        intermediates.update({
            "warped_garment": reg.warped_garment,
            "coverage": reg.coverage,
            "fringe": reg.fringe,
            "dilated_fringe": reg.dilated_fringe,
            "registered": reg.registered,
            "control_points": reg.control_points,
            "crop": (px, py, side_p),
            "attention": attn_stats or {},
        })
    return result
