"""Inpainting loops: double-mask fringe filling, stroke initialization, and
the three-pass guided loop with masked extended attention."""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from .attention import downsample_mask, masked_extended_attention
from .backend import DenoiserBackend, MeaRequest, fnv1a64
from .diffusion import (
    GuidanceConfig,
    LatentState,
    NoiseSchedule,
    cfg_combine,
    ddim_step,
    forward_noise,
    gaussian_field,
)
from .errors import ArgumentError

# on_step(t, z) observer, called after each blended update
StepCallback = Callable[[int, np.ndarray], None]


def child_seed(seed: int, tag: str) -> int:
    """Stable derived seed for an independent noise stream."""
    return (seed ^ fnv1a64(tag)) & 0x7FFFFFFFFFFFFFFF

def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def background_trajectory(z0: np.ndarray, schedule: NoiseSchedule, seed: int) -> np.ndarray:
    """(T+1, h, w, c) forward-noised states of a known latent, one shared
    noise field so the DDIM consistency identity holds between steps."""
    eps = gaussian_field(z0.shape, seed)
    return np.stack([forward_noise(z0, t, eps, schedule).z
                     for t in range(schedule.num_steps + 1)])


def stroke_init(registered: np.ndarray, g: GuidanceConfig, schedule: NoiseSchedule,
                backend: DenoiserBackend, seed: int) -> LatentState:
    """Encode the registered image and noise it to the stroke start step
    t_start = round(stroke_fraction * T), half-up."""
    z0 = backend.encode(registered)
    t_start = round_half_up(g.stroke_fraction * schedule.num_steps)
    eps = gaussian_field(z0.shape, seed)
    return forward_noise(z0, t_start, eps, schedule)


def double_mask_inpaint(z_bg: np.ndarray, thin: np.ndarray, dilated: np.ndarray,
                        backend: DenoiserBackend, prompt: Optional[str],
                        schedule: NoiseSchedule,
                        on_step: Optional[StepCallback] = None) -> np.ndarray:
    """Fill the thin fringe region against a fixed background trajectory.

    z_bg is the (T+1, h, w, c) background trajectory. The dilated mask
    conditions each noise prediction; only the thin region takes the
    predicted update, everything else is pinned to the background.
    """
    thin = np.asarray(thin, bool)
    dilated = np.asarray(dilated, bool)
    if (thin & ~dilated).any():
        raise ArgumentError("thin mask must be contained in the dilated mask")
    t_total = schedule.num_steps
    if z_bg.shape[0] != t_total + 1:
        raise ArgumentError(f"trajectory length {z_bg.shape[0]} != T+1 = {t_total + 1}")

    grid = z_bg.shape[1:3]
    thin_lat = downsample_mask(thin, grid, rule="any").reshape(grid).astype(np.float64)
    dil_lat = downsample_mask(dilated, grid, rule="any").reshape(grid).astype(np.float64)
    cond = backend.embed_prompt(prompt)

    z = z_bg[t_total].copy()
    for t in range(t_total, 0, -1):
        out = backend.predict_noise(z, t, cond, mask_context=dil_lat)
        z_pred = ddim_step(LatentState(z, t, schedule), out.eps).z
        z = thin_lat[..., None] * z_pred + (1.0 - thin_lat[..., None]) * z_bg[t - 1]
        if on_step is not None:
            on_step(t - 1, z)
    return backend.decode(z)


def consistent_inpaint_loop(start: LatentState, reference_latent: np.ndarray,
                            m_p: np.ndarray, m_g: np.ndarray, prompt: Optional[str],
                            g: GuidanceConfig, backend: DenoiserBackend, *,
                            z0_registered: np.ndarray, seed: int,
                            on_step: Optional[StepCallback] = None,
                            attn_stats: Optional[dict] = None) -> np.ndarray:
    """Denoise from the stroke state with three passes per step.

    Per step: an unconditioned base pass, a prompt-conditioned text pass, and
    a masked-extended-attention pass whose reference keys/values come from a
    capture pass on the forward-noised reference latent. Predictions combine
    via classifier-free guidance; the region outside the person mask is
    pinned to the registered image's background trajectory.

    attn_stats, if given, collects per-step mean attention mass on reference
    tokens under key "ref_mass_t{t}".
    """
    desc = backend.describe()
    schedule = start.schedule
    grid = z0_registered.shape[:2]
    m_p = np.asarray(m_p, bool)
    m_g = np.asarray(m_g, bool)
    m_p_lat = downsample_mask(m_p, grid, rule="majority").reshape(grid).astype(np.float64)

    eps_bg = gaussian_field(z0_registered.shape, seed)
    eps_ref = gaussian_field(reference_latent.shape, child_seed(seed, "reference"))
    cond_null = backend.embed_prompt(None)
    cond_text = backend.embed_prompt(prompt)
    hook_layers = list(desc.hook_layers)

    # token-resolution masks per hook layer, sized from the actual latents
    ref_grid_lat = reference_latent.shape[:2]
    tok_masks = {}
    for layer in hook_layers:
        stride = desc.token_stride(layer)
        tgt_grid = (grid[0] // stride, grid[1] // stride)
        ref_grid = (ref_grid_lat[0] // stride, ref_grid_lat[1] // stride)
        tok_masks[layer] = (
            downsample_mask(m_p, tgt_grid, rule="majority"),
            downsample_mask(m_g, ref_grid, rule="any"),
        )

    z = start.z.copy()
    for t in range(start.t, 0, -1):
        z_ref = forward_noise(reference_latent, t, eps_ref, schedule).z
        ref_bundles = backend.predict_noise(z_ref, t, cond_null, capture=hook_layers).bundles

        step_masses = []

        def hook(layer, bundle):
            ref = ref_bundles.get(layer)
            if ref is None:
                return None
            tok_p, tok_g = tok_masks[layer]
            out, a = masked_extended_attention(bundle, ref, tok_p, tok_g, beta=g.beta)
            if attn_stats is not None:
                step_masses.append(float(a[..., bundle.n_keys:].sum(axis=-1).mean()))
            return out

        eps_base = backend.predict_noise(z, t, cond_null).eps
        eps_text = backend.predict_noise(z, t, cond_text).eps
        if desc.supports_attn_hook:
            eps_mea = backend.predict_noise(z, t, cond_null, attn_hook=hook).eps
        else:
            req = MeaRequest(g.beta, {
                layer: (tok_masks[layer][0], tok_masks[layer][1], ref_bundles[layer])
                for layer in hook_layers if layer in ref_bundles})
            eps_mea = backend.predict_noise(z, t, cond_null, mea=req).eps
        eps = cfg_combine(eps_base, eps_mea, eps_text, g)

        z_pred = ddim_step(LatentState(z, t, schedule), eps).z
        z_bg_prev = forward_noise(z0_registered, t - 1, eps_bg, schedule).z
        z = m_p_lat[..., None] * z_pred + (1.0 - m_p_lat[..., None]) * z_bg_prev
        if attn_stats is not None and step_masses:
            attn_stats[f"ref_mass_t{t}"] = float(np.mean(step_masses))
        if on_step is not None:
            on_step(t - 1, z)
    return backend.decode(z)
