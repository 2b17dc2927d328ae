"""Denoiser backend interface and the deterministic toy implementation.

A backend owns the latent codec, the noise predictor with feature capture
and attention hooks, prompt embedding, and its noise schedule. The toy
backend is a tiny fixed-weight network whose parameters are generated by a
pure-integer splitmix64 PRNG, so runs are bit-identical across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, runtime_checkable

import numpy as np

from .attention import AttentionBundle, self_attention
from .diffusion import NoiseSchedule
from .errors import ArgumentError, CapabilityError

# hook(layer_id, bundle) -> (heads, N, d) output, or None to keep stock attention
AttnHook = Callable[[str, AttentionBundle], Optional[np.ndarray]]


@dataclass(frozen=True)
class BackendDescriptor:
    latent_scale: int                      # image px per latent cell
    latent_channels: int
    capture_layers: dict                   # layer id -> stride (px per feature cell)
    hook_layers: dict                      # layer id -> token grid (h, w) at canonical size
    num_steps: int
    default_capture_layer: str
    image_size: int                        # canonical square input the grids refer to
    inpaint_conditioning: bool = False     # accepts a mask-context channel
    supports_attn_hook: bool = False       # accepts in-process hook callables

    def __post_init__(self):
        if self.latent_scale < 1:
            raise ArgumentError("latent_scale must be >= 1")
        if not self.capture_layers or not self.hook_layers:
            raise ArgumentError("backend must declare capture and hook layers")

    def token_stride(self, layer: str) -> int:
        """Latent cells per attention token along each axis for a hook layer."""
        gh, gw = self.hook_layers[layer]
        lat = self.image_size // self.latent_scale
        if lat % gh or gh != gw:
            raise ArgumentError(f"hook grid {gh}x{gw} incompatible with latent {lat}")
        return lat // gh


@dataclass(frozen=True)
class PredictOutput:
    eps: np.ndarray
    features: dict          # layer id -> (h_f, w_f, D)
    bundles: dict           # layer id -> AttentionBundle


@dataclass(frozen=True)
class MeaRequest:
    """Structured masked-extended-attention substitution.

    Serializable (unlike a hook callable), so it can cross the IPC wire:
    per hook layer, the token masks plus the reference keys/values captured
    at the same timestep.
    """

    beta: float
    layers: dict            # layer id -> (m_p tokens, m_g tokens, ref AttentionBundle)


@runtime_checkable
class DenoiserBackend(Protocol):
    def describe(self) -> BackendDescriptor: ...
    def schedule(self) -> NoiseSchedule: ...
    def encode(self, image: np.ndarray) -> np.ndarray: ...
    def decode(self, latent: np.ndarray) -> np.ndarray: ...
    def embed_prompt(self, prompt: Optional[str]) -> np.ndarray: ...
    def predict_noise(self, z: np.ndarray, t: int, cond: np.ndarray, *,
                      mask_context: Optional[np.ndarray] = None,
                      attn_hook: Optional[AttnHook] = None,
                      mea: Optional[MeaRequest] = None,
                      capture: Optional[list] = None) -> PredictOutput: ...


# ---------------------------------------------------------------------------
# splitmix64 weight generation

_MASK64 = (1 << 64) - 1


def _splitmix64_stream(seed: int):
    state = seed & _MASK64
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        yield z ^ (z >> 31)


def _draw(stream, shape, lo=-0.05, hi=0.05) -> np.ndarray:
    """Next len(shape) values mapped u64 -> [0,1) -> [lo, hi)."""
    n = int(np.prod(shape))
    u = np.array([next(stream) for _ in range(n)], dtype=np.float64) / 2.0 ** 64
    return (lo + (hi - lo) * u).reshape(shape)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


@dataclass
class ToyWeights:
    """All toy-network parameters, derived deterministically from one seed."""

    seed: int
    hidden: int = 8

    def __post_init__(self):
        s = _splitmix64_stream(self.seed)
        c, d, e = ToyBackend.LATENT_CHANNELS, self.hidden, ToyBackend.EMBED_DIM
        self.w_embed = _draw(s, (c, d))
        self.b_embed = _draw(s, (d,))
        self.w_cond = _draw(s, (e, d))
        self.w_time = _draw(s, (d,))
        self.w_mask = _draw(s, (d,))
        self.w_q = _draw(s, (d, d))
        self.w_k = _draw(s, (d, d))
        self.w_v = _draw(s, (d, d))
        self.w_out = _draw(s, (d, c))
        self.b_out = _draw(s, (c,))
        self.w_skip = _draw(s, (c, c))


class ToyBackend:
    """Hermetic stand-in denoiser: exact pooling codec, a 3x3 averaging block,
    one genuine self-attention block at latent resolution, and a linear head.

    No learned quality whatsoever; it exists so the pipeline is executable
    and exactly reproducible end to end.
    """

    SCALE = 4
    LATENT_CHANNELS = 4
    EMBED_DIM = 8
    CAPTURE_LAYER = "dec2"
    HOOK_LAYER = "attn0"

    def __init__(self, image_size: int = 64, num_steps: int = 50, weight_seed: int = 0x7A11):
        if image_size % self.SCALE:
            raise ArgumentError(f"image_size must be divisible by {self.SCALE}")
        self.image_size = image_size
        self.weights = ToyWeights(weight_seed)
        self._schedule = NoiseSchedule.linear(num_steps)
        n = image_size // self.SCALE
        self._grid = (n, n)

    def describe(self) -> BackendDescriptor:
        return BackendDescriptor(
            latent_scale=self.SCALE,
            latent_channels=self.LATENT_CHANNELS,
            capture_layers={self.CAPTURE_LAYER: self.SCALE},
            hook_layers={self.HOOK_LAYER: self._grid},
            num_steps=self._schedule.num_steps,
            default_capture_layer=self.CAPTURE_LAYER,
            image_size=self.image_size,
            inpaint_conditioning=True,
            supports_attn_hook=True,
        )

    def schedule(self) -> NoiseSchedule:
        return self._schedule

    # -- codec --------------------------------------------------------------

    def encode(self, image: np.ndarray) -> np.ndarray:
        """4x area pooling of RGB, lifted with a mean channel."""
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ArgumentError(f"expected (H, W, 3) image, got {img.shape}")
        h, w = img.shape[:2]
        if h % self.SCALE or w % self.SCALE:
            raise ArgumentError(f"image dims {h}x{w} not divisible by scale {self.SCALE}")
        s = self.SCALE
        b = img.reshape(h // s, s, w // s, s, 3)
        # balanced pairwise sums keep block-constant inputs bit-exact
        q = (b[:, 0] + b[:, 1]) + (b[:, 2] + b[:, 3])
        pooled = ((q[:, :, 0] + q[:, :, 1]) + (q[:, :, 2] + q[:, :, 3])) / (s * s)
        lum = pooled.mean(axis=2, keepdims=True)
        return np.concatenate([pooled, lum], axis=2)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        """Pseudo-inverse of encode: replicate the RGB channels blockwise."""
        z = np.asarray(latent, dtype=np.float64)
        if z.ndim != 3 or z.shape[2] != self.LATENT_CHANNELS:
            raise ArgumentError(f"expected (h, w, {self.LATENT_CHANNELS}) latent, got {z.shape}")
        return np.repeat(np.repeat(z[:, :, :3], self.SCALE, axis=0), self.SCALE, axis=1)

    # -- conditioning -------------------------------------------------------

    def embed_prompt(self, prompt: Optional[str]) -> np.ndarray:
        """Seeded hash embedding; None means unconditioned (zero vector)."""
        if prompt is None:
            return np.zeros(self.EMBED_DIM)
        return _draw(_splitmix64_stream(fnv1a64(prompt)), (self.EMBED_DIM,), -1.0, 1.0)

    # -- denoiser -----------------------------------------------------------

    def predict_noise(self, z, t, cond, *, mask_context=None, attn_hook=None,
                      mea=None, capture=None) -> PredictOutput:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 3 or z.shape[2] != self.LATENT_CHANNELS:
            raise ArgumentError(f"bad latent shape {z.shape}")
        cond = np.zeros(self.EMBED_DIM) if cond is None else np.asarray(cond, dtype=np.float64)
        if cond.shape != (self.EMBED_DIM,):
            raise ArgumentError(f"conditioning must have shape ({self.EMBED_DIM},)")
        for layer in capture or []:
            if layer not in (self.CAPTURE_LAYER, self.HOOK_LAYER):
                raise CapabilityError(f"unknown capture layer {layer!r}")

        w = self.weights
        h_lat, w_lat = z.shape[:2]
        x = _box3(z).reshape(-1, self.LATENT_CHANNELS)
        f = x @ w.w_embed + w.b_embed + cond @ w.w_cond
        f = f + (t / self._schedule.num_steps) * w.w_time
        if mask_context is not None:
            m = np.asarray(mask_context, dtype=np.float64)
            if m.shape != (h_lat, w_lat):
                raise ArgumentError(f"mask_context shape {m.shape} != latent grid {(h_lat, w_lat)}")
            f = f + m.reshape(-1, 1) * w.w_mask

        if mea is not None:
            if attn_hook is not None:
                raise ArgumentError("pass either attn_hook or mea, not both")
            attn_hook = _mea_hook(mea)

        bundle = AttentionBundle(
            (f @ w.w_q)[None], (f @ w.w_k)[None], (f @ w.w_v)[None], (h_lat, w_lat))
        phi = None
        if attn_hook is not None:
            phi = attn_hook(self.HOOK_LAYER, bundle)
        if phi is None:
            phi = self_attention(bundle)[0]
        phi = np.asarray(phi)[0]  # single head

        eps = (phi @ w.w_out + w.b_out + x @ w.w_skip).reshape(z.shape)

        features, bundles = {}, {}
        for layer in capture or []:
            if layer == self.CAPTURE_LAYER:
                features[layer] = f.reshape(h_lat, w_lat, -1).copy()
            if layer == self.HOOK_LAYER:
                bundles[layer] = bundle
        return PredictOutput(eps, features, bundles)


def _mea_hook(mea: MeaRequest) -> AttnHook:
    from .attention import masked_extended_attention

    def hook(layer, bundle):
        entry = mea.layers.get(layer)
        if entry is None:
            return None
        m_p, m_g, ref = entry
        return masked_extended_attention(bundle, ref, m_p, m_g, beta=mea.beta)[0]

    return hook


def _box3(z: np.ndarray) -> np.ndarray:
    """3x3 box filter per channel with edge padding."""
    p = np.pad(z, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(z)
    for dy in range(3):
        for dx in range(3):
            out += p[dy:dy + z.shape[0], dx:dx + z.shape[1]]
    return out / 9.0
