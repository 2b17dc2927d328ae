"""Runtimes the server can wrap.

StubRuntime is a small deterministic network with the same interface shape as
a latent-diffusion pipeline: an 8x latent codec, two hookable self-attention
layers whose canonical token grids are 32x32 and 64x64, feature capture on
the second decoder-side layer, inpainting conditioning, and server-side
masked-extended-attention substitution from masks plus reference keys/values.

A real pretrained runtime can be wrapped by implementing the same five
methods; see DiffusersRuntime at the bottom for the optional thin wrapper.
"""

from __future__ import annotations

from typing import Optional

import numpy as np


class RuntimeError_(Exception):
    """Model-level failure reported as an error reply, connection kept alive."""


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    ex = np.exp(logits - m)
    return ex / ex.sum(axis=-1, keepdims=True)


def masked_extended_attention(q, k, v, ref_k, ref_v, m_p, m_g, beta):
    """Target queries over [target keys ; reference keys], reference columns
    hard-masked to (m_p row) AND (m_g column); contrast enhancement
    (A - mean) * beta + mean on foreground rows, clamped and renormalized."""
    n_keys = k.shape[1]
    scale = 1.0 / np.sqrt(q.shape[-1])
    l_self = np.einsum("hid,hjd->hij", q, k) * scale
    l_ref = np.einsum("hid,hjd->hij", q, ref_k) * scale
    allowed = m_p[:, None] & m_g[None, :]
    l_ref = np.where(allowed[None], l_ref, -np.inf)
    a = _softmax_rows(np.concatenate([l_self, l_ref], axis=-1))
    if beta != 1.0 and m_p.any() and m_g.any():
        mu = a.mean(axis=-1, keepdims=True)
        e = np.maximum((a - mu) * beta + mu, 0.0)
        col = np.concatenate([np.ones(n_keys, bool), m_g])
        e = np.where(col, e, 0.0)
        e /= e.sum(axis=-1, keepdims=True)
        a = np.where(m_p[None, :, None], e, a)
    return np.einsum("hij,hjd->hid", a, np.concatenate([v, ref_v], axis=1))


class StubRuntime:
    """Deterministic stand-in for a pretrained latent-diffusion runtime."""

    SCALE = 8
    CHANNELS = 4
    DIM = 12
    IMAGE_SIZE = 512
    NUM_STEPS = 50
    # layer id -> token-grid stride in latent cells at the canonical size:
    # up1 pools 2x2 (32x32 tokens at 512), up2 runs at full grid (64x64)
    HOOK_STRIDES = {"up1": 2, "up2": 1}
    CAPTURE_LAYER = "up1"

    def __init__(self, seed: int = 0x5DAD):
        rng = np.random.default_rng(seed)
        c, d = self.CHANNELS, self.DIM

        def w(*shape):
            return rng.uniform(-0.05, 0.05, shape)

        self.w_embed, self.b_embed = w(c, d), w(d)
        self.w_cond, self.w_time, self.w_mask = w(d), w(d), w(d)
        self.attn = {name: (w(d, d), w(d, d), w(d, d)) for name in self.HOOK_STRIDES}
        self.w_out, self.b_out, self.w_skip = w(d, c), w(c), w(c, c)

    # -- interface the server speaks ---------------------------------------

    def describe_meta(self) -> dict:
        lat = self.IMAGE_SIZE // self.SCALE
        return {
            "latent_scale": self.SCALE,
            "latent_channels": self.CHANNELS,
            "capture_layers": {self.CAPTURE_LAYER:
                               self.SCALE * self.HOOK_STRIDES[self.CAPTURE_LAYER]},
            "hook_layers": {name: [lat // s, lat // s]
                            for name, s in self.HOOK_STRIDES.items()},
            "num_steps": self.NUM_STEPS,
            "default_capture_layer": self.CAPTURE_LAYER,
            "image_size": self.IMAGE_SIZE,
            "inpaint_conditioning": True,
        }

    def alpha_bar(self) -> np.ndarray:
        t = np.arange(self.NUM_STEPS + 1, dtype=np.float64) / self.NUM_STEPS
        return 1.0 + (0.01 - 1.0) * t

    def encode(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise RuntimeError_(f"expected (H, W, 3) image, got {img.shape}")
        h, w = img.shape[:2]
        s = self.SCALE
        if h % s or w % s:
            raise RuntimeError_(f"image dims {h}x{w} not divisible by scale {s}")
        pooled = img.reshape(h // s, s, w // s, s, 3).mean(axis=(1, 3))
        return np.concatenate([pooled, pooled.mean(axis=2, keepdims=True)], axis=2)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64)
        if z.ndim != 3 or z.shape[2] != self.CHANNELS:
            raise RuntimeError_(f"expected (h, w, {self.CHANNELS}) latent, got {z.shape}")
        return np.repeat(np.repeat(z[:, :, :3], self.SCALE, axis=0), self.SCALE, axis=1)

    def predict(self, z: np.ndarray, t: int, prompt: Optional[str],
                mask_context: Optional[np.ndarray], mea: Optional[dict],
                capture: list) -> tuple:
        """Returns (eps, features {layer: array}, bundles {layer: (q,k,v,grid)}).

        mea, if given: {"beta": float, "layers": {layer: (m_p, m_g, ref_k,
        ref_v)}} with token-resolution boolean masks.
        """
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 3 or z.shape[2] != self.CHANNELS:
            raise RuntimeError_(f"bad latent shape {z.shape}")
        h, w = z.shape[:2]
        for layer in capture:
            if layer not in self.HOOK_STRIDES:
                raise RuntimeError_(f"unknown capture layer {layer!r}")

        f = z.reshape(-1, self.CHANNELS) @ self.w_embed + self.b_embed
        f = f + (t / self.NUM_STEPS) * self.w_time
        if prompt is not None:
            # deterministic scalar conditioning from the prompt text
            f = f + (sum(prompt.encode("utf-8")) % 997 / 997.0) * self.w_cond
        if mask_context is not None:
            m = np.asarray(mask_context, dtype=np.float64)
            if m.shape != (h, w):
                raise RuntimeError_(f"mask_context shape {m.shape} != latent {(h, w)}")
            f = f + m.reshape(-1, 1) * self.w_mask

        features, bundles = {}, {}
        x = f.reshape(h, w, self.DIM)
        for name in ("up1", "up2"):  # decoder-side order
            stride = self.HOOK_STRIDES[name]
            if h % stride or w % stride:
                raise RuntimeError_(f"latent {h}x{w} incompatible with layer {name}")
            gh, gw = h // stride, w // stride
            tok = x.reshape(gh, stride, gw, stride, self.DIM).mean(axis=(1, 3))
            if name == self.CAPTURE_LAYER and name in capture:
                features[name] = tok.copy()
            wq, wk, wv = self.attn[name]
            flat = tok.reshape(-1, self.DIM)
            q, k, v = (flat @ wq)[None], (flat @ wk)[None], (flat @ wv)[None]
            if name in capture:
                bundles[name] = (q, k, v, (gh, gw))
            entry = (mea or {}).get("layers", {}).get(name)
            if entry is not None:
                m_p, m_g, ref_k, ref_v = entry
                if m_p.size != q.shape[1] or m_g.size != ref_k.shape[1]:
                    raise RuntimeError_(f"MEA mask sizes do not match layer {name}")
                out = masked_extended_attention(q, k, v, ref_k, ref_v,
                                                m_p, m_g, mea["beta"])
            else:
                a = _softmax_rows(np.einsum("hid,hjd->hij", q, k)
                                  / np.sqrt(self.DIM))
                out = np.einsum("hij,hjd->hid", a, v)
            out = out[0].reshape(gh, gw, self.DIM)
            x = x + np.repeat(np.repeat(out, stride, axis=0), stride, axis=1)

        eps = (x.reshape(-1, self.DIM) @ self.w_out + self.b_out
               + z.reshape(-1, self.CHANNELS) @ self.w_skip).reshape(z.shape)
        return eps, features, bundles


class DiffusersRuntime:
    """Optional thin wrapper over a real pretrained pipeline.

    Imported lazily; untestable offline and deliberately unexercised by the
    test suite. Implements the same five-method interface as StubRuntime.
    """

    def __init__(self, model_id: str = "stabilityai/stable-diffusion-2-inpainting"):
        try:
            import torch  # noqa: F401
            from diffusers import StableDiffusionInpaintPipeline
        except ImportError as exc:  # pragma: no cover
            raise RuntimeError_(f"diffusers runtime unavailable: {exc}")
        self.pipe = StableDiffusionInpaintPipeline.from_pretrained(model_id)  # pragma: no cover

    # pragma: no cover - requires downloaded weights; interface sketch only
