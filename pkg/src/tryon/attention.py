"""Attention math for the consistent-inpainting stage.

Plain self-attention, masked extended attention over concatenated
target+reference tokens, post-softmax contrast enhancement, and mask
downsampling to token grids. Tensors are (heads, N, d); attention maps are
(heads, N_q, N_k) row-stochastic matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError


@dataclass(frozen=True)
class AttentionBundle:
    """Per-layer Q/K/V for one image at one token grid."""

    q: np.ndarray  # (heads, N, d)
    k: np.ndarray
    v: np.ndarray
    grid: tuple[int, int]  # (h, w) with h*w == N

    def __post_init__(self):
        for name in ("q", "k", "v"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, arr)
        if (self.q.ndim != 3 or self.k.shape != self.v.shape
                or self.q.shape[0] != self.k.shape[0] or self.q.shape[2] != self.k.shape[2]):
            raise ArgumentError(f"Q/K/V must be (heads, N, d) with matching heads and d, got "
                                f"{self.q.shape}/{self.k.shape}/{self.v.shape}")
        h, w = self.grid
        if h * w != self.q.shape[1]:
            raise ArgumentError(f"grid {self.grid} does not match N={self.q.shape[1]}")
        if self.q.shape[2] <= 0:
            raise ArgumentError("key dimension must be positive")
        for name in ("q", "k", "v"):
            if not np.isfinite(getattr(self, name)).all():
                raise ArgumentError(f"{name} contains non-finite values")

    @property
    def heads(self) -> int:
        return self.q.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.q.shape[1]

    @property
    def n_keys(self) -> int:
        return self.k.shape[1]

    @property
    def dim(self) -> int:
        return self.q.shape[2]


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row softmax robust to -inf entries; a fully -inf row is undefined and
    never produced here (target columns are always live)."""
    m = np.max(logits, axis=-1, keepdims=True)
    ex = np.exp(logits - m)
    ex[~np.isfinite(logits)] = 0.0
    return ex / ex.sum(axis=-1, keepdims=True)


def self_attention(b: AttentionBundle) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product self-attention. Returns (output, attention map)."""
    logits = np.einsum("hid,hjd->hij", b.q, b.k) / np.sqrt(b.dim)
    a = _softmax_rows(logits)
    out = np.einsum("hij,hjd->hid", a, b.v)
    return out, a


def masked_extended_attention(target: AttentionBundle, reference: AttentionBundle,
                              m_p: np.ndarray, m_g: np.ndarray,
                              beta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Extended attention of target queries over concatenated target+reference
    keys, with reference columns gated per query.

    A background query (m_p false) sees only target columns. A foreground
    query additionally sees reference columns where m_g is true; everything
    else is hard-masked before the softmax, so disallowed reference tokens
    get exactly zero mass. beta != 1 applies contrast enhancement to the
    foreground rows.
    """
    if target.dim != reference.dim or target.heads != reference.heads:
        raise ArgumentError("target and reference bundles must share heads and key dim")
    m_p = np.asarray(m_p, dtype=bool).ravel()
    m_g = np.asarray(m_g, dtype=bool).ravel()
    if m_p.size != target.n_tokens:
        raise ArgumentError(f"m_p length {m_p.size} != target tokens {target.n_tokens}")
    if m_g.size != reference.n_keys:
        raise ArgumentError(f"m_g length {m_g.size} != reference tokens {reference.n_keys}")

    scale = 1.0 / np.sqrt(target.dim)
    l_self = np.einsum("hid,hjd->hij", target.q, target.k) * scale
    l_ref = np.einsum("hid,hjd->hij", target.q, reference.k) * scale
    allowed = m_p[:, None] & m_g[None, :]  # (N_p, N_g)
    l_ref = np.where(allowed[None, :, :], l_ref, -np.inf)

    a = _softmax_rows(np.concatenate([l_self, l_ref], axis=-1))
    if beta != 1.0 and m_p.any() and m_g.any():
        col_mask = np.concatenate([np.ones(target.n_keys, bool), m_g])
        enhanced = enhance_contrast(a, beta, column_mask=col_mask)
        a = np.where(m_p[None, :, None], enhanced, a)
    out = np.einsum("hij,hjd->hid", a, np.concatenate([target.v, reference.v], axis=1))
    return out, a


def enhance_contrast(a: np.ndarray, beta: float, column_mask=None) -> np.ndarray:
    """Amplify attention-row contrast: (A - mean) * beta + mean, then clamp
    negatives to zero and renormalize each row to sum 1.

    column_mask, if given, marks columns that may carry mass; entries outside
    it are forced back to zero before renormalizing (keeps hard masking
    intact for any beta).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ArgumentError("attention map must have at least one entry")
    if beta < 0:
        raise ArgumentError("beta must be >= 0")
    if beta == 1.0:
        return a
    mu = a.mean(axis=-1, keepdims=True)
    e = (a - mu) * beta + mu
    e = np.maximum(e, 0.0)
    if column_mask is not None:
        e = np.where(np.asarray(column_mask, bool), e, 0.0)
    s = e.sum(axis=-1, keepdims=True)
    s[s == 0.0] = 1.0
    return e / s


def downsample_mask(m: np.ndarray, grid: tuple[int, int], rule: str = "majority") -> np.ndarray:
    """Pool a pixel mask onto a token grid.

    rule="majority": token true iff mean coverage > 0.5 (used for the person
    mask). rule="any": true iff any pixel covered (used for the garment mask
    so fringes survive). Returns a flat boolean array of length h*w.
    """
    m = np.asarray(m, dtype=bool)
    gh, gw = grid
    if m.ndim != 2 or gh <= 0 or gw <= 0:
        raise ArgumentError(f"bad mask shape {m.shape} or grid {grid}")
    if m.shape[0] % gh or m.shape[1] % gw:
        raise ArgumentError(f"grid {grid} does not evenly divide mask {m.shape}")
    sy, sx = m.shape[0] // gh, m.shape[1] // gw
    if sy != sx:
        raise ArgumentError(f"non-uniform downsampling scale ({sy} vs {sx})")
    pooled = m.reshape(gh, sy, gw, sx).mean(axis=(1, 3))
    if rule == "majority":
        tok = pooled > 0.5
    elif rule == "any":
        tok = pooled > 0.0
    else:
        raise ArgumentError(f"unknown pooling rule {rule!r}")
    return tok.ravel()
