"""Deep-feature correspondence between the garment and person images.

Features come from a denoising pass on the forward-noised image; matches are
mutual cosine nearest neighbors at feature-cell resolution, filtered by a
median/MAD displacement test and subsampled into MLS control points.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attention import downsample_mask
from .backend import DenoiserBackend, fnv1a64
from .diffusion import forward_noise, gaussian_field
from .errors import ArgumentError, EmptyRegionError, InsufficientCorrespondenceError
from .mls import ControlPointSet

MAD_FLOOR_PX = 1.0


@dataclass(frozen=True)
class FeatureMap:
    """Dense D-dim features at feature-cell resolution."""

    data: np.ndarray      # (h_f, w_f, D)
    stride: float         # image px per feature cell
    image_id: str
    t_feat: int

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", d)
        if d.ndim != 3 or d.shape[0] * d.shape[1] == 0:
            raise ArgumentError(f"feature map must be (h, w, D), got {d.shape}")
        if not np.isfinite(d).all():
            raise ArgumentError("feature map contains non-finite values")
        if self.stride <= 0:
            raise ArgumentError("stride must be positive")

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[:2]


@dataclass(frozen=True)
class CorrespondenceSet:
    """Matched feature cells: garment (source) cell -> person (target) cell.

    Cells are (col, row) indices; scores are cosine distances in [0, 2].
    Only mutual nearest-neighbor pairs are kept by match_nn.
    """

    src_cells: np.ndarray   # (n, 2) int
    tgt_cells: np.ndarray
    scores: np.ndarray      # (n,)
    src_stride: float
    tgt_stride: float

    def __post_init__(self):
        for name in ("src_cells", "tgt_cells"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 2))
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64).ravel())
        if len(self.src_cells) != len(self.tgt_cells) or len(self.scores) != len(self.src_cells):
            raise ArgumentError("match arrays must have equal length")
        if not np.isfinite(self.scores).all():
            raise ArgumentError("scores must be finite")

    def __len__(self):
        return len(self.scores)

    def src_px(self) -> np.ndarray:
        """Pixel-center coordinates of source cells."""
        return self.src_cells * self.src_stride + self.src_stride / 2.0

    def tgt_px(self) -> np.ndarray:
        return self.tgt_cells * self.tgt_stride + self.tgt_stride / 2.0


def extract_features(image: np.ndarray, t_feat: int, backend: DenoiserBackend,
                     seed: int = 0, image_id: str = "") -> FeatureMap:
    """Noise the image to t_feat and capture the designated layer's activations.

    Features are averaged over an antithetic noise pair (+eps, -eps), which
    cancels the first-order noise contribution and keeps the nearest-neighbor
    search driven by content rather than by the particular noise draw. The
    noise field depends on (seed, image_id, latent shape), so the two sides
    of a matching problem get independent draws and identical images with the
    same id yield identical maps.
    """
    desc = backend.describe()
    layer = desc.default_capture_layer
    z0 = backend.encode(image)
    noise_seed = seed if not image_id else (seed ^ fnv1a64(image_id)) & 0x7FFFFFFFFFFFFFFF
    eps = gaussian_field(z0.shape, noise_seed)
    cond = backend.embed_prompt(None)
    acc = None
    for sign in (1.0, -1.0):
        state = forward_noise(z0, t_feat, sign * eps, backend.schedule())
        out = backend.predict_noise(state.z, t_feat, cond, capture=[layer])
        f = out.features[layer]
        acc = f if acc is None else acc + f
    return FeatureMap(acc / 2.0, float(desc.capture_layers[layer]), image_id, t_feat)


def match_nn(src: FeatureMap, src_mask: np.ndarray,
             tgt: FeatureMap, tgt_mask: np.ndarray) -> CorrespondenceSet:
    """Mutual cosine nearest neighbors between masked feature cells.

    For every masked target cell, find the closest masked source cell; keep
    the pair only when the source cell's own nearest target is the same one.
    Output is ordered by target cell in row-major order.
    """
    src_tok = downsample_mask(np.asarray(src_mask, bool), src.grid, rule="any")
    tgt_tok = downsample_mask(np.asarray(tgt_mask, bool), tgt.grid, rule="any")
    if not src_tok.any():
        raise EmptyRegionError("source")
    if not tgt_tok.any():
        raise EmptyRegionError("target")

    fs = _normalized(src.data)[src_tok]          # (n_s, D)
    ft = _normalized(tgt.data)[tgt_tok]          # (n_t, D)
    dist = 1.0 - fs @ ft.T                       # (n_s, n_t) cosine distance

    best_src = np.argmin(dist, axis=0)           # per target
    best_tgt = np.argmin(dist, axis=1)           # per source
    t_idx = np.arange(dist.shape[1])
    mutual = best_tgt[best_src] == t_idx

    src_cells_all = _masked_cells(src.grid, src_tok)
    tgt_cells_all = _masked_cells(tgt.grid, tgt_tok)
    return CorrespondenceSet(
        src_cells=src_cells_all[best_src[mutual]],
        tgt_cells=tgt_cells_all[mutual],
        scores=dist[best_src[mutual], t_idx[mutual]],
        src_stride=src.stride,
        tgt_stride=tgt.stride,
    )


def _normalized(feat: np.ndarray) -> np.ndarray:
    flat = feat.reshape(-1, feat.shape[-1])
    n = np.linalg.norm(flat, axis=1, keepdims=True)
    n[n == 0.0] = 1.0
    return flat / n


def _masked_cells(grid, tok_mask) -> np.ndarray:
    """(n, 2) (col, row) indices of true tokens, row-major order."""
    h, w = grid
    flat = np.flatnonzero(tok_mask)
    return np.stack([flat % w, flat // w], axis=1)


def reject_outliers(cs: CorrespondenceSet, k: float = 3.0) -> CorrespondenceSet:
    """Drop matches whose pixel displacement strays more than k MADs from the
    componentwise median; never empties the set."""
    if len(cs) == 0:
        raise ArgumentError("correspondence set is empty")
    disp = cs.tgt_px() - cs.src_px()
    med = np.median(disp, axis=0)
    mad = np.maximum(np.median(np.abs(disp - med), axis=0), MAD_FLOOR_PX)
    keep = (np.abs(disp - med) <= k * mad).all(axis=1)
    if not keep.any():
        n_keep = max(3, int(np.ceil(0.1 * len(cs))))
        order = np.argsort(np.linalg.norm(disp - med, axis=1), kind="stable")
        keep = np.zeros(len(cs), bool)
        keep[order[:n_keep]] = True
    return CorrespondenceSet(cs.src_cells[keep], cs.tgt_cells[keep], cs.scores[keep],
                             cs.src_stride, cs.tgt_stride)


def to_control_points(cs: CorrespondenceSet, max_points: int = 128) -> ControlPointSet:
    """Convert cell matches to pixel-space MLS control pairs.

    Above max_points the set is thinned by deterministic farthest-point
    sampling on the target side, seeded at index 0.
    """
    if len(cs) < 3:
        raise InsufficientCorrespondenceError(len(cs))
    src = cs.src_px()
    tgt = cs.tgt_px()
    if len(cs) > max_points:
        sel = _farthest_point_subset(tgt, max_points)
        src, tgt = src[sel], tgt[sel]
    return ControlPointSet(src, tgt)


def _farthest_point_subset(pts: np.ndarray, count: int) -> np.ndarray:
    sel = [0]
    d = np.linalg.norm(pts - pts[0], axis=1)
    while len(sel) < count:
        j = int(np.argmax(d))
        sel.append(j)
        d = np.minimum(d, np.linalg.norm(pts - pts[j], axis=1))
    return np.array(sorted(sel))
