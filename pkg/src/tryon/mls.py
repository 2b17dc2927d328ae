"""Moving-least-squares garment deformation.

Affine MLS from sparse control points, dense inverse-field evaluation, and
backward-warp resampling. Points are (x, y) in pixel coordinates; an image
array indexed [y, x] is sampled at coordinate (x, y) without any half-pixel
offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, NumericalDegeneracyError

# Below this distance a query is treated as coinciding with a control point,
# turning the singular 1/r^(2a) kernel into exact interpolation.
COINCIDENCE_CUTOFF = 1e-9

# Tikhonov term on the weighted covariance; keeps near-collinear sets solvable.
COVARIANCE_REG = 1e-8


@dataclass(frozen=True)
class ControlPointSet:
    """Paired control points driving the deformation.

    sources live in the reference-image frame, targets in the target-image
    frame; f(source_i) == target_i up to the coincidence cutoff.
    """

    sources: np.ndarray  # (n, 2) float64
    targets: np.ndarray  # (n, 2) float64

    def __post_init__(self):
        src = np.asarray(self.sources, dtype=np.float64)
        tgt = np.asarray(self.targets, dtype=np.float64)
        object.__setattr__(self, "sources", src)
        object.__setattr__(self, "targets", tgt)
        if src.ndim != 2 or src.shape[1] != 2 or src.shape != tgt.shape:
            raise ArgumentError(f"control points must be (n, 2) pairs, got {src.shape} / {tgt.shape}")
        if len(src) < 3:
            raise ArgumentError(f"need at least 3 control pairs, got {len(src)}")
        if not (np.isfinite(src).all() and np.isfinite(tgt).all()):
            raise ArgumentError("control points must be finite")
        d2 = np.sum((src[:, None, :] - src[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        if np.sqrt(d2.min()) <= COINCIDENCE_CUTOFF:
            raise ArgumentError("duplicate source control points")

    def __len__(self):
        return len(self.sources)

    def swapped(self) -> "ControlPointSet":
        """Source/target roles exchanged; used to build the inverse map."""
        return ControlPointSet(self.targets, self.sources)


@dataclass(frozen=True)
class DeformationField:
    """Per-pixel inverse map: target pixel (x, y) samples the reference image
    at (x, y) + displacement[y, x]."""

    displacement: np.ndarray  # (height, width, 2) float64, (dx, dy)

    def __post_init__(self):
        d = np.asarray(self.displacement, dtype=np.float64)
        object.__setattr__(self, "displacement", d)
        if d.ndim != 3 or d.shape[2] != 2:
            raise ArgumentError(f"displacement must be (h, w, 2), got {d.shape}")
        if not np.isfinite(d).all():
            raise ArgumentError("displacement field must be finite")

    @property
    def height(self) -> int:
        return self.displacement.shape[0]

    @property
    def width(self) -> int:
        return self.displacement.shape[1]

    def sample_locations(self) -> np.ndarray:
        """(h, w, 2) array of reference-frame coordinates, pixel + displacement."""
        h, w = self.height, self.width
        xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        return np.stack([xs, ys], axis=-1) + self.displacement


def _det_floor(trace):
    """Determinant magnitude below which the covariance counts as singular."""
    return 1e-12 * np.maximum(1.0, trace * trace)


def mls_weights(query, sources, alpha: float = 1.0) -> np.ndarray:
    """Normalized inverse-distance weights w_i ~ 1/|p_i - q|^(2*alpha).

    A query within the coincidence cutoff of source i gets the indicator of i.
    """
    sources = np.asarray(sources, dtype=np.float64)
    if sources.size == 0:
        raise ArgumentError("sources must be non-empty")
    query = np.asarray(query, dtype=np.float64)
    if not np.isfinite(query).all():
        raise ArgumentError("query must be finite")
    dist = np.linalg.norm(sources - query, axis=-1)
    hit = dist < COINCIDENCE_CUTOFF
    if hit.any():
        w = np.zeros(len(sources))
        w[np.argmax(hit)] = 1.0
        return w
    w = dist ** (-2.0 * alpha)
    return w / w.sum()


def mls_affine_eval(query, cps: ControlPointSet, alpha: float = 1.0) -> np.ndarray:
    """Affine MLS image of a single query point.

    Solves the weighted least-squares affine fit centered on the weighted
    centroids; reproduces any global affine exactly and interpolates the
    control pairs.
    """
    query = np.asarray(query, dtype=np.float64)
    dist = np.linalg.norm(cps.sources - query, axis=-1)
    hit = np.flatnonzero(dist < COINCIDENCE_CUTOFF)
    if hit.size:
        return cps.targets[hit[0]].copy()

    w = dist ** (-2.0 * alpha)
    w_sum = w.sum()
    p_star = (w[:, None] * cps.sources).sum(axis=0) / w_sum
    q_star = (w[:, None] * cps.targets).sum(axis=0) / w_sum
    ph = cps.sources - p_star
    qh = cps.targets - q_star
    # 2x2 weighted covariance and cross terms; regularized analytic inverse.
    cov = (w[:, None, None] * ph[:, :, None] * ph[:, None, :]).sum(axis=0)
    cross = (w[:, None, None] * ph[:, :, None] * qh[:, None, :]).sum(axis=0)
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    if not np.isfinite(det) or abs(det) <= _det_floor(cov[0, 0] + cov[1, 1]):
        # near-singular (collinear sources): regularize and retry
        cov = cov + COVARIANCE_REG * np.eye(2)
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    if not np.isfinite(det) or abs(det) < 1e-300:
        raise NumericalDegeneracyError(f"singular MLS system at query {tuple(query)}")
    inv = np.array([[cov[1, 1], -cov[0, 1]], [-cov[1, 0], cov[0, 0]]]) / det
    m = inv @ cross
    return (query - p_star) @ m + q_star


def build_deformation_field(cps: ControlPointSet, width: int, height: int,
                            alpha: float = 1.0) -> DeformationField:
    """Dense inverse map over a width x height target grid.

    Control roles are swapped internally so field[y, x] points from target
    pixel (x, y) to its reference-frame sample location.
    """
    inv = cps.swapped()
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    pts = np.stack([xs.ravel(), ys.ravel()], axis=-1)  # (m, 2)
    out = _mls_affine_eval_batch(pts, inv, alpha)
    disp = (out - pts).reshape(height, width, 2)
    return DeformationField(disp)


def _mls_affine_eval_batch(pts: np.ndarray, cps: ControlPointSet, alpha: float) -> np.ndarray:
    """Vectorized affine MLS for (m, 2) query points; matches mls_affine_eval."""
    src = cps.sources  # (n, 2)
    tgt = cps.targets
    diff = src[None, :, :] - pts[:, None, :]  # (m, n, 2)
    dist = np.linalg.norm(diff, axis=-1)  # (m, n)
    hit = dist < COINCIDENCE_CUTOFF

    with np.errstate(divide="ignore"):
        w = dist ** (-2.0 * alpha)
    w[hit] = 0.0  # coincident rows handled at the end
    w_sum = w.sum(axis=1, keepdims=True)
    w_sum[w_sum == 0.0] = 1.0
    wn = w / w_sum  # (m, n)

    p_star = wn @ src  # (m, 2)
    q_star = wn @ tgt
    ph = src[None, :, :] - p_star[:, None, :]  # (m, n, 2)
    qh = tgt[None, :, :] - q_star[:, None, :]
    cov = np.einsum("mn,mni,mnj->mij", w, ph, ph)  # (m, 2, 2)
    cross = np.einsum("mn,mni,mnj->mij", w, ph, qh)
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    weak = ~np.isfinite(det) | (np.abs(det) <= _det_floor(cov[:, 0, 0] + cov[:, 1, 1]))
    if weak.any():
        cov[weak] += COVARIANCE_REG * np.eye(2)
        det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    bad = ~np.isfinite(det) | (np.abs(det) < 1e-300)
    if bad.any():
        i = int(np.argmax(bad))
        raise NumericalDegeneracyError(f"singular MLS system at query {tuple(pts[i])}")
    inv = np.empty_like(cov)
    inv[:, 0, 0] = cov[:, 1, 1]
    inv[:, 1, 1] = cov[:, 0, 0]
    inv[:, 0, 1] = -cov[:, 0, 1]
    inv[:, 1, 0] = -cov[:, 1, 0]
    inv /= det[:, None, None]
    m_mat = np.einsum("mij,mjk->mik", inv, cross)
    out = np.einsum("mi,mik->mk", pts - p_star, m_mat) + q_star

    rows, cols = np.nonzero(hit)
    if rows.size:
        first = np.unique(rows, return_index=True)[1]
        out[rows[first]] = tgt[cols[first]]
    return out


def apply_backward_warp(src: np.ndarray, src_mask: np.ndarray,
                        field: DeformationField) -> tuple[np.ndarray, np.ndarray]:
    """Resample src through the inverse field.

    Returns (warped image, coverage mask). A target pixel is covered when its
    sample location falls inside the image and the bilinearly interpolated
    mask weight exceeds 0.5; uncovered pixels are zero.
    """
    src = np.asarray(src, dtype=np.float64)
    if not np.isfinite(src).all():
        raise ArgumentError("src image must be finite")
    mask = np.asarray(src_mask, dtype=np.float64)
    if mask.shape != src.shape[:2]:
        raise ArgumentError(f"mask shape {mask.shape} does not match image {src.shape[:2]}")

    loc = field.sample_locations()
    sx, sy = loc[..., 0], loc[..., 1]
    h_s, w_s = src.shape[:2]
    inside = (sx >= 0) & (sx <= w_s - 1) & (sy >= 0) & (sy <= h_s - 1)

    x0 = np.clip(np.floor(sx).astype(np.int64), 0, w_s - 2) if w_s > 1 else np.zeros_like(sx, np.int64)
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, h_s - 2) if h_s > 1 else np.zeros_like(sy, np.int64)
    fx = np.clip(sx - x0, 0.0, 1.0)
    fy = np.clip(sy - y0, 0.0, 1.0)
    x1 = np.minimum(x0 + 1, w_s - 1)
    y1 = np.minimum(y0 + 1, h_s - 1)

    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy

    def sample(img):
        planes = img[..., None] if img.ndim == 2 else img
        out = (w00[..., None] * planes[y0, x0]
               + w10[..., None] * planes[y0, x1]
               + w01[..., None] * planes[y1, x0]
               + w11[..., None] * planes[y1, x1])
        return out[..., 0] if img.ndim == 2 else out

    mask_w = sample(mask)
    covered = inside & (mask_w > 0.5)
    warped = sample(src)
    if src.ndim == 3:
        warped = np.where(covered[..., None], warped, 0.0)
    else:
        warped = np.where(covered, warped, 0.0)
    return warped, covered
