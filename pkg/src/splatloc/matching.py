"""Sparse 2D-3D and dense 2D-2D correspondence search on feature maps.

Sparse stage: keypoints detected on the query map by similarity to landmark
features, matched to landmarks by mutual nearest neighbor (MNN) cosine
similarity. Dense stage: coarse dual-softmax matching between 1/factor
resolution maps, refined back to full resolution by correlating each query
cell's center descriptor against the matched cell's pixel window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from .errors import InsufficientMatchesError
from .field import GaussianField
from .fitting import LandmarkSet
from .maps import FeatureMap
from .validation import as_array

SUBSET_CAP = 2048
SUBSET_SEED = 0
SOFT_ARGMAX_SHARPNESS = 10.0


@dataclass(frozen=True)
class Keypoint:
    """A detected query pixel with its descriptor."""

    pixel: np.ndarray  # (2,) x, y in full-resolution pixels
    descriptor: np.ndarray  # (D,) unit norm
    score: float

    def __post_init__(self):
        pixel = as_array(self.pixel, "pixel", np.float64, (2,))
        descriptor = as_array(self.descriptor, "descriptor", np.float64, (None,))
        norm = float(np.linalg.norm(descriptor))
        if abs(norm - 1.0) > 1e-5:
            raise ValueError(f"descriptor norm {norm} is not unit")
        object.__setattr__(self, "pixel", pixel)
        object.__setattr__(self, "descriptor", descriptor)
        object.__setattr__(self, "score", float(self.score))


@dataclass(frozen=True)
class SparseMatches:
    """Query pixels paired one-to-one with field primitive indices."""

    query_px: np.ndarray  # (M, 2) x, y
    primitive_indices: np.ndarray  # (M,) into the field
    similarity: np.ndarray  # (M,)

    def __post_init__(self):
        m = self.query_px.shape[0] if self.query_px.ndim == 2 else -1
        object.__setattr__(
            self, "query_px", as_array(self.query_px, "query_px", np.float64, (m, 2))
        )
        object.__setattr__(
            self,
            "primitive_indices",
            as_array(self.primitive_indices, "primitive_indices", np.int64, (m,)),
        )
        object.__setattr__(
            self, "similarity", as_array(self.similarity, "similarity", np.float64, (m,))
        )

    def __len__(self) -> int:
        return int(self.query_px.shape[0])


@dataclass(frozen=True)
class CoarseMatches:
    """Matched coarse cells (row, col) with dual-softmax confidence."""

    query_cells: np.ndarray  # (M, 2) row, col
    render_cells: np.ndarray  # (M, 2) row, col
    confidence: np.ndarray  # (M,)

    def __len__(self) -> int:
        return int(self.query_cells.shape[0])


@dataclass(frozen=True)
class DenseMatches:
    """Full-resolution query/render pixel pairs with confidence."""

    query_px: np.ndarray  # (M, 2) x, y
    render_px: np.ndarray  # (M, 2) x, y
    confidence: np.ndarray  # (M,)

    def __len__(self) -> int:
        return int(self.query_px.shape[0])


@dataclass(frozen=True)
class DetectOptions:
    nms_radius: int = 4
    max_kpts: int = 1024
    sim_floor: float = 0.5

    def __post_init__(self):
        if self.nms_radius < 1:
            raise ValueError("nms_radius must be >= 1")
        if self.max_kpts < 1:
            raise ValueError("max_kpts must be >= 1")


def landmark_subset_features(field: GaussianField, landmarks: LandmarkSet) -> np.ndarray:
    """Unit landmark features, capped at a fixed random subset for cost."""
    feats = landmarks.features(field)
    if feats.shape[0] > SUBSET_CAP:
        pick = np.random.default_rng(SUBSET_SEED).choice(
            feats.shape[0], size=SUBSET_CAP, replace=False
        )
        feats = feats[np.sort(pick)]
    return feats


def detect_keypoints(
    query: FeatureMap,
    field: GaussianField,
    landmarks: LandmarkSet,
    opts: DetectOptions = DetectOptions(),
) -> list[Keypoint]:
    """Local maxima of the landmark-similarity map, NMS'd and capped.

    Per-pixel score is the max cosine similarity between the query feature
    and any landmark feature in the fixed subset. Local maxima within
    nms_radius (Chebyshev, via a square max filter) are candidates; greedy
    Euclidean suppression then guarantees no two kept keypoints are closer
    than nms_radius. Invalid pixels never fire.
    """
    if not query.validity.any():
        return []
    feats = landmark_subset_features(field, landmarks)
    data = query.data.astype(np.float64)
    sims = data.reshape(-1, data.shape[2]) @ feats.T
    score = sims.max(axis=1).reshape(query.height, query.width)
    score = np.where(query.validity, score, -np.inf)

    size = 2 * opts.nms_radius + 1
    peak = maximum_filter(score, size=size, mode="constant", cval=-np.inf)
    rows, cols = np.nonzero((score == peak) & (score >= opts.sim_floor))
    if rows.size == 0:
        return []
    values = score[rows, cols]
    order = np.lexsort((cols, rows, -values))
    kept_rc: list[tuple[int, int]] = []
    keypoints: list[Keypoint] = []
    kept_arr = np.empty((0, 2))
    for idx in order:
        r, c = int(rows[idx]), int(cols[idx])
        if kept_arr.shape[0]:
            d2 = np.square(kept_arr - [r, c]).sum(axis=1)
            if d2.min() < opts.nms_radius**2:
                continue
        kept_rc.append((r, c))
        kept_arr = np.asarray(kept_rc, dtype=np.float64)
        keypoints.append(
            Keypoint(
                pixel=np.array([c, r], dtype=np.float64),
                descriptor=data[r, c],
                score=float(values[idx]),
            )
        )
        if len(keypoints) >= opts.max_kpts:
            break
    return keypoints


def match_sparse(
    keypoints: list[Keypoint],
    field: GaussianField,
    landmarks: LandmarkSet,
    threshold: float = 0.7,
) -> SparseMatches:
    """Mutual-nearest-neighbor keypoint-to-landmark matching.

    Pairs are kept when each side is the other's best cosine similarity and
    the similarity clears the threshold. Fewer than 4 pairs cannot seed a
    PnP solve and raise InsufficientMatchesError.
    """
    if not keypoints or len(landmarks) == 0:
        raise ValueError("match_sparse needs at least one keypoint and landmark")
    desc = np.stack([k.descriptor for k in keypoints])
    feats = landmarks.features(field)
    sims = desc @ feats.T
    best_l = sims.argmax(axis=1)
    best_k = sims.argmax(axis=0)
    rows = np.arange(len(keypoints))
    mutual = best_k[best_l] == rows
    strong = sims[rows, best_l] >= threshold
    keep = np.nonzero(mutual & strong)[0]
    if keep.size < 4:
        raise InsufficientMatchesError(
            f"only {keep.size} sparse matches (need >= 4)", count=int(keep.size)
        )
    return SparseMatches(
        query_px=np.stack([keypoints[i].pixel for i in keep]),
        primitive_indices=landmarks.indices[best_l[keep]],
        similarity=sims[keep, best_l[keep]],
    )


def pool_coarse(fm: FeatureMap, factor: int = 8) -> FeatureMap:
    """Valid-aware average pooling to 1/factor resolution.

    Each factor x factor block averages its valid pixels and re-normalizes;
    a block is valid iff at least half its pixels are valid.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return fm
    if fm.height % factor or fm.width % factor:
        raise ValueError(
            f"map {fm.height}x{fm.width} not divisible by factor {factor}"
        )
    h, w = fm.height // factor, fm.width // factor
    data = fm.data.astype(np.float64).reshape(h, factor, w, factor, fm.dim)
    valid = fm.validity.reshape(h, factor, w, factor)
    counts = valid.sum(axis=(1, 3))
    sums = (data * valid[:, :, :, :, None]).sum(axis=(1, 3))
    block_valid = 2 * counts >= factor * factor
    means = sums / np.maximum(counts, 1)[:, :, None]
    norms = np.linalg.norm(means, axis=2, keepdims=True)
    block_valid &= norms[:, :, 0] > 1e-12
    pooled = np.where(block_valid[:, :, None], means / np.maximum(norms, 1e-300), 0.0)
    return FeatureMap(data=pooled.astype(np.float32), validity=block_valid)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def match_dense_coarse(
    fq: FeatureMap,
    fr: FeatureMap,
    temperature: float = 0.1,
    conf_floor: float = 0.2,
) -> CoarseMatches:
    """Dual-softmax mutual-argmax matching between coarse cell grids.

    Valid cells are enumerated row-major on both sides. The pair (i, j)
    survives iff j is i's argmax and i is j's argmax of the dual-softmax
    probability P = softmax_rows(C/t) * softmax_cols(C/t) and P[i, j]
    clears conf_floor. No survivors yields an empty result.
    """
    if fq.dim != fr.dim:
        raise ValueError(f"feature dims differ: {fq.dim} vs {fr.dim}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    q_cells = np.argwhere(fq.validity)
    r_cells = np.argwhere(fr.validity)
    empty = CoarseMatches(
        query_cells=np.zeros((0, 2), dtype=np.int64),
        render_cells=np.zeros((0, 2), dtype=np.int64),
        confidence=np.zeros(0),
    )
    if q_cells.shape[0] == 0 or r_cells.shape[0] == 0:
        return empty
    q = fq.data[fq.validity].astype(np.float64)
    r = fr.data[fr.validity].astype(np.float64)
    corr = (q @ r.T) / temperature
    # Column softmax on a contiguous transpose: reductions along contiguous
    # rows use pairwise summation, keeping results bit-reproducible against
    # a per-column reference loop.
    prob = _softmax_rows(corr) * _softmax_rows(np.ascontiguousarray(corr.T)).T
    best_j = prob.argmax(axis=1)
    best_i = prob.argmax(axis=0)
    rows = np.arange(q.shape[0])
    keep = (best_i[best_j] == rows) & (prob[rows, best_j] >= conf_floor)
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        return empty
    return CoarseMatches(
        query_cells=q_cells[idx].astype(np.int64),
        render_cells=r_cells[best_j[idx]].astype(np.int64),
        confidence=prob[idx, best_j[idx]],
    )


def refine_matches(
    fq: FeatureMap,
    fr: FeatureMap,
    coarse: CoarseMatches,
    window: int = 8,
    factor: int = 8,
    subpixel: bool = True,
) -> DenseMatches:
    """Lift coarse cell pairs to full-resolution pixel pairs.

    The query coordinate is pinned to the center pixel of its coarse cell;
    the rendered coordinate is the argmax of the correlation between that
    pixel's descriptor and the window x window patch centered on the matched
    rendered cell (ties resolve toward the window anchor, then row-major).
    With subpixel, a soft-argmax (sharpness 10) over the argmax's 3x3
    neighborhood adds a sub-pixel offset, clamped to the window. Pairs
    whose query center pixel or whole patch is invalid are dropped.
    """
    if window < 1 or factor < 1:
        raise ValueError("window and factor must be >= 1")
    m = len(coarse)
    if m == 0:
        return DenseMatches(
            query_px=np.zeros((0, 2)), render_px=np.zeros((0, 2)), confidence=np.zeros(0)
        )
    half = factor // 2
    q_py = coarse.query_cells[:, 0] * factor + half
    q_px = coarse.query_cells[:, 1] * factor + half
    r_cy = coarse.render_cells[:, 0] * factor + half
    r_cx = coarse.render_cells[:, 1] * factor + half

    offsets = np.arange(window) - window // 2
    wy = r_cy[:, None, None] + offsets[None, :, None]  # (M, w, 1)
    wx = r_cx[:, None, None] + offsets[None, None, :]  # (M, 1, w)
    wy, wx = np.broadcast_arrays(wy, wx)
    inside = (wy >= 0) & (wy < fr.height) & (wx >= 0) & (wx < fr.width)
    cy = np.clip(wy, 0, fr.height - 1)
    cx = np.clip(wx, 0, fr.width - 1)
    patch_valid = inside & fr.validity[cy, cx]
    desc = fq.data.astype(np.float64)[q_py, q_px]  # (M, D)
    patches = fr.data.astype(np.float64)[cy, cx]  # (M, w, w, D)
    sims = np.einsum("mijd,md->mij", patches, desc)
    sims = np.where(patch_valid, sims, -np.inf)

    keep = fq.validity[q_py, q_px] & patch_valid.any(axis=(1, 2))

    # Hard argmax with deterministic tie preference: closest to the window
    # anchor (Chebyshev), then row-major. A window of identical features
    # therefore lands exactly on the anchor pixel.
    rank = np.maximum(np.abs(offsets)[:, None], np.abs(offsets)[None, :])
    rank = (rank * window * window + np.arange(window * window).reshape(window, window)).ravel()
    flat = sims.reshape(m, -1)
    peak = flat.max(axis=1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)  # all-invalid rows
    tie_key = np.where(flat == peak, rank[None, :], np.inf)
    arg = tie_key.argmin(axis=1)
    sel = np.arange(m)
    best_x = wx.reshape(m, -1)[sel, arg].astype(np.float64)
    best_y = wy.reshape(m, -1)[sel, arg].astype(np.float64)

    if subpixel:
        # Soft-argmax over the argmax's 3x3 neighborhood in the full map
        # (not truncated at the window edge, which would bias the offset
        # inward); the result is clamped to the window afterwards.
        d = np.array([-1, 0, 1])
        ny = best_y.astype(np.int64)[:, None, None] + d[None, :, None]
        nx = best_x.astype(np.int64)[:, None, None] + d[None, None, :]
        in_img = (ny >= 0) & (ny < fr.height) & (nx >= 0) & (nx < fr.width)
        nyc = np.clip(ny, 0, fr.height - 1)
        nxc = np.clip(nx, 0, fr.width - 1)
        ok = in_img & fr.validity[nyc, nxc]
        s_nb = np.einsum(
            "mijd,md->mij", fr.data.astype(np.float64)[nyc, nxc], desc
        )
        w_nb = np.where(
            ok,
            np.exp(SOFT_ARGMAX_SHARPNESS * np.where(ok, s_nb - peak[:, :, None], 0.0)),
            0.0,
        )
        total = np.maximum(w_nb.sum(axis=(1, 2)), 1e-300)
        off_y = (w_nb * d[None, :, None]).sum(axis=(1, 2)) / total
        off_x = (w_nb * d[None, None, :]).sum(axis=(1, 2)) / total
        rx = best_x + off_x
        ry = best_y + off_y
        rx = np.clip(rx, r_cx - window / 2, r_cx + window / 2)
        ry = np.clip(ry, r_cy - window / 2, r_cy + window / 2)
    else:
        rx, ry = best_x, best_y
    rx = np.clip(rx, 0, fr.width - 1)
    ry = np.clip(ry, 0, fr.height - 1)

    return DenseMatches(
        query_px=np.stack([q_px, q_py], axis=1).astype(np.float64)[keep],
        render_px=np.stack([rx, ry], axis=1)[keep],
        confidence=coarse.confidence[keep],
    )


def write_matches_csv(matches: DenseMatches, path) -> None:
    """Plain-text dump for inspection and cross-implementation diffing."""
    with open(path, "w") as fh:
        fh.write("u_q,v_q,u_r,v_r,conf\n")
        for (uq, vq), (ur, vr), conf in zip(
            matches.query_px, matches.render_px, matches.confidence
        ):
            fh.write(f"{uq:.6f},{vq:.6f},{ur:.6f},{vr:.6f},{conf:.6f}\n")
