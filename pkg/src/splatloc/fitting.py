"""Feature distillation into an existing Gaussian field, plus landmark selection.

Geometry (positions, rotations, scales, opacities) is frozen; only the
per-primitive feature vectors are optimized, by gradient descent on the
photometric-style discrepancy between rendered feature maps and target
feature maps at known poses.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError
from .field import GaussianField
from .geometry import Camera, Pose
from .maps import FeatureMap
from .rendering import (
    RenderOptions,
    _forward_state,
    _normalize_rows,
    feature_gradients_arrays,
)

LOSS_KINDS = ("l1", "l2")
BATCH_MODES = ("stochastic", "full")


@dataclass(frozen=True)
class TrainView:
    """A posed target feature map the fit should reproduce."""

    camera: Camera
    pose: Pose
    target: FeatureMap

    def __post_init__(self):
        if (self.target.height, self.target.width) != (
            self.camera.height,
            self.camera.width,
        ):
            raise ValueError(
                f"target map {self.target.height}x{self.target.width} does not "
                f"match camera {self.camera.height}x{self.camera.width}"
            )


@dataclass(frozen=True)
class FitOptions:
    steps: int = 50000
    learning_rate: float = 0.001
    loss: str = "l1"
    batch: str = "stochastic"
    seed: int = 0
    render: RenderOptions = dataclass_field(default_factory=RenderOptions)

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.batch not in BATCH_MODES:
            raise ConfigError(f"batch must be one of {BATCH_MODES}, got {self.batch!r}")


@dataclass(frozen=True)
class FitResult:
    field: GaussianField
    loss_trace: np.ndarray  # (steps,) mean per-pixel loss at each step


def view_loss_and_gradient(
    geometry: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    features: np.ndarray,
    view: TrainView,
    loss: str,
    opts: RenderOptions,
) -> tuple[float, np.ndarray]:
    """Mean per-pixel loss on one view and dLoss/dfeatures (N, D).

    Pixels count only where both the render and the target are valid. The
    L1 residual is evaluated at the target's float32 precision so a target
    rendered from the same features is an exact fixed point (all residual
    signs are zero); L2 keeps float64 residuals, whose gradients vanish
    smoothly at the fixed point anyway.
    """
    positions, rotations, scales, opacities = geometry
    state = _forward_state(
        (positions, rotations, scales, opacities, features),
        view.camera,
        view.pose,
        opts,
    )
    ps, nf, feat, dep, acc = state
    valid = (acc >= opts.alpha_valid) & view.target.validity
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, np.zeros((np.asarray(features).shape[0], feat.shape[2]))
    norms = np.linalg.norm(feat, axis=-1, keepdims=True)
    yhat = feat / np.maximum(norms, 1e-300)
    target = view.target.data.astype(np.float64)
    if loss == "l1":
        diff = yhat.astype(np.float32).astype(np.float64) - target
        diff = np.where(valid[:, :, None], diff, 0.0)
        value = float(np.abs(diff).sum() / n_valid)
        upstream = np.sign(diff) / n_valid
    else:
        diff = np.where(valid[:, :, None], yhat - target, 0.0)
        value = float((diff * diff).sum() / n_valid)
        upstream = 2.0 * diff / n_valid
    grads = feature_gradients_arrays(
        positions,
        rotations,
        scales,
        opacities,
        features,
        view.camera,
        view.pose,
        upstream,
        opts,
        _state=state,
    )
    return value, grads


def fit_features(
    field: GaussianField, views: list[TrainView], opts: FitOptions = FitOptions()
) -> FitResult:
    """Gradient-descent the features against the training views.

    Stochastic mode visits one view per step, reshuffling the visit order
    every epoch; full mode averages the gradient over all views each step.
    Features are re-normalized to unit length after every update. Geometry
    arrays are passed through untouched.
    """
    if not views:
        raise ConfigError("fit_features requires at least one training view")
    for view in views:
        if view.target.dim != field.feature_dim:
            raise ConfigError(
                f"target dim {view.target.dim} does not match field dim "
                f"{field.feature_dim}"
            )
    geometry = (field.positions, field.rotations, field.scales, field.opacities)
    features = field.features.astype(np.float64)
    rng = np.random.default_rng(opts.seed)
    trace = np.zeros(opts.steps)
    order = np.arange(len(views))
    for step in range(opts.steps):
        if opts.batch == "stochastic":
            k = step % len(views)
            if k == 0:
                order = rng.permutation(len(views))
            value, grads = view_loss_and_gradient(
                geometry, features, views[order[k]], opts.loss, opts.render
            )
        else:
            value = 0.0
            grads = np.zeros_like(features)
            for view in views:
                v, g = view_loss_and_gradient(
                    geometry, features, view, opts.loss, opts.render
                )
                value += v / len(views)
                grads += g / len(views)
        features = _normalize_rows(features - opts.learning_rate * grads)
        trace[step] = value
    return FitResult(
        field=field.with_features(features.astype(np.float32)), loss_trace=trace
    )


@dataclass(frozen=True)
class LandmarkSet:
    """Indices of anchor primitives, in selection order."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("landmark indices must be one-dimensional")
        if len(np.unique(idx)) != idx.shape[0]:
            raise ValueError("landmark indices must be unique")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def positions(self, field: GaussianField) -> np.ndarray:
        return field.positions[self.indices].astype(np.float64)

    def features(self, field: GaussianField) -> np.ndarray:
        return _normalize_rows(field.features[self.indices].astype(np.float64))


def sample_landmarks(
    field: GaussianField, anchor_count: int = 16384, nn: int = 6
) -> LandmarkSet:
    """Pick distinctive, spatially even anchor primitives.

    Scores each primitive by opacity times (1 - mean feature cosine to its
    nn spatial nearest neighbours), drops the floor(N/4) lowest scores, then
    greedily farthest-point samples the survivors starting from the best
    score. All ties break toward the lower primitive index.
    """
    n = len(field)
    if n == 0:
        raise ValueError("cannot sample landmarks from an empty field")
    if anchor_count < 1:
        raise ValueError("anchor_count must be >= 1")
    if nn < 1:
        raise ValueError("nn must be >= 1")
    positions = field.positions.astype(np.float64)
    features = _normalize_rows(field.features.astype(np.float64))
    opacities = field.opacities.astype(np.float64)
    k = min(nn, n - 1)
    if k == 0:
        ambiguity = np.zeros(n)
    else:
        tree = cKDTree(positions)
        _, neigh = tree.query(positions, k=k + 1)
        neigh = np.atleast_2d(neigh)[:, 1:]  # drop self
        sims = np.einsum("nd,nkd->nk", features, features[neigh])
        ambiguity = sims.mean(axis=1)
    scores = opacities * (1.0 - ambiguity)

    keep = n - n // 4
    # Ascending (score, index); the tail holds the survivors.
    ranked = np.lexsort((np.arange(n), scores))
    survivors = np.sort(ranked[n - keep:])
    sub_pos = positions[survivors]
    sub_scores = scores[survivors]

    count = min(anchor_count, keep)
    chosen = np.empty(count, dtype=np.int64)
    # Highest score first; lexsort ascending, so negate and prefer low index.
    start = np.lexsort((np.arange(keep), -sub_scores))[0]
    chosen[0] = start
    min_dist = np.linalg.norm(sub_pos - sub_pos[start], axis=1)
    min_dist[start] = -np.inf
    for i in range(1, count):
        nxt = int(np.argmax(min_dist))  # first occurrence wins ties
        chosen[i] = nxt
        d = np.linalg.norm(sub_pos - sub_pos[nxt], axis=1)
        np.minimum(min_dist, d, out=min_dist)
        min_dist[nxt] = -np.inf
    return LandmarkSet(indices=survivors[chosen])
