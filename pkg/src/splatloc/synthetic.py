"""Synthetic ground-truthed scenes and query feature maps.

Scenes are boxes of random Gaussians whose features sample a smooth
low-frequency function of position, standing in for real captures and a
learned descriptor backbone: nearby primitives get similar features,
distant ones decorrelate, and every query has an exact ground-truth pose.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import EmptyViewError
from .field import GaussianField
from .geometry import Camera, Pose
from .maps import FeatureMap
from .rendering import RenderOptions, render

FeatureFunction = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SyntheticSceneSpec:
    primitive_count: int = 400
    feature_dim: int = 16
    scene_extent: float = 2.0
    fourier_components: int = 12
    rng_seed: int = 0

    def __post_init__(self):
        if self.primitive_count < 0:
            raise ValueError("primitive_count must be >= 0")
        if self.feature_dim < 1 or self.fourier_components < 1:
            raise ValueError("feature_dim and fourier_components must be >= 1")
        if self.scene_extent <= 0:
            raise ValueError("scene_extent must be positive")


def _make_feature_function(
    rng: np.random.Generator, dim: int, components: int, extent: float
) -> FeatureFunction:
    """Smooth unit-feature field: norm(sum_k a_k * cos(w_k . x + phi_k)).

    Frequencies are capped at 8 cycles per scene extent: positions within
    1% of the extent see phase shifts of at most 2*pi*8*0.01 ~ 0.5 rad and
    their features stay nearly parallel (cosine > 0.9), while the field
    decorrelates fast enough at larger separations for match refinement to
    resolve sub-pixel offsets.
    """
    amplitudes = rng.normal(size=(components, dim))
    directions = rng.normal(size=(components, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    cycles = rng.uniform(1.0, 8.0, size=components)
    omegas = directions * (2.0 * np.pi * cycles / extent)[:, None]
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(components, dim))

    def feature_function(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        pts = np.atleast_2d(x)
        phase = pts @ omegas.T  # (N, K)
        # cos(w_k . x + phi_k_d) summed over k, weighted by a_k_d.
        angles = phase[:, :, None] + phases[None, :, :]  # (N, K, D)
        raw = np.einsum("nkd,kd->nd", np.cos(angles), amplitudes)
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        out = raw / np.maximum(norms, 1e-300)
        return out[0] if squeeze else out

    return feature_function


def gen_synthetic_scene(spec: SyntheticSceneSpec) -> tuple[GaussianField, FeatureFunction]:
    """Deterministic random field plus the smooth function its features sample."""
    rng = np.random.default_rng(spec.rng_seed)
    feature_function = _make_feature_function(
        rng, spec.feature_dim, spec.fourier_components, spec.scene_extent
    )
    n = spec.primitive_count
    half = spec.scene_extent / 2.0
    positions = rng.uniform(-half, half, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.maximum(np.linalg.norm(quats, axis=1, keepdims=True), 1e-300)
    features = feature_function(positions) if n else np.zeros((0, spec.feature_dim))
    field = GaussianField(
        positions=positions,
        rotations=quats,
        scales=rng.uniform(0.01, 0.03, size=(n, 3)) * spec.scene_extent,
        opacities=rng.uniform(0.5, 1.0, size=n),
        features=features,
    )
    return field, feature_function


def gen_query(
    field: GaussianField,
    camera: Camera,
    pose: Pose,
    noise_sigma: float,
    seed: int = 0,
    opts: RenderOptions = RenderOptions(),
) -> FeatureMap:
    """Render the field from a ground-truth pose and perturb it per pixel.

    Adds isotropic Gaussian noise of std noise_sigma to every channel of
    each valid pixel, then re-normalizes. noise_sigma=0 returns the render
    output untouched.
    """
    out = render(field, camera, pose, opts)
    fm = out.features
    if not fm.validity.any():
        raise EmptyViewError("query pose sees no valid pixels")
    if noise_sigma == 0.0:
        return fm
    rng = np.random.default_rng(seed)
    data = fm.data.astype(np.float64)
    noise = rng.normal(scale=noise_sigma, size=data.shape)
    noisy = data + np.where(fm.validity[:, :, None], noise, 0.0)
    norms = np.linalg.norm(noisy, axis=2, keepdims=True)
    noisy = np.where(fm.validity[:, :, None], noisy / np.maximum(norms, 1e-300), 0.0)
    return FeatureMap(data=noisy.astype(np.float32), validity=fm.validity)
