"""Shared builders for randomized test inputs."""

from __future__ import annotations

import numpy as np

from splatloc.field import GaussianField, Layout
from splatloc.geometry import Camera, Pose, so3_exp


def unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_field(
    rng: np.random.Generator,
    n: int = 50,
    dim: int = 8,
    layout: Layout = Layout.DECOUPLED,
    extent: float = 2.0,
) -> GaussianField:
    sh = None
    if Layout.parse(layout) is Layout.COUPLED:
        sh = rng.normal(size=(n, 48))
    return GaussianField(
        positions=rng.uniform(-extent / 2, extent / 2, size=(n, 3)),
        rotations=unit_rows(rng, n, 4),
        scales=rng.uniform(0.02, 0.08, size=(n, 3)) * extent,
        opacities=rng.uniform(0.5, 1.0, size=n),
        features=unit_rows(rng, n, dim),
        layout=layout,
        sh=sh,
    )


def random_pose(rng: np.random.Generator, max_angle: float = np.pi * 0.9) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, max_angle)
    return Pose(so3_exp(axis * angle), rng.normal(size=3))


def default_camera(width: int = 64, height: int = 64, f: float = 80.0) -> Camera:
    return Camera(
        fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, width=width, height=height
    )


def front_facing_pose(distance: float = 3.0) -> Pose:
    """Camera on -Z looking toward the origin along +Z."""
    return Pose(np.eye(3), np.array([0.0, 0.0, distance]))
