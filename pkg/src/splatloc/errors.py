"""Exception types shared across the package."""

from __future__ import annotations


class SplatlocError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SplatlocError):
    """Invalid configuration value, file, or CLI argument."""


class FieldFormatError(SplatlocError):
    """Malformed or corrupt scene/bundle file.

    Carries the byte offset at which parsing failed when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyViewError(SplatlocError):
    """Rendering produced no valid pixels, or an input map has none."""


class InsufficientMatchesError(SplatlocError):
    """Too few correspondences to attempt pose estimation."""

    def __init__(self, message: str, count: int = 0):
        super().__init__(message)
        self.count = count


class PoseEstimationError(SplatlocError):
    """RANSAC could not produce a pose supported by enough inliers.

    Diagnostics: number of correspondences seen, best inlier count
    reached, and hypotheses evaluated before giving up.
    """

    def __init__(
        self,
        message: str,
        n_correspondences: int = 0,
        best_inlier_count: int = 0,
        iterations: int = 0,
    ):
        super().__init__(
            f"{message} (correspondences={n_correspondences}, "
            f"best_inliers={best_inlier_count}, iterations={iterations})"
        )
        self.n_correspondences = n_correspondences
        self.best_inlier_count = best_inlier_count
        self.iterations = iterations


class LocalizationError(SplatlocError):
    """The sparse stage failed, so no pose estimate exists at all."""
