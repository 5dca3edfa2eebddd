"""Input validation helpers used by constructors and estimator entry points."""

from __future__ import annotations

import numpy as np


def as_array(
    x,
    name: str,
    dtype: np.dtype | type,
    shape: tuple[int | None, ...] | None = None,
    finite: bool = True,
) -> np.ndarray:
    """Coerce to a contiguous array of the given dtype and check its shape.

    Entries of `shape` that are None match any extent. Raises ValueError
    with the offending name on mismatch or non-finite content.
    """
    arr = np.ascontiguousarray(x, dtype=dtype)
    if shape is not None:
        if arr.ndim != len(shape):
            raise ValueError(
                f"{name}: expected {len(shape)} dimensions, got shape {arr.shape}"
            )
        for axis, want in enumerate(shape):
            if want is not None and arr.shape[axis] != want:
                raise ValueError(
                    f"{name}: expected extent {want} on axis {axis}, "
                    f"got shape {arr.shape}"
                )
    if finite and arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def check_unit_rows(arr: np.ndarray, name: str, tol: float) -> None:
    """Require every row of `arr` to have unit L2 norm within `tol`."""
    if arr.size == 0:
        return
    norms = np.linalg.norm(arr.astype(np.float64), axis=-1)
    worst = float(np.max(np.abs(norms - 1.0)))
    if worst > tol:
        raise ValueError(f"{name}: rows must be unit length (worst deviation {worst:.3g})")


def check_in_range(
    arr: np.ndarray,
    name: str,
    lo: float | None = None,
    hi: float | None = None,
    lo_open: bool = False,
) -> None:
    """Require all entries to fall in the given closed (or half-open) range."""
    if arr.size == 0:
        return
    if lo is not None:
        bad = np.min(arr) <= lo if lo_open else np.min(arr) < lo
        if bad:
            op = ">" if lo_open else ">="
            raise ValueError(f"{name}: values must be {op} {lo}")
    if hi is not None and np.max(arr) > hi:
        raise ValueError(f"{name}: values must be <= {hi}")


def check_rotation(R: np.ndarray, name: str = "R", tol: float = 1e-6) -> None:
    """Require a proper rotation: orthonormal with determinant +1."""
    err = float(np.max(np.abs(R.T @ R - np.eye(3))))
    if err > tol:
        raise ValueError(f"{name}: not orthonormal (deviation {err:.3g})")
    det = float(np.linalg.det(R))
    if abs(det - 1.0) > tol:
        raise ValueError(f"{name}: determinant must be +1, got {det:.6g}")


def check_positive(value: float, name: str) -> None:
    if not value > 0:
        raise ValueError(f"{name}: must be positive, got {value}")
