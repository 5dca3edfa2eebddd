"""Rendered per-pixel maps and their binary container format.

FeatureMap stores a unit feature vector per valid pixel; DepthMap stores
camera-frame Z. Both carry an explicit validity mask (pixels whose
accumulated opacity cleared the threshold during rendering).

The on-disk tensor container is: magic "LLFM", u32 version=1, u32 height,
u32 width, u32 dim, row-major little-endian float32 data, then the validity
mask packed row-major into bytes (big-endian bit order). Depth maps reuse
the container with dim=1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FieldFormatError
from .validation import as_array, check_in_range

MAGIC = b"LLFM"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class FeatureMap:
    """H x W x D float32 features, unit-norm at valid pixels."""

    data: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        data = as_array(self.data, "data", np.float32, (None, None, None))
        validity = np.ascontiguousarray(self.validity, dtype=bool)
        if validity.shape != data.shape[:2]:
            raise ValueError(
                f"validity shape {validity.shape} does not match data {data.shape[:2]}"
            )
        if validity.any():
            norms = np.linalg.norm(data[validity].astype(np.float64), axis=-1)
            worst = float(np.max(np.abs(norms - 1.0)))
            if worst > 1e-5:
                raise ValueError(
                    f"valid pixels must hold unit features (worst deviation {worst:.3g})"
                )
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "validity", validity)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def valid_count(self) -> int:
        return int(self.validity.sum())


@dataclass(frozen=True)
class DepthMap:
    """H x W camera-frame depths, positive at valid pixels."""

    depth: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        depth = as_array(self.depth, "depth", np.float32, (None, None))
        validity = np.ascontiguousarray(self.validity, dtype=bool)
        if validity.shape != depth.shape:
            raise ValueError(
                f"validity shape {validity.shape} does not match depth {depth.shape}"
            )
        if validity.any():
            check_in_range(depth[validity], "valid depths", lo=0.0, lo_open=True)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "validity", validity)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


def _tensor_to_bytes(data: np.ndarray, validity: np.ndarray) -> bytes:
    h, w = validity.shape
    d = data.shape[2]
    header = MAGIC + struct.pack("<IIII", FORMAT_VERSION, h, w, d)
    body = data.astype("<f4").tobytes()
    bits = np.packbits(validity.reshape(-1)).tobytes()
    return header + body + bits


def _tensor_from_bytes(blob: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(blob) < 20:
        raise FieldFormatError("file shorter than header", offset=len(blob))
    if blob[:4] != MAGIC:
        raise FieldFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=0)
    version, h, w, d = struct.unpack("<IIII", blob[4:20])
    if version != FORMAT_VERSION:
        raise FieldFormatError(f"unsupported version {version}", offset=4)
    n_data = h * w * d * 4
    n_bits = (h * w + 7) // 8
    expected = 20 + n_data + n_bits
    if len(blob) < expected:
        raise FieldFormatError(
            f"truncated: expected {expected} bytes, got {len(blob)}", offset=len(blob)
        )
    data = np.frombuffer(blob, dtype="<f4", count=h * w * d, offset=20).reshape(h, w, d)
    packed = np.frombuffer(blob, dtype=np.uint8, count=n_bits, offset=20 + n_data)
    validity = np.unpackbits(packed, count=h * w).astype(bool).reshape(h, w)
    return data.copy(), validity


def save_feature_map(fm: FeatureMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_tensor_to_bytes(fm.data, fm.validity))


def load_feature_map(path) -> FeatureMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    data, validity = _tensor_from_bytes(blob)
    return FeatureMap(data=data, validity=validity)


def save_depth_map(dm: DepthMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_tensor_to_bytes(dm.depth[:, :, None], dm.validity))


def load_depth_map(path) -> DepthMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    data, validity = _tensor_from_bytes(blob)
    if data.shape[2] != 1:
        raise FieldFormatError(f"expected dim=1 for a depth map, got {data.shape[2]}")
    return DepthMap(depth=data[:, :, 0], validity=validity)


def write_depth_pgm(dm: DepthMap, path, depth_scale: float) -> None:
    """16-bit binary PGM; gray = clamp(depth / depth_scale, 0, 1) * 65535.

    depth_scale is a fixed, caller-chosen full-white depth so dumps from the
    same scene are comparable. Invalid pixels are black.
    """
    if depth_scale <= 0:
        raise ValueError("depth_scale must be positive")
    norm = np.clip(dm.depth.astype(np.float64) / depth_scale, 0.0, 1.0)
    gray = np.where(dm.validity, np.round(norm * 65535.0), 0.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{dm.width} {dm.height}\n65535\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_alpha_pgm(alpha: np.ndarray, path) -> None:
    """16-bit binary PGM of accumulated opacity; 1.0 maps to 65535."""
    alpha = np.asarray(alpha, dtype=np.float64)
    gray = np.round(np.clip(alpha, 0.0, 1.0) * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{alpha.shape[1]} {alpha.shape[0]}\n65535\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_feature_ppm(fm: FeatureMap, path) -> None:
    """Binary PPM of the first three feature channels, [-1, 1] -> [0, 255].

    Invalid pixels are black. Maps with fewer than three channels repeat the
    last channel.
    """
    channels = [fm.data[:, :, min(c, fm.dim - 1)].astype(np.float64) for c in range(3)]
    rgb = np.stack(channels, axis=-1)
    rgb = np.round((np.clip(rgb, -1.0, 1.0) + 1.0) * 0.5 * 255.0)
    rgb = np.where(fm.validity[:, :, None], rgb, 0.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{fm.width} {fm.height}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
