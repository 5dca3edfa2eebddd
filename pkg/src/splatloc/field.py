"""Color-free Gaussian scene fields: data model, storage accounting, file I/O.

A field is a flat set of anisotropic 3D Gaussians, each carrying a unit
feature vector instead of color. The "coupled" layout additionally stores 48
spherical-harmonics coefficients per primitive (degree 3, three channels) so
the storage cost of a color-bearing field can be measured; no localization
code ever reads them.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import FieldFormatError
from .validation import as_array, check_in_range, check_unit_rows

MAGIC = b"LLGF"
FORMAT_VERSION = 1
# Fixed per-file overhead: magic, version, layout, count, dim (5 x u32 with
# the 4-byte magic) plus the trailing CRC32.
HEADER_BYTES = 24
SH_COEFFS = 48


class Layout(enum.IntEnum):
    """Per-primitive storage layout."""

    DECOUPLED = 0  # position, rotation, scale, opacity, feature
    COUPLED = 1  # same plus 48 SH coefficients

    @staticmethod
    def parse(value: "Layout | str | int") -> "Layout":
        if isinstance(value, Layout):
            return value
        if isinstance(value, str):
            try:
                return Layout[value.upper()]
            except KeyError:
                raise ValueError(f"unknown layout {value!r}") from None
        return Layout(value)


@dataclass(frozen=True)
class GaussianPrimitive:
    """One Gaussian: center, orientation, per-axis stddev, opacity, feature."""

    position: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    scale: np.ndarray  # per-axis standard deviations, > 0
    opacity: float  # in (0, 1]
    feature: np.ndarray  # unit D-vector
    sh: np.ndarray | None = None  # 48 coefficients, coupled layout only


@dataclass(frozen=True)
class GaussianField:
    """Ordered set of Gaussian primitives with a common feature dimension.

    All arrays are stored as float32 (the canonical precision of the file
    format); computation promotes to float64 where accuracy matters.
    Instances are immutable; updates produce new fields.
    """

    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4), unit quaternions (w, x, y, z)
    scales: np.ndarray  # (N, 3), > 0
    opacities: np.ndarray  # (N,), in (0, 1]
    features: np.ndarray  # (N, D), unit rows
    layout: Layout = Layout.DECOUPLED
    sh: np.ndarray | None = None  # (N, 48) iff layout is COUPLED

    def __post_init__(self):
        positions = as_array(self.positions, "positions", np.float32, (None, 3))
        n = positions.shape[0]
        rotations = as_array(self.rotations, "rotations", np.float32, (n, 4))
        scales = as_array(self.scales, "scales", np.float32, (n, 3))
        opacities = as_array(self.opacities, "opacities", np.float32, (n,))
        features = as_array(self.features, "features", np.float32, (n, None))
        layout = Layout.parse(self.layout)
        check_unit_rows(rotations, "rotations", 1e-6)
        check_in_range(scales, "scales", lo=0.0, lo_open=True)
        check_in_range(opacities, "opacities", lo=0.0, hi=1.0, lo_open=True)
        if layout is Layout.COUPLED:
            if self.sh is None:
                raise ValueError("coupled layout requires sh coefficients")
            sh = as_array(self.sh, "sh", np.float32, (n, SH_COEFFS))
        else:
            if self.sh is not None:
                raise ValueError("decoupled layout must not carry sh coefficients")
            sh = None
        for name, value in [
            ("positions", positions),
            ("rotations", rotations),
            ("scales", scales),
            ("opacities", opacities),
            ("features", features),
            ("layout", layout),
            ("sh", sh),
        ]:
            object.__setattr__(self, name, value)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            position=self.positions[i],
            rotation=self.rotations[i],
            scale=self.scales[i],
            opacity=float(self.opacities[i]),
            feature=self.features[i],
            sh=None if self.sh is None else self.sh[i],
        )

    def with_features(self, features: np.ndarray) -> "GaussianField":
        return replace(self, features=features)

    def extent(self) -> float:
        """Diagonal of the axis-aligned bounding box of the centers."""
        if len(self) == 0:
            return 0.0
        span = self.positions.max(axis=0) - self.positions.min(axis=0)
        return float(np.linalg.norm(span.astype(np.float64)))

    def centroid(self) -> np.ndarray:
        return self.positions.astype(np.float64).mean(axis=0)


@dataclass(frozen=True)
class StorageReport:
    primitive_count: int
    bytes_per_primitive: int
    total_bytes: int
    layout: Layout

    @property
    def mebibytes(self) -> float:
        return self.total_bytes / (1024.0 * 1024.0)


def bytes_per_primitive(layout: Layout, feature_dim: int) -> int:
    """32-bit scalars per primitive: x(3) + q(4) + s(3) + alpha(1) [+ sh(48)] + f(D)."""
    scalars = 3 + 4 + 3 + 1 + feature_dim
    if Layout.parse(layout) is Layout.COUPLED:
        scalars += SH_COEFFS
    return scalars * 4


def report_for_counts(
    primitive_count: int, feature_dim: int, layout: Layout
) -> StorageReport:
    """Storage cost for a hypothetical field, without materializing it."""
    layout = Layout.parse(layout)
    bpp = bytes_per_primitive(layout, feature_dim)
    return StorageReport(
        primitive_count=primitive_count,
        bytes_per_primitive=bpp,
        total_bytes=primitive_count * bpp + HEADER_BYTES,
        layout=layout,
    )


def storage_report(field: GaussianField) -> StorageReport:
    """Storage cost of a field under its layout; matches the file size exactly."""
    return report_for_counts(len(field), field.feature_dim, field.layout)


def _interleave(field: GaussianField) -> np.ndarray:
    """Per-primitive records in declaration order as little-endian float32."""
    parts = [
        field.positions,
        field.rotations,
        field.scales,
        field.opacities[:, None],
    ]
    if field.layout is Layout.COUPLED:
        parts.append(field.sh)
    parts.append(field.features)
    return np.concatenate(parts, axis=1).astype("<f4")


def field_to_bytes(field: GaussianField) -> bytes:
    header = MAGIC + struct.pack(
        "<IIII", FORMAT_VERSION, int(field.layout), len(field), field.feature_dim
    )
    body = _interleave(field).tobytes() if len(field) else b""
    crc = zlib.crc32(header + body) & 0xFFFFFFFF
    return header + body + struct.pack("<I", crc)


def save_field(field: GaussianField, path) -> None:
    with open(path, "wb") as fh:
        fh.write(field_to_bytes(field))


def field_from_bytes(blob: bytes, base_offset: int = 0) -> GaussianField:
    """Parse a serialized field; errors carry the absolute byte offset."""
    if len(blob) < HEADER_BYTES:
        raise FieldFormatError("file shorter than header", offset=base_offset + len(blob))
    if blob[:4] != MAGIC:
        raise FieldFormatError(
            f"bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=base_offset
        )
    version, layout_code, count, dim = struct.unpack("<IIII", blob[4:20])
    if version != FORMAT_VERSION:
        raise FieldFormatError(f"unsupported version {version}", offset=base_offset + 4)
    try:
        layout = Layout(layout_code)
    except ValueError:
        raise FieldFormatError(
            f"unknown layout code {layout_code}", offset=base_offset + 8
        ) from None
    scalars = 3 + 4 + 3 + 1 + dim + (SH_COEFFS if layout is Layout.COUPLED else 0)
    body_bytes = count * scalars * 4
    expected = 20 + body_bytes + 4
    if len(blob) < expected:
        raise FieldFormatError(
            f"truncated: expected {expected} bytes, got {len(blob)}",
            offset=base_offset + len(blob),
        )
    stored_crc = struct.unpack("<I", blob[20 + body_bytes : expected])[0]
    actual_crc = zlib.crc32(blob[: 20 + body_bytes]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise FieldFormatError(
            f"CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}",
            offset=base_offset + 20 + body_bytes,
        )
    records = np.frombuffer(
        blob, dtype="<f4", count=count * scalars, offset=20
    ).reshape(count, scalars)
    cols = {}
    at = 0
    for name, width in [("positions", 3), ("rotations", 4), ("scales", 3), ("opacities", 1)]:
        cols[name] = records[:, at : at + width]
        at += width
    sh = None
    if layout is Layout.COUPLED:
        sh = records[:, at : at + SH_COEFFS]
        at += SH_COEFFS
    features = records[:, at : at + dim]
    return GaussianField(
        positions=cols["positions"],
        rotations=cols["rotations"],
        scales=cols["scales"],
        opacities=cols["opacities"][:, 0],
        features=features,
        layout=layout,
        sh=sh,
    )


def load_field(path) -> GaussianField:
    with open(path, "rb") as fh:
        blob = fh.read()
    return field_from_bytes(blob)


def bytes_length_of(blob: bytes) -> int:
    """Length in bytes of the serialized field starting at blob[0].

    Used when a field is embedded inside a larger container.
    """
    if len(blob) < HEADER_BYTES or blob[:4] != MAGIC:
        raise FieldFormatError("embedded field header invalid", offset=0)
    _, layout_code, count, dim = struct.unpack("<IIII", blob[4:20])
    try:
        layout = Layout(layout_code)
    except ValueError:
        raise FieldFormatError(f"unknown layout code {layout_code}", offset=8) from None
    scalars = 3 + 4 + 3 + 1 + dim + (SH_COEFFS if layout is Layout.COUPLED else 0)
    return 20 + count * scalars * 4 + 4
