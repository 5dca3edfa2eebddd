"""Flat key = value pipeline configuration shared by the library and CLI.

A config file is plain text: one `key = value` per line, `#` comments,
blank lines ignored. Every key maps to one PipelineConfig field, so the
full pipeline is reproducible from a single small file. CLI overrides are
applied on top of the file with the same parser.
"""

import dataclasses
import typing

from .errors import ConfigError
from .field import Layout
from .fitting import FitOptions
from .geometry import Camera
from .matching import DetectOptions
from .rendering import RenderOptions
from .solving import KERNEL_KINDS, RansacOptions, RobustKernel


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the map-building and localization pipeline."""

    # map building
    anchor_count: int = 16384
    nn: int = 6
    fit_steps: int = 0
    fit_learning_rate: float = 0.001
    fit_loss: str = "l1"
    fit_batch: str = "stochastic"
    storage_layout: str = "decoupled"
    # camera used when no explicit intrinsics are supplied
    image_width: int = 160
    image_height: int = 160
    focal: float = 300.0
    # sparse stage
    nms_radius: int = 4
    max_keypoints: int = 1024
    sim_floor: float = 0.5
    sparse_threshold: float = 0.7
    # dense stage
    dense_iterations: int = 4
    factor: int = 8
    window: int = 8
    temperature: float = 0.1
    conf_floor: float = 0.2
    subpixel: bool = True
    # match condensing
    condense: bool = True
    condense_k: int = 1024
    kmeans_max_iter: int = 5
    # robust pose solving
    ransac_threshold_px: float = 5.0
    ransac_confidence: float = 0.9999
    ransac_max_iters: int = 10000
    kernel: str = "huber"
    kernel_scale: float = 5.0
    refine_max_iters: int = 50
    # rendering
    alpha_valid: float = 0.5
    tile_size: int = 16
    low_pass: float = 0.3
    # benchmarking
    query_noise: float = 0.05
    timing_repeats: int = 1
    # global determinism
    seed: int = 0

    def __post_init__(self):
        positive_ints = (
            "anchor_count", "nn", "image_width", "image_height", "nms_radius",
            "max_keypoints", "factor", "window", "condense_k", "kmeans_max_iter",
            "ransac_max_iters", "refine_max_iters", "tile_size", "timing_repeats",
        )
        for name in positive_ints:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("dense_iterations", "fit_steps", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("focal", "fit_learning_rate", "temperature", "ransac_threshold_px"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("query_noise", "low_pass"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 < self.alpha_valid <= 1.0:
            raise ConfigError(f"alpha_valid must be in (0, 1], got {self.alpha_valid}")
        if not 0.0 < self.ransac_confidence < 1.0:
            raise ConfigError(
                f"ransac_confidence must be in (0, 1), got {self.ransac_confidence}"
            )
        if not 0.0 <= self.conf_floor < 1.0:
            raise ConfigError(f"conf_floor must be in [0, 1), got {self.conf_floor}")
        for name in ("sim_floor", "sparse_threshold"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [-1, 1], got {getattr(self, name)}")
        if self.kernel not in KERNEL_KINDS:
            raise ConfigError(f"kernel must be one of {KERNEL_KINDS}, got {self.kernel!r}")
        if self.kernel != "none" and not self.kernel_scale > 0:
            raise ConfigError(f"kernel_scale must be positive, got {self.kernel_scale}")
        try:
            Layout.parse(self.storage_layout)
        except ValueError as err:
            raise ConfigError(str(err)) from None
        # delegate the remaining enum checks to the owning options types
        FitOptions(steps=self.fit_steps, learning_rate=self.fit_learning_rate,
                   loss=self.fit_loss, batch=self.fit_batch)

    # -- derived option bundles -------------------------------------------

    def camera(self) -> Camera:
        """Default pinhole camera centered on the configured image size."""
        return Camera(
            fx=self.focal, fy=self.focal,
            cx=(self.image_width - 1) / 2.0, cy=(self.image_height - 1) / 2.0,
            width=self.image_width, height=self.image_height,
        )

    def render_options(self) -> RenderOptions:
        return RenderOptions(
            alpha_valid=self.alpha_valid, tile_size=self.tile_size,
            low_pass=self.low_pass,
        )

    def detect_options(self) -> DetectOptions:
        return DetectOptions(
            nms_radius=self.nms_radius, max_kpts=self.max_keypoints,
            sim_floor=self.sim_floor,
        )

    def ransac_options(self, seed: int) -> RansacOptions:
        return RansacOptions(
            threshold_px=self.ransac_threshold_px,
            confidence=self.ransac_confidence,
            max_iters=self.ransac_max_iters,
            seed=seed,
            kernel=RobustKernel(kind=self.kernel, scale=self.kernel_scale),
            refine_max_iters=self.refine_max_iters,
        )

    def fit_options(self) -> FitOptions:
        return FitOptions(
            steps=self.fit_steps, learning_rate=self.fit_learning_rate,
            loss=self.fit_loss, batch=self.fit_batch, seed=self.seed,
            render=self.render_options(),
        )


_FIELD_TYPES = typing.get_type_hints(PipelineConfig)
_TRUE_WORDS = frozenset({"true", "1", "yes", "on"})
_FALSE_WORDS = frozenset({"false", "0", "no", "off"})


def parse_keyvalues(text: str) -> dict:
    """Parse `key = value` lines into a string-to-string dict."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def coerce_value(raw: str, target_type, key: str):
    """Convert a raw string to the annotated field type."""
    if target_type is bool:
        word = raw.lower()
        if word in _TRUE_WORDS:
            return True
        if word in _FALSE_WORDS:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if target_type is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if target_type is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def coerce_fields(cls, raw: dict) -> dict:
    """Coerce a raw string dict against the dataclass `cls` field types."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    out = {}
    for key, value in raw.items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = coerce_value(value, hints[key], key) if isinstance(value, str) else value
    return out


def make_config(overrides: dict | None = None) -> PipelineConfig:
    """Defaults plus overrides; values may be raw strings or typed."""
    return PipelineConfig(**coerce_fields(PipelineConfig, dict(overrides or {})))


def replace_config(config: PipelineConfig, overrides: dict) -> PipelineConfig:
    """New config with the given keys replaced (string or typed values)."""
    merged = dataclasses.asdict(config)
    merged.update(coerce_fields(PipelineConfig, dict(overrides)))
    return PipelineConfig(**merged)


def parse_config(text: str) -> PipelineConfig:
    return make_config(parse_keyvalues(text))


def format_config(config: PipelineConfig) -> str:
    """Render a config as `key = value` lines; parse(format(c)) == c."""
    lines = []
    for f in dataclasses.fields(PipelineConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def load_config(path) -> PipelineConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}") from err
    return parse_config(text)


def save_config(config: PipelineConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(config))
