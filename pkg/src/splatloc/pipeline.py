"""End-to-end localization: sparse seed pose, then dense render-and-refine.

A MapBundle packages everything needed to localize against a scene: the
Gaussian feature field, the landmark subset used for sparse seeding, and
the pipeline configuration. `localize` runs the two-stage estimator:

1. sparse: detect keypoints on the query map, match them to landmarks,
   and solve a seed pose with RANSAC.
2. dense: repeatedly render the field at the current estimate, match the
   query against the render, condense the matches to proxies, lift them
   to 3D through the rendered depth, and re-solve.

The sparse stage failing aborts with LocalizationError; a dense iteration
failing returns the last successful pose with `degraded` set.
"""

import dataclasses
import struct
import time
import zlib

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .condensing import condense, lift_to_3d
from .config import PipelineConfig, format_config, make_config, parse_config
from .errors import (
    EmptyViewError,
    FieldFormatError,
    InsufficientMatchesError,
    LocalizationError,
    PoseEstimationError,
)
from .field import (
    GaussianField,
    Layout,
    SH_COEFFS,
    bytes_length_of,
    field_from_bytes,
    field_to_bytes,
)
from .fitting import LandmarkSet, TrainView, fit_features, sample_landmarks
from .geometry import Camera, Pose
from .maps import FeatureMap
from .matching import detect_keypoints, match_dense_coarse, match_sparse, pool_coarse, refine_matches
from .rendering import render
from .solving import Correspondences, ransac_pnp
from .synthetic import SyntheticSceneSpec, gen_synthetic_scene

BUNDLE_MAGIC = b"LLBD"
BUNDLE_VERSION = 1

# stage tags feeding per-stage RNG streams derived from the config seed
_SPARSE_TAG = 1
_CLUSTER_TAG = 0
_SOLVE_TAG = 1


def _stage_seed(base_seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence(entropy=[base_seed, *tags]).generate_state(1)[0])


@dataclasses.dataclass(frozen=True)
class MapBundle:
    """A localizable scene: field, landmark subset, and the build config."""

    field: GaussianField
    landmarks: LandmarkSet
    config: PipelineConfig

    def __post_init__(self):
        idx = self.landmarks.indices
        if idx.size == 0:
            raise ValueError("bundle needs at least one landmark")
        if idx.min() < 0 or idx.max() >= len(self.field):
            raise ValueError("landmark indices fall outside the field")


def bundle_to_bytes(bundle: MapBundle) -> bytes:
    config_blob = format_config(bundle.config).encode("utf-8")
    idx = bundle.landmarks.indices.astype("<i8")
    head = BUNDLE_MAGIC + struct.pack("<I", BUNDLE_VERSION)
    body = (
        struct.pack("<I", len(config_blob)) + config_blob
        + struct.pack("<I", idx.shape[0]) + idx.tobytes()
        + field_to_bytes(bundle.field)
    )
    crc = zlib.crc32(head + body) & 0xFFFFFFFF
    return head + body + struct.pack("<I", crc)


def bundle_from_bytes(blob: bytes) -> MapBundle:
    if len(blob) < 16:
        raise FieldFormatError("bundle shorter than header", offset=len(blob))
    if blob[:4] != BUNDLE_MAGIC:
        raise FieldFormatError(
            f"bad bundle magic {blob[:4]!r}, expected {BUNDLE_MAGIC!r}", offset=0
        )
    (version,) = struct.unpack("<I", blob[4:8])
    if version != BUNDLE_VERSION:
        raise FieldFormatError(f"unsupported bundle version {version}", offset=4)
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if stored_crc != (zlib.crc32(blob[:-4]) & 0xFFFFFFFF):
        raise FieldFormatError("bundle checksum mismatch", offset=len(blob) - 4)
    off = 8
    (config_len,) = struct.unpack("<I", blob[off:off + 4])
    off += 4
    if off + config_len > len(blob) - 4:
        raise FieldFormatError("config block overruns bundle", offset=off)
    config = parse_config(blob[off:off + config_len].decode("utf-8"))
    off += config_len
    (n_landmarks,) = struct.unpack("<I", blob[off:off + 4])
    off += 4
    if off + 8 * n_landmarks > len(blob) - 4:
        raise FieldFormatError("landmark block overruns bundle", offset=off)
    indices = np.frombuffer(blob, dtype="<i8", count=n_landmarks, offset=off).copy()
    off += 8 * n_landmarks
    field_blob = blob[off:-4]
    field_len = bytes_length_of(field_blob)
    if field_len != len(field_blob):
        raise FieldFormatError("trailing bytes after embedded field", offset=off + field_len)
    field = field_from_bytes(field_blob, base_offset=off)
    return MapBundle(field=field, landmarks=LandmarkSet(indices=indices), config=config)


def save_bundle(bundle: MapBundle, path) -> None:
    with open(path, "wb") as fh:
        fh.write(bundle_to_bytes(bundle))


def load_bundle(path) -> MapBundle:
    with open(path, "rb") as fh:
        return bundle_from_bytes(fh.read())


def _with_layout(field: GaussianField, layout: Layout) -> GaussianField:
    layout = Layout.parse(layout)
    if field.layout == layout:
        return field
    if layout is Layout.COUPLED:
        sh = np.zeros((len(field), SH_COEFFS), dtype=np.float32)
    else:
        sh = None
    return dataclasses.replace(field, layout=layout, sh=sh)


def build_map(
    source,
    views: "list[TrainView] | None" = None,
    config: "PipelineConfig | None" = None,
) -> MapBundle:
    """Build a localizable bundle from a field or a synthetic scene spec.

    When training views are given and fit_steps > 0, the field's features
    are refit against them first. Landmarks are then sampled and the whole
    bundle snapshots the config it was built with.
    """
    config = config if config is not None else make_config()
    if isinstance(source, SyntheticSceneSpec):
        field, _ = gen_synthetic_scene(source)
    elif isinstance(source, GaussianField):
        field = source
    else:
        raise TypeError(f"source must be a GaussianField or SyntheticSceneSpec, got {type(source)}")
    field = _with_layout(field, config.storage_layout)
    if views and config.fit_steps > 0:
        field = fit_features(field, views, config.fit_options()).field
    landmarks = sample_landmarks(field, anchor_count=config.anchor_count, nn=config.nn)
    return MapBundle(field=field, landmarks=landmarks, config=config)


@dataclasses.dataclass(frozen=True)
class LocResult:
    """Pose estimates plus per-stage diagnostics for one query."""

    pose_sparse: Pose
    pose_dense: Pose
    iteration_poses: "tuple[Pose, ...]"  # pose after each completed dense iteration
    n_sparse_matches: int
    n_dense_matches: int  # last completed dense iteration
    n_proxies: int  # last completed dense iteration
    timings: dict  # seconds: rasterization, clustering, pnp, matching, total_1, total_n
    success: bool
    degraded: bool = False
    failure_reason: str = ""


def localize(
    bundle: MapBundle,
    query: FeatureMap,
    camera: Camera,
    config: "PipelineConfig | None" = None,
) -> LocResult:
    """Estimate the query camera pose against the bundled scene."""
    config = config if config is not None else bundle.config
    field = bundle.field
    if query.dim != field.feature_dim:
        raise ValueError(
            f"query feature dim {query.dim} != field feature dim {field.feature_dim}"
        )
    if (query.width, query.height) != (camera.width, camera.height):
        raise ValueError(
            f"query map is {query.width}x{query.height} but the camera expects "
            f"{camera.width}x{camera.height}"
        )
    render_opts = config.render_options()
    timings = {"rasterization": 0.0, "clustering": 0.0, "pnp": 0.0, "matching": 0.0}
    t_start = time.perf_counter()

    # sparse stage: seed pose from landmark matches
    t0 = time.perf_counter()
    try:
        keypoints = detect_keypoints(query, field, bundle.landmarks, config.detect_options())
        if not keypoints:
            raise InsufficientMatchesError("no keypoints detected on the query", count=0)
        sparse = match_sparse(keypoints, field, bundle.landmarks, config.sparse_threshold)
        timings["matching"] += time.perf_counter() - t0
        corr = Correspondences(
            pixels=sparse.query_px,
            world_points=field.positions[sparse.primitive_indices].astype(np.float64),
        )
        t0 = time.perf_counter()
        seed_result = ransac_pnp(
            corr, camera, config.ransac_options(_stage_seed(config.seed, _SPARSE_TAG))
        )
        timings["pnp"] += time.perf_counter() - t0
    except (InsufficientMatchesError, PoseEstimationError, EmptyViewError) as err:
        raise LocalizationError(f"sparse stage failed: {err}") from err
    pose_sparse = seed_result.pose
    n_sparse = len(sparse)

    # dense stage: render, match, condense, re-solve
    pose = pose_sparse
    iteration_poses: list[Pose] = []
    n_dense = 0
    n_proxies = 0
    degraded = False
    reason = ""
    total_1 = None
    for i in range(1, config.dense_iterations + 1):
        try:
            t0 = time.perf_counter()
            out = render(field, camera, pose, render_opts)
            timings["rasterization"] += time.perf_counter() - t0

            t0 = time.perf_counter()
            coarse = match_dense_coarse(
                pool_coarse(query, config.factor),
                pool_coarse(out.features, config.factor),
                temperature=config.temperature,
                conf_floor=config.conf_floor,
            )
            dense = refine_matches(
                query, out.features, coarse,
                window=config.window, factor=config.factor, subpixel=config.subpixel,
            )
            timings["matching"] += time.perf_counter() - t0
            if len(dense) < 4:
                raise InsufficientMatchesError(
                    f"only {len(dense)} dense matches", count=len(dense)
                )
            if config.condense:
                condensed, cluster_seconds = condense(
                    dense, out.depth, camera, pose,
                    k=config.condense_k, max_iter=config.kmeans_max_iter,
                    seed=_stage_seed(config.seed, i, _CLUSTER_TAG),
                )
                timings["clustering"] += cluster_seconds
            else:
                condensed = lift_to_3d(
                    dense, np.arange(len(dense), dtype=np.int64), out.depth, camera, pose
                )
            corr = Correspondences(
                pixels=condensed.query_px, world_points=condensed.world_points
            )
            t0 = time.perf_counter()
            solve = ransac_pnp(
                corr, camera,
                config.ransac_options(_stage_seed(config.seed, i, _SOLVE_TAG)),
            )
            timings["pnp"] += time.perf_counter() - t0
            pose = solve.pose
            iteration_poses.append(pose)
            n_dense = len(dense)
            n_proxies = len(condensed)
        except (InsufficientMatchesError, PoseEstimationError, EmptyViewError) as err:
            degraded = True
            reason = f"dense iteration {i} failed: {err}"
            break
        if i == 1:
            total_1 = time.perf_counter() - t_start
    total_n = time.perf_counter() - t_start
    timings["total_1"] = total_n if total_1 is None else total_1
    timings["total_n"] = total_n
    return LocResult(
        pose_sparse=pose_sparse,
        pose_dense=pose,
        iteration_poses=tuple(iteration_poses),
        n_sparse_matches=n_sparse,
        n_dense_matches=n_dense,
        n_proxies=n_proxies,
        timings=timings,
        success=True,
        degraded=degraded,
        failure_reason=reason,
    )


class SparseToDenseLocalizer(BaseEstimator):
    """Estimator facade: fit() builds the map bundle, predict() localizes.

    Every constructor argument mirrors one PipelineConfig key, so the
    inherited get_params/set_params work with generic parameter-sweep
    tooling. Parameters are validated when the config is first used.
    """

    def __init__(
        self,
        anchor_count=16384,
        nn=6,
        fit_steps=0,
        fit_learning_rate=0.001,
        fit_loss="l1",
        fit_batch="stochastic",
        storage_layout="decoupled",
        image_width=160,
        image_height=160,
        focal=300.0,
        nms_radius=4,
        max_keypoints=1024,
        sim_floor=0.5,
        sparse_threshold=0.7,
        dense_iterations=4,
        factor=8,
        window=8,
        temperature=0.1,
        conf_floor=0.2,
        subpixel=True,
        condense=True,
        condense_k=1024,
        kmeans_max_iter=5,
        ransac_threshold_px=5.0,
        ransac_confidence=0.9999,
        ransac_max_iters=10000,
        kernel="huber",
        kernel_scale=5.0,
        refine_max_iters=50,
        alpha_valid=0.5,
        tile_size=16,
        low_pass=0.3,
        query_noise=0.05,
        timing_repeats=1,
        seed=0,
    ):
        self.anchor_count = anchor_count
        self.nn = nn
        self.fit_steps = fit_steps
        self.fit_learning_rate = fit_learning_rate
        self.fit_loss = fit_loss
        self.fit_batch = fit_batch
        self.storage_layout = storage_layout
        self.image_width = image_width
        self.image_height = image_height
        self.focal = focal
        self.nms_radius = nms_radius
        self.max_keypoints = max_keypoints
        self.sim_floor = sim_floor
        self.sparse_threshold = sparse_threshold
        self.dense_iterations = dense_iterations
        self.factor = factor
        self.window = window
        self.temperature = temperature
        self.conf_floor = conf_floor
        self.subpixel = subpixel
        self.condense = condense
        self.condense_k = condense_k
        self.kmeans_max_iter = kmeans_max_iter
        self.ransac_threshold_px = ransac_threshold_px
        self.ransac_confidence = ransac_confidence
        self.ransac_max_iters = ransac_max_iters
        self.kernel = kernel
        self.kernel_scale = kernel_scale
        self.refine_max_iters = refine_max_iters
        self.alpha_valid = alpha_valid
        self.tile_size = tile_size
        self.low_pass = low_pass
        self.query_noise = query_noise
        self.timing_repeats = timing_repeats
        self.seed = seed

    def resolved_config(self) -> PipelineConfig:
        """Validate the current parameters into a PipelineConfig."""
        return make_config(self.get_params())

    def fit(self, source, views=None) -> "SparseToDenseLocalizer":
        """Build and store the map bundle for a field or scene spec."""
        self.bundle_ = build_map(source, views=views, config=self.resolved_config())
        return self

    def localize(self, query: FeatureMap, camera: "Camera | None" = None) -> LocResult:
        self._check_fitted()
        config = self.resolved_config()
        camera = camera if camera is not None else config.camera()
        return localize(self.bundle_, query, camera, config)

    def predict(self, queries, cameras=None):
        """Dense pose for each query map; a single map yields a single Pose."""
        self._check_fitted()
        config = self.resolved_config()
        single = isinstance(queries, FeatureMap)
        if single:
            queries = [queries]
        if cameras is None:
            cameras = [config.camera()] * len(queries)
        elif isinstance(cameras, Camera):
            cameras = [cameras] * len(queries)
        if len(cameras) != len(queries):
            raise ValueError("need one camera per query")
        poses = [
            localize(self.bundle_, q, cam, config).pose_dense
            for q, cam in zip(queries, cameras)
        ]
        return poses[0] if single else poses

    def _check_fitted(self):
        if not hasattr(self, "bundle_"):
            raise NotFittedError("this localizer has no map; call fit() first")
