"""Benchmark and ablation harness over synthetic scenes.

Generates ground-truth query poses on a shell around the scene, runs the
full localization pipeline per query, and aggregates medians, threshold
accuracies, per-stage timings, and storage accounting into a RunReport
with a stable CSV schema. `ablate` pairs condensing on/off runs on the
same queries and reports the robust-solve speedup and storage ratios.
"""

import dataclasses

import numpy as np

from .config import PipelineConfig, make_config, replace_config
from .errors import LocalizationError
from .field import Layout, StorageReport, report_for_counts
from .geometry import look_at_pose, pose_error
from .pipeline import MapBundle, build_map, localize
from .rendering import render
from .synthetic import SyntheticSceneSpec, gen_query, gen_synthetic_scene

CSV_HEADER = (
    "query_id,trans_err,rot_err_deg,n_sparse,n_dense,n_proxies,"
    "rast_ms,clus_ms,pnp_ms,total1_ms,totalN_ms,success"
)

# accuracy thresholds: translation as a fraction of scene extent, rotation
# in degrees; the coarse pair mirrors a 5 cm / 5 deg budget on a 5 m scene
COARSE_TRANS_FRAC = 0.01
COARSE_ROT_DEG = 5.0
FINE_TRANS_FRAC = 0.004
FINE_ROT_DEG = 2.0

_POSE_TAG = 2
_QUERY_TAG = 3


@dataclasses.dataclass(frozen=True)
class QueryRecord:
    """One benchmark query; timing fields are milliseconds."""

    query_id: int
    trans_err: float
    rot_err_deg: float
    n_sparse: int
    n_dense: int
    n_proxies: int
    rast_ms: float
    clus_ms: float
    pnp_ms: float
    total1_ms: float
    totalN_ms: float
    success: bool
    # not part of the CSV schema: sparse-stage errors and degradation
    sparse_trans_err: float = float("nan")
    sparse_rot_err_deg: float = float("nan")
    degraded: bool = False

    def csv_row(self) -> str:
        return ",".join([
            str(self.query_id),
            repr(self.trans_err),
            repr(self.rot_err_deg),
            str(self.n_sparse),
            str(self.n_dense),
            str(self.n_proxies),
            f"{self.rast_ms:.3f}",
            f"{self.clus_ms:.3f}",
            f"{self.pnp_ms:.3f}",
            f"{self.total1_ms:.3f}",
            f"{self.totalN_ms:.3f}",
            str(int(self.success)),
        ])


@dataclasses.dataclass(frozen=True)
class RunReport:
    """Aggregated benchmark outcome over one scene."""

    records: "tuple[QueryRecord, ...]"
    scene_extent: float
    median_trans_err: float
    median_rot_err_deg: float
    accuracy_coarse: float  # trans <= 1% extent and rot <= 5 deg
    accuracy_fine: float  # trans <= 0.4% extent and rot <= 2 deg
    frac_dense_better: float  # dense trans err strictly below sparse, among successes
    n_success: int
    n_queries: int
    storage_decoupled: StorageReport
    storage_coupled: StorageReport

    def csv_text(self) -> str:
        return "\n".join([CSV_HEADER] + [r.csv_row() for r in self.records]) + "\n"


def write_report_csv(report: RunReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.csv_text())


def scene_extent_of(positions: np.ndarray) -> float:
    """Largest bounding-box side of the primitive centers."""
    if positions.shape[0] == 0:
        raise ValueError("cannot measure the extent of an empty field")
    span = positions.max(axis=0) - positions.min(axis=0)
    return float(span.max())


def sample_query_poses(
    bundle: MapBundle,
    n: int,
    seed: int = 0,
    min_valid_frac: float = 0.3,
    max_attempts_per_pose: int = 60,
):
    """Ground-truth poses on a shell 1-2x the extent, looking at the centroid.

    Rejection-samples until each rendered view covers at least
    min_valid_frac of the image. Deterministic given the seed.
    """
    field = bundle.field
    centroid = field.positions.astype(np.float64).mean(axis=0)
    extent = scene_extent_of(field.positions)
    camera = bundle.config.camera()
    opts = bundle.config.render_options()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, _POSE_TAG]))
    poses = []
    attempts = 0
    budget = max_attempts_per_pose * n
    while len(poses) < n and attempts < budget:
        attempts += 1
        direction = rng.normal(size=3)
        norm = np.linalg.norm(direction)
        if norm < 1e-9:
            continue
        direction /= norm
        radius = rng.uniform(1.0, 2.0) * extent
        eye = centroid + direction * radius
        up = np.array([0.0, 1.0, 0.0])
        if abs(direction[1]) > 0.99:
            up = np.array([1.0, 0.0, 0.0])
        pose = look_at_pose(eye, centroid, up)
        out = render(field, camera, pose, opts)
        if out.features.validity.mean() >= min_valid_frac:
            poses.append(pose)
    if len(poses) < n:
        raise RuntimeError(
            f"found only {len(poses)}/{n} viable query poses in {attempts} attempts"
        )
    return poses


def _failed_record(query_id: int) -> QueryRecord:
    nan = float("nan")
    return QueryRecord(
        query_id=query_id, trans_err=nan, rot_err_deg=nan,
        n_sparse=0, n_dense=0, n_proxies=0,
        rast_ms=nan, clus_ms=nan, pnp_ms=nan, total1_ms=nan, totalN_ms=nan,
        success=False,
    )


def _ms(timings: dict, key: str) -> float:
    return timings[key] * 1000.0


def _localize_record(bundle, query, camera, config, gt_pose, query_id) -> QueryRecord:
    repeats = max(1, config.timing_repeats)
    results = [localize(bundle, query, camera, config) for _ in range(repeats)]
    res = results[0]
    trans, rot = pose_error(res.pose_dense, gt_pose)
    strans, srot = pose_error(res.pose_sparse, gt_pose)

    def med(key):
        return float(np.median([_ms(r.timings, key) for r in results]))

    return QueryRecord(
        query_id=query_id, trans_err=float(trans), rot_err_deg=float(rot),
        n_sparse=res.n_sparse_matches, n_dense=res.n_dense_matches,
        n_proxies=res.n_proxies,
        rast_ms=med("rasterization"), clus_ms=med("clustering"),
        pnp_ms=med("pnp"), total1_ms=med("total_1"), totalN_ms=med("total_n"),
        success=True,
        sparse_trans_err=float(strans), sparse_rot_err_deg=float(srot),
        degraded=res.degraded,
    )


def _aggregate(records, extent, field) -> RunReport:
    ok = [r for r in records if r.success]
    n = len(records)
    trans = np.array([r.trans_err for r in ok])
    rot = np.array([r.rot_err_deg for r in ok])
    coarse = int(np.sum((trans <= COARSE_TRANS_FRAC * extent) & (rot <= COARSE_ROT_DEG)))
    fine = int(np.sum((trans <= FINE_TRANS_FRAC * extent) & (rot <= FINE_ROT_DEG)))
    better = [r for r in ok if r.trans_err < r.sparse_trans_err]
    return RunReport(
        records=tuple(records),
        scene_extent=extent,
        median_trans_err=float(np.median(trans)) if ok else float("nan"),
        median_rot_err_deg=float(np.median(rot)) if ok else float("nan"),
        accuracy_coarse=coarse / n,
        accuracy_fine=fine / n,
        frac_dense_better=len(better) / len(ok) if ok else float("nan"),
        n_success=len(ok),
        n_queries=n,
        storage_decoupled=report_for_counts(len(field), field.feature_dim, Layout.DECOUPLED),
        storage_coupled=report_for_counts(len(field), field.feature_dim, Layout.COUPLED),
    )


def run_benchmark(
    spec: SyntheticSceneSpec,
    n_queries: int,
    config: "PipelineConfig | None" = None,
    out_csv=None,
) -> RunReport:
    """Localize n_queries noisy synthetic views and aggregate the outcome.

    Per-query failures are recorded with success=0; they count against the
    accuracy percentages and are excluded from the medians. Everything but
    the timing columns is deterministic given the config seed.
    """
    if n_queries < 1:
        raise ValueError("n_queries must be >= 1")
    config = config if config is not None else make_config()
    field, _ = gen_synthetic_scene(spec)
    bundle = build_map(field, config=config)
    camera = config.camera()
    extent = scene_extent_of(field.positions)
    poses = sample_query_poses(bundle, n_queries, seed=config.seed)
    records = []
    for qid, gt in enumerate(poses):
        query = gen_query(
            field, camera, gt, config.query_noise,
            seed=_stage_seed_for_query(config.seed, qid),
            opts=config.render_options(),
        )
        try:
            records.append(_localize_record(bundle, query, camera, config, gt, qid))
        except LocalizationError:
            records.append(_failed_record(qid))
    report = _aggregate(records, extent, field)
    if out_csv is not None:
        write_report_csv(report, out_csv)
    return report


def _stage_seed_for_query(base_seed: int, query_id: int) -> int:
    entropy = [base_seed, _QUERY_TAG, query_id]
    return int(np.random.SeedSequence(entropy=entropy).generate_state(1)[0])


@dataclasses.dataclass(frozen=True)
class AblationReport:
    """Paired condensing on/off runs plus storage accounting for both layouts."""

    run_condense_on: RunReport
    run_condense_off: RunReport
    pnp_speedup: float  # median over shared successes of pnp_ms(off) / pnp_ms(on)
    median_trans_rel_diff: float  # |on - off| / max(off, eps) of median trans errors
    median_rot_rel_diff: float
    storage_ratio: float  # decoupled bytes / coupled bytes at this feature dim

    def grid_rows(self):
        """The 2x2 {condensing} x {storage accounting} summary grid."""
        rows = []
        for name, run in (("on", self.run_condense_on), ("off", self.run_condense_off)):
            for layout, storage in (
                ("decoupled", run.storage_decoupled),
                ("coupled", run.storage_coupled),
            ):
                rows.append({
                    "condense": name,
                    "layout": layout,
                    "accuracy_coarse": run.accuracy_coarse,
                    "accuracy_fine": run.accuracy_fine,
                    "median_trans_err": run.median_trans_err,
                    "median_rot_err_deg": run.median_rot_err_deg,
                    "storage_mib": storage.mebibytes,
                })
        return rows


def _rel_diff(a: float, b: float) -> float:
    denom = max(abs(a), abs(b), 1e-12)
    return abs(a - b) / denom


def ablate(
    spec: SyntheticSceneSpec,
    n_queries: int,
    config: "PipelineConfig | None" = None,
) -> AblationReport:
    """Pair condensing on/off on identical queries; report speed and accuracy."""
    config = config if config is not None else make_config()
    run_on = run_benchmark(spec, n_queries, replace_config(config, {"condense": True}))
    run_off = run_benchmark(spec, n_queries, replace_config(config, {"condense": False}))
    ratios = [
        off.pnp_ms / on.pnp_ms
        for on, off in zip(run_on.records, run_off.records)
        if on.success and off.success and on.pnp_ms > 0
    ]
    speedup = float(np.median(ratios)) if ratios else float("nan")
    storage = run_on.storage_decoupled.total_bytes / run_on.storage_coupled.total_bytes
    return AblationReport(
        run_condense_on=run_on,
        run_condense_off=run_off,
        pnp_speedup=speedup,
        median_trans_rel_diff=_rel_diff(run_on.median_trans_err, run_off.median_trans_err),
        median_rot_rel_diff=_rel_diff(run_on.median_rot_err_deg, run_off.median_rot_err_deg),
        storage_ratio=float(storage),
    )


ABLATION_CSV_HEADER = (
    "condense,layout,accuracy_coarse,accuracy_fine,"
    "median_trans_err,median_rot_err_deg,storage_mib"
)


def write_ablation_csv(report: AblationReport, path) -> None:
    lines = [ABLATION_CSV_HEADER]
    for row in report.grid_rows():
        lines.append(",".join([
            row["condense"], row["layout"],
            repr(row["accuracy_coarse"]), repr(row["accuracy_fine"]),
            repr(row["median_trans_err"]), repr(row["median_rot_err_deg"]),
            f"{row['storage_mib']:.3f}",
        ]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
