"""Command-line tools for building maps, localizing queries, and benchmarks.

Subcommands:
  gen-scene   synthesize a Gaussian feature field and write it as .llgf
  fit         build a map bundle (.llbd) from a field, optionally refining
              features against held-out training views
  make-query  render a (optionally noisy) query feature map from a pose
  localize    estimate the camera pose of a query map against a bundle
  bench       run the synthetic localization benchmark and write a CSV
  ablate      paired condensing on/off benchmark plus storage accounting
  inspect     print a summary of any .llgf/.llbd/.fmap/.dmap file

Text sidecar formats: camera files are `key = value` lines for the pinhole
intrinsics (fx, fy, cx, cy, width, height); pose files are a 4x4 row-major
camera-from-world matrix as whitespace-separated text.

Exit codes: 0 success, 2 bad input (config, file format, or I/O), and
3 when localization fails to produce a pose.
"""

import argparse
import dataclasses
import pathlib
import sys

import numpy as np

from .bench import ablate, run_benchmark, write_ablation_csv
from .config import (
    coerce_fields,
    format_config,
    make_config,
    parse_keyvalues,
    replace_config,
    save_config,
)
from .errors import ConfigError, FieldFormatError, LocalizationError
from .field import MAGIC as FIELD_MAGIC
from .field import load_field, save_field, storage_report
from .fitting import TrainView
from .geometry import Camera, Pose, pose_error
from .maps import MAGIC as MAP_MAGIC
from .maps import _tensor_from_bytes, load_feature_map, save_feature_map
from .pipeline import BUNDLE_MAGIC, build_map, load_bundle, localize, save_bundle
from .synthetic import SyntheticSceneSpec, gen_query, gen_synthetic_scene


def load_pose_txt(path) -> Pose:
    """Read a 4x4 camera-from-world matrix; validates the rotation block."""
    mat = np.loadtxt(path, dtype=np.float64)
    if mat.shape != (4, 4):
        raise ConfigError(f"{path}: pose file must hold a 4x4 matrix, got {mat.shape}")
    if not np.allclose(mat[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
        raise ConfigError(f"{path}: last pose row must be [0 0 0 1]")
    try:
        return Pose(R=mat[:3, :3], t=mat[:3, 3])
    except ValueError as err:
        raise ConfigError(f"{path}: {err}") from None


def save_pose_txt(pose: Pose, path) -> None:
    mat = np.eye(4)
    mat[:3, :3] = pose.R
    mat[:3, 3] = pose.t
    np.savetxt(path, mat, fmt="%.17g")


def load_camera_txt(path) -> Camera:
    with open(path, "r", encoding="utf-8") as fh:
        raw = parse_keyvalues(fh.read())
    try:
        return Camera(**coerce_fields(Camera, raw))
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path}: {err}") from None


def save_camera_txt(camera: Camera, path) -> None:
    lines = [f"{f.name} = {getattr(camera, f.name)!r}" for f in dataclasses.fields(Camera)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _config_from_args(args, base=None):
    """Resolve precedence: base config < --config file < --set overrides."""
    config = base if base is not None else make_config()
    if getattr(args, "config", None):
        config = replace_config(config, _file_keyvalues(args.config))
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if overrides:
        config = replace_config(config, overrides)
    return config


def _file_keyvalues(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_keyvalues(fh.read())


def _spec_from_args(args) -> SyntheticSceneSpec:
    raw = _file_keyvalues(args.spec) if getattr(args, "spec", None) else {}
    try:
        return SyntheticSceneSpec(**coerce_fields(SyntheticSceneSpec, raw))
    except ValueError as err:
        raise ConfigError(str(err)) from None


def _load_views(views_dir):
    """Collect TrainViews from a directory of <stem>.fmap + <stem>.pose.txt.

    Intrinsics shared by every view come from camera.txt in the same
    directory. Maps without a pose sidecar are an error, not skipped.
    """
    root = pathlib.Path(views_dir)
    camera = load_camera_txt(root / "camera.txt")
    views = []
    for fmap_path in sorted(root.glob("*.fmap")):
        pose_path = fmap_path.with_suffix(".pose.txt")
        if not pose_path.exists():
            raise ConfigError(f"missing pose sidecar for {fmap_path.name}")
        target = load_feature_map(fmap_path)
        views.append(TrainView(camera=camera, pose=load_pose_txt(pose_path), target=target))
    if not views:
        raise ConfigError(f"no .fmap views found under {views_dir}")
    return views


def cmd_gen_scene(args) -> int:
    spec = _spec_from_args(args)
    field, _ = gen_synthetic_scene(spec)
    save_field(field, args.out)
    report = storage_report(field)
    print(f"wrote {args.out}: {len(field)} primitives, dim {field.feature_dim}, "
          f"{report.total_bytes} bytes ({report.mebibytes:.2f} MiB)")
    return 0


def cmd_fit(args) -> int:
    config = _config_from_args(args)
    field = load_field(args.scene)
    views = _load_views(args.views) if args.views else None
    bundle = build_map(field, views=views, config=config)
    save_bundle(bundle, args.out)
    print(f"wrote {args.out}: {len(bundle.field)} primitives, "
          f"{len(bundle.landmarks.indices)} landmarks, layout {bundle.field.layout.name.lower()}")
    return 0


def cmd_make_query(args) -> int:
    bundle = load_bundle(args.bundle)
    camera = load_camera_txt(args.camera) if args.camera else bundle.config.camera()
    pose = load_pose_txt(args.pose)
    query = gen_query(
        bundle.field, camera, pose, args.noise,
        seed=args.seed, opts=bundle.config.render_options(),
    )
    save_feature_map(query, args.out)
    valid = float(query.validity.mean())
    print(f"wrote {args.out}: {query.width}x{query.height}x{query.dim}, "
          f"{valid:.1%} valid pixels, noise sigma {args.noise}")
    return 0


def cmd_localize(args) -> int:
    bundle = load_bundle(args.bundle)
    config = _config_from_args(args, base=bundle.config)
    camera = load_camera_txt(args.camera) if args.camera else config.camera()
    query = load_feature_map(args.query)
    result = localize(bundle, query, camera, config)
    print(f"sparse matches {result.n_sparse_matches}, dense matches {result.n_dense_matches}, "
          f"proxies {result.n_proxies}")
    print(f"timings ms: rasterization {result.timings['rasterization'] * 1e3:.1f}, "
          f"matching {result.timings['matching'] * 1e3:.1f}, "
          f"clustering {result.timings['clustering'] * 1e3:.1f}, "
          f"pnp {result.timings['pnp'] * 1e3:.1f}, "
          f"total {result.timings['total_n'] * 1e3:.1f}")
    if result.degraded:
        print(f"degraded: {result.failure_reason}")
    if args.out_pose:
        save_pose_txt(result.pose_dense, args.out_pose)
        print(f"wrote {args.out_pose}")
    if args.gt:
        gt = load_pose_txt(args.gt)
        trans, rot = pose_error(result.pose_dense, gt)
        print(f"error vs ground truth: {trans:.6g} units, {rot:.4f} deg")
    return 0


def cmd_bench(args) -> int:
    spec = _spec_from_args(args)
    config = _config_from_args(args)
    report = run_benchmark(spec, args.n_queries, config, out_csv=args.out)
    print(f"queries {report.n_queries}, succeeded {report.n_success}")
    print(f"median errors: {report.median_trans_err:.6g} units, "
          f"{report.median_rot_err_deg:.4f} deg (extent {report.scene_extent:.3g})")
    print(f"accuracy: coarse {report.accuracy_coarse:.1%}, fine {report.accuracy_fine:.1%}; "
          f"dense beats sparse {report.frac_dense_better:.1%}")
    print(f"storage: decoupled {report.storage_decoupled.mebibytes:.2f} MiB, "
          f"coupled {report.storage_coupled.mebibytes:.2f} MiB")
    if args.out:
        print(f"wrote {args.out}")
    return 0


def cmd_ablate(args) -> int:
    spec = _spec_from_args(args)
    config = _config_from_args(args)
    report = ablate(spec, args.n_queries, config)
    print("condense layout    acc@coarse acc@fine med_trans    med_rot_deg storage_mib")
    for row in report.grid_rows():
        print(f"{row['condense']:<8} {row['layout']:<9} "
              f"{row['accuracy_coarse']:<10.3f} {row['accuracy_fine']:<8.3f} "
              f"{row['median_trans_err']:<12.6g} {row['median_rot_err_deg']:<11.4f} "
              f"{row['storage_mib']:.3f}")
    print(f"robust-solve speedup (condense on vs off): {report.pnp_speedup:.2f}x")
    print(f"median error drift on vs off: trans {report.median_trans_rel_diff:.1%}, "
          f"rot {report.median_rot_rel_diff:.1%}")
    print(f"storage ratio decoupled/coupled: {report.storage_ratio:.4f}")
    if args.out:
        write_ablation_csv(report, args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_inspect(args) -> int:
    with open(args.path, "rb") as fh:
        blob = fh.read()
    magic = blob[:4]
    if magic == FIELD_MAGIC:
        field = load_field(args.path)
        report = storage_report(field)
        print(f"{args.path}: gaussian field, {len(field)} primitives, "
              f"dim {field.feature_dim}, layout {field.layout.name.lower()}, "
              f"{report.mebibytes:.2f} MiB")
    elif magic == BUNDLE_MAGIC:
        bundle = load_bundle(args.path)
        field = bundle.field
        print(f"{args.path}: map bundle, {len(field)} primitives, "
              f"dim {field.feature_dim}, layout {field.layout.name.lower()}, "
              f"{len(bundle.landmarks.indices)} landmarks, seed {bundle.config.seed}")
    elif magic == MAP_MAGIC:
        data, validity = _tensor_from_bytes(blob)
        kind = "depth map" if data.shape[2] == 1 else "feature map"
        print(f"{args.path}: {kind}, {data.shape[1]}x{data.shape[0]}x{data.shape[2]}, "
              f"{float(validity.mean()):.1%} valid pixels")
    else:
        raise FieldFormatError(f"{args.path}: unknown magic {magic!r}", offset=0)
    return 0


def cmd_show_config(args) -> int:
    config = _config_from_args(args)
    if args.out:
        save_config(config, args.out)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(format_config(config))
    return 0


def _add_config_args(sub) -> None:
    sub.add_argument("--config", help="key = value config file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a single config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatloc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="synthesize a Gaussian feature field")
    p.add_argument("--spec", help="key = value file of scene parameters")
    p.add_argument("--out", required=True, help="output .llgf path")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("fit", help="build a map bundle from a field")
    p.add_argument("--scene", required=True, help="input .llgf field")
    p.add_argument("--out", required=True, help="output .llbd bundle path")
    p.add_argument("--views", help="directory of <stem>.fmap + <stem>.pose.txt + camera.txt")
    _add_config_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("make-query", help="render a query feature map from a pose")
    p.add_argument("--bundle", required=True, help="input .llbd bundle")
    p.add_argument("--pose", required=True, help="4x4 camera-from-world text file")
    p.add_argument("--out", required=True, help="output .fmap path")
    p.add_argument("--camera", help="camera sidecar; defaults to the bundle config camera")
    p.add_argument("--noise", type=float, default=0.0, help="per-pixel feature noise sigma")
    p.add_argument("--seed", type=int, default=0, help="noise RNG seed")
    p.set_defaults(func=cmd_make_query)

    p = sub.add_parser("localize", help="estimate the pose of a query map")
    p.add_argument("--bundle", required=True, help="input .llbd bundle")
    p.add_argument("--query", required=True, help="query .fmap")
    p.add_argument("--camera", help="camera sidecar; defaults to the config camera")
    p.add_argument("--out-pose", help="write the dense pose as a 4x4 text file")
    p.add_argument("--gt", help="ground-truth pose file; prints the error against it")
    _add_config_args(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("bench", help="run the synthetic localization benchmark")
    p.add_argument("--spec", help="key = value file of scene parameters")
    p.add_argument("-n", "--n-queries", type=int, default=20, help="number of query views")
    p.add_argument("--out", help="per-query CSV output path")
    _add_config_args(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="paired condensing on/off benchmark")
    p.add_argument("--spec", help="key = value file of scene parameters")
    p.add_argument("-n", "--n-queries", type=int, default=20, help="number of query views")
    p.add_argument("--out", help="2x2 summary CSV output path")
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="summarize a field, bundle, or map file")
    p.add_argument("path", help="input file")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("show-config", help="print or write the resolved config")
    p.add_argument("--out", help="write instead of printing")
    _add_config_args(p)
    p.set_defaults(func=cmd_show_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LocalizationError as err:
        print(f"localization failed: {err}", file=sys.stderr)
        return 3
    except (ConfigError, FieldFormatError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
